//! Image datasets: a raw binary container, an IDX importer and a seeded
//! synthetic 10-class generator.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! u32 n | u32 c | u32 h | u32 w | n*c*h*w x i8 pixels | n x u8 labels
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::Tensor3;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub images: Vec<i8>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        images: Vec<i8>,
        labels: Vec<u8>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if images.len() != n * c * h * w {
            return Err(Error::DatasetFormat(format!(
                "{} pixels for {n} images of {c}x{h}x{w}",
                images.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::DatasetFormat(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Dataset {
            n,
            c,
            h,
            w,
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> Tensor3 {
        let len = self.image_len();
        Tensor3 {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.images[i * len..(i + 1) * len].to_vec(),
        }
    }

    /// First `n` samples (all if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.n).max(1);
        Dataset {
            n,
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.images.len() + self.labels.len());
        for v in [self.n, self.c, self.h, self.w] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend(self.images.iter().map(|&v| v as u8));
        out.extend_from_slice(&self.labels);
        out
    }

    /// Parses the binary container. The class count is `max(label) + 1`
    /// unless `num_classes` is given.
    pub fn from_bytes(bytes: &[u8], split: Split, num_classes: Option<usize>) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::DatasetFormat("truncated header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (n, c, h, w) = (field(0), field(1), field(2), field(3));
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let pixels = n
            .checked_mul(c * h * w)
            .ok_or_else(|| Error::DatasetFormat("header overflow".into()))?;
        if bytes.len() != 16 + pixels + n {
            return Err(Error::DatasetFormat(format!(
                "expected {} bytes for {n}x{c}x{h}x{w}, got {}",
                16 + pixels + n,
                bytes.len()
            )));
        }
        let images = bytes[16..16 + pixels].iter().map(|&b| b as i8).collect();
        let labels = bytes[16 + pixels..].to_vec();
        let classes = num_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) as usize + 1);
        Dataset::new(c, h, w, images, labels, classes, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes, split, None)
    }

    /// Imports an IDX image file (`0x00000803`, u8 pixels) and label file
    /// (`0x00000801`). Pixels `p` map to `p >> 1` so images stay non-negative.
    pub fn from_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Self> {
        let be = |b: &[u8], i: usize| -> Result<usize> {
            b.get(4 * i..4 * i + 4)
                .map(|s| u32::from_be_bytes(s.try_into().unwrap()) as usize)
                .ok_or_else(|| Error::DatasetFormat("truncated IDX header".into()))
        };
        if be(images, 0)? != 0x0803 {
            return Err(Error::DatasetFormat("IDX image magic must be 0x00000803".into()));
        }
        if be(labels, 0)? != 0x0801 {
            return Err(Error::DatasetFormat("IDX label magic must be 0x00000801".into()));
        }
        let (n, h, w) = (be(images, 1)?, be(images, 2)?, be(images, 3)?);
        if be(labels, 1)? != n {
            return Err(Error::DatasetFormat("IDX image/label counts differ".into()));
        }
        let px = &images[16..];
        let lb = &labels[8..];
        if px.len() != n * h * w || lb.len() != n {
            return Err(Error::DatasetFormat("IDX payload size mismatch".into()));
        }
        let classes = lb.iter().copied().max().unwrap_or(0) as usize + 1;
        Dataset::new(1, h, w, px.iter().map(|&p| (p >> 1) as i8).collect(), lb.to_vec(), classes, split)
    }
}

/// Parameters of the synthetic stroke-pattern dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub size: usize,
    pub num_classes: usize,
    pub strokes_per_class: usize,
    pub max_shift: i32,
    pub noise: f64,
    pub distractor: f64,
    /// When nonzero, classes are distinct subsets of one shared pool of
    /// this many strokes instead of having strokes of their own.
    pub stroke_pool: usize,
    /// Half-width of the uniform per-image brightness offset.
    pub brightness: f64,
    /// Seed of the class templates; shared by all splits.
    pub template_seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 12,
            num_classes: 10,
            strokes_per_class: 3,
            max_shift: 1,
            noise: 0.35,
            distractor: 0.6,
            stroke_pool: 6,
            brightness: 0.0,
            template_seed: 0x5eed_c1a5,
        }
    }
}

type Segment = ((f64, f64), (f64, f64));

fn random_segment<R: Rng>(rng: &mut R, size: f64) -> Segment {
    let p = |rng: &mut R| (rng.random_range(1.0..size - 1.0), rng.random_range(1.0..size - 1.0));
    (p(rng), p(rng))
}

fn seg_dist((a, b): &Segment, x: f64, y: f64) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (a.0 + t * dx, a.1 + t * dy);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

fn render(segments: &[Segment], size: usize, dx: f64, dy: f64) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 - dx, y as f64 - dy);
            let v: f64 = segments
                .iter()
                .map(|s| {
                    let d = seg_dist(s, fx, fy);
                    (-d * d / (2.0 * 0.6 * 0.6)).exp()
                })
                .sum();
            img[y * size + x] = v.min(1.5);
        }
    }
    img
}

/// Seeded synthetic dataset: each class is a fixed set of random strokes;
/// samples are shifted, rescaled, get a random distractor stroke, a
/// brightness offset and Gaussian pixel noise. Labels cycle through the classes.
pub fn synthetic(n: usize, seed: u64, split: Split, params: &SynthParams) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let size = params.size;
    let mut trng = ChaCha8Rng::seed_from_u64(params.template_seed);
    let templates: Vec<Vec<Segment>> = if params.stroke_pool == 0 {
        (0..params.num_classes)
            .map(|_| {
                (0..params.strokes_per_class)
                    .map(|_| random_segment(&mut trng, size as f64))
                    .collect()
            })
            .collect()
    } else {
        let pool: Vec<Segment> = (0..params.stroke_pool)
            .map(|_| random_segment(&mut trng, size as f64))
            .collect();
        let k = params.strokes_per_class.min(params.stroke_pool);
        let mut subsets: Vec<Vec<usize>> = Vec::new();
        let mut attempts = 0;
        while subsets.len() < params.num_classes {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidConfig(format!(
                    "stroke pool of {} cannot give {} distinct classes",
                    params.stroke_pool, params.num_classes
                )));
            }
            let mut pick = rand::seq::index::sample(&mut trng, params.stroke_pool, k).into_vec();
            pick.sort_unstable();
            if !subsets.contains(&pick) {
                subsets.push(pick);
            }
        }
        subsets.iter().map(|s| s.iter().map(|&i| pool[i]).collect()).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, params.noise).expect("noise must be finite and >= 0");
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % params.num_classes;
        let dx = rng.random_range(-params.max_shift..=params.max_shift) as f64;
        let dy = rng.random_range(-params.max_shift..=params.max_shift) as f64;
        let amp = rng.random_range(0.6..1.2);
        let base = render(&templates[class], size, dx, dy);
        let distractor = render(&[random_segment(&mut rng, size as f64)], size, 0.0, 0.0);
        let d_amp = rng.random_range(0.0..params.distractor);
        let offset = if params.brightness > 0.0 {
            rng.random_range(-params.brightness..params.brightness)
        } else {
            0.0
        };
        for p in 0..size * size {
            let v = amp * base[p] + d_amp * distractor[p] + offset + normal.sample(&mut rng);
            images.push((v * 80.0).round().clamp(-128.0, 127.0) as i8);
        }
        labels.push(class as u8);
    }
    Dataset::new(1, size, size, images, labels, params.num_classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let d = synthetic(20, 3, Split::Validation, &SynthParams::default()).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes(), Split::Validation, Some(10)).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn truncated_and_empty_rejected() {
        assert!(Dataset::from_bytes(&[0; 8], Split::Validation, None).is_err());
        let mut hdr = vec![0u8; 16];
        hdr[4] = 1;
        assert!(matches!(
            Dataset::from_bytes(&hdr, Split::Validation, None),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn synthetic_is_seeded() {
        let p = SynthParams::default();
        let a = synthetic(30, 11, Split::Train, &p).unwrap();
        let b = synthetic(30, 11, Split::Train, &p).unwrap();
        let c = synthetic(30, 12, Split::Train, &p).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, c.images);
        assert_eq!(a.labels[..10], (0..10).collect::<Vec<u8>>()[..]);
    }

    #[test]
    fn idx_import() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 255, 10, 20, 4, 4, 4, 4]);
        let mut lab = vec![0, 0, 8, 1, 0, 0, 0, 2];
        lab.extend_from_slice(&[1, 0]);
        let d = Dataset::from_idx(&img, &lab, Split::Validation).unwrap();
        assert_eq!((d.n, d.h, d.w), (2, 2, 2));
        assert_eq!(&d.images[..4], &[0, 127, 5, 10]);
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.num_classes, 2);
    }
}
