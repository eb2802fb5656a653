//! Batched inference. Every layer of a batch of same-shape inputs becomes
//! one wide matmul; logits are identical to the per-image path.

use super::ops::{self, Matrix8, Tensor3};
use super::{Layer, QuantizedNetwork};
use crate::error::{Error, Result};

/// `b` tensors of shape `c x h x w`, stored channel-major: `[c][b][h][w]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<i8>,
}

impl Batch {
    pub fn from_images(images: &[Tensor3]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let (b, c, h, w) = (images.len(), first.c, first.h, first.w);
        let hw = h * w;
        let mut data = vec![0i8; b * c * hw];
        for (bi, t) in images.iter().enumerate() {
            if (t.c, t.h, t.w) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "batch mixes shapes {c}x{h}x{w} and {}x{}x{}",
                    t.c, t.h, t.w
                )));
            }
            for ci in 0..c {
                data[(ci * b + bi) * hw..(ci * b + bi + 1) * hw].copy_from_slice(&t.data[ci * hw..(ci + 1) * hw]);
            }
        }
        Ok(Batch { b, c, h, w, data })
    }

    fn plane(&self, c: usize, bi: usize) -> &[i8] {
        let hw = self.h * self.w;
        &self.data[(c * self.b + bi) * hw..(c * self.b + bi + 1) * hw]
    }
}

/// im2col over the whole batch; image `bi` owns columns `bi*n..(bi+1)*n`.
fn im2col_batch(x: &Batch, k: usize, stride: usize, pad: usize) -> Result<(Matrix8, usize, usize)> {
    let g = ops::ConvGeometry {
        c_in: x.c,
        h: x.h,
        w: x.w,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.output_hw()?;
    let n = ho * wo;
    let cols = x.b * n;
    let mut data = vec![0i8; g.kdim() * cols];
    for c in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                for bi in 0..x.b {
                    let src = x.plane(c, bi);
                    let dst = &mut data[r * cols + bi * n..r * cols + (bi + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            // valid ox satisfy 0 <= ox + kx - pad < w
                            let lo = pad.saturating_sub(kx).min(wo);
                            let hi = (x.w + pad).saturating_sub(kx).min(wo).max(lo);
                            if hi > lo {
                                out[lo..hi].copy_from_slice(&row[lo + kx - pad..hi + kx - pad]);
                            }
                            continue;
                        }
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *o = row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Matrix8 { rows: g.kdim(), cols, data }, ho, wo))
}

fn requantize_batch(acc: &ops::Accumulators, bias: &[i32], scale: f64, b: usize, h: usize, w: usize) -> Batch {
    let mut data = Vec::with_capacity(acc.values.len());
    for co in 0..acc.m {
        let bv = bias[co] as i64;
        data.extend(acc.values[co * acc.n..(co + 1) * acc.n].iter().map(|&v| ops::requantize(v as i64 + bv, scale)));
    }
    Batch { b, c: acc.m, h, w, data }
}

fn logits_batch(acc: &ops::Accumulators, bias: &[i32], b: usize) -> Vec<Vec<i64>> {
    let per = acc.n / b;
    (0..b)
        .map(|bi| {
            let mut out = Vec::with_capacity(acc.m * per);
            for co in 0..acc.m {
                let row = &acc.values[co * acc.n + bi * per..co * acc.n + (bi + 1) * per];
                out.extend(row.iter().map(|&v| v as i64 + bias[co] as i64));
            }
            out
        })
        .collect()
}

fn maxpool_batch(x: &Batch, k: usize, stride: usize) -> Result<Batch> {
    if k == 0 || stride == 0 || x.h < k || x.w < k {
        return Err(Error::Geometry(format!("maxpool k={k} stride={stride} on {}x{}", x.h, x.w)));
    }
    let ho = (x.h - k) / stride + 1;
    let wo = (x.w - k) / stride + 1;
    let mut data = Vec::with_capacity(x.c * x.b * ho * wo);
    for plane in x.data.chunks_exact(x.h * x.w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = i8::MIN;
                for ky in 0..k {
                    let row = &plane[(oy * stride + ky) * x.w..];
                    for kx in 0..k {
                        m = m.max(row[ox * stride + kx]);
                    }
                }
                data.push(m);
            }
        }
    }
    Ok(Batch { b: x.b, c: x.c, h: ho, w: wo, data })
}

impl QuantizedNetwork {
    /// Logits for every image of `batch`, the input of layer `start`.
    pub fn forward_batch_from(&self, start: usize, batch: Batch) -> Result<Vec<Vec<i64>>> {
        let last = self
            .last_compute()
            .ok_or_else(|| Error::Shape("network has no compute layer".into()))?;
        let mut x = batch;
        let b = x.b;
        for i in start..=last {
            match &self.layers[i] {
                Layer::Conv(c) => {
                    if x.c != c.c_in {
                        return Err(Error::Shape(format!("conv expects {} channels, got {}", c.c_in, x.c)));
                    }
                    let (cols, ho, wo) = im2col_batch(&x, c.k, c.stride, c.pad)?;
                    let acc = ops::matmul_fast(&c.weights, c.c_out, &cols);
                    if i == last {
                        return Ok(logits_batch(&acc, &c.bias, b));
                    }
                    x = requantize_batch(&acc, &c.bias, c.scale, b, ho, wo);
                }
                Layer::Relu => {
                    for v in &mut x.data {
                        *v = (*v).max(0);
                    }
                }
                Layer::MaxPool { k, stride } => x = maxpool_batch(&x, *k, *stride)?,
                Layer::Dense(d) => {
                    let hw = x.h * x.w;
                    if x.c * hw != d.n_in {
                        return Err(Error::Shape(format!("dense expects {} inputs, got {}", d.n_in, x.c * hw)));
                    }
                    // rows are the per-image flattened (c, y, x) index
                    let mut data = vec![0i8; d.n_in * b];
                    for c in 0..x.c {
                        for bi in 0..b {
                            for (p, &v) in x.plane(c, bi).iter().enumerate() {
                                data[(c * hw + p) * b + bi] = v;
                            }
                        }
                    }
                    let col = Matrix8 { rows: d.n_in, cols: b, data };
                    let acc = ops::matmul_fast(&d.weights, d.n_out, &col);
                    if i == last {
                        return Ok(logits_batch(&acc, &d.bias, b));
                    }
                    x = requantize_batch(&acc, &d.bias, d.scale, b, 1, 1);
                }
            }
        }
        unreachable!("loop returns at the last compute layer")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnn::tests::tiny_net;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_matches_single_images() {
        let net = tiny_net();
        let (c, h, w) = net.input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images: Vec<Tensor3> = (0..7)
            .map(|_| Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<i8>()).collect()).unwrap())
            .collect();
        for start in [0, 1] {
            let inputs: Vec<Tensor3> = images.iter().map(|t| net.activation_at(start, t).unwrap()).collect();
            let batched = net.forward_batch_from(start, Batch::from_images(&inputs).unwrap()).unwrap();
            for (x, got) in inputs.iter().zip(&batched) {
                assert_eq!(&net.forward_from(start, x).unwrap().logits, got);
            }
        }
    }

    #[test]
    fn mixed_shapes_rejected() {
        let a = Tensor3::zeros(1, 2, 2);
        let b = Tensor3::zeros(1, 3, 2);
        assert!(Batch::from_images(&[a, b]).is_err());
        assert!(Batch::from_images(&[]).is_err());
    }

    #[test]
    fn batch_matches_single_images_on_fixture() {
        let fx = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
        let net = crate::qnn::load_model(&fx.join("desk_model.json")).unwrap();
        let val = crate::qnn::Dataset::load(&fx.join("val.bin"), crate::qnn::Split::Validation).unwrap();
        let images: Vec<Tensor3> = (0..40).map(|i| val.image(i)).collect();
        let batched = net.forward_batch_from(0, Batch::from_images(&images).unwrap()).unwrap();
        for (x, got) in images.iter().zip(&batched) {
            assert_eq!(&net.forward(x).unwrap().logits, got);
        }
    }
}
