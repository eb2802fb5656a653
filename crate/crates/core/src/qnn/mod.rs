//! 8-bit quantized CNN: layer records, exact integer inference, model and
//! dataset files, and the weight-editing passes used by compression.

pub mod batch;
pub mod compress;
pub mod dataset;
pub mod io;
pub mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use compress::{calibrate_bias, magnitude_prune, project_value, project_weights, CalibrationContext};
pub use dataset::{Dataset, Split};
pub use io::{load_model, save_model};
pub use ops::{im2col, Matrix8, Tensor3};

/// Convolution with per-tensor symmetric 8-bit weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// `c_out x c_in x k x k`, row `co` is row `co` of the lowered weight matrix.
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    /// Requantization multiplier applied to `acc + bias`.
    pub scale: f64,
    /// `true` keeps the weight; masked-out weights are exactly zero.
    pub mask: Vec<bool>,
    pub candidate_set: Option<Vec<i8>>,
}

impl ConvLayer {
    pub fn kdim(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    /// Checks internal shape, mask and candidate-set consistency.
    pub fn validate(&self) -> Result<()> {
        let n = self.c_out * self.kdim();
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 || self.stride == 0 {
            return Err(Error::Shape("conv dims must be >= 1".into()));
        }
        if self.weights.len() != n || self.mask.len() != n {
            return Err(Error::Shape(format!(
                "conv expects {n} weights and mask bits, got {} and {}",
                self.weights.len(),
                self.mask.len()
            )));
        }
        if self.bias.len() != self.c_out {
            return Err(Error::Shape(format!(
                "conv expects {} biases, got {}",
                self.c_out,
                self.bias.len()
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::OutOfRange(format!("scale {} must be positive", self.scale)));
        }
        for (i, (&w, &m)) in self.weights.iter().zip(&self.mask).enumerate() {
            if !m && w != 0 {
                return Err(Error::OutOfRange(format!("masked weight {i} is {w}, not 0")));
            }
        }
        if let Some(set) = &self.candidate_set {
            if set.is_empty() {
                return Err(Error::EmptyCandidateSet);
            }
            for (i, (&w, &m)) in self.weights.iter().zip(&self.mask).enumerate() {
                if m && !set.contains(&w) {
                    return Err(Error::OutOfRange(format!(
                        "weight {i} = {w} not in candidate set"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_pruned(&self) -> bool {
        self.mask.iter().any(|&m| !m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// `n_out x n_in`.
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool { k: usize, stride: usize },
    Dense(DenseLayer),
}

impl Layer {
    pub fn as_conv(&self) -> Option<&ConvLayer> {
        match self {
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Dense(_) => "dense",
        }
    }
}

/// Images per batched forward pass during accuracy evaluation.
const ACCURACY_BATCH: usize = 256;

/// Activation shape between layers: `(c, h, w)`.
pub type Shape = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    pub name: String,
    pub input_shape: Shape,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

/// Logits of the final compute layer plus saturation count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    pub logits: Vec<i64>,
    pub saturated: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub top1: f64,
    pub correct: usize,
    pub n_samples: usize,
}

impl QuantizedNetwork {
    /// Indices of convolution layers in network order.
    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv(&self, index: usize) -> Result<&ConvLayer> {
        match self.layers.get(index) {
            Some(Layer::Conv(c)) => Ok(c),
            _ => Err(Error::NotConv { index }),
        }
    }

    pub fn conv_mut(&mut self, index: usize) -> Result<&mut ConvLayer> {
        match self.layers.get_mut(index) {
            Some(Layer::Conv(c)) => Ok(c),
            _ => Err(Error::NotConv { index }),
        }
    }

    fn last_compute(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv(_) | Layer::Dense(_)))
    }

    /// Input shape of every layer plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = vec![self.input_shape];
        let mut s = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            s = match layer {
                Layer::Conv(c) => {
                    if c.c_in != s.0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv expects {} input channels, got {}",
                            c.c_in, s.0
                        )));
                    }
                    let g = ops::ConvGeometry {
                        c_in: c.c_in,
                        h: s.1,
                        w: s.2,
                        k: c.k,
                        stride: c.stride,
                        pad: c.pad,
                    };
                    let (ho, wo) = g.output_hw().map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
                    (c.c_out, ho, wo)
                }
                Layer::Relu => s,
                Layer::MaxPool { k, stride } => {
                    if *k == 0 || *stride == 0 || s.1 < *k || s.2 < *k {
                        return Err(Error::Shape(format!("layer {i}: invalid maxpool")));
                    }
                    (s.0, (s.1 - k) / stride + 1, (s.2 - k) / stride + 1)
                }
                Layer::Dense(d) => {
                    if d.n_in != s.0 * s.1 * s.2 {
                        return Err(Error::Shape(format!(
                            "layer {i}: dense expects {} inputs, got {}",
                            d.n_in,
                            s.0 * s.1 * s.2
                        )));
                    }
                    (d.n_out, 1, 1)
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Full structural validation.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => c.validate().map_err(|e| Error::Shape(format!("layer {i}: {e}")))?,
                Layer::Dense(d) => {
                    if d.weights.len() != d.n_in * d.n_out || d.bias.len() != d.n_out {
                        return Err(Error::Shape(format!("layer {i}: dense weight/bias size")));
                    }
                    if !(d.scale.is_finite() && d.scale > 0.0) {
                        return Err(Error::OutOfRange(format!("layer {i}: scale must be positive")));
                    }
                }
                _ => {}
            }
        }
        let last = self
            .last_compute()
            .ok_or_else(|| Error::Shape("network has no compute layer".into()))?;
        let out = shapes[last + 1];
        if out.0 * out.1 * out.2 != self.num_classes {
            return Err(Error::Shape(format!(
                "final compute layer emits {} values for {} classes",
                out.0 * out.1 * out.2,
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Runs layers `start..` on `input` (the input of layer `start`).
    pub fn forward_from(&self, start: usize, input: &Tensor3) -> Result<Inference> {
        let last = self
            .last_compute()
            .ok_or_else(|| Error::Shape("network has no compute layer".into()))?;
        let mut x = input.clone();
        let mut saturated = 0;
        for i in start..=last {
            match &self.layers[i] {
                Layer::Conv(c) => {
                    let acc = conv_accumulate(c, &x)?;
                    saturated += acc.saturated;
                    let (ho, wo) = conv_out_hw(c, &x)?;
                    if i == last {
                        return Ok(Inference {
                            logits: raw_logits(&acc, &c.bias),
                            saturated,
                        });
                    }
                    x = ops::requantize_map(&acc, &c.bias, c.scale, ho, wo);
                }
                Layer::Relu => ops::relu(&mut x),
                Layer::MaxPool { k, stride } => x = ops::maxpool(&x, *k, *stride)?,
                Layer::Dense(d) => {
                    if x.data.len() != d.n_in {
                        return Err(Error::Shape(format!(
                            "dense expects {} inputs, got {}",
                            d.n_in,
                            x.data.len()
                        )));
                    }
                    let col = Matrix8 {
                        rows: d.n_in,
                        cols: 1,
                        data: std::mem::take(&mut x.data),
                    };
                    let acc = ops::matmul_fast(&d.weights, d.n_out, &col);
                    saturated += acc.saturated;
                    if i == last {
                        return Ok(Inference {
                            logits: raw_logits(&acc, &d.bias),
                            saturated,
                        });
                    }
                    x = ops::requantize_map(&acc, &d.bias, d.scale, 1, 1);
                    x.c = d.n_out;
                }
            }
        }
        unreachable!("loop returns at the last compute layer")
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Inference> {
        self.forward_from(0, input)
    }

    /// Input tensor of layer `index` for `input`.
    pub fn activation_at(&self, index: usize, input: &Tensor3) -> Result<Tensor3> {
        let mut x = input.clone();
        for layer in &self.layers[..index] {
            x = match layer {
                Layer::Conv(c) => {
                    let acc = conv_accumulate(c, &x)?;
                    let (ho, wo) = conv_out_hw(c, &x)?;
                    ops::requantize_map(&acc, &c.bias, c.scale, ho, wo)
                }
                Layer::Relu => {
                    ops::relu(&mut x);
                    x
                }
                Layer::MaxPool { k, stride } => ops::maxpool(&x, *k, *stride)?,
                Layer::Dense(d) => {
                    let col = Matrix8 {
                        rows: d.n_in,
                        cols: 1,
                        data: x.data,
                    };
                    let acc = ops::matmul_fast(&d.weights, d.n_out, &col);
                    let mut t = ops::requantize_map(&acc, &d.bias, d.scale, 1, 1);
                    t.c = d.n_out;
                    t
                }
            };
        }
        Ok(x)
    }

    /// Top-1 accuracy; ties in the logits go to the lowest class index.
    pub fn accuracy(&self, data: &Dataset) -> Result<AccuracyResult> {
        let inputs: Vec<Tensor3> = (0..data.len()).map(|i| data.image(i)).collect();
        self.accuracy_from(0, &inputs, &data.labels)
    }

    /// Accuracy when the inputs of layer `start` are already known.
    pub fn accuracy_from(&self, start: usize, inputs: &[Tensor3], labels: &[u8]) -> Result<AccuracyResult> {
        use rayon::prelude::*;
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let correct: Result<Vec<usize>> = inputs
            .par_chunks(ACCURACY_BATCH)
            .zip(labels.par_chunks(ACCURACY_BATCH))
            .map(|(xs, ls)| {
                let logits = self.forward_batch_from(start, batch::Batch::from_images(xs)?)?;
                Ok(logits.iter().zip(ls).filter(|(l, &y)| argmax(l) == y as usize).count())
            })
            .collect();
        let correct: usize = correct?.into_iter().sum();
        Ok(AccuracyResult {
            top1: correct as f64 / inputs.len() as f64,
            correct,
            n_samples: inputs.len(),
        })
    }
}

fn conv_out_hw(c: &ConvLayer, x: &Tensor3) -> Result<(usize, usize)> {
    ops::ConvGeometry {
        c_in: x.c,
        h: x.h,
        w: x.w,
        k: c.k,
        stride: c.stride,
        pad: c.pad,
    }
    .output_hw()
}

/// Accumulators of a conv layer on `x` through the fast path.
pub fn conv_accumulate(c: &ConvLayer, x: &Tensor3) -> Result<ops::Accumulators> {
    if x.c != c.c_in {
        return Err(Error::Shape(format!(
            "conv expects {} channels, got {}",
            c.c_in, x.c
        )));
    }
    let cols = im2col(x, c.k, c.stride, c.pad)?;
    Ok(ops::matmul_fast(&c.weights, c.c_out, &cols))
}

/// Direct (nested-loop) convolution producing the requantized output map.
pub fn conv_forward_direct(c: &ConvLayer, x: &Tensor3) -> Result<(Tensor3, u64)> {
    let acc = ops::conv_accumulate_direct(&c.weights, c.c_out, x, c.k, c.stride, c.pad)?;
    let (ho, wo) = conv_out_hw(c, x)?;
    Ok((ops::requantize_map(&acc, &c.bias, c.scale, ho, wo), acc.saturated))
}

/// im2col + weight-stationary tiled convolution producing the requantized map.
pub fn conv_forward_tiled(c: &ConvLayer, x: &Tensor3, dim: usize) -> Result<(Tensor3, u64)> {
    let acc = ops::conv_accumulate_tiled(&c.weights, c.c_out, x, c.k, c.stride, c.pad, dim)?;
    let (ho, wo) = conv_out_hw(c, x)?;
    Ok((ops::requantize_map(&acc, &c.bias, c.scale, ho, wo), acc.saturated))
}

fn raw_logits(acc: &ops::Accumulators, bias: &[i32]) -> Vec<i64> {
    let mut out = Vec::with_capacity(acc.values.len());
    for co in 0..acc.m {
        for &v in &acc.values[co * acc.n..(co + 1) * acc.n] {
            out.push(v as i64 + bias[co] as i64);
        }
    }
    out
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[i64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_net() -> QuantizedNetwork {
        let mut w = vec![0i8; 2 * 9];
        w[4] = 1;
        w[9 + 4] = -1;
        QuantizedNetwork {
            name: "tiny".into(),
            input_shape: (1, 4, 4),
            num_classes: 2,
            layers: vec![
                Layer::Conv(ConvLayer {
                    c_in: 1,
                    c_out: 2,
                    k: 3,
                    stride: 1,
                    pad: 1,
                    weights: w,
                    bias: vec![0, 0],
                    scale: 1.0,
                    mask: vec![true; 18],
                    candidate_set: None,
                }),
                Layer::Relu,
                Layer::MaxPool { k: 4, stride: 4 },
                Layer::Dense(DenseLayer {
                    n_in: 2,
                    n_out: 2,
                    weights: vec![1, 0, 0, 1],
                    bias: vec![0, 0],
                    scale: 1.0,
                }),
            ],
        }
    }

    #[test]
    fn shapes_chain() {
        let net = tiny_net();
        net.validate().unwrap();
        assert_eq!(net.shapes().unwrap(), vec![(1, 4, 4), (2, 4, 4), (2, 4, 4), (2, 1, 1), (2, 1, 1)]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let net = tiny_net();
        let c = net.conv(0).unwrap();
        let x = Tensor3::from_vec(1, 4, 4, (0..16).map(|v| v as i8 - 8).collect()).unwrap();
        let (y, _) = conv_forward_direct(c, &x).unwrap();
        assert_eq!(&y.data[..16], &x.data[..]);
    }

    #[test]
    fn zero_weights_give_bias_only() {
        let mut net = tiny_net();
        let c = net.conv_mut(0).unwrap();
        c.weights.iter_mut().for_each(|w| *w = 0);
        c.bias = vec![3, -2];
        let x = Tensor3::from_vec(1, 4, 4, vec![9; 16]).unwrap();
        let (y, _) = conv_forward_tiled(net.conv(0).unwrap(), &x, 64).unwrap();
        assert!(y.data[..16].iter().all(|&v| v == 3));
        assert!(y.data[16..].iter().all(|&v| v == -2));
    }

    #[test]
    fn forced_logit_is_correct() {
        let net = tiny_net();
        // bright input: channel 0 positive, channel 1 clipped by relu
        let x = Tensor3::from_vec(1, 4, 4, vec![5; 16]).unwrap();
        let inf = net.forward(&x).unwrap();
        assert_eq!(inf.logits, vec![5, 0]);
        let data = Dataset::new(1, 4, 4, x.data.clone(), vec![0], 2, Split::Validation).unwrap();
        let acc = net.accuracy(&data).unwrap();
        assert_eq!(acc.top1, 1.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[3, 7, 7, 1]), 1);
        assert_eq!(argmax(&[0, 0]), 0);
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut net = tiny_net();
        if let Layer::Dense(d) = &mut net.layers[3] {
            d.n_in = 3;
        }
        assert!(net.validate().is_err());
    }
}
