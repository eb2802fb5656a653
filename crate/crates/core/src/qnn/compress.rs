//! Weight editing passes: magnitude pruning, projection onto a candidate
//! set, and bias calibration.

use super::{ConvLayer, Dataset, QuantizedNetwork};
use crate::error::{Error, Result};

/// Masks the `floor(ratio * n)` smallest-magnitude weights. Already masked
/// weights stay masked and are counted first; remaining ties go to the
/// lower flat index. Returns the new mask and zeroes the masked weights.
pub fn magnitude_prune(layer: &mut ConvLayer, ratio: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::OutOfRange(format!("prune ratio {ratio} outside [0, 1)")));
    }
    let n = layer.weights.len();
    let target = (ratio * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (layer.mask[i], (layer.weights[i] as i32).abs(), i));
    for &i in order.iter().take(target) {
        layer.mask[i] = false;
    }
    for (w, &m) in layer.weights.iter_mut().zip(&layer.mask) {
        if !m {
            *w = 0;
        }
    }
    Ok(layer.mask.clone())
}

/// Nearest member of `set` to `w`. Exact ties prefer lower `power`, then
/// smaller magnitude, then the smaller value.
pub fn project_value(w: i8, set: &[i8], power: Option<&[f64]>) -> Option<i8> {
    let key = |c: i8| {
        let dist = (w as i32 - c as i32).abs();
        let p = power.map(|p| p[(c as i32 + 128) as usize]).unwrap_or(0.0);
        (dist, p, (c as i32).abs(), c)
    };
    set.iter().copied().min_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.cmp(&kb.2))
            .then(ka.3.cmp(&kb.3))
    })
}

/// Lookup table mapping every 8-bit value to its projection.
pub fn projection_table(set: &[i8], power: Option<&[f64]>) -> Result<[i8; 256]> {
    if set.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    let mut table = [0i8; 256];
    for (i, t) in table.iter_mut().enumerate() {
        *t = project_value((i as i32 - 128) as i8, set, power).expect("set is nonempty");
    }
    Ok(table)
}

/// Projects unmasked weights onto `set`; masked weights stay zero.
pub fn project_weights(weights: &[i8], mask: &[bool], set: &[i8], power: Option<&[f64]>) -> Result<Vec<i8>> {
    if mask.iter().any(|&m| !m) && !set.contains(&0) {
        return Err(Error::InvalidConfig(
            "candidate set must contain 0 when the layer has pruned weights".into(),
        ));
    }
    let table = projection_table(set, power)?;
    Ok(weights
        .iter()
        .zip(mask)
        .map(|(&w, &m)| if m { table[(w as i32 + 128) as usize] } else { 0 })
        .collect())
}

/// Mean im2col column of a conv layer's input over a calibration split.
#[derive(Debug, Clone)]
pub struct CalibrationContext {
    pub layer_index: usize,
    /// Sum over images and output positions of each lowered input row.
    pub column_sums: Vec<i64>,
    pub positions: u64,
}

impl CalibrationContext {
    pub fn build(net: &QuantizedNetwork, layer_index: usize, calib: &Dataset) -> Result<Self> {
        let conv = net.conv(layer_index)?;
        if calib.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut column_sums = vec![0i64; conv.kdim()];
        let mut positions = 0u64;
        for i in 0..calib.len() {
            let x = net.activation_at(layer_index, &calib.image(i))?;
            let cols = super::im2col(&x, conv.k, conv.stride, conv.pad)?;
            for (r, s) in column_sums.iter_mut().enumerate() {
                *s += cols.data[r * cols.cols..(r + 1) * cols.cols].iter().map(|&v| v as i64).sum::<i64>();
            }
            positions += cols.cols as u64;
        }
        Ok(CalibrationContext {
            layer_index,
            column_sums,
            positions,
        })
    }

    /// Integer sum of pre-activations of output channel `co`.
    fn channel_sum(&self, weights: &[i8], co: usize) -> i64 {
        let kdim = self.column_sums.len();
        weights[co * kdim..(co + 1) * kdim]
            .iter()
            .zip(&self.column_sums)
            .map(|(&w, &s)| w as i64 * s)
            .sum()
    }
}

/// Biases that cancel the mean per-channel pre-activation shift caused by
/// replacing `reference` weights with `updated` ones.
pub fn calibrate_bias(
    reference_weights: &[i8],
    reference_bias: &[i32],
    updated_weights: &[i8],
    ctx: &CalibrationContext,
) -> Vec<i32> {
    reference_bias
        .iter()
        .enumerate()
        .map(|(co, &b)| {
            let diff = ctx.channel_sum(updated_weights, co) - ctx.channel_sum(reference_weights, co);
            if diff == 0 {
                return b;
            }
            let mean = diff as f64 / ctx.positions as f64;
            (b as i64 - mean.round() as i64).clamp(i32::MIN as i64, i32::MAX as i64) as i32
        })
        .collect()
}
