//! Per-layer weight-set restriction: a safe initial candidate set from a
//! blended usage / power ranking, then greedy backward elimination by
//! removal score `dE / (dAcc + eps)`.
//!
//! Every candidate set is applied the same way: the layer's reference
//! weights (its state before restriction) are projected onto the set, with
//! exact ties going to the lower-power value, and biases are recalibrated
//! against the reference.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::energy_model::{layer_dims, layer_p_tile, tile_partition, ArrayConfig, LayerEnergy, WeightPowerTable};
use crate::error::{Error, Result};
use crate::qnn::compress::{calibrate_bias, project_weights, CalibrationContext};
use crate::qnn::{Dataset, QuantizedNetwork, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionParams {
    pub epsilon: f64,
    /// Accuracy budget below `acc0`.
    pub delta: f64,
    pub k_init: usize,
    pub k_target: usize,
    pub lambda_usage: f64,
    /// Step by which the initial set grows when it is not accurate enough.
    pub grow_step: usize,
    /// Evaluate accuracy only for the `fast_top` largest energy gains.
    pub fast: bool,
    pub fast_top: usize,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            epsilon: 1e-4,
            delta: 0.03,
            k_init: 32,
            k_target: 16,
            lambda_usage: 0.5,
            grow_step: 8,
            fast: false,
            fast_top: 8,
        }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!("delta must be in [0, 1), got {}", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.lambda_usage) {
            return Err(Error::InvalidConfig(format!("lambda_usage must be in [0, 1], got {}", self.lambda_usage)));
        }
        if self.k_target == 0 || self.k_init == 0 || self.k_init > 256 {
            return Err(Error::InvalidConfig("k_init must be in 1..=256 and k_target >= 1".into()));
        }
        if self.grow_step == 0 || self.fast_top == 0 {
            return Err(Error::InvalidConfig("grow_step and fast_top must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub layer_index: usize,
    /// Allowed values, ascending.
    pub values: Vec<i8>,
    /// Values that may not be removed, ascending.
    pub essential: Vec<i8>,
    pub k_init: usize,
    pub k_target: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn contains(&self, w: i8) -> bool {
        self.values.binary_search(&w).is_ok()
    }

    pub fn is_essential(&self, w: i8) -> bool {
        self.essential.binary_search(&w).is_ok()
    }

    fn mark_essential(&mut self, w: i8) {
        if let Err(pos) = self.essential.binary_search(&w) {
            self.essential.insert(pos, w);
        }
    }

    fn remove(&mut self, w: i8) {
        if let Ok(pos) = self.values.binary_search(&w) {
            self.values.remove(pos);
        }
    }

    fn without(&self, w: i8) -> Vec<i8> {
        self.values.iter().copied().filter(|&v| v != w).collect()
    }

    pub fn validate(&self, needs_zero: bool) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::EmptyCandidateSet);
        }
        if self.values.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidConfig("candidate values must be distinct and ascending".into()));
        }
        if self.essential.iter().any(|&e| !self.contains(e)) {
            return Err(Error::InvalidConfig("essential value outside the candidate set".into()));
        }
        if needs_zero && !self.contains(0) {
            return Err(Error::InvalidConfig("candidate set must contain 0 for a pruned layer".into()));
        }
        Ok(())
    }
}

/// Why a candidate left the running (or did not).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalKind {
    /// No reference weight projects to the value.
    Unused,
    /// Chosen by score and within the accuracy budget.
    Removed,
    /// Chosen by score but over the accuracy budget.
    Essential,
    /// Its removal would raise the layer energy.
    RaisesEnergy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub iteration: usize,
    pub weight: i8,
    pub delta_e: f64,
    pub delta_acc: f64,
    pub score: f64,
    pub accepted: bool,
    pub resulting_acc: f64,
    /// Estimated layer energy with the set in force after this step.
    pub energy_after: f64,
    pub set_size: usize,
    pub kind: RemovalKind,
}

/// `delta_e / max(delta_acc + epsilon, epsilon)`.
pub fn removal_score(delta_e: f64, delta_acc: f64, epsilon: f64) -> f64 {
    if delta_e == 0.0 {
        return 0.0;
    }
    delta_e / (delta_acc + epsilon).max(epsilon)
}

/// Normalized min-rank: the share of the other entries that are strictly
/// smaller.
fn rank_norm(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    v.iter()
        .map(|x| sorted.partition_point(|y| y.total_cmp(x).is_lt()) as f64 / (n - 1) as f64)
        .collect()
}

/// Blended ranking of `values`: `lambda * rank(usage) - (1 - lambda) *
/// rank(power)`, best first; ties go to the smaller magnitude, then the
/// smaller value.
pub fn rank_values(values: &[i8], usage: &[u64], power: &[f64], lambda: f64) -> Vec<(i8, f64)> {
    let ru = rank_norm(&usage.iter().map(|&u| u as f64).collect::<Vec<_>>());
    let rp = rank_norm(power);
    let mut scored: Vec<(i8, f64)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, lambda * ru[i] - (1.0 - lambda) * rp[i]))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then((a.0 as i32).abs().cmp(&(b.0 as i32).abs()))
            .then(a.0.cmp(&b.0))
    });
    scored
}

/// Ranking of all 256 weight values for a layer.
pub fn joint_score(table: &WeightPowerTable, usage: &[u64; 256], lambda: f64) -> Vec<(i8, f64)> {
    let values: Vec<i8> = (-128i32..128).map(|v| v as i8).collect();
    rank_values(&values, usage, &table.power, lambda)
}

/// Histogram of unmasked weight values (index `w + 128`).
pub fn weight_usage(weights: &[i8], mask: &[bool]) -> [u64; 256] {
    let mut u = [0u64; 256];
    for (&w, &m) in weights.iter().zip(mask) {
        if m {
            u[(w as i32 + 128) as usize] += 1;
        }
    }
    u
}

/// Everything needed to apply and score candidate sets on one conv layer.
pub struct LayerContext<'a> {
    net: QuantizedNetwork,
    pub layer_index: usize,
    inputs: Vec<Tensor3>,
    labels: Vec<u8>,
    calib: CalibrationContext,
    ref_weights: Vec<i8>,
    ref_bias: Vec<i32>,
    mask: Vec<bool>,
    table: &'a WeightPowerTable,
    n_tiles: usize,
    cfg: ArrayConfig,
}

impl<'a> LayerContext<'a> {
    /// `net`'s current layer state becomes the reference.
    pub fn new(
        net: &QuantizedNetwork,
        layer_index: usize,
        table: &'a WeightPowerTable,
        calib: &Dataset,
        val: &Dataset,
        cfg: &ArrayConfig,
    ) -> Result<Self> {
        let conv = net.conv(layer_index)?;
        table.validate()?;
        if val.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (m, kdim, n) = layer_dims(net, layer_index)?;
        let n_tiles = tile_partition(m, kdim, n, cfg)?;
        let inputs = (0..val.len())
            .map(|i| net.activation_at(layer_index, &val.image(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerContext {
            net: net.clone(),
            layer_index,
            inputs,
            labels: val.labels.clone(),
            calib: CalibrationContext::build(net, layer_index, calib)?,
            ref_weights: conv.weights.clone(),
            ref_bias: conv.bias.clone(),
            mask: conv.mask.clone(),
            table,
            n_tiles,
            cfg: *cfg,
        })
    }

    pub fn table(&self) -> &WeightPowerTable {
        self.table
    }

    pub fn has_pruned(&self) -> bool {
        self.mask.iter().any(|&m| !m)
    }

    pub fn usage(&self) -> [u64; 256] {
        weight_usage(&self.ref_weights, &self.mask)
    }

    /// Projected weights and recalibrated biases for `set`.
    pub fn apply(&self, set: &[i8]) -> Result<(Vec<i8>, Vec<i32>)> {
        let w = project_weights(&self.ref_weights, &self.mask, set, Some(&self.table.power))?;
        let b = calibrate_bias(&self.ref_weights, &self.ref_bias, &w, &self.calib);
        Ok((w, b))
    }

    fn energy_of_weights(&self, weights: &[i8]) -> Result<LayerEnergy> {
        let mut conv = self.net.conv(self.layer_index)?.clone();
        conv.weights = weights.to_vec();
        let p = layer_p_tile(&conv, self.table, self.cfg.dim);
        Ok(LayerEnergy::from_parts(self.layer_index, self.n_tiles, p, &self.cfg))
    }

    /// Estimate-mode layer energy with `set` in force.
    pub fn energy(&self, set: &[i8]) -> Result<f64> {
        Ok(self.energy_of_weights(&self.apply(set)?.0)?.e_layer)
    }

    /// Energy of the unrestricted reference layer.
    pub fn reference_energy(&self) -> Result<f64> {
        Ok(self.energy_of_weights(&self.ref_weights)?.e_layer)
    }

    fn accuracy_with(&mut self, weights: Vec<i8>, bias: Vec<i32>) -> Result<f64> {
        let conv = self.net.conv_mut(self.layer_index)?;
        conv.weights = weights;
        conv.bias = bias;
        Ok(self.net.accuracy_from(self.layer_index, &self.inputs, &self.labels)?.top1)
    }

    /// Validation accuracy with `set` in force.
    pub fn accuracy(&mut self, set: &[i8]) -> Result<f64> {
        let (w, b) = self.apply(set)?;
        self.accuracy_with(w, b)
    }

    pub fn reference_accuracy(&mut self) -> Result<f64> {
        self.accuracy_with(self.ref_weights.clone(), self.ref_bias.clone())
    }

    /// Values that some reference weight projects to under `set`.
    fn used_values(&self, set: &[i8]) -> Result<Vec<bool>> {
        let w = project_weights(&self.ref_weights, &self.mask, set, Some(&self.table.power))?;
        let u = weight_usage(&w, &self.mask);
        Ok(set
            .iter()
            .map(|&v| u[(v as i32 + 128) as usize] > 0 || (v == 0 && self.has_pruned()))
            .collect())
    }
}

/// Top-`k` of the joint ranking, with 0 swapped in for the last member
/// when it is missing.
pub fn top_k_with_zero(ranking: &[(i8, f64)], k: usize) -> Vec<i8> {
    let k = k.clamp(1, ranking.len());
    let mut set: Vec<i8> = ranking[..k].iter().map(|r| r.0).collect();
    if !set.contains(&0) {
        set[k - 1] = 0;
    }
    set.sort_unstable();
    set
}

/// Smallest top-k set (k = k_init, k_init + step, ..., 256) whose accuracy
/// is within `delta / 2` of `acc0`. Returns the set and its accuracy.
pub fn initial_candidate_set(ctx: &mut LayerContext, params: &SelectionParams, acc0: f64) -> Result<(CandidateSet, f64)> {
    params.validate()?;
    let ranking = joint_score(ctx.table, &ctx.usage(), params.lambda_usage);
    let mut k = params.k_init;
    loop {
        let values = top_k_with_zero(&ranking, k);
        let acc = ctx.accuracy(&values)?;
        if acc >= acc0 - params.delta / 2.0 {
            let mut set = CandidateSet {
                layer_index: ctx.layer_index,
                values,
                essential: Vec::new(),
                k_init: k,
                k_target: params.k_target,
            };
            if ctx.has_pruned() {
                set.mark_essential(0);
            }
            return Ok((set, acc));
        }
        if k >= 256 {
            return Err(Error::NotRestrictable(ctx.layer_index));
        }
        k = (k + params.grow_step).min(256);
    }
}

#[derive(Debug, Clone, Copy)]
struct Trial {
    weight: i8,
    delta_e: f64,
    acc: Option<f64>,
}

/// Greedy backward elimination down to `set.k_target` values.
///
/// Each round removes, without evaluation, any value no reference weight
/// projects to. Otherwise every non-essential value with a nonnegative
/// energy gain is tried; the best score is removed if the resulting
/// accuracy stays at or above `acc0 - delta` and is marked essential
/// otherwise. Values whose removal would raise the energy become essential
/// once nothing else is left to try.
pub fn greedy_backward_eliminate(
    ctx: &mut LayerContext,
    mut set: CandidateSet,
    params: &SelectionParams,
    acc0: f64,
) -> Result<(CandidateSet, Vec<RemovalRecord>)> {
    params.validate()?;
    set.validate(ctx.has_pruned())?;
    let floor = acc0 - params.delta;
    let mut log = Vec::new();
    let mut iteration = 0;
    let mut cur_acc = ctx.accuracy(&set.values)?;
    let mut cur_e = ctx.energy(&set.values)?;
    // trials stay valid until the set changes
    let mut trials: Option<Vec<Trial>> = None;

    while set.len() > set.k_target {
        let used = ctx.used_values(&set.values)?;
        let unused = set
            .values
            .iter()
            .zip(&used)
            .find(|(&v, &u)| !u && !set.is_essential(v))
            .map(|(&v, _)| v);
        if let Some(w) = unused {
            set.remove(w);
            log.push(RemovalRecord {
                iteration,
                weight: w,
                delta_e: 0.0,
                delta_acc: 0.0,
                score: 0.0,
                accepted: true,
                resulting_acc: cur_acc,
                energy_after: cur_e,
                set_size: set.len(),
                kind: RemovalKind::Unused,
            });
            iteration += 1;
            continue;
        }

        let t = match trials.take() {
            Some(t) => t,
            None => {
                let mut t = Vec::new();
                for &w in &set.values {
                    if !set.is_essential(w) {
                        let delta_e = cur_e - ctx.energy(&set.without(w))?;
                        t.push(Trial { weight: w, delta_e, acc: None });
                    }
                }
                t
            }
        };
        let mut t: Vec<Trial> = t.into_iter().filter(|x| !set.is_essential(x.weight)).collect();
        let mut eligible: Vec<usize> = (0..t.len()).filter(|&i| t[i].delta_e >= 0.0).collect();
        if eligible.is_empty() {
            for x in &t {
                set.mark_essential(x.weight);
                log.push(RemovalRecord {
                    iteration,
                    weight: x.weight,
                    delta_e: x.delta_e,
                    delta_acc: 0.0,
                    score: 0.0,
                    accepted: false,
                    resulting_acc: cur_acc,
                    energy_after: cur_e,
                    set_size: set.len(),
                    kind: RemovalKind::RaisesEnergy,
                });
                iteration += 1;
            }
            break;
        }
        if params.fast {
            eligible.sort_by(|&a, &b| t[b].delta_e.total_cmp(&t[a].delta_e).then(t[a].weight.cmp(&t[b].weight)));
            eligible.truncate(params.fast_top);
        }
        for &i in &eligible {
            if t[i].acc.is_none() {
                t[i].acc = Some(ctx.accuracy(&set.without(t[i].weight))?);
            }
        }
        let score_of = |x: &Trial| removal_score(x.delta_e, cur_acc - x.acc.unwrap(), params.epsilon);
        let best = *eligible
            .iter()
            .max_by(|&&a, &&b| {
                score_of(&t[a])
                    .total_cmp(&score_of(&t[b]))
                    .then(t[a].delta_e.total_cmp(&t[b].delta_e))
                    .then(t[b].weight.cmp(&t[a].weight))
            })
            .expect("eligible is nonempty");
        let x = t[best];
        let acc = x.acc.unwrap();
        let accepted = acc >= floor;
        if accepted {
            set.remove(x.weight);
            cur_e = ctx.energy(&set.values)?;
            trials = None;
        } else {
            set.mark_essential(x.weight);
            trials = Some(t.clone());
        }
        log.push(RemovalRecord {
            iteration,
            weight: x.weight,
            delta_e: x.delta_e,
            delta_acc: cur_acc - acc,
            score: score_of(&x),
            accepted,
            resulting_acc: if accepted { acc } else { cur_acc },
            energy_after: cur_e,
            set_size: set.len(),
            kind: if accepted { RemovalKind::Removed } else { RemovalKind::Essential },
        });
        if accepted {
            cur_acc = acc;
        }
        iteration += 1;
        if set.values.iter().all(|&v| set.is_essential(v)) {
            break;
        }
    }
    Ok((set, log))
}

/// Result of restricting one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub layer_index: usize,
    pub acc0: f64,
    pub delta: f64,
    pub initial_size: usize,
    pub initial_acc: f64,
    pub final_acc: f64,
    pub e_reference: f64,
    pub e_initial: f64,
    pub e_final: f64,
    pub fast: bool,
    pub set: CandidateSet,
    pub log: Vec<RemovalRecord>,
    #[serde(skip)]
    pub weights: Vec<i8>,
    #[serde(skip)]
    pub bias: Vec<i32>,
}

impl SelectionOutcome {
    pub fn reached_target(&self) -> bool {
        self.set.len() <= self.set.k_target
    }
}

/// Initial set plus greedy elimination on one layer. `acc0` defaults to
/// the validation accuracy of the layer's current state.
pub fn select_layer(
    ctx: &mut LayerContext,
    params: &SelectionParams,
    acc0: Option<f64>,
) -> Result<SelectionOutcome> {
    let acc0 = match acc0 {
        Some(a) => a,
        None => ctx.reference_accuracy()?,
    };
    let (set, initial_acc) = initial_candidate_set(ctx, params, acc0)?;
    let initial_size = set.len();
    let e_initial = ctx.energy(&set.values)?;
    let (set, log) = if set.len() > set.k_target {
        greedy_backward_eliminate(ctx, set, params, acc0)?
    } else {
        (set, Vec::new())
    };
    let (weights, bias) = ctx.apply(&set.values)?;
    let final_acc = ctx.accuracy(&set.values)?;
    Ok(SelectionOutcome {
        layer_index: ctx.layer_index,
        acc0,
        delta: params.delta,
        initial_size,
        initial_acc,
        final_acc,
        e_reference: ctx.reference_energy()?,
        e_initial,
        e_final: ctx.energy(&set.values)?,
        fast: params.fast,
        set,
        log,
        weights,
        bias,
    })
}

/// The `k` lowest-power values (0 always included).
pub fn naive_lowest_power(power: &[f64], k: usize) -> Vec<i8> {
    let values: Vec<i8> = (-128i32..128).map(|v| v as i8).collect();
    let ranking = rank_values(&values, &[0; 256], power, 0.0);
    top_k_with_zero(&ranking, k)
}

pub fn write_removal_csv<W: Write>(out: W, layer: usize, log: &[RemovalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer",
        "iteration",
        "weight",
        "delta_e",
        "delta_acc",
        "score",
        "accepted",
        "accuracy",
        "energy_after",
        "set_size",
        "kind",
    ])?;
    for r in log {
        w.write_record([
            layer.to_string(),
            r.iteration.to_string(),
            r.weight.to_string(),
            format!("{:.6e}", r.delta_e),
            format!("{:.6}", r.delta_acc),
            format!("{:.6e}", r.score),
            r.accepted.to_string(),
            format!("{:.6}", r.resulting_acc),
            format!("{:.6e}", r.energy_after),
            r.set_size.to_string(),
            serde_json::to_value(r.kind)?.as_str().unwrap_or_default().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removal_score_cases() {
        assert!((removal_score(2.0, 0.01, 1e-4) - 198.019_801_980_198).abs() < 1e-9);
        assert_eq!(removal_score(0.0, 0.3, 1e-4), 0.0);
        assert_eq!(removal_score(0.0, -0.3, 1e-4), 0.0);
        assert!((removal_score(1.0, -0.02, 1e-4) - 1e4).abs() < 1e-6);
    }

    #[test]
    fn toy_ranking() {
        let values = [0i8, 1, 2, 3];
        let usage = [10u64, 0, 0, 5];
        let power = [4.0, 1.0, 2.0, 3.0];
        // scores 0, 0, -1/6, 0
        let r = rank_values(&values, &usage, &power, 0.5);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 3, 2]);
        assert!((r[3].1 + 1.0 / 6.0).abs() < 1e-12);
        let by_usage = rank_values(&values, &usage, &power, 1.0);
        assert_eq!(by_usage.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 3, 1, 2]);
        let by_power = rank_values(&values, &usage, &power, 0.0);
        assert_eq!(by_power.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 3, 0]);
    }

    #[test]
    fn top_k_forces_zero() {
        let r = vec![(5i8, 1.0), (-3, 0.5), (7, 0.2), (0, 0.1)];
        assert_eq!(top_k_with_zero(&r, 3), vec![-3, 0, 5]);
        assert_eq!(top_k_with_zero(&r, 4), vec![-3, 0, 5, 7]);
    }

    #[test]
    fn naive_set_is_lowest_power() {
        let mut power = vec![10.0; 256];
        for (i, v) in [3i32, -1, 0, 64].iter().enumerate() {
            power[(v + 128) as usize] = i as f64;
        }
        assert_eq!(naive_lowest_power(&power, 4), vec![-1, 0, 3, 64]);
        power[128] = 50.0;
        assert_eq!(naive_lowest_power(&power, 2), vec![0, 3]);
    }

    #[test]
    fn candidate_set_validation() {
        let s = CandidateSet {
            layer_index: 0,
            values: vec![-1, 0, 4],
            essential: vec![0],
            k_init: 3,
            k_target: 2,
        };
        s.validate(true).unwrap();
        let mut bad = s.clone();
        bad.values = vec![-1, 4];
        bad.essential.clear();
        assert!(bad.validate(true).is_err());
        assert!(bad.validate(false).is_ok());
        bad.values = vec![4, -1];
        assert!(bad.validate(false).is_err());
    }
}
