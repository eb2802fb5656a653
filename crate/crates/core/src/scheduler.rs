//! Energy-prioritized layer-wise compression.
//!
//! Conv layers are visited in descending energy share. Each layer tries
//! the configuration grid from most to least aggressive and keeps the
//! first configuration whose cumulative network accuracy stays at or above
//! `acc0 - delta`. Trials run on a copy of the network, so a rejected
//! configuration leaves the network untouched.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::energy_model::{
    build_power_table, layer_energy, network_energy, shares_of, ArrayConfig, LayerEnergy, WeightPowerTable,
};
use crate::error::{Error, Result};
use crate::qnn::compress::{calibrate_bias, magnitude_prune, project_weights, CalibrationContext};
use crate::qnn::{Dataset, QuantizedNetwork};
use crate::selection::{
    joint_score, select_layer, top_k_with_zero, weight_usage, CandidateSet, LayerContext, SelectionParams,
};
use crate::transitions::{collect_stats, CollectConfig, LayerTransitionStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub prune_ratio: f64,
    pub set_size: usize,
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::InvalidConfig(format!("prune ratio {} outside [0, 1)", self.prune_ratio)));
        }
        if !(2..=256).contains(&self.set_size) {
            return Err(Error::InvalidConfig(format!("set size {} outside 2..=256", self.set_size)));
        }
        Ok(())
    }

    /// The configuration that changes nothing.
    pub fn identity() -> Self {
        CompressionConfig {
            prune_ratio: 0.0,
            set_size: 256,
        }
    }
}

/// Cartesian product of the two grids.
pub fn config_grid(ratios: &[f64], sizes: &[usize]) -> Vec<CompressionConfig> {
    ratios
        .iter()
        .flat_map(|&prune_ratio| sizes.iter().map(move |&set_size| CompressionConfig { prune_ratio, set_size }))
        .collect()
}

pub fn default_grid() -> Vec<CompressionConfig> {
    config_grid(&[0.3, 0.5, 0.7], &[32, 24, 16])
}

/// Most aggressive first: higher prune ratio, then smaller set.
pub fn rank_configs(grid: &[CompressionConfig]) -> Result<Vec<CompressionConfig>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty configuration grid".into()));
    }
    for c in grid {
        c.validate()?;
    }
    let mut g = grid.to_vec();
    g.sort_by(|a, b| {
        b.prune_ratio
            .total_cmp(&a.prune_ratio)
            .then(a.set_size.cmp(&b.set_size))
    });
    g.dedup();
    Ok(g)
}

/// Layer indices by descending share; ties keep the original order.
pub fn order_layers(layers: &[usize], shares: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..layers.len()).collect();
    idx.sort_by(|&a, &b| shares[b].total_cmp(&shares[a]));
    idx.into_iter().map(|i| layers[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Compressed,
    Skipped,
    Infeasible,
}

/// One configuration tried on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub layer_index: usize,
    pub config: CompressionConfig,
    pub accuracy: Option<f64>,
    pub energy: Option<f64>,
    pub accepted: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_index: usize,
    pub rho: f64,
    pub chosen: Option<CompressionConfig>,
    pub candidate_set: Option<CandidateSet>,
    pub e_before: f64,
    pub e_after: f64,
    pub acc_after: f64,
    pub status: PlanStatus,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub tool: String,
    pub model_fingerprint: String,
    pub mode: String,
    pub acc0: f64,
    pub delta: f64,
    pub layers: Vec<LayerPlan>,
    pub e_before: f64,
    pub e_after: f64,
    pub saving_pct: f64,
    pub final_accuracy: f64,
    pub profile_seed: u64,
    pub fast: bool,
    pub array: ArrayConfig,
    pub selection: SelectionParams,
}

impl CompressionReport {
    /// Checks the report's own bookkeeping: ordering by share, the saving
    /// identity, per-layer energy and accuracy bounds.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(format!("report invariant: {m}")));
        if self.layers.windows(2).any(|w| w[0].rho < w[1].rho) {
            return fail("layers not in nonincreasing share order".into());
        }
        let before: f64 = self.layers.iter().map(|l| l.e_before).sum();
        let after: f64 = self.layers.iter().map(|l| l.e_after).sum();
        if (before - self.e_before).abs() > 1e-9 * before.abs().max(1e-300)
            || (after - self.e_after).abs() > 1e-9 * after.abs().max(1e-300)
        {
            return fail("energy totals do not match the layers".into());
        }
        if (self.saving_pct - (1.0 - after / before)).abs() > 1e-9 {
            return fail(format!("saving_pct {} != 1 - after/before", self.saving_pct));
        }
        for l in &self.layers {
            if l.chosen.is_some() && self.mode == "layerwise" {
                if l.acc_after < self.acc0 - self.delta - 1e-12 {
                    return fail(format!("layer {} accepted below the accuracy floor", l.layer_index));
                }
                if l.e_after > l.e_before * (1.0 + 1e-12) {
                    return fail(format!("layer {} energy increased", l.layer_index));
                }
            }
        }
        if self.mode == "layerwise" && self.final_accuracy < self.acc0 - self.delta - 1e-12 {
            return fail("final accuracy below the floor".into());
        }
        Ok(())
    }

    pub fn write_layer_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer",
            "rho",
            "status",
            "prune_ratio",
            "set_size",
            "e_before",
            "e_after",
            "saving",
            "acc_after",
        ])?;
        for l in &self.layers {
            w.write_record([
                l.layer_index.to_string(),
                format!("{:.9}", l.rho),
                status_str(l.status).into(),
                l.chosen.map(|c| c.prune_ratio.to_string()).unwrap_or_default(),
                l.chosen.map(|c| c.set_size.to_string()).unwrap_or_default(),
                format!("{:.6e}", l.e_before),
                format!("{:.6e}", l.e_after),
                format!("{:.6}", 1.0 - l.e_after / l.e_before),
                format!("{:.6}", l.acc_after),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_trial_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "prune_ratio", "set_size", "accuracy", "energy", "accepted", "note"])?;
        for t in self.layers.iter().flat_map(|l| &l.trials) {
            w.write_record([
                t.layer_index.to_string(),
                t.config.prune_ratio.to_string(),
                t.config.set_size.to_string(),
                t.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
                t.energy.map(|e| format!("{e:.6e}")).unwrap_or_default(),
                t.accepted.to_string(),
                t.note.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn status_str(s: PlanStatus) -> &'static str {
    match s {
        PlanStatus::Compressed => "compressed",
        PlanStatus::Skipped => "skipped",
        PlanStatus::Infeasible => "infeasible",
    }
}

/// Inputs shared by every scheduling step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub delta: f64,
    pub selection: SelectionParams,
    pub array: ArrayConfig,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            delta: 0.03,
            selection: SelectionParams::default(),
            array: ArrayConfig::default(),
        }
    }
}

/// Per-layer statistics and power tables of every conv layer.
#[derive(Debug, Clone)]
pub struct NetworkProfile {
    pub seed: u64,
    pub stats: Vec<LayerTransitionStats>,
    pub tables: Vec<WeightPowerTable>,
}

impl NetworkProfile {
    pub fn table_for(&self, layer_index: usize) -> Result<&WeightPowerTable> {
        self.tables
            .iter()
            .find(|t| t.layer_index == layer_index)
            .ok_or_else(|| Error::MissingProfile(format!("no power table for layer {layer_index}")))
    }
}

/// Profiles every conv layer on `calib` and builds its power table. Layer
/// seeds are derived from `seed` and the layer index.
pub fn profile_network(
    net: &QuantizedNetwork,
    calib: &Dataset,
    collect: &CollectConfig,
    trace_len: usize,
    seed: u64,
) -> Result<NetworkProfile> {
    let mut stats = Vec::new();
    let mut tables = Vec::new();
    for li in net.conv_indices() {
        let cfg = CollectConfig {
            seed: crate::derive_seed(seed, li as u64),
            ..*collect
        };
        let s = collect_stats(net, calib, li, &cfg)?;
        tables.push(build_power_table(&s, trace_len, crate::derive_seed(seed, 0x1000 + li as u64))?);
        stats.push(s);
    }
    Ok(NetworkProfile { seed, stats, tables })
}

/// Tables from an existing set of layer statistics.
pub fn tables_from_stats(stats: Vec<LayerTransitionStats>, trace_len: usize, seed: u64) -> Result<NetworkProfile> {
    let tables = stats
        .iter()
        .map(|s| build_power_table(s, trace_len, crate::derive_seed(seed, 0x1000 + s.layer_index as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkProfile { seed, stats, tables })
}

fn ordered_tables<'a>(net: &QuantizedNetwork, profile: &'a NetworkProfile) -> Result<Vec<WeightPowerTable>> {
    net.conv_indices()
        .iter()
        .map(|&i| profile.table_for(i).cloned())
        .collect()
}

/// Prunes layer `index` of `net` in place and recalibrates its biases.
fn prune_and_calibrate(net: &mut QuantizedNetwork, index: usize, ratio: f64, calib: &CalibrationContext) -> Result<()> {
    let conv = net.conv_mut(index)?;
    let (w0, b0) = (conv.weights.clone(), conv.bias.clone());
    magnitude_prune(conv, ratio)?;
    conv.bias = calibrate_bias(&w0, &b0, &conv.weights, calib);
    Ok(())
}

/// Outcome of one trial: the plan fields and, when feasible, the modified
/// network.
pub struct LayerTrial {
    pub record: TrialRecord,
    pub net: Option<QuantizedNetwork>,
    pub candidate_set: Option<CandidateSet>,
    pub energy: Option<LayerEnergy>,
    pub accuracy: Option<f64>,
}

/// Prune, restrict and evaluate one layer under `config` on a copy of
/// `net`. The trial is feasible when the selection reaches the target set
/// size and the network accuracy stays at or above `floor`.
#[allow(clippy::too_many_arguments)]
pub fn compress_layer(
    net: &QuantizedNetwork,
    index: usize,
    config: CompressionConfig,
    table: &WeightPowerTable,
    calib: &Dataset,
    val: &Dataset,
    params: &ScheduleParams,
    floor: f64,
) -> Result<LayerTrial> {
    config.validate()?;
    let e_before = layer_energy(net, index, table, &params.array)?;
    let infeasible = |note: String, accuracy: Option<f64>| LayerTrial {
        record: TrialRecord {
            layer_index: index,
            config,
            accuracy,
            energy: None,
            accepted: false,
            note,
        },
        net: None,
        candidate_set: None,
        energy: None,
        accuracy,
    };

    let mut work = net.clone();
    let calib_ctx = CalibrationContext::build(net, index, calib)?;
    if config.prune_ratio > 0.0 {
        prune_and_calibrate(&mut work, index, config.prune_ratio, &calib_ctx)?;
    }
    let mut ctx = LayerContext::new(&work, index, table, calib, val, &params.array)?;
    let acc_post = ctx.reference_accuracy()?;
    if acc_post < floor {
        return Ok(infeasible(format!("pruning alone drops accuracy to {acc_post:.4}"), Some(acc_post)));
    }
    let sel = SelectionParams {
        delta: (acc_post - floor).clamp(0.0, 0.999_999),
        k_init: params.selection.k_init.max(config.set_size),
        k_target: config.set_size,
        ..params.selection
    };
    let outcome = match select_layer(&mut ctx, &sel, Some(acc_post)) {
        Ok(o) => o,
        Err(Error::NotRestrictable(_)) => return Ok(infeasible("no safe initial set".into(), Some(acc_post))),
        Err(e) => return Err(e),
    };
    if !outcome.reached_target() {
        return Ok(infeasible(
            format!("selection stopped at {} values", outcome.set.len()),
            Some(outcome.final_acc),
        ));
    }
    {
        let conv = work.conv_mut(index)?;
        conv.weights = outcome.weights.clone();
        conv.bias = outcome.bias.clone();
        conv.candidate_set = Some(outcome.set.values.clone());
    }
    let energy = layer_energy(&work, index, table, &params.array)?;
    let acc = outcome.final_acc;
    if acc < floor {
        return Ok(infeasible(format!("accuracy {acc:.4} below floor"), Some(acc)));
    }
    if energy.e_layer > e_before.e_layer {
        let mut t = infeasible("energy increased".into(), Some(acc));
        t.record.energy = Some(energy.e_layer);
        return Ok(t);
    }
    Ok(LayerTrial {
        record: TrialRecord {
            layer_index: index,
            config,
            accuracy: Some(acc),
            energy: Some(energy.e_layer),
            accepted: true,
            note: String::new(),
        },
        net: Some(work),
        candidate_set: Some(outcome.set),
        energy: Some(energy),
        accuracy: Some(acc),
    })
}

/// Layer-wise schedule over `grid`. `net` is replaced by the compressed
/// network.
pub fn compress_network(
    net: &mut QuantizedNetwork,
    profile: &NetworkProfile,
    calib: &Dataset,
    val: &Dataset,
    params: &ScheduleParams,
    grid: &[CompressionConfig],
) -> Result<CompressionReport> {
    params.array.validate()?;
    params.selection.validate()?;
    let ranked = rank_configs(grid)?;
    let fingerprint = crate::qnn::io::fingerprint(net);
    let tables = ordered_tables(net, profile)?;
    let convs = net.conv_indices();
    let before = network_energy(net, &tables, &params.array)?;
    let shares = shares_of(&before.iter().map(|e| e.e_layer).collect::<Vec<_>>())?;
    let acc0 = net.accuracy(val)?.top1;
    let floor = acc0 - params.delta;

    let mut plans = Vec::new();
    for li in order_layers(&convs, &shares) {
        let pos = convs.iter().position(|&c| c == li).expect("layer is a conv");
        let table = &tables[pos];
        let mut plan = LayerPlan {
            layer_index: li,
            rho: shares[pos],
            chosen: None,
            candidate_set: None,
            e_before: before[pos].e_layer,
            e_after: before[pos].e_layer,
            acc_after: f64::NAN,
            status: PlanStatus::Skipped,
            trials: Vec::new(),
        };
        for &config in &ranked {
            let trial = compress_layer(net, li, config, table, calib, val, params, floor)?;
            plan.trials.push(trial.record.clone());
            if let (Some(new_net), Some(e)) = (trial.net, trial.energy) {
                *net = new_net;
                plan.chosen = Some(config);
                plan.candidate_set = trial.candidate_set;
                plan.e_after = e.e_layer;
                plan.acc_after = trial.accuracy.unwrap_or(f64::NAN);
                plan.status = PlanStatus::Compressed;
                break;
            }
        }
        if plan.chosen.is_none() {
            plan.acc_after = net.accuracy(val)?.top1;
        }
        plans.push(plan);
    }
    finish_report(net, plans, "layerwise", acc0, profile.seed, params, fingerprint, val)
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    net: &QuantizedNetwork,
    layers: Vec<LayerPlan>,
    mode: &str,
    acc0: f64,
    seed: u64,
    params: &ScheduleParams,
    fingerprint: String,
    val: &Dataset,
) -> Result<CompressionReport> {
    let e_before: f64 = layers.iter().map(|l| l.e_before).sum();
    let e_after: f64 = layers.iter().map(|l| l.e_after).sum();
    Ok(CompressionReport {
        tool: crate::TOOL_VERSION.into(),
        model_fingerprint: fingerprint,
        mode: mode.into(),
        acc0,
        delta: params.delta,
        layers,
        e_before,
        e_after,
        saving_pct: 1.0 - e_after / e_before,
        final_accuracy: net.accuracy(val)?.top1,
        profile_seed: seed,
        fast: params.selection.fast,
        array: params.array,
        selection: params.selection,
    })
}

/// One shared candidate set for the whole network: the top `set_size`
/// values of the joint ranking over network-wide usage and mean power.
pub fn shared_candidate_set(
    net: &QuantizedNetwork,
    tables: &[WeightPowerTable],
    set_size: usize,
    lambda: f64,
) -> Result<Vec<i8>> {
    let mut usage = [0u64; 256];
    for i in net.conv_indices() {
        let c = net.conv(i)?;
        for (u, v) in usage.iter_mut().zip(weight_usage(&c.weights, &c.mask)) {
            *u += v;
        }
    }
    let mut mean = WeightPowerTable {
        layer_index: usize::MAX,
        power: vec![0.0; 256],
        trace_len: 0,
        seed: 0,
    };
    for t in tables {
        for (m, p) in mean.power.iter_mut().zip(&t.power) {
            *m += p / tables.len() as f64;
        }
    }
    Ok(top_k_with_zero(&joint_score(&mean, &usage, lambda), set_size))
}

/// Uniform compression: every conv layer is pruned at `config.prune_ratio`
/// and projected onto one shared set built from network-wide statistics.
/// `lambda` weighs usage against power in that set (0 gives the naive
/// lowest-power set). No accuracy constraint is enforced.
pub fn global_compress_baseline(
    net: &mut QuantizedNetwork,
    profile: &NetworkProfile,
    calib: &Dataset,
    val: &Dataset,
    params: &ScheduleParams,
    config: CompressionConfig,
    lambda: f64,
) -> Result<CompressionReport> {
    config.validate()?;
    let fingerprint = crate::qnn::io::fingerprint(net);
    let tables = ordered_tables(net, profile)?;
    let convs = net.conv_indices();
    let before = network_energy(net, &tables, &params.array)?;
    let shares = shares_of(&before.iter().map(|e| e.e_layer).collect::<Vec<_>>())?;
    let acc0 = net.accuracy(val)?.top1;

    // prune first so the shared set sees the surviving weights
    for &li in &convs {
        let ctx = CalibrationContext::build(net, li, calib)?;
        if config.prune_ratio > 0.0 {
            prune_and_calibrate(net, li, config.prune_ratio, &ctx)?;
        }
    }
    let shared = shared_candidate_set(net, &tables, config.set_size, lambda)?;
    for &li in &convs {
        let ctx = CalibrationContext::build(net, li, calib)?;
        let pos = convs.iter().position(|&c| c == li).unwrap();
        let conv = net.conv_mut(li)?;
        let w = project_weights(&conv.weights, &conv.mask, &shared, Some(&tables[pos].power))?;
        conv.bias = calibrate_bias(&conv.weights, &conv.bias, &w, &ctx);
        conv.weights = w;
        conv.candidate_set = Some(shared.clone());
    }
    let after = network_energy(net, &tables, &params.array)?;
    let acc = net.accuracy(val)?.top1;
    let mut plans: Vec<LayerPlan> = order_layers(&convs, &shares)
        .into_iter()
        .map(|li| {
            let pos = convs.iter().position(|&c| c == li).unwrap();
            LayerPlan {
                layer_index: li,
                rho: shares[pos],
                chosen: Some(config),
                candidate_set: Some(CandidateSet {
                    layer_index: li,
                    values: shared.clone(),
                    essential: Vec::new(),
                    k_init: config.set_size,
                    k_target: config.set_size,
                }),
                e_before: before[pos].e_layer,
                e_after: after[pos].e_layer,
                acc_after: acc,
                status: PlanStatus::Compressed,
                trials: Vec::new(),
            }
        })
        .collect();
    plans.sort_by(|a, b| b.rho.total_cmp(&a.rho));
    finish_report(net, plans, "global", acc0, profile.seed, params, fingerprint, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_ranking() {
        let r = rank_configs(&default_grid()).unwrap();
        assert_eq!(r.len(), 9);
        assert_eq!(r[0], CompressionConfig { prune_ratio: 0.7, set_size: 16 });
        assert_eq!(r[8], CompressionConfig { prune_ratio: 0.3, set_size: 32 });
        let single = [CompressionConfig { prune_ratio: 0.5, set_size: 24 }];
        assert_eq!(rank_configs(&single).unwrap(), single.to_vec());
        let custom = config_grid(&[0.5], &[32, 16]);
        assert_eq!(
            rank_configs(&custom).unwrap(),
            vec![
                CompressionConfig { prune_ratio: 0.5, set_size: 16 },
                CompressionConfig { prune_ratio: 0.5, set_size: 32 }
            ]
        );
        assert!(rank_configs(&[]).is_err());
        assert!(rank_configs(&[CompressionConfig { prune_ratio: 1.0, set_size: 16 }]).is_err());
    }

    #[test]
    fn layer_order() {
        assert_eq!(order_layers(&[0, 1, 2], &[0.2, 0.5, 0.3]), vec![1, 2, 0]);
        assert_eq!(order_layers(&[0, 3, 5], &[0.25, 0.5, 0.25]), vec![3, 0, 5]);
        assert_eq!(order_layers(&[4, 7], &[0.5, 0.5]), vec![4, 7]);
    }
}
