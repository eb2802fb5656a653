//! Per-weight power tables and tile / layer energies of the
//! weight-stationary array.
//!
//! A tile covers `dim` rows of the lowered weight matrix, `dim` entries of
//! the inner dimension and `dim` streamed columns, and takes
//! `cycles_per_tile = 2 * dim` cycles (weight load plus streaming).
//! Energies are in toggle-seconds.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mac_sim::{avg_power, MacDatapath, QuantWeight};
use crate::qnn::ops::sat_add;
use crate::qnn::{im2col, ConvLayer, Dataset, QuantizedNetwork};
use crate::transitions::{LayerTransitionStats, TraceSampler};

pub const DEFAULT_TRACE_LEN: usize = 4096;
pub const MIN_TRACE_LEN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub dim: usize,
    pub freq_hz: f64,
    pub cycles_per_tile: usize,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig {
            dim: 64,
            freq_hz: 5e9,
            cycles_per_tile: 128,
        }
    }
}

impl ArrayConfig {
    pub fn new(dim: usize, freq_hz: f64) -> Result<Self> {
        let cfg = ArrayConfig {
            dim,
            freq_hz,
            cycles_per_tile: 2 * dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("array dim must be positive".into()));
        }
        if !(self.freq_hz.is_finite() && self.freq_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("freq_hz must be positive, got {}", self.freq_hz)));
        }
        if self.cycles_per_tile != 2 * self.dim {
            return Err(Error::InvalidConfig(format!(
                "cycles_per_tile must be 2 * dim = {}, got {}",
                2 * self.dim,
                self.cycles_per_tile
            )));
        }
        Ok(())
    }

    /// Time window `T = dim / f` of one tile.
    pub fn t_window(&self) -> f64 {
        self.dim as f64 / self.freq_hz
    }
}

/// Average MAC power for every stationary weight value of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPowerTable {
    pub layer_index: usize,
    /// Indexed by `w + 128`.
    pub power: Vec<f64>,
    pub trace_len: usize,
    pub seed: u64,
}

impl WeightPowerTable {
    #[inline]
    pub fn get(&self, w: i8) -> f64 {
        self.power[(w as i32 + 128) as usize]
    }

    pub fn validate(&self) -> Result<()> {
        if self.power.len() != 256 {
            return Err(Error::Shape(format!("power table has {} entries, expected 256", self.power.len())));
        }
        if let Some(i) = self.power.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::OutOfRange(format!("power[{}] = {}", i as i32 - 128, self.power[i])));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.power.iter().sum::<f64>() / self.power.len() as f64
    }

    /// Coefficient of variation (population) across the 256 entries.
    pub fn coefficient_of_variation(&self) -> f64 {
        let m = self.mean();
        let var = self.power.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / self.power.len() as f64;
        if m > 0.0 {
            var.sqrt() / m
        } else {
            0.0
        }
    }

    /// Number of weight values with strictly lower power than `w`.
    pub fn rank_of(&self, w: i8) -> usize {
        let p = self.get(w);
        self.power.iter().filter(|&&q| q < p).count()
    }
}

/// Synthesizes one trace per weight value from `stats` and measures its
/// average power. Each weight gets a seed derived from `(seed, w)`.
pub fn build_power_table(stats: &LayerTransitionStats, trace_len: usize, seed: u64) -> Result<WeightPowerTable> {
    if trace_len < MIN_TRACE_LEN {
        return Err(Error::InvalidConfig(format!("trace_len must be >= {MIN_TRACE_LEN}, got {trace_len}")));
    }
    stats.validate()?;
    let sampler = TraceSampler::new(stats)?;
    let power = (-128i32..128)
        .into_par_iter()
        .map(|w| {
            let trace = sampler.sample(trace_len, crate::derive_seed(seed, w as u64))?;
            avg_power(QuantWeight(w as i8), &trace)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(WeightPowerTable {
        layer_index: stats.layer_index,
        power,
        trace_len,
        seed,
    })
}

/// Number of tiles of the lowered matmul `(m x kdim) * (kdim x n)`.
pub fn tile_partition(m: usize, kdim: usize, n: usize, cfg: &ArrayConfig) -> Result<usize> {
    if m == 0 || kdim == 0 || n == 0 {
        return Err(Error::Geometry(format!("tile dims must be >= 1, got ({m}, {kdim}, {n})")));
    }
    if cfg.dim == 0 {
        return Err(Error::InvalidConfig("array dim must be positive".into()));
    }
    Ok(m.div_ceil(cfg.dim) * kdim.div_ceil(cfg.dim) * n.div_ceil(cfg.dim))
}

/// Estimate-mode power of one weight tile: mean of the table over its
/// positions (absent positions hold weight 0).
pub fn tile_power(weight_tile: &[i8], table: &WeightPowerTable) -> f64 {
    if weight_tile.is_empty() {
        return table.get(0);
    }
    weight_tile.iter().map(|&w| table.get(w)).sum::<f64>() / weight_tile.len() as f64
}

/// Weight tiles of a conv layer in (row block, inner block) order, each
/// `dim * dim` row-major and zero padded. Pruned positions read as 0.
pub fn weight_tiles(conv: &ConvLayer, dim: usize) -> Vec<Vec<i8>> {
    let (m, kdim) = (conv.c_out, conv.kdim());
    let mut tiles = Vec::new();
    for m0 in (0..m).step_by(dim) {
        for k0 in (0..kdim).step_by(dim) {
            let mut t = vec![0i8; dim * dim];
            for r in 0..dim.min(m - m0) {
                for c in 0..dim.min(kdim - k0) {
                    let i = (m0 + r) * kdim + k0 + c;
                    t[r * dim + c] = if conv.mask[i] { conv.weights[i] } else { 0 };
                }
            }
            tiles.push(t);
        }
    }
    tiles
}

/// Mean estimate-mode tile power over all weight tiles of `conv`.
///
/// All tiles have `dim^2` positions, so this equals the mean over every
/// padded position and needs no tile materialization.
pub fn layer_p_tile(conv: &ConvLayer, table: &WeightPowerTable, dim: usize) -> f64 {
    let (m, kdim) = (conv.c_out, conv.kdim());
    let positions = m.div_ceil(dim) * kdim.div_ceil(dim) * dim * dim;
    let real: f64 = conv
        .weights
        .iter()
        .zip(&conv.mask)
        .map(|(&w, &keep)| table.get(if keep { w } else { 0 }))
        .sum();
    (real + (positions - m * kdim) as f64 * table.get(0)) / positions as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer_index: usize,
    pub n_tiles: usize,
    pub p_tile: f64,
    pub e_tile: f64,
    pub e_layer: f64,
    pub t_window: f64,
}

impl LayerEnergy {
    pub fn from_parts(layer_index: usize, n_tiles: usize, p_tile: f64, cfg: &ArrayConfig) -> Self {
        let t_window = cfg.t_window();
        let e_tile = 2.0 * p_tile * t_window;
        LayerEnergy {
            layer_index,
            n_tiles,
            p_tile,
            e_tile,
            e_layer: n_tiles as f64 * e_tile,
            t_window,
        }
    }
}

/// Lowered matmul dims `(m, kdim, n)` of conv layer `index` for one image.
pub fn layer_dims(net: &QuantizedNetwork, index: usize) -> Result<(usize, usize, usize)> {
    let conv = net.conv(index)?;
    let shapes = net.shapes()?;
    let (_, h, w) = shapes[index];
    let (ho, wo) = crate::qnn::ops::ConvGeometry {
        c_in: conv.c_in,
        h,
        w,
        k: conv.k,
        stride: conv.stride,
        pad: conv.pad,
    }
    .output_hw()?;
    Ok((conv.c_out, conv.kdim(), ho * wo))
}

/// Estimate-mode energy of conv layer `index` for one inference.
pub fn layer_energy(net: &QuantizedNetwork, index: usize, table: &WeightPowerTable, cfg: &ArrayConfig) -> Result<LayerEnergy> {
    let (m, kdim, n) = layer_dims(net, index)?;
    let n_tiles = tile_partition(m, kdim, n, cfg)?;
    let p_tile = layer_p_tile(net.conv(index)?, table, cfg.dim);
    Ok(LayerEnergy::from_parts(index, n_tiles, p_tile, cfg))
}

/// `E / sum(E)` for each layer.
pub fn shares_of(energies: &[f64]) -> Result<Vec<f64>> {
    if energies.is_empty() {
        return Err(Error::InvalidConfig("no conv layers to share energy".into()));
    }
    let total: f64 = energies.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::DegenerateEnergy);
    }
    Ok(energies.iter().map(|e| e / total).collect())
}

/// Estimate-mode energies of every conv layer, one table per layer in
/// `conv_indices` order.
pub fn network_energy(net: &QuantizedNetwork, tables: &[WeightPowerTable], cfg: &ArrayConfig) -> Result<Vec<LayerEnergy>> {
    let convs = net.conv_indices();
    if convs.len() != tables.len() {
        return Err(Error::MissingProfile(format!(
            "{} conv layers but {} power tables",
            convs.len(),
            tables.len()
        )));
    }
    convs
        .iter()
        .zip(tables)
        .map(|(&i, t)| layer_energy(net, i, t, cfg))
        .collect()
}

/// Energy shares of the conv layers of `net`.
pub fn energy_shares(net: &QuantizedNetwork, tables: &[WeightPowerTable], cfg: &ArrayConfig) -> Result<Vec<f64>> {
    let e: Vec<f64> = network_energy(net, tables, cfg)?.iter().map(|l| l.e_layer).collect();
    shares_of(&e)
}

/// Direct per-cycle simulation of one weight tile.
///
/// `acts[k][j]` is the activation entering array row `k` at streamed
/// column `j`; `psum_base[r][j]` the partial sum entering output row `r`
/// from earlier inner-dimension tiles. Returns the mean toggles per cycle
/// over all PEs and all transitions between consecutive columns.
pub fn simulate_tile_power(weight_tile: &[i8], acts: &[Vec<i8>], psum_base: &[Vec<i32>], dim: usize) -> Result<f64> {
    if weight_tile.len() != dim * dim || acts.len() != dim || psum_base.len() != dim {
        return Err(Error::Shape("simulated tile must be dim x dim".into()));
    }
    let cols = acts[0].len();
    if cols < 2 {
        return Err(Error::TraceTooShort(cols));
    }
    let dp = MacDatapath::default();
    let total: u64 = (0..dim)
        .into_par_iter()
        .map(|r| {
            let w_row = &weight_tile[r * dim..(r + 1) * dim];
            let mut psum: Vec<i32> = psum_base[r].clone();
            let mut toggles = 0u64;
            for (k, &w) in w_row.iter().enumerate() {
                let mut state = dp.reset_state();
                for j in 0..cols {
                    let a = acts[k][j];
                    let (next, e) = dp.cycle(&state, w as i64, a as i64, psum[j] as i64);
                    if j > 0 {
                        toggles += e.toggles as u64;
                    }
                    state = next;
                    psum[j] = sat_add(psum[j], w as i32 * a as i32).0;
                }
            }
            toggles
        })
        .sum();
    Ok(total as f64 / (dim * dim * (cols - 1)) as f64)
}

/// Options for simulate mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Images whose lowered columns are streamed back to back.
    pub images: usize,
    /// Streamed columns per weight tile.
    pub columns: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { images: 8, columns: 128 }
    }
}

/// Simulate-mode power of every weight tile of conv layer `index`, using
/// the first `sim.columns` lowered input columns of `data`.
pub fn simulate_layer_tiles(
    net: &QuantizedNetwork,
    data: &Dataset,
    index: usize,
    cfg: &ArrayConfig,
    sim: &SimulateConfig,
) -> Result<Vec<f64>> {
    let conv = net.conv(index)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let kdim = conv.kdim();
    let mut columns: Vec<Vec<i8>> = vec![Vec::new(); kdim];
    for i in 0..data.len().min(sim.images.max(1)) {
        let cols = im2col(&net.activation_at(index, &data.image(i))?, conv.k, conv.stride, conv.pad)?;
        for (r, col) in columns.iter_mut().enumerate() {
            col.extend_from_slice(&cols.data[r * cols.cols..(r + 1) * cols.cols]);
        }
        if columns[0].len() >= sim.columns {
            break;
        }
    }
    let n = columns[0].len().min(sim.columns.max(2));
    let dim = cfg.dim;
    let tiles = weight_tiles(conv, dim);
    let k_blocks = kdim.div_ceil(dim);
    let mut out = Vec::with_capacity(tiles.len());
    for (t, tile) in tiles.iter().enumerate() {
        let (mb, kb) = (t / k_blocks, t % k_blocks);
        let (m0, k0) = (mb * dim, kb * dim);
        let acts: Vec<Vec<i8>> = (0..dim)
            .map(|c| {
                if k0 + c < kdim {
                    columns[k0 + c][..n].to_vec()
                } else {
                    vec![0; n]
                }
            })
            .collect();
        let psum_base: Vec<Vec<i32>> = (0..dim)
            .map(|r| {
                let mut p = vec![0i32; n];
                if m0 + r < conv.c_out {
                    let row = &conv.weights[(m0 + r) * kdim..(m0 + r + 1) * kdim];
                    for (k, &w) in row.iter().enumerate().take(k0) {
                        for (j, pj) in p.iter_mut().enumerate() {
                            *pj = sat_add(*pj, w as i32 * columns[k][j] as i32).0;
                        }
                    }
                }
                p
            })
            .collect();
        out.push(simulate_tile_power(tile, &acts, &psum_base, dim)?);
    }
    Ok(out)
}

/// Simulate-mode energy of conv layer `index`.
pub fn layer_energy_simulated(
    net: &QuantizedNetwork,
    data: &Dataset,
    index: usize,
    cfg: &ArrayConfig,
    sim: &SimulateConfig,
) -> Result<LayerEnergy> {
    let (m, kdim, n) = layer_dims(net, index)?;
    let n_tiles = tile_partition(m, kdim, n, cfg)?;
    let powers = simulate_layer_tiles(net, data, index, cfg, sim)?;
    let p_tile = powers.iter().sum::<f64>() / powers.len() as f64;
    Ok(LayerEnergy::from_parts(index, n_tiles, p_tile, cfg))
}

/// Writes the per-layer `layer,n_tiles,p_tile,e_layer,share` table.
pub fn write_energy_csv<W: Write>(out: W, layers: &[LayerEnergy], shares: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "n_tiles", "p_tile", "e_layer", "share"])?;
    for (l, s) in layers.iter().zip(shares) {
        w.write_record([
            l.layer_index.to_string(),
            l.n_tiles.to_string(),
            format!("{:.6}", l.p_tile),
            format!("{:.6e}", l.e_layer),
            format!("{s:.9}"),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mac_sim::{PartialSum, QuantActivation};

    fn flat_table(v: f64) -> WeightPowerTable {
        WeightPowerTable {
            layer_index: 0,
            power: vec![v; 256],
            trace_len: 4096,
            seed: 0,
        }
    }

    #[test]
    fn array_defaults() {
        let cfg = ArrayConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.t_window() - 12.8e-9).abs() < 1e-21);
        assert!(ArrayConfig::new(0, 1e9).is_err());
        let bad = ArrayConfig {
            cycles_per_tile: 100,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tile_counts() {
        let cfg = ArrayConfig::default();
        assert_eq!(tile_partition(64, 64, 64, &cfg).unwrap(), 1);
        assert_eq!(tile_partition(6, 75, 784, &cfg).unwrap(), 26);
        assert_eq!(tile_partition(65, 65, 65, &cfg).unwrap(), 8);
        assert!(matches!(tile_partition(0, 1, 1, &cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn tile_power_estimates() {
        let mut t = flat_table(1.0);
        t.power[128] = 0.25;
        t.power[128 + 3] = 3.0;
        assert_eq!(tile_power(&[0; 16], &t), 0.25);
        assert_eq!(tile_power(&[3; 16], &t), 3.0);
        assert_eq!(tile_power(&[0, 3, 3, 0], &t), (0.25 + 3.0) / 2.0);
    }

    #[test]
    fn energy_formulas() {
        let cfg = ArrayConfig::default();
        let e = LayerEnergy::from_parts(0, 1, 1.0, &cfg);
        assert!((e.e_tile - 25.6e-9).abs() < 1e-20);
        let e2 = LayerEnergy::from_parts(0, 2, 1.0, &cfg);
        assert!((e2.e_layer - 2.0 * e.e_layer).abs() < 1e-20);
        assert_eq!(shares_of(&[3.0, 1.0]).unwrap(), vec![0.75, 0.25]);
        assert_eq!(shares_of(&[2.0]).unwrap(), vec![1.0]);
        assert!(matches!(shares_of(&[0.0, 0.0]), Err(Error::DegenerateEnergy)));
    }

    #[test]
    fn layer_p_tile_matches_tile_mean() {
        let net = crate::qnn::tests::tiny_net();
        let conv = net.conv(0).unwrap();
        let mut t = flat_table(2.0);
        t.power[128] = 1.0;
        t.power[129] = 5.0;
        for dim in [1, 2, 4, 64] {
            let tiles = weight_tiles(conv, dim);
            let mean = tiles.iter().map(|x| tile_power(x, &t)).sum::<f64>() / tiles.len() as f64;
            assert!((layer_p_tile(conv, &t, dim) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_stats_give_zero_power() {
        let mut stats = LayerTransitionStats::new(0, 16);
        stats.record_act(0, 0);
        stats.record_psum_pair(0, 0);
        stats.observe_psum(0, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        let table = build_power_table(&stats, 1000, 7).unwrap();
        // only the cycle out of reset toggles anything
        for w in -128i32..128 {
            let first = crate::mac_sim::mac_cycle(
                &crate::mac_sim::MacDatapathState::reset(&Default::default()),
                QuantWeight(w as i8),
                QuantActivation(0),
                PartialSum::ZERO,
            )
            .1
            .toggles as f64;
            assert_eq!(table.get(w as i8), first / 999.0);
        }
        assert_eq!(table.get(0), 0.0);
        assert_eq!(table, build_power_table(&stats, 1000, 7).unwrap());
        assert!(build_power_table(&stats, 999, 7).is_err());
    }

    #[test]
    fn simulated_constant_stream_is_silent() {
        let dim = 4;
        let acts = vec![vec![5i8; 10]; dim];
        let base = vec![vec![0i32; 10]; dim];
        let p = simulate_tile_power(&[3; 16], &acts, &base, dim).unwrap();
        assert_eq!(p, 0.0);
        // one PE, alternating activation: matches avg_power without the reset cycle
        let acts = vec![vec![1, 2, 1, 2, 1]];
        let p = simulate_tile_power(&[7], &acts, &[vec![0; 5]], 1).unwrap();
        let trace: Vec<_> = [1i8, 2, 1, 2, 1]
            .iter()
            .map(|&a| (QuantActivation(a), PartialSum::ZERO))
            .collect();
        let first = crate::mac_sim::mac_cycle(
            &crate::mac_sim::MacDatapathState::reset(&Default::default()),
            QuantWeight(7),
            QuantActivation(1),
            PartialSum::ZERO,
        )
        .1
        .toggles as f64;
        let ap = avg_power(QuantWeight(7), &trace).unwrap();
        assert!((p - (ap * 4.0 - first) / 4.0).abs() < 1e-12);
    }
}
