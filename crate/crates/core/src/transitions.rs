//! Partial-sum grouping, per-layer transition statistics and probabilistic
//! trace synthesis.
//!
//! Partial sums are binned twice: by the position of the highest set bit of
//! their 22-bit two's-complement pattern (10 uniform bins over 0..=22) and
//! by popcount (5 uniform bins over 0..=22), giving 50 groups. A layer's
//! activation stream and partial-sum stream are profiled independently and
//! replayed as two first-order Markov chains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mac_sim::{MacDatapath, PartialSum, QuantActivation, ACC_BITS, PSUM_MAX, PSUM_MIN};
use crate::qnn::{im2col, Dataset, QuantizedNetwork};

pub const MSB_BINS: usize = 10;
pub const HW_BINS: usize = 5;
pub const GROUP_COUNT: usize = MSB_BINS * HW_BINS;
pub const DEFAULT_RESERVOIR: usize = 256;
/// Floor on the intra-group variance in the stability ratio.
pub const EPS_VAR: f64 = 1e-12;

const ACT_STATES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub msb_bin: u8,
    pub hw_bin: u8,
}

impl GroupId {
    pub fn index(self) -> usize {
        self.msb_bin as usize * HW_BINS + self.hw_bin as usize
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < GROUP_COUNT);
        GroupId {
            msb_bin: (i / HW_BINS) as u8,
            hw_bin: (i % HW_BINS) as u8,
        }
    }

    pub fn all() -> impl Iterator<Item = GroupId> {
        (0..GROUP_COUNT).map(GroupId::from_index)
    }
}

/// 0 for zero, otherwise one plus the index of the highest set bit of the
/// 22-bit two's-complement pattern (every negative value gives 22).
pub fn msb_of(p: PartialSum) -> u32 {
    let bits = p.bits();
    32 - bits.leading_zeros()
}

/// Popcount of the 22-bit two's-complement pattern.
pub fn hamming_weight(p: PartialSum) -> u32 {
    p.bits().count_ones()
}

pub fn group_of(p: PartialSum) -> GroupId {
    let span = ACC_BITS + 1;
    let msb = (msb_of(p) as usize * MSB_BINS / span as usize).min(MSB_BINS - 1);
    let hw = (hamming_weight(p) as usize * HW_BINS / span as usize).min(HW_BINS - 1);
    GroupId {
        msb_bin: msb as u8,
        hw_bin: hw as u8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub inter_group_mean_variance: f64,
    pub mean_intra_group_variance: f64,
    pub ratio: f64,
    pub groups: usize,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Variance of per-group mean power over the mean within-group variance
/// (population variances; groups weighted equally).
pub fn stability_ratio(samples: &[(PartialSum, f64)]) -> Result<StabilityReport> {
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); GROUP_COUNT];
    for &(p, power) in samples {
        groups[group_of(p).index()].push(power);
    }
    let nonempty: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if nonempty.len() < 2 {
        return Err(Error::TooFewGroups(nonempty.len()));
    }
    let (means, vars): (Vec<f64>, Vec<f64>) = nonempty.iter().map(|g| mean_var(g)).unzip();
    let (_, inter) = mean_var(&means);
    let intra = vars.iter().sum::<f64>() / vars.len() as f64;
    Ok(StabilityReport {
        inter_group_mean_variance: inter,
        mean_intra_group_variance: intra,
        ratio: inter / intra.max(EPS_VAR),
        groups: nonempty.len(),
    })
}

/// Activation and grouped partial-sum transition statistics of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTransitionStats {
    pub layer_index: usize,
    /// `from * 256 + to`, indices are `value + 128`.
    pub act_hist: Vec<u64>,
    /// `from_group * 50 + to_group`.
    pub group_pair_hist: Vec<u64>,
    /// Reservoir of observed partial sums per group.
    pub group_samples: Vec<Vec<i32>>,
    /// Number of partial sums offered to each reservoir.
    pub group_seen: Vec<u64>,
    pub reservoir_size: usize,
    pub total_act_transitions: u64,
    pub total_psum_transitions: u64,
}

impl LayerTransitionStats {
    pub fn new(layer_index: usize, reservoir_size: usize) -> Self {
        LayerTransitionStats {
            layer_index,
            act_hist: vec![0; ACT_STATES * ACT_STATES],
            group_pair_hist: vec![0; GROUP_COUNT * GROUP_COUNT],
            group_samples: vec![Vec::new(); GROUP_COUNT],
            group_seen: vec![0; GROUP_COUNT],
            reservoir_size,
            total_act_transitions: 0,
            total_psum_transitions: 0,
        }
    }

    #[inline]
    pub fn record_act(&mut self, from: i8, to: i8) {
        self.act_hist[act_index(from) * ACT_STATES + act_index(to)] += 1;
        self.total_act_transitions += 1;
    }

    #[inline]
    pub fn record_psum_pair(&mut self, from: i32, to: i32) {
        let g0 = group_of(PartialSum::saturating(from as i64)).index();
        let g1 = group_of(PartialSum::saturating(to as i64)).index();
        self.group_pair_hist[g0 * GROUP_COUNT + g1] += 1;
        self.total_psum_transitions += 1;
    }

    /// Offers one observed partial sum to its group's reservoir (Algorithm R).
    #[inline]
    pub fn observe_psum<R: Rng>(&mut self, value: i32, rng: &mut R) {
        let g = group_of(PartialSum::saturating(value as i64)).index();
        self.group_seen[g] += 1;
        let res = &mut self.group_samples[g];
        if res.len() < self.reservoir_size {
            res.push(value);
        } else {
            let j = rng.random_range(0..self.group_seen[g]);
            if (j as usize) < self.reservoir_size {
                res[j as usize] = value;
            }
        }
    }

    /// Marginal distribution of destination groups in the pair histogram.
    pub fn group_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; GROUP_COUNT];
        for from in 0..GROUP_COUNT {
            for to in 0..GROUP_COUNT {
                m[to] += self.group_pair_hist[from * GROUP_COUNT + to] as f64;
            }
        }
        let total: f64 = m.iter().sum();
        if total > 0.0 {
            m.iter_mut().for_each(|v| *v /= total);
        }
        m
    }

    /// Marginal distribution of destination activation values.
    pub fn act_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; ACT_STATES];
        for from in 0..ACT_STATES {
            for to in 0..ACT_STATES {
                m[to] += self.act_hist[from * ACT_STATES + to] as f64;
            }
        }
        let total: f64 = m.iter().sum();
        if total > 0.0 {
            m.iter_mut().for_each(|v| *v /= total);
        }
        m
    }

    /// Checks histogram conservation and reservoir membership.
    pub fn validate(&self) -> Result<()> {
        if self.act_hist.len() != ACT_STATES * ACT_STATES || self.group_pair_hist.len() != GROUP_COUNT * GROUP_COUNT {
            return Err(Error::Shape("histogram sizes".into()));
        }
        if self.act_hist.iter().sum::<u64>() != self.total_act_transitions {
            return Err(Error::EmptyStats("activation histogram does not sum to its total".into()));
        }
        if self.group_pair_hist.iter().sum::<u64>() != self.total_psum_transitions {
            return Err(Error::EmptyStats("group histogram does not sum to its total".into()));
        }
        for (g, res) in self.group_samples.iter().enumerate() {
            if res.len() > self.reservoir_size {
                return Err(Error::Shape(format!("reservoir {g} over capacity")));
            }
            if res.iter().any(|&v| group_of(PartialSum::saturating(v as i64)).index() != g) {
                return Err(Error::Shape(format!("reservoir {g} holds a foreign value")));
            }
        }
        Ok(())
    }
}

#[inline]
fn act_index(a: i8) -> usize {
    (a as i32 + 128) as usize
}

/// Options for profiling a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub dim: usize,
    pub reservoir_size: usize,
    pub max_images: usize,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            dim: 64,
            reservoir_size: DEFAULT_RESERVOIR,
            max_images: 64,
            seed: 0,
        }
    }
}

/// Profiles a conv layer by replaying its lowered matmul on the
/// weight-stationary array.
///
/// Images are streamed back to back: their im2col columns are
/// concatenated and tiled in `dim`-wide blocks. For each tile, activation
/// transitions are recorded per array row (all PEs of a row see the same
/// stream) and partial-sum transitions per PE, with partial sums chained
/// across inner-dimension tiles.
pub fn collect_stats(
    net: &QuantizedNetwork,
    data: &Dataset,
    layer_index: usize,
    cfg: &CollectConfig,
) -> Result<LayerTransitionStats> {
    let conv = net.conv(layer_index)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images = data.len().min(cfg.max_images.max(1));
    let kdim = conv.kdim();
    let mut columns: Vec<Vec<i8>> = vec![Vec::new(); kdim];
    for i in 0..images {
        let x = net.activation_at(layer_index, &data.image(i))?;
        let cols = im2col(&x, conv.k, conv.stride, conv.pad)?;
        for (r, col) in columns.iter_mut().enumerate() {
            col.extend_from_slice(&cols.data[r * cols.cols..(r + 1) * cols.cols]);
        }
    }
    let n_total = columns[0].len();
    let m = conv.c_out;
    let dim = cfg.dim.max(1);
    let mut stats = LayerTransitionStats::new(layer_index, cfg.reservoir_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (layer_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));

    for n0 in (0..n_total).step_by(dim) {
        let n1 = (n0 + dim).min(n_total);
        // partial sums entering the current inner tile, per (m, n)
        let mut chained = vec![0i32; m * (n1 - n0)];
        for k0 in (0..kdim).step_by(dim) {
            let k1 = (k0 + dim).min(kdim);
            for row in columns.iter().take(k1).skip(k0) {
                for pair in row[n0..n1].windows(2) {
                    stats.record_act(pair[0], pair[1]);
                }
            }
            for m0 in (0..m).step_by(dim) {
                let m1 = (m0 + dim).min(m);
                for mm in m0..m1 {
                    let w_row = &conv.weights[mm * kdim..(mm + 1) * kdim];
                    let mut prev_in = vec![0i32; k1 - k0];
                    for nn in n0..n1 {
                        let slot = mm * (n1 - n0) + (nn - n0);
                        let mut psum = chained[slot];
                        for kk in k0..k1 {
                            stats.observe_psum(psum, &mut rng);
                            if nn > n0 {
                                stats.record_psum_pair(prev_in[kk - k0], psum);
                            }
                            prev_in[kk - k0] = psum;
                            psum = crate::qnn::ops::sat_add(psum, w_row[kk] as i32 * columns[kk][nn] as i32).0;
                        }
                        chained[slot] = psum;
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// Cumulative weights of a discrete distribution.
#[derive(Debug, Clone)]
struct Cdf {
    cum: Vec<u64>,
    states: Vec<u16>,
}

impl Cdf {
    fn from_counts(counts: &[u64]) -> Option<Self> {
        let mut cum = Vec::new();
        let mut states = Vec::new();
        let mut acc = 0u64;
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                acc += c;
                cum.push(acc);
                states.push(i as u16);
            }
        }
        (acc > 0).then_some(Cdf { cum, states })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cum.last().unwrap();
        let u = rng.random_range(0..total);
        let i = self.cum.partition_point(|&c| c <= u);
        self.states[i] as usize
    }
}

#[derive(Debug, Clone)]
struct Chain {
    start: Cdf,
    rows: Vec<Option<Cdf>>,
}

impl Chain {
    fn new(hist: &[u64], states: usize) -> Option<Self> {
        let rows: Vec<Option<Cdf>> = (0..states)
            .map(|s| Cdf::from_counts(&hist[s * states..(s + 1) * states]))
            .collect();
        let from_counts: Vec<u64> = (0..states)
            .map(|s| hist[s * states..(s + 1) * states].iter().sum())
            .collect();
        let start = Cdf::from_counts(&from_counts)?;
        Some(Chain { start, rows })
    }

    /// Next state; states never seen as a source restart from the start law.
    fn step<R: Rng>(&self, state: usize, rng: &mut R) -> usize {
        match &self.rows[state] {
            Some(cdf) => cdf.sample(rng),
            None => self.start.sample(rng),
        }
    }
}

/// Replays a layer's statistics as MAC input traces.
#[derive(Debug, Clone)]
pub struct TraceSampler {
    act: Chain,
    groups: Chain,
    samples: Vec<Vec<i32>>,
}

impl TraceSampler {
    pub fn new(stats: &LayerTransitionStats) -> Result<Self> {
        let act = Chain::new(&stats.act_hist, ACT_STATES)
            .ok_or_else(|| Error::EmptyStats("activation histogram is empty".into()))?;
        let groups = Chain::new(&stats.group_pair_hist, GROUP_COUNT)
            .ok_or_else(|| Error::EmptyStats("partial-sum histogram is empty".into()))?;
        for g in 0..GROUP_COUNT {
            let used = stats.group_pair_hist[g * GROUP_COUNT..(g + 1) * GROUP_COUNT].iter().any(|&c| c > 0)
                || (0..GROUP_COUNT).any(|f| stats.group_pair_hist[f * GROUP_COUNT + g] > 0);
            if used && stats.group_samples[g].is_empty() {
                return Err(Error::EmptyStats(format!("group {g} has transitions but no samples")));
            }
        }
        Ok(TraceSampler {
            act,
            groups,
            samples: stats.group_samples.clone(),
        })
    }

    /// Group index sequence of length `len`.
    pub fn sample_groups(&self, len: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = self.groups.start.sample(&mut rng);
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                g = self.groups.step(g, &mut rng);
            }
            out.push(g);
        }
        out
    }

    pub fn sample(&self, len: usize, seed: u64) -> Result<Vec<(QuantActivation, PartialSum)>> {
        if len < 2 {
            return Err(Error::TraceTooShort(len));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = self.act.start.sample(&mut rng);
        let mut g = self.groups.start.sample(&mut rng);
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                a = self.act.step(a, &mut rng);
                g = self.groups.step(g, &mut rng);
            }
            let pool = &self.samples[g];
            let v = pool[rng.random_range(0..pool.len())];
            out.push((
                QuantActivation((a as i32 - 128) as i8),
                PartialSum::new(v).expect("reservoir values are in range"),
            ));
        }
        Ok(out)
    }
}

/// Synthesizes a MAC input trace from a layer's statistics.
pub fn sample_trace(stats: &LayerTransitionStats, len: usize, seed: u64) -> Result<Vec<(QuantActivation, PartialSum)>> {
    TraceSampler::new(stats)?.sample(len, seed)
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean toggles of one bucket of a transition sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepBucket {
    pub key: usize,
    pub count: u64,
    pub mean_toggles: f64,
}

fn random_psum<R: Rng>(rng: &mut R) -> i32 {
    rng.random_range(PSUM_MIN..=PSUM_MAX)
}

/// Toggles of the transition `(w, a, x) -> (w, a, y)`.
fn transition_toggles(dp: &MacDatapath, w: i64, a: i64, x: i32, y: i32) -> u32 {
    let s0 = dp.evaluate_raw(w, a, x as i64);
    let s1 = dp.evaluate_raw(w, a, y as i64);
    s0.toggles_to(&s1)
}

/// Mean MAC toggles of random partial-sum transitions bucketed by the
/// Hamming distance between source and destination (0..=22). Weight and
/// activation are random per sample and held across the transition.
pub fn hd_sweep(samples: usize, seed: u64) -> Vec<SweepBucket> {
    let dp = MacDatapath::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buckets = ACC_BITS as usize + 1;
    let mut sum = vec![0u64; buckets];
    let mut cnt = vec![0u64; buckets];
    for _ in 0..samples {
        let w = rng.random_range(-128i64..=127);
        let a = rng.random_range(-128i64..=127);
        let x = random_psum(&mut rng);
        let hd = rng.random_range(0..buckets);
        let mut flip = 0u32;
        while flip.count_ones() < hd as u32 {
            flip |= 1 << rng.random_range(0..ACC_BITS);
        }
        let y_bits = (x as u32 ^ flip) & ((1 << ACC_BITS) - 1);
        let y = ((y_bits << (32 - ACC_BITS)) as i32) >> (32 - ACC_BITS);
        sum[hd] += transition_toggles(&dp, w, a, x, y) as u64;
        cnt[hd] += 1;
    }
    (0..buckets)
        .filter(|&h| cnt[h] > 0)
        .map(|h| SweepBucket {
            key: h,
            count: cnt[h],
            mean_toggles: sum[h] as f64 / cnt[h] as f64,
        })
        .collect()
}

/// Random partial sum whose highest set bit (two's-complement pattern) is
/// `msb`; `msb == 22` gives a random negative value.
fn psum_with_msb<R: Rng>(rng: &mut R, msb: u32) -> i32 {
    match msb {
        0 => 0,
        m if m >= ACC_BITS => rng.random_range(PSUM_MIN..0),
        m => rng.random_range((1i32 << (m - 1))..(1i32 << m)),
    }
}

/// Mean toggles per (source group, destination group) for random
/// transitions whose endpoints have uniformly drawn MSB positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPairEnergy {
    pub sum: Vec<f64>,
    pub count: Vec<u64>,
}

impl GroupPairEnergy {
    pub fn mean(&self, from: usize, to: usize) -> Option<f64> {
        let i = from * GROUP_COUNT + to;
        (self.count[i] > 0).then(|| self.sum[i] / self.count[i] as f64)
    }

    /// Mean over transitions staying in the same MSB bin, and over
    /// transitions moving to a strictly higher MSB bin.
    pub fn diagonal_vs_upward(&self) -> (f64, f64) {
        let (mut s_same, mut c_same, mut s_up, mut c_up) = (0.0, 0u64, 0.0, 0u64);
        for from in 0..GROUP_COUNT {
            for to in 0..GROUP_COUNT {
                let i = from * GROUP_COUNT + to;
                let (bf, bt) = (GroupId::from_index(from).msb_bin, GroupId::from_index(to).msb_bin);
                if bf == bt {
                    s_same += self.sum[i];
                    c_same += self.count[i];
                } else if bt > bf {
                    s_up += self.sum[i];
                    c_up += self.count[i];
                }
            }
        }
        (s_same / c_same.max(1) as f64, s_up / c_up.max(1) as f64)
    }
}

pub fn group_pair_energy(samples: usize, seed: u64) -> GroupPairEnergy {
    let dp = MacDatapath::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; GROUP_COUNT * GROUP_COUNT];
    let mut count = vec![0u64; GROUP_COUNT * GROUP_COUNT];
    for _ in 0..samples {
        let w = rng.random_range(-128i64..=127);
        let a = rng.random_range(-128i64..=127);
        let (mx, my) = (rng.random_range(0..=ACC_BITS), rng.random_range(0..=ACC_BITS));
        let x = psum_with_msb(&mut rng, mx);
        let y = psum_with_msb(&mut rng, my);
        let gx = group_of(PartialSum::saturating(x as i64)).index();
        let gy = group_of(PartialSum::saturating(y as i64)).index();
        sum[gx * GROUP_COUNT + gy] += transition_toggles(&dp, w, a, x, y) as f64;
        count[gx * GROUP_COUNT + gy] += 1;
    }
    GroupPairEnergy { sum, count }
}

/// Stability-ratio samples from a layer's statistics.
///
/// Partial sums are drawn from a synthesized trace of the layer. Each one
/// is measured in isolation: with weight `w` and activation `a` held fixed,
/// the toggles of switching the accumulator input from 0 to that value.
pub fn stability_samples(
    stats: &LayerTransitionStats,
    w: i8,
    a: i8,
    len: usize,
    seed: u64,
) -> Result<Vec<(PartialSum, f64)>> {
    let trace = sample_trace(stats, len, seed)?;
    let dp = MacDatapath::default();
    let base = dp.evaluate_raw(w as i64, a as i64, 0);
    Ok(trace
        .iter()
        .map(|&(_, p)| (p, base.toggles_to(&dp.evaluate_raw(w as i64, a as i64, p.get() as i64)) as f64))
        .collect())
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, vx) = mean_var(&rx);
    let (my, vy) = mean_var(&ry);
    let cov = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / rx.len() as f64;
    cov / (vx * vy).sqrt()
}

// -- serialization ---------------------------------------------------------

pub const STATS_FORMAT: &str = "wselect-stats";
pub const STATS_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsDoc {
    pub format: String,
    pub version: u32,
    pub tool: String,
    pub model_fingerprint: String,
    pub layer_index: usize,
    pub reservoir_size: usize,
    pub total_act_transitions: u64,
    pub total_psum_transitions: u64,
    /// Sparse `(from * 256 + to, count)` list, indices are `value + 128`.
    pub act_hist: Vec<(u32, u64)>,
    /// Sparse `(from * 50 + to, count)` list.
    pub group_pair_hist: Vec<(u32, u64)>,
    pub group_samples: Vec<Vec<i32>>,
    pub group_seen: Vec<u64>,
}

fn sparse(v: &[u64]) -> Vec<(u32, u64)> {
    v.iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i as u32, c))
        .collect()
}

fn dense(list: &[(u32, u64)], len: usize, what: &str) -> Result<Vec<u64>> {
    let mut v = vec![0u64; len];
    for &(i, c) in list {
        let slot = v
            .get_mut(i as usize)
            .ok_or_else(|| Error::schema(what, format!("index {i} out of range")))?;
        *slot += c;
    }
    Ok(v)
}

impl StatsDoc {
    pub fn from_stats(stats: &LayerTransitionStats, model_fingerprint: &str) -> Self {
        StatsDoc {
            format: STATS_FORMAT.into(),
            version: STATS_VERSION,
            tool: crate::TOOL_VERSION.into(),
            model_fingerprint: model_fingerprint.into(),
            layer_index: stats.layer_index,
            reservoir_size: stats.reservoir_size,
            total_act_transitions: stats.total_act_transitions,
            total_psum_transitions: stats.total_psum_transitions,
            act_hist: sparse(&stats.act_hist),
            group_pair_hist: sparse(&stats.group_pair_hist),
            group_samples: stats.group_samples.clone(),
            group_seen: stats.group_seen.clone(),
        }
    }

    pub fn into_stats(self) -> Result<LayerTransitionStats> {
        if self.format != STATS_FORMAT || self.version != STATS_VERSION {
            return Err(Error::schema("format", format!("expected {STATS_FORMAT} v{STATS_VERSION}")));
        }
        if self.group_samples.len() != GROUP_COUNT || self.group_seen.len() != GROUP_COUNT {
            return Err(Error::schema("group_samples", "expected 50 groups"));
        }
        let stats = LayerTransitionStats {
            layer_index: self.layer_index,
            act_hist: dense(&self.act_hist, ACT_STATES * ACT_STATES, "act_hist")?,
            group_pair_hist: dense(&self.group_pair_hist, GROUP_COUNT * GROUP_COUNT, "group_pair_hist")?,
            group_samples: self.group_samples,
            group_seen: self.group_seen,
            reservoir_size: self.reservoir_size,
            total_act_transitions: self.total_act_transitions,
            total_psum_transitions: self.total_psum_transitions,
        };
        stats.validate()?;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(v: i32) -> PartialSum {
        PartialSum::new(v).unwrap()
    }

    #[test]
    fn msb_examples() {
        assert_eq!(msb_of(ps(0)), 0);
        assert_eq!(msb_of(ps(1)), 1);
        assert_eq!(msb_of(ps(2)), 2);
        assert_eq!(msb_of(ps(3)), 2);
        assert_eq!(msb_of(ps(PSUM_MIN)), 22);
        assert_eq!(msb_of(ps(-1)), 22);
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming_weight(ps(0)), 0);
        assert_eq!(hamming_weight(ps(-1)), 22);
        assert_eq!(hamming_weight(ps(5)), 2);
    }

    #[test]
    fn group_examples() {
        assert_eq!(group_of(ps(0)), GroupId { msb_bin: 0, hw_bin: 0 });
        assert_eq!(group_of(ps(-1)), GroupId { msb_bin: 9, hw_bin: 4 });
        assert_eq!(group_of(ps(100)), GroupId { msb_bin: 3, hw_bin: 0 });
    }

    #[test]
    fn stability_of_constant_groups_hits_floor() {
        // 1 -> group (0,0)? no: 1 has msb 1 -> bin 0, hw 1 -> bin 0; use values in distinct groups
        let s = vec![(ps(0), 1.0), (ps(0), 1.0), (ps(-1), 5.0), (ps(-1), 5.0)];
        let r = stability_ratio(&s).unwrap();
        assert_eq!(r.mean_intra_group_variance, 0.0);
        assert_eq!(r.inter_group_mean_variance, 4.0);
        assert_eq!(r.ratio, 4.0 / EPS_VAR);
    }

    #[test]
    fn stability_of_identical_powers_is_zero() {
        let s = vec![(ps(0), 3.0), (ps(7), 3.0), (ps(-1), 3.0), (ps(-9), 3.0)];
        assert_eq!(stability_ratio(&s).unwrap().ratio, 0.0);
    }

    #[test]
    fn stability_needs_two_groups() {
        assert!(matches!(stability_ratio(&[(ps(0), 1.0)]), Err(Error::TooFewGroups(1))));
    }

    #[test]
    fn degenerate_chain_gives_constant_trace() {
        let mut st = LayerTransitionStats::new(0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        st.record_act(3, 3);
        st.record_psum_pair(40, 40);
        st.observe_psum(40, &mut rng);
        let t = sample_trace(&st, 50, 9).unwrap();
        assert!(t.iter().all(|&(a, p)| a.0 == 3 && p.get() == 40));
    }

    #[test]
    fn empty_stats_rejected() {
        let st = LayerTransitionStats::new(0, 4);
        assert!(matches!(sample_trace(&st, 10, 1), Err(Error::EmptyStats(_))));
    }

    #[test]
    fn spearman_of_monotone_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[2.0, 4.0, 8.0, 16.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
