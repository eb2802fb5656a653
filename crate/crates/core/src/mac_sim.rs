//! Structural simulation of one weight-stationary MAC processing element.
//!
//! The datapath is an `N x N` array multiplier (AND-gate partial products,
//! ripple-carry reduction, the sign row subtracted through an inverting
//! row and a carry-in) followed by an `A`-bit saturating ripple-carry
//! accumulator. Every net is kept as one bit in a packed vector so that the
//! switching cost of a cycle is the Hamming distance between consecutive
//! states.
//!
//! The default geometry is 8-bit operands and a 22-bit accumulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OPERAND_BITS: u32 = 8;
pub const ACC_BITS: u32 = 22;
pub const PSUM_MIN: i32 = -(1 << (ACC_BITS - 1));
pub const PSUM_MAX: i32 = (1 << (ACC_BITS - 1)) - 1;

const STATE_WORDS: usize = 8;

/// Signed 8-bit stationary weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuantWeight(pub i8);

/// Signed 8-bit activation streamed through the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuantActivation(pub i8);

/// Signed 22-bit partial sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartialSum(i32);

impl PartialSum {
    pub const ZERO: PartialSum = PartialSum(0);

    /// Fails if `value` does not fit in 22 signed bits.
    pub fn new(value: i32) -> Result<Self> {
        if (PSUM_MIN..=PSUM_MAX).contains(&value) {
            Ok(PartialSum(value))
        } else {
            Err(Error::OutOfRange(format!(
                "partial sum {value} outside 22-bit range"
            )))
        }
    }

    /// Clamps into the 22-bit range.
    pub fn saturating(value: i64) -> Self {
        PartialSum(value.clamp(PSUM_MIN as i64, PSUM_MAX as i64) as i32)
    }

    pub fn get(self) -> i32 {
        self.0
    }

    /// Raw 22-bit two's-complement pattern.
    pub fn bits(self) -> u32 {
        (self.0 as u32) & ((1 << ACC_BITS) - 1)
    }
}

/// Bit widths of a MAC datapath. Product width is `2 * operand_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacGeometry {
    pub operand_bits: u32,
    pub acc_bits: u32,
}

impl Default for MacGeometry {
    fn default() -> Self {
        MacGeometry {
            operand_bits: OPERAND_BITS,
            acc_bits: ACC_BITS,
        }
    }
}

impl MacGeometry {
    pub fn new(operand_bits: u32, acc_bits: u32) -> Result<Self> {
        let g = MacGeometry {
            operand_bits,
            acc_bits,
        };
        if !(2..=8).contains(&operand_bits) || acc_bits < 2 * operand_bits || acc_bits > 31 {
            return Err(Error::InvalidConfig(format!(
                "unsupported MAC geometry {operand_bits}x{operand_bits} -> {acc_bits}"
            )));
        }
        if g.net_count() > STATE_WORDS * 64 {
            return Err(Error::InvalidConfig("MAC geometry too large".into()));
        }
        Ok(g)
    }

    fn product_bits(&self) -> u32 {
        2 * self.operand_bits
    }

    /// Total number of nets tracked by the datapath state.
    pub fn net_count(&self) -> usize {
        let n = self.operand_bits as usize;
        let p = self.product_bits() as usize;
        let a = self.acc_bits as usize;
        // act reg + weight reg + pp matrix + (n-1) reduction adders (sum + carry)
        // + product reg + accumulator adder (sum + carry) + psum reg
        n + n + n * p + (n - 1) * 2 * p + p + 2 * a + a
    }

    pub fn psum_min(&self) -> i64 {
        -(1i64 << (self.acc_bits - 1))
    }

    pub fn psum_max(&self) -> i64 {
        (1i64 << (self.acc_bits - 1)) - 1
    }

    fn operand_min(&self) -> i64 {
        -(1i64 << (self.operand_bits - 1))
    }

    fn operand_max(&self) -> i64 {
        (1i64 << (self.operand_bits - 1)) - 1
    }
}

/// Packed bit vector holding every net of the MAC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MacDatapathState {
    words: [u64; STATE_WORDS],
    len: u16,
    product: i32,
    psum_out: i32,
    overflow: bool,
}

impl MacDatapathState {
    /// All-zeros reset state.
    pub fn reset(geometry: &MacGeometry) -> Self {
        MacDatapathState {
            words: [0; STATE_WORDS],
            len: geometry.net_count() as u16,
            product: 0,
            psum_out: 0,
            overflow: false,
        }
    }

    pub fn net_count(&self) -> usize {
        self.len as usize
    }

    /// Value of the product register as a signed integer.
    pub fn product(&self) -> i32 {
        self.product
    }

    /// Value of the partial-sum output register as a signed integer.
    pub fn psum_out(&self) -> i32 {
        self.psum_out
    }

    /// True if the accumulation saturated.
    pub fn overflow(&self) -> bool {
        self.overflow
    }

    /// Bit `i` of the packed net vector.
    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.net_count());
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    /// Number of nets set to one.
    pub fn ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Hamming distance between two states.
    pub fn toggles_to(&self, other: &MacDatapathState) -> u32 {
        self.words
            .iter()
            .zip(other.words.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// Toggle count of one cycle, in energy-proxy units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct ToggleEnergy {
    pub toggles: u32,
}

struct BitWriter {
    words: [u64; STATE_WORDS],
    pos: usize,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            words: [0; STATE_WORDS],
            pos: 0,
        }
    }

    #[inline]
    fn push(&mut self, value: u64, width: u32) {
        let width = width as usize;
        let value = value & mask(width as u32);
        let word = self.pos / 64;
        let offset = self.pos % 64;
        self.words[word] |= value << offset;
        if offset + width > 64 {
            self.words[word + 1] |= value >> (64 - offset);
        }
        self.pos += width;
    }
}

#[inline]
fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Ripple-carry adder of `width` bits: returns (sum bits, carry-out bits).
///
/// Bit `i` of the carry vector is the carry out of full adder `i`.
#[inline]
fn ripple_add(x: u64, y: u64, carry_in: u64, width: u32) -> (u64, u64) {
    let m = mask(width);
    let x = x & m;
    let y = y & m;
    let full = x + y + carry_in;
    let carry_into = full ^ x ^ y;
    (full & m, (carry_into >> 1) & m)
}

/// A MAC datapath of a given geometry.
#[derive(Debug, Clone, Copy, Default)]
pub struct MacDatapath {
    geometry: MacGeometry,
}

impl MacDatapath {
    pub fn new(geometry: MacGeometry) -> Self {
        MacDatapath { geometry }
    }

    pub fn geometry(&self) -> &MacGeometry {
        &self.geometry
    }

    pub fn reset_state(&self) -> MacDatapathState {
        MacDatapathState::reset(&self.geometry)
    }

    /// Net values for the inputs `(w, a, psum_in)`. Operands and partial sum
    /// are taken as signed integers of the datapath's widths.
    pub fn evaluate_raw(&self, w: i64, a: i64, psum_in: i64) -> MacDatapathState {
        let g = &self.geometry;
        debug_assert!((g.operand_min()..=g.operand_max()).contains(&w));
        debug_assert!((g.operand_min()..=g.operand_max()).contains(&a));
        debug_assert!((g.psum_min()..=g.psum_max()).contains(&psum_in));
        let n = g.operand_bits;
        let pw = g.product_bits();
        let aw = g.acc_bits;
        let pmask = mask(pw);

        let mut out = BitWriter::new();
        let a_bits = (a as u64) & mask(n);
        let w_bits = (w as u64) & mask(n);
        out.push(a_bits, n);
        out.push(w_bits, n);

        // partial-product rows: row i = w_i AND (sign-extended a << i)
        let a_ext = (a as u64) & pmask;
        let mut rows = [0u64; 8];
        for (i, row) in rows.iter_mut().enumerate().take(n as usize) {
            if (w_bits >> i) & 1 == 1 {
                *row = (a_ext << i) & pmask;
            }
            out.push(*row, pw);
        }

        // reduction chain; the sign row is subtracted (inverted + carry-in)
        let sign = (w_bits >> (n - 1)) & 1;
        let mut acc = rows[0];
        for (i, &row) in rows.iter().enumerate().take(n as usize).skip(1) {
            let (operand, cin) = if i as u32 == n - 1 {
                if sign == 1 {
                    (!row & pmask, 1)
                } else {
                    (0, 0)
                }
            } else {
                (row, 0)
            };
            let (sum, carries) = ripple_add(acc, operand, cin, pw);
            out.push(sum, pw);
            out.push(carries, pw);
            acc = sum;
        }
        let product_bits = acc;
        out.push(product_bits, pw);
        let product = sign_extend(product_bits, pw);

        // accumulator: psum_in + sign_extend(product)
        let p_ext = (product as u64) & mask(aw);
        let psum_bits = (psum_in as u64) & mask(aw);
        let (sum, carries) = ripple_add(psum_bits, p_ext, 0, aw);
        out.push(sum, aw);
        out.push(carries, aw);

        let exact = psum_in + product;
        let overflow = exact < g.psum_min() || exact > g.psum_max();
        let result = exact.clamp(g.psum_min(), g.psum_max());
        out.push(result as u64, aw);

        debug_assert_eq!(out.pos, g.net_count());
        MacDatapathState {
            words: out.words,
            len: out.pos as u16,
            product: product as i32,
            psum_out: result as i32,
            overflow,
        }
    }

    /// One clock cycle: the next state and the number of nets that toggled.
    pub fn cycle(
        &self,
        prev: &MacDatapathState,
        w: i64,
        a: i64,
        psum_in: i64,
    ) -> (MacDatapathState, ToggleEnergy) {
        let next = self.evaluate_raw(w, a, psum_in);
        let toggles = prev.toggles_to(&next);
        (next, ToggleEnergy { toggles })
    }
}

fn sign_extend(bits: u64, width: u32) -> i64 {
    let shift = 64 - width;
    ((bits << shift) as i64) >> shift
}

/// State of the default 8x8 -> 22-bit MAC for `(w, a, psum_in)`.
pub fn evaluate_datapath(w: QuantWeight, a: QuantActivation, psum_in: PartialSum) -> MacDatapathState {
    MacDatapath::default().evaluate_raw(w.0 as i64, a.0 as i64, psum_in.0 as i64)
}

/// One cycle of the default MAC.
pub fn mac_cycle(
    prev: &MacDatapathState,
    w: QuantWeight,
    a: QuantActivation,
    psum_in: PartialSum,
) -> (MacDatapathState, ToggleEnergy) {
    MacDatapath::default().cycle(prev, w.0 as i64, a.0 as i64, psum_in.0 as i64)
}

/// Mean toggles per cycle with `w` held stationary over `trace`.
///
/// The first entry transitions from the all-zeros reset state; the total
/// is divided by `trace.len() - 1`.
pub fn avg_power(w: QuantWeight, trace: &[(QuantActivation, PartialSum)]) -> Result<f64> {
    if trace.len() < 2 {
        return Err(Error::TraceTooShort(trace.len()));
    }
    let dp = MacDatapath::default();
    let mut state = dp.reset_state();
    let mut total: u64 = 0;
    for &(a, p) in trace {
        let (next, e) = dp.cycle(&state, w.0 as i64, a.0 as i64, p.0 as i64);
        total += e.toggles as u64;
        state = next;
    }
    Ok(total as f64 / (trace.len() - 1) as f64)
}
