//! Integer kernels: im2col, 22-bit saturating convolution (direct, tiled
//! and fast paths), pooling and requantization.

use crate::error::{Error, Result};
use crate::mac_sim::{PSUM_MAX, PSUM_MIN};

/// Dense `c x h x w` tensor of signed 8-bit values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<i8>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            c,
            h,
            w,
            data: vec![0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "tensor {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(Tensor3 { c, h, w, data })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> i8 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Row-major matrix of 8-bit values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix8 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
}

impl Matrix8 {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        if self.k == 0 || self.stride == 0 {
            return Err(Error::Geometry("kernel and stride must be >= 1".into()));
        }
        let ph = self.h + 2 * self.pad;
        let pw = self.w + 2 * self.pad;
        if ph < self.k || pw < self.k {
            return Err(Error::Geometry(format!(
                "kernel {} larger than padded input {}x{}",
                self.k, ph, pw
            )));
        }
        Ok(((ph - self.k) / self.stride + 1, (pw - self.k) / self.stride + 1))
    }

    pub fn kdim(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unrolls receptive fields into columns: `c*k*k` rows, one column per
/// output position. Rows are channel-major then row-major within the
/// window; out-of-bounds taps read zero.
pub fn im2col(input: &Tensor3, k: usize, stride: usize, pad: usize) -> Result<Matrix8> {
    let g = ConvGeometry {
        c_in: input.c,
        h: input.h,
        w: input.w,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.output_hw()?;
    let n = ho * wo;
    let rows = g.kdim();
    let mut data = vec![0i8; rows * n];
    for c in 0..input.c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst = &mut data[r * n..(r + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = input.at(c, iy as usize, ix as usize);
                    }
                }
            }
        }
    }
    Ok(Matrix8 {
        rows,
        cols: n,
        data,
    })
}

/// 22-bit saturating accumulate.
#[inline]
pub fn sat_add(acc: i32, v: i32) -> (i32, bool) {
    let s = acc + v;
    if s > PSUM_MAX {
        (PSUM_MAX, true)
    } else if s < PSUM_MIN {
        (PSUM_MIN, true)
    } else {
        (s, false)
    }
}

/// Round half away from zero, clamp to 8 bits.
#[inline]
pub fn requantize(v: i64, scale: f64) -> i8 {
    let r = (v as f64 * scale).round();
    r.clamp(-128.0, 127.0) as i8
}

/// Accumulators of a lowered matmul: `m x n` partial sums plus the number
/// of outputs whose accumulation saturated at least once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accumulators {
    pub m: usize,
    pub n: usize,
    pub values: Vec<i32>,
    pub saturated: u64,
}

/// Reference convolution: nested loops over the receptive field in
/// im2col order with per-step saturation.
pub fn conv_accumulate_direct(
    weights: &[i8],
    c_out: usize,
    input: &Tensor3,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Accumulators> {
    let g = ConvGeometry {
        c_in: input.c,
        h: input.h,
        w: input.w,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.output_hw()?;
    check_weights(weights, c_out, g.kdim())?;
    let n = ho * wo;
    let mut values = vec![0i32; c_out * n];
    let mut saturated = 0;
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0i32;
                let mut sat = false;
                for ci in 0..input.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize {
                                continue;
                            }
                            let w = weights[((co * input.c + ci) * k + ky) * k + kx] as i32;
                            let x = input.at(ci, iy as usize, ix as usize) as i32;
                            let (a, s) = sat_add(acc, w * x);
                            acc = a;
                            sat |= s;
                        }
                    }
                }
                values[co * n + oy * wo + ox] = acc;
                saturated += sat as u64;
            }
        }
    }
    Ok(Accumulators {
        m: c_out,
        n,
        values,
        saturated,
    })
}

/// Weight-stationary tiled matmul: `W (m x kdim) * X (kdim x n)` split into
/// `dim x dim x dim` tiles. Partial sums flow down the inner dimension and
/// are chained from one inner tile to the next.
pub fn matmul_tiled(w_mat: &Matrix8, x_col: &Matrix8, dim: usize) -> Result<Accumulators> {
    if w_mat.cols != x_col.rows {
        return Err(Error::Shape(format!(
            "inner dims differ: {} vs {}",
            w_mat.cols, x_col.rows
        )));
    }
    if dim == 0 {
        return Err(Error::Geometry("array dim must be >= 1".into()));
    }
    let (m, kdim, n) = (w_mat.rows, w_mat.cols, x_col.cols);
    let mut values = vec![0i32; m * n];
    let mut sat_flags = vec![false; m * n];
    for m0 in (0..m).step_by(dim) {
        let m1 = (m0 + dim).min(m);
        for n0 in (0..n).step_by(dim) {
            let n1 = (n0 + dim).min(n);
            for k0 in (0..kdim).step_by(dim) {
                let k1 = (k0 + dim).min(kdim);
                // PE (k, mm) holds w_mat[mm][k]; column nn streams down the array
                for mm in m0..m1 {
                    for nn in n0..n1 {
                        let mut psum = values[mm * n + nn];
                        let mut sat = false;
                        for kk in k0..k1 {
                            let (a, s) =
                                sat_add(psum, w_mat.at(mm, kk) as i32 * x_col.at(kk, nn) as i32);
                            psum = a;
                            sat |= s;
                        }
                        values[mm * n + nn] = psum;
                        sat_flags[mm * n + nn] |= sat;
                    }
                }
            }
        }
    }
    Ok(Accumulators {
        m,
        n,
        values,
        saturated: sat_flags.iter().filter(|&&s| s).count() as u64,
    })
}

/// Tiled convolution through im2col and `matmul_tiled`.
pub fn conv_accumulate_tiled(
    weights: &[i8],
    c_out: usize,
    input: &Tensor3,
    k: usize,
    stride: usize,
    pad: usize,
    dim: usize,
) -> Result<Accumulators> {
    let x_col = im2col(input, k, stride, pad)?;
    check_weights(weights, c_out, x_col.rows)?;
    let w_mat = Matrix8 {
        rows: c_out,
        cols: x_col.rows,
        data: weights.to_vec(),
    };
    matmul_tiled(&w_mat, &x_col, dim)
}

const COL_BLOCK: usize = 512;

// an 8x8-bit product always fits in i16
#[inline(always)]
fn axpy_generic(out: &mut [i32], x: &[i8], w: i8) {
    let w = w as i16;
    for (o, &x) in out.iter_mut().zip(x) {
        *o += (w * x as i16) as i32;
    }
}

#[inline(always)]
fn axpy_abs_generic(out: &mut [i32], x: &[i8], w: i8) {
    let w = w.unsigned_abs() as u16;
    for (o, &x) in out.iter_mut().zip(x) {
        *o += (w * x.unsigned_abs() as u16) as i32;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2(out: &mut [i32], x: &[i8], w: i8) {
    axpy_generic(out, x, w)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_abs_avx2(out: &mut [i32], x: &[i8], w: i8) {
    axpy_abs_generic(out, x, w)
}

/// `out += w * x`, with an AVX2 build of the same loop when available.
fn axpy(out: &mut [i32], x: &[i8], w: i8) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2
        return unsafe { axpy_avx2(out, x, w) };
    }
    axpy_generic(out, x, w)
}

/// `out += |w| * |x|`.
fn axpy_abs(out: &mut [i32], x: &[i8], w: i8) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2
        return unsafe { axpy_abs_avx2(out, x, w) };
    }
    axpy_abs_generic(out, x, w)
}

/// Fast matmul with the same result as the sequential saturating order.
///
/// A row whose L1 norm times the largest activation magnitude fits in the
/// accumulator can never saturate, so plain integer sums are exact there.
/// Other rows also accumulate `sum |w*x|` per column; only columns where
/// that bound exceeds the accumulator range are redone sequentially.
pub fn matmul_fast(weights: &[i8], m: usize, x_col: &Matrix8) -> Accumulators {
    let (kdim, n) = (x_col.rows, x_col.cols);
    debug_assert_eq!(weights.len(), m * kdim);
    let hi = x_col.data.iter().copied().max().unwrap_or(0) as i64;
    let lo = x_col.data.iter().copied().min().unwrap_or(0) as i64;
    let max_abs_x = hi.max(-lo);
    let safe: Vec<bool> = (0..m)
        .map(|co| {
            let l1: i64 = weights[co * kdim..(co + 1) * kdim].iter().map(|&w| (w as i64).abs()).sum();
            l1 * max_abs_x <= PSUM_MAX as i64
        })
        .collect();
    let mut values = vec![0i32; m * n];
    let mut bound = vec![0i32; if safe.iter().all(|&s| s) { 0 } else { m * n }];
    // column blocks of the lowered input are reused by every output row
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for co in 0..m {
            let row = &weights[co * kdim..(co + 1) * kdim];
            let out = &mut values[co * n + j0..co * n + j1];
            for (kk, &w) in row.iter().enumerate() {
                if w == 0 {
                    continue;
                }
                let xr = &x_col.data[kk * n + j0..kk * n + j1];
                axpy(out, xr, w);
                if !safe[co] {
                    axpy_abs(&mut bound[co * n + j0..co * n + j1], xr, w);
                }
            }
        }
    }
    let mut saturated = 0;
    for co in (0..m).filter(|&co| !safe[co]) {
        let row = &weights[co * kdim..(co + 1) * kdim];
        for j in 0..n {
            if bound[co * n + j] <= PSUM_MAX {
                continue;
            }
            let mut acc = 0i32;
            let mut sat = false;
            for (kk, &w) in row.iter().enumerate() {
                let (a, s) = sat_add(acc, w as i32 * x_col.data[kk * n + j] as i32);
                acc = a;
                sat |= s;
            }
            values[co * n + j] = acc;
            saturated += sat as u64;
        }
    }
    Accumulators {
        m,
        n,
        values,
        saturated,
    }
}

fn check_weights(weights: &[i8], c_out: usize, kdim: usize) -> Result<()> {
    if weights.len() != c_out * kdim {
        return Err(Error::Shape(format!(
            "weights have {} values, expected {}x{}",
            weights.len(),
            c_out,
            kdim
        )));
    }
    Ok(())
}

/// Adds bias and requantizes accumulators into an output feature map.
pub fn requantize_map(acc: &Accumulators, bias: &[i32], scale: f64, ho: usize, wo: usize) -> Tensor3 {
    let mut data = Vec::with_capacity(acc.values.len());
    for co in 0..acc.m {
        let b = bias[co] as i64;
        for &v in &acc.values[co * acc.n..(co + 1) * acc.n] {
            data.push(requantize(v as i64 + b, scale));
        }
    }
    Tensor3 {
        c: acc.m,
        h: ho,
        w: wo,
        data,
    }
}

pub fn relu(t: &mut Tensor3) {
    for v in &mut t.data {
        if *v < 0 {
            *v = 0;
        }
    }
}

pub fn maxpool(t: &Tensor3, k: usize, stride: usize) -> Result<Tensor3> {
    if k == 0 || stride == 0 || t.h < k || t.w < k {
        return Err(Error::Geometry(format!(
            "maxpool k={k} stride={stride} on {}x{}",
            t.h, t.w
        )));
    }
    let ho = (t.h - k) / stride + 1;
    let wo = (t.w - k) / stride + 1;
    let mut out = Tensor3::zeros(t.c, ho, wo);
    for c in 0..t.c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = i8::MIN;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(t.at(c, oy * stride + ky, ox * stride + kx));
                    }
                }
                out.data[(c * ho + oy) * wo + ox] = m;
            }
        }
    }
    Ok(out)
}
