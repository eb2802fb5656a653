//! The MAC datapath against a separately written gate-level model built
//! from AND gates and full adders, and against plain integer arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wselect::mac_sim::{evaluate_datapath, MacDatapath, MacGeometry, PartialSum, QuantActivation, QuantWeight};

/// Net values of an `n x n -> acc` MAC, in the datapath's net order.
struct Gates {
    nets: Vec<bool>,
    product: i64,
    psum_out: i64,
}

fn bits_of(v: i64, width: u32) -> Vec<bool> {
    (0..width).map(|i| (v >> i) & 1 == 1).collect()
}

fn value_of(bits: &[bool]) -> i64 {
    let raw: i64 = bits.iter().enumerate().map(|(i, &b)| (b as i64) << i).sum();
    let w = bits.len() as u32;
    if bits[bits.len() - 1] {
        raw - (1i64 << w)
    } else {
        raw
    }
}

fn full_adder(a: bool, b: bool, c: bool) -> (bool, bool) {
    (a ^ b ^ c, (a & b) | (a & c) | (b & c))
}

/// Ripple adder from full adders: (sum bits, carry-out bits).
fn ripple(x: &[bool], y: &[bool], cin: bool) -> (Vec<bool>, Vec<bool>) {
    let mut c = cin;
    let mut sum = Vec::with_capacity(x.len());
    let mut carry = Vec::with_capacity(x.len());
    for (&a, &b) in x.iter().zip(y) {
        let (s, co) = full_adder(a, b, c);
        sum.push(s);
        carry.push(co);
        c = co;
    }
    (sum, carry)
}

fn gates(n: u32, acc: u32, w: i64, a: i64, psum: i64) -> Gates {
    let pw = 2 * n;
    let mut nets = Vec::new();
    let a_reg = bits_of(a, n);
    let w_reg = bits_of(w, n);
    nets.extend(&a_reg);
    nets.extend(&w_reg);
    // a sign-extended to the product width, shifted per row
    let a_ext = bits_of(a, pw);
    let rows: Vec<Vec<bool>> = (0..n as usize)
        .map(|i| {
            (0..pw as usize)
                .map(|j| w_reg[i] & (j >= i && a_ext[j - i]))
                .collect()
        })
        .collect();
    for r in &rows {
        nets.extend(r);
    }
    let mut running = rows[0].clone();
    for (i, row) in rows.iter().enumerate().skip(1) {
        let (operand, cin) = if i == n as usize - 1 {
            if w_reg[i] {
                (row.iter().map(|&b| !b).collect(), true)
            } else {
                (vec![false; pw as usize], false)
            }
        } else {
            (row.clone(), false)
        };
        let (s, c) = ripple(&running, &operand, cin);
        nets.extend(&s);
        nets.extend(&c);
        running = s;
    }
    nets.extend(&running);
    let product = value_of(&running);
    let p_ext = bits_of(product, acc);
    let (s, c) = ripple(&bits_of(psum, acc), &p_ext, false);
    nets.extend(&s);
    nets.extend(&c);
    let lo = -(1i64 << (acc - 1));
    let hi = (1i64 << (acc - 1)) - 1;
    let out = (psum + product).clamp(lo, hi);
    nets.extend(bits_of(out, acc));
    Gates {
        nets,
        product,
        psum_out: out,
    }
}

fn check(dp: &MacDatapath, n: u32, acc: u32, w: i64, a: i64, psum: i64) {
    let s = dp.evaluate_raw(w, a, psum);
    let g = gates(n, acc, w, a, psum);
    assert_eq!(s.net_count(), g.nets.len());
    for (i, &b) in g.nets.iter().enumerate() {
        assert_eq!(s.bit(i), b, "net {i} differs at w={w} a={a} psum={psum}");
    }
    // integer semantics
    assert_eq!(g.product, w * a);
    assert_eq!(s.product() as i64, w * a);
    let exact = psum + w * a;
    let lo = -(1i64 << (acc - 1));
    let hi = (1i64 << (acc - 1)) - 1;
    assert_eq!(s.psum_out() as i64, exact.clamp(lo, hi));
    assert_eq!(g.psum_out, exact.clamp(lo, hi));
    assert_eq!(s.overflow(), exact < lo || exact > hi);
}

#[test]
fn exhaustive_four_bit_datapath() {
    let dp = MacDatapath::new(MacGeometry::new(4, 10).unwrap());
    for w in -8..8 {
        for a in -8..8 {
            for psum in -512..512 {
                check(&dp, 4, 10, w, a, psum);
            }
        }
    }
}

#[test]
fn random_eight_bit_datapath() {
    let dp = MacDatapath::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11);
    for i in 0..100_000 {
        let w = rng.random_range(-128i64..=127);
        let a = rng.random_range(-128i64..=127);
        // a share of cases sit next to the rails to exercise saturation
        let psum = if i % 8 == 0 {
            let edge = if rng.random() { (1i64 << 21) - 1 } else { -(1i64 << 21) };
            (edge - rng.random_range(-20000i64..=20000)).clamp(-(1 << 21), (1 << 21) - 1)
        } else {
            rng.random_range(-(1i64 << 21)..(1i64 << 21))
        };
        check(&dp, 8, 22, w, a, psum);
    }
}

#[test]
fn net_count_of_default_mac() {
    assert_eq!(MacGeometry::default().net_count(), 450);
}

#[test]
fn zero_weight_isolates_activation_register() {
    let s0 = evaluate_datapath(QuantWeight(0), QuantActivation(0), PartialSum::ZERO);
    let s1 = evaluate_datapath(QuantWeight(0), QuantActivation(127), PartialSum::ZERO);
    assert_eq!(s0.toggles_to(&s1), 7);
}

#[test]
fn unit_weight_step_matches_gate_model_at_both_widths() {
    for (n, acc) in [(4u32, 10u32), (8, 22)] {
        let dp = MacDatapath::new(MacGeometry::new(n, acc).unwrap());
        let before = gates(n, acc, 1, 0, 0);
        let after = gates(n, acc, 1, 1, 1);
        let expected = before.nets.iter().zip(&after.nets).filter(|(x, y)| x != y).count() as u32;
        let got = dp.evaluate_raw(1, 0, 0).toggles_to(&dp.evaluate_raw(1, 1, 1));
        assert_eq!(got, expected, "{n}-bit");
    }
}
