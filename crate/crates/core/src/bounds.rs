//! Accumulator bit-width lower bounds and l1 budgets.
//!
//! Two closed forms are provided: one from the data types alone and a
//! tighter one from the frozen integer weights. Both reduce to the same
//! integer test, `magnitude <= 2^(P-1) - 1`, which is how `min_bits` is
//! computed. The real-valued bound is reported alongside for plotting.
//!
//! [`exhaustive_min_bits`] enumerates inputs and serves as the oracle the
//! closed forms are validated against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{DType, IntTensor};

/// Dot-product shape: length `k`, input and weight data types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundQuery {
    pub k: usize,
    pub input: DType,
    pub weight: DType,
}

impl BoundQuery {
    pub fn new(k: usize, input: DType, weight: DType) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("dot-product length K must be at least 1".into()));
        }
        input.validate()?;
        weight.validate()?;
        Ok(Self { k, input, weight })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    /// Right-hand side of the real-valued inequality `P >= x + phi(x) + 1`.
    pub real_bound: f64,
    /// Smallest integer accumulator width satisfying the bound.
    pub min_bits: u32,
}

/// `log2(1 + 2^-a)`.
pub fn phi(a: f64) -> f64 {
    (-a).exp2().ln_1p() / std::f64::consts::LN_2
}

/// Smallest `P >= 1` with `magnitude <= 2^(P-1) - 1`.
pub fn bits_for_magnitude(magnitude: u128) -> u32 {
    if magnitude == 0 {
        1
    } else {
        (128 - magnitude.leading_zeros()) + 1
    }
}

fn shifted(base: u128, shift: u32) -> Option<u128> {
    if base == 0 {
        return Some(0);
    }
    if shift >= base.leading_zeros() {
        None
    } else {
        Some(base << shift)
    }
}

fn real_bound(x: f64) -> f64 {
    x + phi(x) + 1.0
}

/// Lower bound implied by the data types: worst-case `|x_i| |w_i|` on every
/// one of the `K` terms.
pub fn datatype_bound(q: &BoundQuery) -> BoundResult {
    let s = q.input.signed_indicator();
    let alpha = (q.k as f64).log2() + q.input.bits as f64 + q.weight.bits as f64 - 1.0 - s as f64;
    let shift = q.input.bits + q.weight.bits - 1 - s as u32;
    let min_bits = match shifted(q.k as u128, shift) {
        Some(mag) => bits_for_magnitude(mag),
        None => real_bound(alpha).ceil() as u32,
    };
    BoundResult { real_bound: real_bound(alpha), min_bits }
}

fn l1_of_vector(w: &IntTensor) -> Result<u128> {
    if w.shape().len() != 1 || w.is_empty() {
        return Err(Error::Shape { expected: "non-empty 1-D weight vector".into(), got: format!("{:?}", w.shape()) });
    }
    Ok(w.l1_norm() as u128)
}

/// Lower bound implied by the actual integer weights of one channel.
///
/// An all-zero channel cannot overflow anything and reports `min_bits = 1`
/// with a real bound of negative infinity.
pub fn weight_bound(w: &IntTensor, input: DType) -> Result<BoundResult> {
    let l1 = l1_of_vector(w)?;
    Ok(weight_bound_from_l1(l1, input))
}

pub fn weight_bound_from_l1(l1: u128, input: DType) -> BoundResult {
    if l1 == 0 {
        return BoundResult { real_bound: f64::NEG_INFINITY, min_bits: 1 };
    }
    let s = input.signed_indicator();
    let beta = (l1 as f64).log2() + input.bits as f64 - s as f64;
    let min_bits = match shifted(l1, input.bits - s as u32) {
        Some(mag) => bits_for_magnitude(mag),
        None => real_bound(beta).ceil() as u32,
    };
    BoundResult { real_bound: real_bound(beta), min_bits }
}

/// Largest per-channel l1 norm that provably fits a `p`-bit signed
/// accumulator: `(2^(P-1) - 1) * 2^(signed - N)`.
pub fn l1_budget(p: u32, input: DType) -> f64 {
    assert!(p >= 1, "accumulator width must be positive");
    let top = (2f64).powi(p as i32 - 1) - 1.0;
    top * (2f64).powi(input.signed_indicator() - input.bits as i32)
}

/// `floor(l1_budget(p, input))`, computed in integers.
pub fn l1_budget_floor(p: u32, input: DType) -> u128 {
    assert!((1..=127).contains(&p));
    let top = (1u128 << (p - 1)) - 1;
    let shift = input.bits - input.signed_indicator() as u32;
    if shift >= 128 {
        0
    } else {
        top >> shift
    }
}

/// Extreme prefix sums over all inputs in `input`'s range, accumulating
/// in index order. Returns `(max, min)`, both including the empty prefix 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixExtremes {
    pub max: i128,
    pub min: i128,
}

impl PrefixExtremes {
    pub fn min_bits(&self) -> u32 {
        let mut p = 1;
        while !(self.max < (1i128 << (p - 1)) && self.min >= -(1i128 << (p - 1))) {
            p += 1;
        }
        p
    }
}

const EXHAUSTIVE_MAX_K: usize = 24;
const EXHAUSTIVE_MAX_BITS: u32 = 16;
/// Beyond this many input vectors the per-coordinate route is used.
const FULL_ENUMERATION_LIMIT: u128 = 1 << 20;

/// Exact extreme prefix sums of `w . x` over every `x` in the input range.
///
/// Small instances walk every input vector. Larger ones enumerate each
/// coordinate's range independently: the input set is a Cartesian product,
/// so the extreme of every prefix sum is the sum of per-term extremes. Both
/// routes are exact.
pub fn exhaustive_extremes(w: &[i64], input: DType) -> Result<PrefixExtremes> {
    if w.len() > EXHAUSTIVE_MAX_K || input.bits > EXHAUSTIVE_MAX_BITS {
        return Err(Error::SearchBudget { k: w.len(), bits: input.bits });
    }
    let levels = 1u128 << input.bits;
    let vectors = levels.checked_pow(w.len() as u32);
    match vectors {
        Some(v) if v <= FULL_ENUMERATION_LIMIT => Ok(enumerate_all(w, input)),
        _ => Ok(enumerate_per_coordinate(w, input)),
    }
}

fn enumerate_all(w: &[i64], input: DType) -> PrefixExtremes {
    let (lo, hi) = (input.min(), input.max());
    let mut x = vec![lo; w.len()];
    let mut out = PrefixExtremes { max: 0, min: 0 };
    loop {
        let mut acc = 0i128;
        for (xi, wi) in x.iter().zip(w) {
            acc += *xi as i128 * *wi as i128;
            out.max = out.max.max(acc);
            out.min = out.min.min(acc);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == x.len() {
                return out;
            }
            if x[i] < hi {
                x[i] += 1;
                break;
            }
            x[i] = lo;
            i += 1;
        }
    }
}

fn enumerate_per_coordinate(w: &[i64], input: DType) -> PrefixExtremes {
    let mut out = PrefixExtremes { max: 0, min: 0 };
    let (mut hi_sum, mut lo_sum) = (0i128, 0i128);
    for &wi in w {
        let (mut term_max, mut term_min) = (i128::MIN, i128::MAX);
        for x in input.min()..=input.max() {
            let prod = x as i128 * wi as i128;
            term_max = term_max.max(prod);
            term_min = term_min.min(prod);
        }
        hi_sum += term_max;
        lo_sum += term_min;
        out.max = out.max.max(hi_sum);
        out.min = out.min.min(lo_sum);
    }
    out
}

/// Smallest accumulator width for which no input in range pushes any
/// running partial sum outside `[-2^(P-1), 2^(P-1) - 1]`.
pub fn exhaustive_min_bits(w: &IntTensor, input: DType) -> Result<u32> {
    l1_of_vector(w)?;
    Ok(exhaustive_extremes(w.data(), input)?.min_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn u(bits: u32) -> DType {
        DType::unsigned(bits).unwrap()
    }
    fn s(bits: u32) -> DType {
        DType::signed(bits).unwrap()
    }
    fn vec_i(w: &[i64], bits: u32) -> IntTensor {
        IntTensor::from_vec(w.to_vec(), s(bits)).unwrap()
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.0), 1.0);
        assert!((phi(20.0) - 1.375860550841138e-6).abs() < 1e-15);
        assert!((phi(1.0) - 1.5f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn datatype_examples() {
        let r = datatype_bound(&BoundQuery::new(32, u(8), s(8)).unwrap());
        assert_eq!(r.min_bits, 22);
        assert!((r.real_bound - (21.0 + phi(20.0))).abs() < 1e-12);
        assert_eq!(bits_for_magnitude(32 << 15), 22);

        let r = datatype_bound(&BoundQuery::new(1, s(1), s(1)).unwrap());
        assert_eq!((r.real_bound, r.min_bits), (2.0, 2));

        let r = datatype_bound(&BoundQuery::new(128, u(4), s(5)).unwrap());
        assert_eq!(r.min_bits, 17);
    }

    #[test]
    fn weight_examples() {
        let r = weight_bound(&vec_i(&[1, -2, 3], 4), u(4)).unwrap();
        assert!((r.real_bound - (6f64.log2() + 4.0 + phi(6f64.log2() + 4.0) + 1.0)).abs() < 1e-12);
        assert_eq!(r.min_bits, 8);
        assert_eq!(weight_bound(&vec_i(&[-1], 2), s(1)).unwrap().min_bits, 2);
        assert_eq!(weight_bound(&vec_i(&[0, 0, 0], 2), u(7)).unwrap().min_bits, 1);
        assert!(weight_bound(&IntTensor::zeros(vec![2, 2], s(4)).unwrap(), u(4)).is_err());
    }

    #[test]
    fn budget_examples() {
        assert!((l1_budget(16, u(8)) - 32767.0 / 256.0).abs() < 1e-12);
        assert_eq!(l1_budget(2, s(1)), 1.0);
        assert_eq!(l1_budget(8, u(4)), 7.9375);
        assert_eq!(l1_budget_floor(16, u(8)), 127);
        assert_eq!(l1_budget_floor(8, u(4)), 7);
    }

    fn brute(w: &[i64], input: DType) -> (i128, i128) {
        // independent reference: recursive walk over every input vector
        fn go(w: &[i64], input: DType, acc: i128, ext: &mut (i128, i128)) {
            if let Some((&head, rest)) = w.split_first() {
                for x in input.min()..=input.max() {
                    let a = acc + x as i128 * head as i128;
                    ext.0 = ext.0.max(a);
                    ext.1 = ext.1.min(a);
                    go(rest, input, a, ext);
                }
            }
        }
        let mut ext = (0, 0);
        go(w, input, 0, &mut ext);
        ext
    }

    #[test]
    fn exhaustive_examples() {
        assert_eq!(brute(&[3, -2], u(4)), (45, -30));
        assert_eq!(exhaustive_min_bits(&vec_i(&[3, -2], 4), u(4)).unwrap(), 7);
        assert_eq!(exhaustive_min_bits(&vec_i(&[1], 2), u(1)).unwrap(), 2);
        // peak is 1*15 + 3*15 = 60, not 6*15: unsigned inputs cannot flip the -2 term
        assert_eq!(brute(&[1, -2, 3], u(4)), (60, -30));
        assert_eq!(exhaustive_min_bits(&vec_i(&[1, -2, 3], 4), u(4)).unwrap(), 7);
    }

    #[test]
    fn exhaustive_budget_guard() {
        let w = vec_i(&[1; 25], 2);
        assert!(matches!(exhaustive_min_bits(&w, u(2)), Err(Error::SearchBudget { .. })));
    }

    #[test]
    fn bits_for_magnitude_matches_definition() {
        for mag in 0u128..5000 {
            let p = bits_for_magnitude(mag);
            assert!(mag < (1 << (p - 1)));
            assert!(p == 1 || mag > (1 << (p - 2)) - 1);
        }
    }

    proptest! {
        #[test]
        fn both_routes_agree_with_brute_force(
            w in prop::collection::vec(-8i64..8, 1..5),
            bits in 1u32..4,
            signed in any::<bool>(),
        ) {
            let input = DType::new(bits, signed).unwrap();
            let (max, min) = brute(&w, input);
            prop_assert_eq!(enumerate_all(&w, input), PrefixExtremes { max, min });
            prop_assert_eq!(enumerate_per_coordinate(&w, input), PrefixExtremes { max, min });
        }

        #[test]
        fn sandwich(
            w in prop::collection::vec(-16i64..16, 1..10),
            n in 1u32..6,
            signed in any::<bool>(),
        ) {
            let input = DType::new(n, signed).unwrap();
            let wt = vec_i(&w, 5);
            let exact = exhaustive_min_bits(&wt, input).unwrap();
            let wb = weight_bound(&wt, input).unwrap().min_bits;
            let db = datatype_bound(&BoundQuery::new(w.len(), input, s(5)).unwrap()).min_bits;
            prop_assert!(exact <= wb && wb <= db, "exact={} weight={} datatype={}", exact, wb, db);
        }

        #[test]
        fn min_bits_is_ceiling_of_real_bound(
            k in 1usize..4096, n in 1u32..12, m in 1u32..12, signed in any::<bool>(),
        ) {
            let r = datatype_bound(&BoundQuery::new(k, DType::new(n, signed).unwrap(), s(m)).unwrap());
            let c = r.real_bound.ceil();
            // skip bounds within rounding noise of an integer
            if (r.real_bound - r.real_bound.round()).abs() > 1e-9 {
                prop_assert_eq!(r.min_bits as f64, c);
            }
            prop_assert!(r.min_bits >= 2);
        }

        #[test]
        fn monotone(k in 1usize..1000, n in 1u32..10, m in 1u32..10, p in 2u32..40) {
            let b = |k, n, m| datatype_bound(&BoundQuery::new(k, u(n), s(m)).unwrap()).min_bits;
            prop_assert!(b(k, n, m) <= b(k + 1, n, m));
            prop_assert!(b(k, n, m) <= b(k, n + 1, m));
            prop_assert!(b(k, n, m) <= b(k, n, m + 1));
            prop_assert!(l1_budget(p, u(n)) < l1_budget(p + 1, u(n)));
            prop_assert!(l1_budget(p, u(n)) > l1_budget(p, u(n + 1)));
        }

        #[test]
        fn magnitude_chain(pairs in prop::collection::vec((-128i64..128, -128i64..128), 1..32)) {
            let dot: i64 = pairs.iter().map(|(x, w)| x * w).sum();
            let abs_prod: i64 = pairs.iter().map(|(x, w)| (x * w).abs()).sum();
            let prod_abs: i64 = pairs.iter().map(|(x, w)| x.abs() * w.abs()).sum();
            prop_assert!(dot.abs() <= abs_prod);
            prop_assert!(abs_prod <= prod_abs);
        }
    }
}
