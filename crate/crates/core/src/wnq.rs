//! Accumulator-aware weight quantizer.
//!
//! Each output channel is reparameterized as `w = g * v / ||v||_1` with
//! `g = 2^min(T, t)` and `s = 2^d`. The cap `T` is derived from the target
//! accumulator width and the live value of `d`, so the channel's l1 norm in
//! the integer domain never exceeds the overflow-free budget. Scaled values
//! are truncated toward zero, which can only shrink magnitudes.
//!
//! The standard per-channel symmetric quantizer is kept alongside as the
//! unconstrained baseline.

use serde::{Deserialize, Serialize};

use crate::bounds::{l1_budget, l1_budget_floor};
use crate::error::{Error, Result};
use crate::qcore::{clip, DType, IntTensor, RoundingMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WnqChannelParams {
    /// Direction parameters.
    #[serde(with = "crate::reals::vec")]
    pub v: Vec<f64>,
    /// log2 of the norm target.
    #[serde(with = "crate::reals")]
    pub t: f64,
    /// log2 of the scale.
    #[serde(with = "crate::reals")]
    pub d: f64,
}

/// Target accumulator width for one layer and the data type of the
/// activations that feed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumConstraint {
    pub p_star: u32,
    pub input: DType,
}

impl AccumConstraint {
    pub fn new(p_star: u32, input: DType) -> Result<Self> {
        if !(2..=64).contains(&p_star) {
            return Err(Error::InvalidAccumulator(p_star));
        }
        Ok(Self { p_star, input })
    }

    /// Budget on `sum |w_int|`.
    pub fn budget(&self) -> f64 {
        l1_budget(self.p_star, self.input)
    }

    pub fn budget_floor(&self) -> u128 {
        l1_budget_floor(self.p_star, self.input)
    }
}

/// log2-domain norm cap `T = signed + log2(2^(P-1) - 1) + d - N`.
pub fn cap_t(c: &AccumConstraint, d: f64) -> f64 {
    let top = (2f64).powi(c.p_star as i32 - 1) - 1.0;
    c.input.signed_indicator() as f64 + top.log2() + d - c.input.bits as f64
}

/// How scaled weights are mapped to codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    /// The real quantizer.
    Quantized,
    /// Rounding removed, clipping kept. Used for gradient checks.
    Relaxed,
}

/// Intermediate values of one channel's forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct WnqTrace {
    /// `||v||_1`
    pub v_norm: f64,
    /// `v / ||v||_1`
    pub direction: Vec<f64>,
    /// `g / s`
    pub norm_ratio: f64,
    /// True when `t > T` and the cap set the norm.
    pub capped: bool,
    pub cap: f64,
    /// Pre-rounding values `(g / s) * direction`.
    pub scaled: Vec<f64>,
    /// Codes after rounding and clipping, as reals.
    pub codes: Vec<f64>,
    /// STE pass-through mask: scaled value inside `[n, p]`.
    pub inside: Vec<bool>,
    pub scale: f64,
}

/// Forward pass for one channel, returning every intermediate.
pub fn trace_channel(
    v: &[f64],
    t: f64,
    d: f64,
    c: &AccumConstraint,
    weight: DType,
    rounding: Rounding,
    channel: usize,
) -> Result<WnqTrace> {
    // 2^(T - d) is the budget itself; passing it directly keeps the cap exact.
    trace_with_cap(v, t, d, cap_t(c, d), c.budget(), weight, rounding, channel)
}

/// Same as [`trace_channel`] with the log2 cap `T` and the integer-domain
/// norm cap `2^(T - d)` supplied by the caller.
#[allow(clippy::too_many_arguments)]
pub fn trace_with_cap(
    v: &[f64],
    t: f64,
    d: f64,
    cap: f64,
    ratio_cap: f64,
    weight: DType,
    rounding: Rounding,
    channel: usize,
) -> Result<WnqTrace> {
    if !weight.signed {
        return Err(Error::Config(format!("weight quantizer needs a signed type, got {weight}")));
    }
    let v_norm: f64 = v.iter().map(|x| x.abs()).sum();
    if !(v_norm > 0.0) || !v_norm.is_finite() {
        return Err(Error::ZeroDirection { channel });
    }
    let capped = t > cap;
    let norm_ratio = if capped { ratio_cap } else { (t - d).exp2().min(ratio_cap) };
    let (n, p) = (weight.min() as f64, weight.max() as f64);
    let direction: Vec<f64> = v.iter().map(|x| x / v_norm).collect();
    let scaled: Vec<f64> = direction.iter().map(|u| norm_ratio * u).collect();
    let codes = scaled
        .iter()
        .map(|&z| match rounding {
            Rounding::Quantized => clip(RoundingMode::TowardZero.apply(z), n, p),
            Rounding::Relaxed => clip(z, n, p),
        })
        .collect();
    let inside = scaled.iter().map(|&z| z >= n && z <= p).collect();
    Ok(WnqTrace { v_norm, direction, norm_ratio, capped, cap, scaled, codes, inside, scale: d.exp2() })
}

#[derive(Debug, Clone)]
pub struct WnqOutput {
    pub w_int: IntTensor,
    pub w_fake: Vec<f64>,
    pub capped: bool,
}

impl WnqChannelParams {
    pub fn forward(&self, c: &AccumConstraint, weight: DType) -> Result<WnqOutput> {
        wnq_forward(self, c, weight)
    }
}

pub fn wnq_forward(params: &WnqChannelParams, c: &AccumConstraint, weight: DType) -> Result<WnqOutput> {
    let tr = trace_channel(&params.v, params.t, params.d, c, weight, Rounding::Quantized, 0)?;
    let ints: Vec<i64> = tr.codes.iter().map(|&q| q as i64).collect();
    let w_int = IntTensor::from_vec(ints, weight)?;
    debug_assert!(
        w_int.l1_norm() as u128 <= c.budget_floor(),
        "l1 budget violated: {} > {}",
        w_int.l1_norm(),
        c.budget_floor()
    );
    let w_fake = tr.codes.iter().map(|q| q * tr.scale).collect();
    Ok(WnqOutput { w_int, w_fake, capped: tr.capped })
}

/// Standard symmetric per-channel fake quantization with half-even rounding.
pub fn baseline_quant(w: &[f64], d: f64, weight: DType) -> Result<(IntTensor, Vec<f64>)> {
    if !weight.signed {
        return Err(Error::Config(format!("weight quantizer needs a signed type, got {weight}")));
    }
    let s = d.exp2();
    let (n, p) = (weight.min() as f64, weight.max() as f64);
    let mut ints = Vec::with_capacity(w.len());
    for (index, &x) in w.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite { index, value: x });
        }
        ints.push(clip((x / s).round_ties_even(), n, p) as i64);
    }
    let fake = ints.iter().map(|&q| q as f64 * s).collect();
    Ok((IntTensor::from_vec(ints, weight)?, fake))
}

/// `sum_i (t_i - T_i)_+` over aligned channel lists.
pub fn penalty(t: &[f64], caps: &[f64]) -> Result<f64> {
    if t.len() != caps.len() {
        return Err(Error::LengthMismatch { left: t.len(), right: caps.len() });
    }
    Ok(t.iter().zip(caps).fold(0.0, |acc, (t, cap)| acc + (t - cap).max(0.0)))
}

/// Starting parameters for a channel from float weights: the direction is the
/// weights themselves, the norm their l1 norm and the scale maps the largest
/// magnitude onto `p`.
///
/// An all-zero channel gets a uniform tiny direction, `d = 0`, and `t = d`
/// (the norm equal to one grid step).
pub fn init_from_float(w: &[f64], weight: DType) -> WnqChannelParams {
    let l1: f64 = w.iter().map(|x| x.abs()).sum();
    if l1 == 0.0 {
        return WnqChannelParams { v: vec![1e-6; w.len()], t: 0.0, d: 0.0 };
    }
    let max_abs = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    WnqChannelParams { v: w.to_vec(), t: l1.log2(), d: (max_abs / weight.max() as f64).log2() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(bits: u32) -> DType {
        DType::signed(bits).unwrap()
    }
    fn u(bits: u32) -> DType {
        DType::unsigned(bits).unwrap()
    }

    #[test]
    fn cap_examples() {
        let c = AccumConstraint::new(16, u(8)).unwrap();
        assert!((cap_t(&c, 0.0) - (32767f64.log2() - 8.0)).abs() < 1e-12);
        assert!((cap_t(&c, 0.0) - 6.99996).abs() < 1e-5);
        assert_eq!(cap_t(&AccumConstraint::new(2, s(1)).unwrap(), 0.0), 0.0);
        let c = AccumConstraint::new(8, u(4)).unwrap();
        assert!((cap_t(&c, 2.0) - (127f64.log2() - 2.0)).abs() < 1e-12);
        for d in [-3.0, -0.5, 0.0, 1.7] {
            let back = cap_t(&c, d).exp2() * (-d).exp2();
            assert!((back - c.budget()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_examples() {
        let wide = AccumConstraint::new(16, u(1)).unwrap();
        let p = WnqChannelParams { v: vec![1.0, -1.0], t: 2.0, d: 0.0 };
        let out = p.forward(&wide, s(4)).unwrap();
        assert_eq!(out.w_int.data(), &[2, -2]);
        assert_eq!(out.w_fake, vec![2.0, -2.0]);
        assert!(!out.capped);

        // t = 10 against a cap T = 3: g = 2^3
        let tr = trace_with_cap(&[1.0, -1.0], 10.0, 0.0, 3.0, 8.0, s(4), Rounding::Quantized, 0).unwrap();
        assert!(tr.capped);
        assert_eq!(tr.codes, vec![4.0, -4.0]);
        // a realizable cap: P* = 5 over unsigned 1-bit inputs gives a budget of 7.5
        let c = AccumConstraint::new(5, u(1)).unwrap();
        let tr = trace_channel(&[1.0, -1.0], 10.0, 0.0, &c, s(4), Rounding::Quantized, 0).unwrap();
        assert_eq!((tr.norm_ratio, tr.codes.clone()), (7.5, vec![3.0, -3.0]));

        let p = WnqChannelParams { v: vec![0.3, 0.7], t: 0.0, d: 0.0 };
        assert_eq!(p.forward(&wide, s(4)).unwrap().w_int.data(), &[0, 0]);
    }

    #[test]
    fn zero_direction_is_an_error() {
        let c = AccumConstraint::new(16, u(8)).unwrap();
        let p = WnqChannelParams { v: vec![0.0, 0.0], t: 0.0, d: 0.0 };
        assert!(matches!(p.forward(&c, s(4)), Err(Error::ZeroDirection { .. })));
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(baseline_quant(&[1.4, -2.6], 0.0, s(4)).unwrap().0.data(), &[1, -3]);
        assert_eq!(baseline_quant(&[0.49], 0.0, s(4)).unwrap().0.data(), &[0]);
        assert_eq!(baseline_quant(&[10.0], 0.0, s(4)).unwrap().0.data(), &[7]);
        assert!(baseline_quant(&[1.0], 0.0, u(4)).is_err());
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty(&[5.0], &[3.0]).unwrap(), 2.0);
        assert_eq!(penalty(&[3.0], &[3.0]).unwrap(), 0.0);
        assert_eq!(penalty(&[1.0, 6.0], &[2.0, 4.0]).unwrap(), 2.0);
        assert!(penalty(&[1.0], &[]).is_err());
    }

    #[test]
    fn init_examples() {
        let p = init_from_float(&[2.0, -2.0], s(4));
        assert_eq!((p.v.clone(), p.t), (vec![2.0, -2.0], 2.0));
        assert!((p.d - (2.0f64 / 7.0).log2()).abs() < 1e-12);
        assert!((p.d + 1.807).abs() < 1e-3);
        let p = init_from_float(&[0.5], s(4));
        assert_eq!(p.t, -1.0);
        assert!((p.d - (0.5f64 / 7.0).log2()).abs() < 1e-12);
        assert_eq!(init_from_float(&[1.0; 4], s(8)).t, 2.0);
        let z = init_from_float(&[0.0; 3], s(8));
        assert!(z.v.iter().all(|&x| x > 0.0));
        assert_eq!(z.t, z.d);
    }

    fn arb_channel() -> impl Strategy<Value = (Vec<f64>, f64, f64)> {
        (prop::collection::vec(-4.0f64..4.0, 1..40), -6.0f64..40.0, -8.0f64..4.0)
            .prop_filter("nonzero direction", |(v, _, _)| v.iter().any(|x| x.abs() > 1e-9))
    }

    proptest! {
        #[test]
        fn hard_budget(
            (v, t, d) in arb_channel(),
            p_star in 2u32..33,
            n in 1u32..9,
            signed in any::<bool>(),
            m in 2u32..9,
        ) {
            let c = AccumConstraint::new(p_star, DType::new(n, signed).unwrap()).unwrap();
            for t in [t, cap_t(&c, d) + 100.0] {
                let out = WnqChannelParams { v: v.clone(), t, d }.forward(&c, s(m)).unwrap();
                prop_assert!(out.w_int.l1_norm() as u128 <= c.budget_floor());
                let wb = crate::bounds::weight_bound(&out.w_int, c.input).unwrap();
                prop_assert!(wb.min_bits <= p_star);
            }
        }

        #[test]
        fn direction_scale_equivariance((v, t, d) in arb_channel(), k in -20i32..20) {
            let c = AccumConstraint::new(20, u(8)).unwrap();
            let alpha = (2f64).powi(k);
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let a = WnqChannelParams { v, t, d }.forward(&c, s(8)).unwrap();
            let b = WnqChannelParams { v: scaled, t, d }.forward(&c, s(8)).unwrap();
            prop_assert_eq!(a.w_int, b.w_int);
        }

        #[test]
        fn uncapped_norm_never_grows((v, t, d) in arb_channel()) {
            let c = AccumConstraint::new(48, u(1)).unwrap();
            let tr = trace_channel(&v, t.min(8.0), d, &c, s(16), Rounding::Quantized, 0).unwrap();
            prop_assume!(!tr.capped && tr.inside.iter().all(|&b| b));
            let norm: f64 = tr.codes.iter().map(|q| (q * tr.scale).abs()).sum();
            prop_assert!(norm <= t.min(8.0).exp2() * (1.0 + 1e-12));
        }

        #[test]
        fn zero_penalty_means_uncapped((v, t, d) in arb_channel(), p_star in 4u32..30) {
            let c = AccumConstraint::new(p_star, u(8)).unwrap();
            let tr = trace_channel(&v, t, d, &c, s(8), Rounding::Quantized, 0).unwrap();
            let pen = penalty(&[t], &[tr.cap]).unwrap();
            if pen == 0.0 {
                prop_assert!(!tr.capped);
                prop_assert_eq!(tr.norm_ratio, (t - d).exp2());
            }
        }
    }
}
