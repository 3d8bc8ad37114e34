//! Fractional-bit uniform quantizer with straight-through gradients.
//!
//! `quantize(r, k) = min(1, round((2^k - 1) r) / (2^k - 1))` for `r` in
//! `[0, 1]`. Non-integer `k` gives a level count between successive powers
//! of two; the top code overshoots 1 and is clipped there. Rounding is half
//! away from zero.
//!
//! The gradient with respect to the input is the identity (zero where the
//! output was clipped). The gradient with respect to `k` treats only the
//! `round` as identity, which leaves
//! `ln 2 * 2^k * (u - round(u)) / (2^k - 1)^2` with `u = (2^k - 1) r`.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Bit widths at or above this value skip rounding entirely.
pub const BYPASS_BITS: f64 = 32.0;

/// Guard on `max |tanh(w)|` below which a weight tensor is treated as all-zero.
pub const WEIGHT_MAX_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct BitWidth(f64);

impl BitWidth {
    pub fn new(k: f64) -> Result<Self> {
        if k.is_finite() && k > 0.0 {
            Ok(BitWidth(k))
        } else {
            Err(Error::Contract(format!("bit width must be positive, got {k}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_bypass(self) -> bool {
        self.0 >= BYPASS_BITS
    }
}

/// One quantized element plus what backward needs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Quantized<T> {
    pub value: T,
    pub clipped: bool,
    /// `d value / d k` under round-only straight-through; zero when clipped.
    pub dk: T,
}

#[inline]
pub(crate) fn quantize_point<T: Real>(r: T, k: T) -> Quantized<T> {
    if k >= T::lit(BYPASS_BITS) {
        return Quantized {
            value: r,
            clipped: false,
            dk: T::zero(),
        };
    }
    let pow = k.exp2();
    let scale = pow - T::one();
    let u = scale * r;
    let n = u.round();
    if n > scale {
        Quantized {
            value: T::one(),
            clipped: true,
            dk: T::zero(),
        }
    } else {
        Quantized {
            value: n / scale,
            clipped: false,
            dk: T::lit(LN_2) * pow * (u - n) / (scale * scale),
        }
    }
}

fn check_unit(r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Contract(format!("quantize input {r} outside [0, 1]")))
    }
}

pub fn quantize_forward(r: f64, k: BitWidth) -> Result<f64> {
    check_unit(r)?;
    Ok(quantize_point(r, k.0).value)
}

/// Straight-through input gradient: passes `upstream` unless the output was clipped.
pub fn quantize_backward_input(upstream: f64, r: f64, k: BitWidth) -> Result<f64> {
    check_unit(r)?;
    Ok(if quantize_point(r, k.0).clipped { 0.0 } else { upstream })
}

pub fn quantize_backward_k(upstream: f64, r: f64, k: BitWidth) -> Result<f64> {
    check_unit(r)?;
    Ok(upstream * quantize_point(r, k.0).dk)
}

/// Every value `quantize_forward` can produce for `k`, ascending.
pub fn levels(k: BitWidth) -> Vec<f64> {
    if k.is_bypass() {
        return vec![0.0, 1.0];
    }
    let scale = k.0.exp2() - 1.0;
    let top = scale.ceil() as u64;
    let mut out: Vec<f64> = (0..=top).map(|i| (i as f64 / scale).min(1.0)).collect();
    out.dedup();
    out
}

/// DoReFa weight quantizer onto `[-1, 1]`, forward only.
///
/// `2 * quantize(tanh(w) / (2 max|tanh(w)|) + 1/2, k) - 1`; an all-zero
/// tensor maps to zeros.
pub fn quantize_weights<T: Real>(w: &Tensor<T>, k: BitWidth) -> Tensor<T> {
    let kt = T::lit(k.0);
    let max = w.data().iter().map(|x| x.tanh().abs()).fold(T::zero(), T::max);
    if max < T::lit(WEIGHT_MAX_EPS) {
        return Tensor::zeros(w.shape());
    }
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    w.map(|x| {
        let r = (x.tanh() / (two * max) + half).max(T::zero()).min(T::one());
        two * quantize_point(r, kt).value - T::one()
    })
}

/// Activation quantizer onto `[0, 1]`, forward only.
pub fn quantize_activations<T: Real>(a: &Tensor<T>, k: BitWidth) -> Tensor<T> {
    let kt = T::lit(k.0);
    a.map(|x| quantize_point(x.max(T::zero()).min(T::one()), kt).value)
}
