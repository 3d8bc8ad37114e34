//! Budgeted stochastic bit allocation.
//!
//! Each of the `B` budget bits is assigned by one Gumbel-Softmax draw over
//! the `L` layers; summing the draws gives a (generally fractional) bit
//! vector that always totals `B`. At high temperature the draws are nearly
//! uniform, at low temperature nearly one-hot. Once the temperature falls
//! below the hard threshold the expected allocation is estimated by Monte
//! Carlo, rounded to integers, and frozen.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_HARD_TRIALS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocMode {
    Exploring,
    Hard,
}

/// Per-layer bit widths. Sums to the budget in both modes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrecision {
    bits: Vec<f64>,
    mode: AllocMode,
}

impl LayerPrecision {
    pub fn exploring(bits: Vec<f64>) -> Self {
        LayerPrecision {
            bits,
            mode: AllocMode::Exploring,
        }
    }

    pub fn hard(bits: &[u32]) -> Self {
        LayerPrecision {
            bits: bits.iter().map(|&b| b as f64).collect(),
            mode: AllocMode::Hard,
        }
    }

    pub fn bits(&self) -> &[f64] {
        &self.bits
    }

    pub fn mode(&self) -> AllocMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.bits.iter().sum()
    }

    /// Integer widths, if this is a hard allocation.
    pub fn as_ints(&self) -> Option<Vec<u32>> {
        (self.mode == AllocMode::Hard).then(|| self.bits.iter().map(|&b| b as u32).collect())
    }
}

/// `tau(t) = max(floor, initial * exp(-decay_rate * t))`, `t` in epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub floor: f64,
    pub decay_rate: f64,
    pub hard_threshold: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self::for_epochs(10.0, 0.4)
    }
}

impl TemperatureSchedule {
    pub const INITIAL: f64 = 50.0;
    pub const FLOOR: f64 = 0.01;
    pub const HARD_THRESHOLD: f64 = 3.0;

    /// Decay chosen so the temperature reaches the hard threshold after
    /// `crossing_fraction * total_epochs` epochs.
    pub fn for_epochs(total_epochs: f64, crossing_fraction: f64) -> Self {
        let mut s = TemperatureSchedule {
            initial: Self::INITIAL,
            floor: Self::FLOOR,
            decay_rate: 0.0,
            hard_threshold: Self::HARD_THRESHOLD,
        };
        s.decay_rate = s.decay_to_cross_at(total_epochs * crossing_fraction);
        s
    }

    pub fn decay_to_cross_at(&self, epoch: f64) -> f64 {
        (self.initial / self.hard_threshold).ln() / epoch
    }

    pub fn temperature(&self, epoch: f64) -> f64 {
        (self.initial * (-self.decay_rate * epoch.max(0.0)).exp()).max(self.floor)
    }

    /// Epoch at which the unfloored temperature equals the hard threshold.
    pub fn crossing_epoch(&self) -> f64 {
        (self.initial / self.hard_threshold).ln() / self.decay_rate
    }
}

/// `-ln(-ln(u))` for `u` uniform on the open unit interval.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for g in out {
        let u: f64 = rng.sample(Open01);
        *g = -(-u.ln()).ln();
    }
}

/// One relaxed categorical draw: `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax_sample(logits: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(contract(format!("temperature must be positive, got {tau}")));
    }
    if logits.len() != noise.len() || logits.is_empty() {
        return Err(Error::Dimension {
            op: "gumbel_softmax_sample",
            lhs: vec![logits.len()],
            rhs: vec![noise.len()],
        });
    }
    let mut y: Vec<f64> = logits.iter().zip(noise).map(|(p, g)| (p + g) / tau).collect();
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in &mut y {
        *v = (*v - max).exp();
        z += *v;
    }
    y.iter_mut().for_each(|v| *v /= z);
    Ok(y)
}

/// Vector-Jacobian product of one draw: `y_j (up_j - <up, y>) / tau`.
pub fn softmax_draw_vjp(draw: &[f64], tau: f64, upstream: &[f64], out: &mut [f64]) {
    let dot: f64 = draw.iter().zip(upstream).map(|(y, u)| y * u).sum();
    for ((o, &y), &u) in out.iter_mut().zip(draw).zip(upstream) {
        *o += y * (u - dot) / tau;
    }
}

/// Rounds `expected` to integers summing to `budget`: floors first, then one
/// extra bit to each of the largest fractional remainders (ties go to the
/// lower index).
pub fn largest_remainder(expected: &[f64], budget: u32) -> Vec<u32> {
    let mut ints: Vec<u32> = expected.iter().map(|e| e.max(0.0).floor() as u32).collect();
    let assigned: u32 = ints.iter().sum();
    if ints.is_empty() || assigned == budget {
        return ints;
    }
    if assigned > budget {
        // `expected` overshoots the budget; trim the largest layers
        for _ in budget..assigned {
            let i = argmax(&ints);
            ints[i] -= 1;
        }
        return ints;
    }
    let mut order: Vec<usize> = (0..expected.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = expected[a] - expected[a].floor();
        let rb = expected[b] - expected[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take((budget - assigned) as usize) {
        ints[i] += 1;
    }
    ints
}

fn argmax(xs: &[u32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Largest-remainder rounding followed by the one-bit minimum.
pub fn round_allocation(expected: &[f64], budget: u32) -> Result<Vec<u32>> {
    let mut bits = largest_remainder(expected, budget);
    ensure_min_one_bit(&mut bits)?;
    Ok(bits)
}

/// Raises every zero-bit layer to one bit, taking each bit from the
/// currently largest layer.
pub fn ensure_min_one_bit(bits: &mut [u32]) -> Result<()> {
    if (bits.iter().sum::<u32>() as usize) < bits.len() {
        return Err(contract(format!(
            "budget {} cannot give {} layers one bit each",
            bits.iter().sum::<u32>(),
            bits.len()
        )));
    }
    while let Some(z) = bits.iter().position(|&b| b == 0) {
        let donor = argmax(bits);
        bits[donor] -= 1;
        bits[z] += 1;
    }
    Ok(())
}

/// The precision allocation layer: learnable logits over layers, a
/// temperature, and a bit budget.
#[derive(Clone, Debug)]
pub struct GumbelAllocator {
    logits: Tensor<f64>,
    temperature: f64,
    budget: u32,
    rng: ChaCha8Rng,
    draws: Vec<Vec<f64>>,
    draws_tau: f64,
    hard: Option<Vec<u32>>,
}

impl GumbelAllocator {
    /// Logits start at zero (uniform), temperature at the schedule's initial value.
    pub fn new(layers: usize, budget: u32, seed: u64) -> Result<Self> {
        Self::from_rng(layers, budget, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(layers: usize, budget: u32, rng: ChaCha8Rng) -> Result<Self> {
        if layers == 0 || budget == 0 {
            return Err(Error::Validation(format!(
                "allocator needs at least one layer and one bit (got {layers} layers, budget {budget})"
            )));
        }
        Ok(GumbelAllocator {
            logits: Tensor::zeros([layers]).with_grad(),
            temperature: TemperatureSchedule::INITIAL,
            budget,
            rng,
            draws: Vec::new(),
            draws_tau: 0.0,
            hard: None,
        })
    }

    pub fn layers(&self) -> usize {
        self.logits.numel()
    }

    pub fn budget(&self) -> u32 {
        self.budget
    }

    pub fn logits(&self) -> &Tensor<f64> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor<f64> {
        &mut self.logits
    }

    pub fn set_logits(&mut self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.layers() {
            return Err(Error::Dimension {
                op: "set_logits",
                lhs: vec![self.layers()],
                rhs: vec![logits.len()],
            });
        }
        self.logits.data_mut().copy_from_slice(logits);
        Ok(())
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(contract(format!("temperature must be positive, got {tau}")));
        }
        self.temperature = tau;
        Ok(())
    }

    pub fn mode(&self) -> AllocMode {
        if self.hard.is_some() {
            AllocMode::Hard
        } else {
            AllocMode::Exploring
        }
    }

    pub fn hard_bits(&self) -> Option<&[u32]> {
        self.hard.as_deref()
    }

    fn draw(&mut self, noise: &mut [f64]) -> Vec<f64> {
        gumbel_noise(&mut self.rng, noise);
        gumbel_softmax_sample(self.logits.data(), self.temperature, noise).expect("temperature validated on set")
    }

    /// Sums `budget` fresh draws and keeps them for [`Self::allocator_backward`].
    /// After hard assignment this returns the frozen allocation.
    pub fn sample_allocation(&mut self) -> LayerPrecision {
        if let Some(hard) = &self.hard {
            return LayerPrecision::hard(hard);
        }
        let mut noise = vec![0.0; self.layers()];
        let draws: Vec<Vec<f64>> = (0..self.budget).map(|_| self.draw(&mut noise)).collect();
        self.set_draws(draws)
    }

    /// Same as [`Self::sample_allocation`] with caller-supplied Gumbel noise,
    /// one row of `layers` values per budget bit.
    pub fn sample_with_noise(&mut self, noise: &[Vec<f64>]) -> Result<LayerPrecision> {
        if self.hard.is_some() {
            return Err(contract("allocation is frozen"));
        }
        if noise.len() != self.budget as usize {
            return Err(Error::Dimension {
                op: "sample_with_noise",
                lhs: vec![self.budget as usize, self.layers()],
                rhs: vec![noise.len()],
            });
        }
        let draws = noise
            .iter()
            .map(|g| gumbel_softmax_sample(self.logits.data(), self.temperature, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.set_draws(draws))
    }

    fn set_draws(&mut self, draws: Vec<Vec<f64>>) -> LayerPrecision {
        let mut bits = vec![0.0; self.layers()];
        for d in &draws {
            bits.iter_mut().zip(d).for_each(|(b, y)| *b += y);
        }
        self.draws = draws;
        self.draws_tau = self.temperature;
        LayerPrecision::exploring(bits)
    }

    /// Gradient of the logits given the gradient of the last sampled bit
    /// vector, summed over that sample's draws.
    pub fn allocator_backward(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        if self.hard.is_some() {
            return Err(contract("allocation is frozen; logits receive no gradient"));
        }
        if self.draws.is_empty() {
            return Err(contract("allocator_backward before any sample"));
        }
        if upstream.len() != self.layers() {
            return Err(Error::Dimension {
                op: "allocator_backward",
                lhs: vec![self.layers()],
                rhs: vec![upstream.len()],
            });
        }
        let mut grad = vec![0.0; self.layers()];
        for d in &self.draws {
            softmax_draw_vjp(d, self.draws_tau, upstream, &mut grad);
        }
        Ok(grad)
    }

    /// Monte Carlo mean of `trials` budget allocations at the current temperature.
    pub fn expected_allocation(&mut self, trials: usize) -> Result<Vec<f64>> {
        if trials < 1 {
            return Err(contract("need at least one trial"));
        }
        let layers = self.layers();
        let mut noise = vec![0.0; layers];
        let mut sum = vec![0.0; layers];
        for _ in 0..trials {
            for _ in 0..self.budget {
                let y = self.draw(&mut noise);
                sum.iter_mut().zip(&y).for_each(|(s, v)| *s += v);
            }
        }
        Ok(sum.into_iter().map(|s| s / trials as f64).collect())
    }

    /// Estimates the expected allocation, rounds it to integers that sum to
    /// the budget with at least one bit per layer, and freezes it.
    pub fn hard_assign(&mut self, trials: usize) -> Result<LayerPrecision> {
        if let Some(hard) = &self.hard {
            return Ok(LayerPrecision::hard(hard));
        }
        if (self.budget as usize) < self.layers() {
            return Err(contract(format!(
                "budget {} is smaller than the {} layers",
                self.budget,
                self.layers()
            )));
        }
        let expected = self.expected_allocation(trials)?;
        let bits = round_allocation(&expected, self.budget)?;
        self.draws.clear();
        self.logits.zero_grad();
        let out = LayerPrecision::hard(&bits);
        self.hard = Some(bits);
        Ok(out)
    }
}
