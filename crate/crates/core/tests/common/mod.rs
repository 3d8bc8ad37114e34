//! Oracles shared by the integration tests and the acceptance harness.
//! Everything here recomputes results from first principles in plain f64
//! rather than calling back into the code under test.

#![allow(dead_code)]

use bitbudget::{Graph, GumbelAllocator, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms; central
/// differences cannot resolve them.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `max |a - n| / max(|a|_inf, |n|_inf, GRAD_FLOOR)`: worst entry relative
/// to the gradient's own scale.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale.max(GRAD_FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, -1.0, 1.0)).unwrap()
}

/// Values at least `gap` away from every kink in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type OpFn = dyn Fn(&mut Graph<f64>, &[Var]) -> bitbudget::Result<Var>;

/// Compares reverse-mode gradients of `sum(op(inputs) * R)` (fixed random
/// `R`) against central differences for every input element.
pub fn check_op(inputs: &[Tensor<f64>], op: &OpFn, rng: &mut ChaCha8Rng) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> Tensor<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars).unwrap();
        g.value(out).clone()
    };
    let out0 = eval(inputs);
    let r = Tensor::new(out0.shape().to_vec(), uniform(rng, out0.numel(), -1.0, 1.0)).unwrap();
    let weighted = |t: &Tensor<f64>| t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = op(&mut g, &vars).unwrap();
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, nj) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *nj = (weighted(&eval(&plus)) - weighted(&eval(&minus))) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Worst relative error per differentiable tensor op over `cases` random
/// instances each.
pub fn fd_all_ops(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut run =
        |name: &'static str, rng: &mut ChaCha8Rng, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, op: &OpFn| {
            let mut worst = 0.0f64;
            for _ in 0..cases {
                let inputs = make(rng);
                worst = worst.max(check_op(&inputs, op, rng));
            }
            results.push((name, worst));
        };

    run(
        "add",
        &mut rng,
        &|r| vec![tensor(r, &[3, 4]), tensor(r, &[3, 4])],
        &|g, v| g.add(v[0], v[1]),
    );
    run(
        "mul",
        &mut rng,
        &|r| vec![tensor(r, &[3, 4]), tensor(r, &[3, 4])],
        &|g, v| g.mul(v[0], v[1]),
    );
    run("scale", &mut rng, &|r| vec![tensor(r, &[2, 5])], &|g, v| {
        Ok(g.scale(v[0], -1.7))
    });
    run("sum", &mut rng, &|r| vec![tensor(r, &[7])], &|g, v| Ok(g.sum(v[0])));
    run("reshape", &mut rng, &|r| vec![tensor(r, &[2, 6])], &|g, v| {
        g.reshape(v[0], vec![3, 4])
    });
    run("flatten", &mut rng, &|r| vec![tensor(r, &[2, 3, 2, 2])], &|g, v| {
        g.flatten(v[0])
    });
    run(
        "matmul",
        &mut rng,
        &|r| vec![tensor(r, &[3, 4]), tensor(r, &[4, 5])],
        &|g, v| g.matmul(v[0], v[1]),
    );
    run(
        "add_bias",
        &mut rng,
        &|r| vec![tensor(r, &[2, 3, 2, 2]), tensor(r, &[3])],
        &|g, v| g.add_bias(v[0], v[1]),
    );
    run(
        "scale_channels",
        &mut rng,
        &|r| vec![tensor(r, &[2, 3, 2, 2]), tensor(r, &[3])],
        &|g, v| g.scale_channels(v[0], v[1]),
    );
    for (stride, pad, name) in [(1, 0, "conv2d s1 p0"), (1, 1, "conv2d s1 p1"), (2, 1, "conv2d s2 p1")] {
        run(
            name,
            &mut rng,
            &|r| vec![tensor(r, &[2, 2, 6, 5]), tensor(r, &[3, 2, 3, 3])],
            &move |g, v| g.conv2d(v[0], v[1], stride, pad),
        );
    }
    run(
        "maxpool2",
        &mut rng,
        &|r| vec![distinct_windows(r, &[2, 2, 4, 6])],
        &|g, v| g.maxpool2(v[0]),
    );
    run(
        "relu",
        &mut rng,
        &|r| vec![away_from(r, &[3, 5], -1.0, 1.0, &[0.0], 1e-3)],
        &|g, v| Ok(g.relu(v[0])),
    );
    run(
        "clip01",
        &mut rng,
        &|r| vec![away_from(r, &[3, 5], -0.5, 1.5, &[0.0, 1.0], 1e-3)],
        &|g, v| Ok(g.clip01(v[0])),
    );
    run(
        "softmax_cross_entropy",
        &mut rng,
        &|r| vec![tensor(r, &[4, 5]).map(|x| 3.0 * x)],
        &|g, v| g.softmax_cross_entropy(v[0], &[0, 4, 2, 2]),
    );
    results
}

/// Pooling input where every 2x2 window has a unique maximum by a clear margin.
fn distinct_windows(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    loop {
        let t = tensor(rng, shape);
        let (h, w) = (shape[2], shape[3]);
        let ok = t.data().chunks(h * w).all(|plane| {
            (0..h / 2).all(|y| {
                (0..w / 2).all(|x| {
                    let mut win = [
                        plane[2 * y * w + 2 * x],
                        plane[2 * y * w + 2 * x + 1],
                        plane[(2 * y + 1) * w + 2 * x],
                        plane[(2 * y + 1) * w + 2 * x + 1],
                    ];
                    win.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    win[0] - win[1] > 1e-3
                })
            })
        });
        if ok {
            return t;
        }
    }
}

// ---- end-to-end logit gradient on a toy two-layer model ----

/// Rounding decisions recorded at the base point and replayed under
/// perturbation, so the surrogate is smooth and agrees with the real
/// quantizer (value and straight-through slopes) at the base point.
#[derive(Default)]
struct Frozen {
    recording: bool,
    cursor: usize,
    /// `None`: output pinned at 1. Otherwise the base point.
    residuals: Vec<Option<Base>>,
    /// Clip decisions for activations: `None` inside `[0, 1]` (boundary
    /// included), else the pinned value.
    clips: Vec<Option<f64>>,
    clip_cursor: usize,
}

#[derive(Clone, Copy)]
struct Base {
    r: f64,
    /// `u - round(u)`
    residual: f64,
    inv_scale: f64,
    value: f64,
}

impl Frozen {
    /// Surrogate for `min(1, round((2^k-1) r) / (2^k-1))` with `r` in `[0, 1]`:
    /// `value + (r - r0) - c (1/(2^k-1) - 1/(2^k0-1))`. Exact at the base
    /// point, slope 1 in `r`, and `ln2 2^k c / (2^k-1)^2` in `k`.
    fn q(&mut self, r: f64, k: f64) -> f64 {
        let scale = k.exp2() - 1.0;
        if self.recording {
            let u = scale * r;
            let n = u.round();
            self.residuals.push((n <= scale).then(|| Base {
                r,
                residual: u - n,
                inv_scale: 1.0 / scale,
                value: n / scale,
            }));
        }
        let slot = self.residuals[self.cursor];
        self.cursor += 1;
        match slot {
            None => 1.0,
            Some(b) => b.value + (r - b.r) - b.residual * (1.0 / scale - b.inv_scale),
        }
    }

    fn clip(&mut self, v: f64) -> f64 {
        if self.recording {
            self.clips.push(if (0.0..=1.0).contains(&v) {
                None
            } else {
                Some(v.clamp(0.0, 1.0))
            });
        }
        let slot = self.clips[self.clip_cursor];
        self.clip_cursor += 1;
        slot.unwrap_or(v)
    }
}

pub struct Toy {
    pub x: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub labels: Vec<usize>,
    pub logits: Vec<f64>,
    pub noise: Vec<Vec<f64>>,
    pub tau: f64,
    pub budget: u32,
}

const TOY_N: usize = 6;
const TOY_IN: usize = 8;
const TOY_HID: usize = 5;
const TOY_OUT: usize = 3;
const TOY_GAIN: f64 = 3.0;

impl Toy {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let budget = rng.gen_range(3..=6);
        Toy {
            x: uniform(rng, TOY_N * TOY_IN, -0.2, 1.2),
            w1: uniform(rng, TOY_IN * TOY_HID, -1.5, 1.5),
            w2: uniform(rng, TOY_HID * TOY_OUT, -1.5, 1.5),
            labels: (0..TOY_N).map(|_| rng.gen_range(0..TOY_OUT)).collect(),
            logits: uniform(rng, 2, -1.0, 1.0),
            noise: (0..budget)
                .map(|_| (0..2).map(|_| -(-rng.gen_range(1e-9..1.0f64).ln()).ln()).collect())
                .collect(),
            tau: rng.gen_range(0.5..4.0),
            budget,
        }
    }

    /// Analytic logit gradient through the library graph and allocator.
    pub fn analytic(&self) -> (f64, Vec<f64>) {
        let mut alloc = GumbelAllocator::new(2, self.budget, 0).unwrap();
        alloc.set_logits(&self.logits).unwrap();
        alloc.set_temperature(self.tau).unwrap();
        let bits = alloc.sample_with_noise(&self.noise).unwrap();
        let mut g = Graph::<f64>::new();
        let b = g.leaf(Tensor::new([2], bits.bits().to_vec()).unwrap().with_grad());
        let x = g.constant(Tensor::new([TOY_N, TOY_IN], self.x.clone()).unwrap());
        let w1 = g.constant(Tensor::new([TOY_IN, TOY_HID], self.w1.clone()).unwrap());
        let w2 = g.constant(Tensor::new([TOY_HID, TOY_OUT], self.w2.clone()).unwrap());
        let a1 = g.quantize_activations(x, b, 0).unwrap();
        let q1 = g.quantize_weights(w1, b, 0).unwrap();
        let h = g.matmul(a1, q1).unwrap();
        let h = g.scale(h, 1.0 / (TOY_IN as f64).sqrt());
        let a2 = g.quantize_activations(h, b, 1).unwrap();
        let q2 = g.quantize_weights(w2, b, 1).unwrap();
        let o = g.matmul(a2, q2).unwrap();
        let o = g.scale(o, TOY_GAIN);
        let loss = g.softmax_cross_entropy(o, &self.labels).unwrap();
        g.backward(loss).unwrap();
        let up = g.grad(b).unwrap().to_vec();
        (g.value(loss).data()[0], alloc.allocator_backward(&up).unwrap())
    }

    fn bits(&self, logits: &[f64]) -> Vec<f64> {
        let mut k = vec![0.0; logits.len()];
        for g in &self.noise {
            let z: Vec<f64> = logits.iter().zip(g).map(|(p, n)| (p + n) / self.tau).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            k.iter_mut().zip(&e).for_each(|(k, e)| *k += e / s);
        }
        k
    }

    fn weights(frozen: &mut Frozen, w: &[f64], k: f64) -> Vec<f64> {
        let t: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
        let m = t.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        t.iter()
            .map(|&v| 2.0 * frozen.q(v / (2.0 * m) + 0.5, k) - 1.0)
            .collect()
    }

    fn surrogate_loss(&self, frozen: &mut Frozen, logits: &[f64]) -> f64 {
        self.loss_at_bits(frozen, &self.bits(logits))
    }

    fn loss_at_bits(&self, frozen: &mut Frozen, k: &[f64]) -> f64 {
        frozen.cursor = 0;
        frozen.clip_cursor = 0;
        // activation then weight quantization per layer, matching graph order
        let a1: Vec<f64> = self
            .x
            .iter()
            .map(|&v| {
                let c = frozen.clip(v);
                frozen.q(c, k[0])
            })
            .collect();
        let q1 = Self::weights(frozen, &self.w1, k[0]);
        let s = 1.0 / (TOY_IN as f64).sqrt();
        let h: Vec<f64> = (0..TOY_N * TOY_HID)
            .map(|ij| {
                let (i, j) = (ij / TOY_HID, ij % TOY_HID);
                s * (0..TOY_IN)
                    .map(|t| a1[i * TOY_IN + t] * q1[t * TOY_HID + j])
                    .sum::<f64>()
            })
            .collect();
        let a2: Vec<f64> = h
            .iter()
            .map(|&v| {
                let c = frozen.clip(v);
                frozen.q(c, k[1])
            })
            .collect();
        let q2 = Self::weights(frozen, &self.w2, k[1]);
        let mut loss = 0.0;
        for i in 0..TOY_N {
            let row: Vec<f64> = (0..TOY_OUT)
                .map(|j| {
                    TOY_GAIN
                        * (0..TOY_HID)
                            .map(|t| a2[i * TOY_HID + t] * q2[t * TOY_OUT + j])
                            .sum::<f64>()
                })
                .collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[self.labels[i]];
        }
        loss / TOY_N as f64
    }

    /// Loss at the base point and central-difference logit gradient of the
    /// frozen-rounding surrogate.
    pub fn numeric(&self) -> (f64, Vec<f64>) {
        let mut frozen = Frozen {
            recording: true,
            ..Frozen::default()
        };
        let base = self.surrogate_loss(&mut frozen, &self.logits);
        frozen.recording = false;
        let grad = (0..self.logits.len())
            .map(|j| {
                let mut p = self.logits.clone();
                p[j] += FD_STEP;
                let up = self.surrogate_loss(&mut frozen, &p);
                p[j] -= 2.0 * FD_STEP;
                let down = self.surrogate_loss(&mut frozen, &p);
                (up - down) / (2.0 * FD_STEP)
            })
            .collect();
        (base, grad)
    }
}

/// Worst relative logit-gradient error over `cases` random toy models, and
/// the worst loss mismatch between graph and surrogate at the base point.
pub fn toy_logit_check(cases: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_grad, mut worst_loss) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let toy = Toy::random(&mut rng);
        let (la, ga) = toy.analytic();
        let (ln, gn) = toy.numeric();
        worst_loss = worst_loss.max((la - ln).abs());
        worst_grad = worst_grad.max(rel_error(&ga, &gn));
    }
    (worst_grad, worst_loss)
}

// ---- integer GEMM oracle ----

/// `C[i][j] = sum_t a[i][t] * bt[j][t]` in u64.
pub fn int_gemm(a: &[u32], bt: &[u32], m: usize, p: usize, n: usize) -> Vec<u64> {
    let mut c = vec![0u64; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..p).map(|t| a[i * p + t] as u64 * bt[j * p + t] as u64).sum();
        }
    }
    c
}

// ---- reference levels of the fractional-bit quantizer ----

/// Published level table: `(k, levels)`, two decimals.
pub const LEVEL_TABLE: &[(f64, &[f64])] = &[
    (1.0, &[0.0, 1.0]),
    (1.5, &[0.0, 0.55, 1.0]),
    (2.0, &[0.0, 0.33, 0.66, 1.0]),
    (2.25, &[0.0, 0.26, 0.53, 0.80, 1.0]),
    (2.5, &[0.0, 0.21, 0.42, 0.64, 0.85, 1.0]),
    (2.75, &[0.0, 0.17, 0.34, 0.52, 0.69, 0.87, 1.0]),
    (3.0, &[0.0, 0.14, 0.28, 0.42, 0.57, 0.71, 0.85, 1.0]),
];

/// Independent level enumeration: `min(1, i / (2^k - 1))` for
/// `i = 0..=ceil(2^k - 1)`, duplicates removed.
pub fn oracle_levels(k: f64) -> Vec<f64> {
    let scale = k.exp2() - 1.0;
    let mut out: Vec<f64> = (0..=scale.ceil() as usize)
        .map(|i| (i as f64 / scale).min(1.0))
        .collect();
    out.dedup();
    out
}
