//! Training and evaluation of the quantized network.
//!
//! Per minibatch: advance the temperature (fractional epochs), hard-assign
//! the first time it drops below the threshold, sample or fetch the bit
//! vector, then forward, cross-entropy, backward and one Adam step on the
//! weights and (while exploring) on the allocation logits.

use std::fs;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc::{round_allocation, AllocMode, GumbelAllocator, LayerPrecision};
use crate::config::{allocation_string, Arm, ExperimentConfig};
use crate::data::{MnistSet, Split};
use crate::error::{contract, Error, Result};
use crate::model::{build_mnist_model, Model};
use crate::summary::RunSummary;
use crate::tensor::{Adam, Graph, Tensor};

pub const NETWORK_NAME: &str = "mnist-lenet5";

pub const STREAM_DATA: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_GUMBEL: u64 = 3;

const EVAL_BATCH: usize = 500;

/// Independent generator `stream` derived from the root seed.
pub fn seed_stream(root: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng
}

/// Anything that maps a batch of images to class scores.
pub trait Predictor {
    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A model evaluated at fixed widths.
pub struct FixedBits<'a> {
    pub model: &'a Model,
    pub bits: LayerPrecision,
}

impl Predictor for FixedBits<'_> {
    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model.forward_quantized(images, &self.bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub error: f64,
    pub loss: f64,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f32::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Misclassification count and summed cross-entropy of one logits batch.
fn score(logits: &Tensor<f32>, labels: &[usize]) -> Result<(usize, f64)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension {
            op: "score",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let classes = shape[1];
    let mut wrong = 0;
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if label >= classes {
            return Err(Error::Validation(format!("label {label} out of {classes} classes")));
        }
        if argmax(row) != label {
            wrong += 1;
        }
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - row[label] as f64;
    }
    Ok((wrong, loss))
}

/// Top-1 error and mean cross-entropy over the whole set.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, set: &MnistSet) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(contract("cannot evaluate on an empty dataset"));
    }
    let n = set.len();
    let (mut wrong, mut loss) = (0, 0.0);
    for start in (0..n).step_by(EVAL_BATCH) {
        let len = EVAL_BATCH.min(n - start);
        let images = set.images.slice_leading(start, len)?;
        let (w, l) = score(&predictor.logits(&images)?, &set.labels[start..start + len])?;
        wrong += w;
        loss += l;
    }
    Ok(Evaluation {
        error: wrong as f64 / n as f64,
        loss: loss / n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricSplit {
    Train,
    Val,
}

impl MetricSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricSplit::Train => "train",
            MetricSplit::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: MetricSplit,
    pub error: f64,
    pub loss: f64,
    pub tau: f64,
    /// Mean sampled widths for train rows, evaluation widths for val rows.
    pub bits: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn metrics_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "split", "error", "loss", "tau"].map(String::from).to_vec();
    h.extend((0..layers).map(|i| format!("bits_{i}")));
    h.extend((0..layers).map(|i| format!("logit_{i}")));
    h
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], layers: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(layers))?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            r.split.as_str().to_string(),
            format!("{:.6}", r.error),
            format!("{:.6}", r.loss),
            format!("{:.6}", r.tau),
        ];
        rec.extend(r.bits.iter().map(|b| format!("{b:.6}")));
        rec.extend(r.logits.iter().map(|l| format!("{l:.6}")));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: Model,
    pub history: Vec<MetricsRow>,
    pub final_bits: Vec<u32>,
    pub final_val_error: f64,
    /// Fractional epoch at which the allocation froze (learned arm only).
    pub hard_at: Option<f64>,
    pub final_logits: Vec<f64>,
}

impl TrainReport {
    pub fn summary(&self, cfg: &ExperimentConfig) -> RunSummary {
        RunSummary {
            network: NETWORK_NAME.to_string(),
            label: cfg.label(),
            seed: cfg.seed,
            val_error: self.final_val_error,
            allocation: self.final_bits.clone(),
        }
    }
}

/// Loads the configured data and trains.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let mut train_set = MnistSet::load_dir(&cfg.data_dir, Split::Train)?;
    let mut val_set = MnistSet::load_dir(&cfg.data_dir, Split::Test)?;
    if let Some(n) = cfg.train_limit {
        train_set = train_set.take(n.min(train_set.len()))?;
    }
    if let Some(n) = cfg.val_limit {
        val_set = val_set.take(n.min(val_set.len()))?;
    }
    train_on(cfg, &train_set, &val_set)
}

/// What one optimizer step saw; handed to the observer of [`train_observed`].
#[derive(Clone, Copy, Debug)]
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub tau: f64,
    pub mode: AllocMode,
    pub bits: &'a [f64],
    pub loss: f64,
    /// Logit gradient, present only while the allocator is exploring.
    pub logit_grad: Option<&'a [f64]>,
}

pub fn train_on(cfg: &ExperimentConfig, train_set: &MnistSet, val_set: &MnistSet) -> Result<TrainReport> {
    train_observed(cfg, train_set, val_set, |_| {})
}

pub fn train_observed<F>(
    cfg: &ExperimentConfig,
    train_set: &MnistSet,
    val_set: &MnistSet,
    mut observe: F,
) -> Result<TrainReport>
where
    F: FnMut(&StepInfo<'_>),
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(contract("empty training set"));
    }
    let layers = cfg.layers;
    let mut model = build_mnist_model(&mut seed_stream(cfg.seed, STREAM_INIT));
    if model.quantized_layers() != layers {
        return Err(Error::Validation(format!(
            "config names {layers} quantized layers, model has {}",
            model.quantized_layers()
        )));
    }
    let mut data_rng = seed_stream(cfg.seed, STREAM_DATA);
    let mut allocator = match &cfg.arm {
        Arm::Learned { budget } => Some(GumbelAllocator::from_rng(
            layers,
            *budget,
            seed_stream(cfg.seed, STREAM_GUMBEL),
        )?),
        Arm::Manual(_) => None,
    };
    let mut adam = Adam::<f32>::new(cfg.lr as f32);
    let mut logit_adam = Adam::<f64>::new(cfg.logit_lr);

    let n = train_set.len();
    let batches = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(2 * cfg.epochs);
    let mut hard_at = None;
    let mut final_bits = Vec::new();
    let mut final_val_error = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut data_rng);
        let (mut wrong, mut loss_sum) = (0usize, 0.0f64);
        let mut bits_sum = vec![0.0; layers];
        let mut tau = cfg.schedule.temperature(epoch as f64);
        for b in 0..batches {
            let t = epoch as f64 + b as f64 / batches as f64;
            tau = cfg.schedule.temperature(t);
            let precision = match (&cfg.arm, allocator.as_mut()) {
                (Arm::Manual(bits), _) => LayerPrecision::hard(bits),
                (Arm::Learned { .. }, Some(alloc)) => {
                    alloc.set_temperature(tau)?;
                    if alloc.mode() == AllocMode::Exploring && tau < cfg.schedule.hard_threshold {
                        alloc.hard_assign(cfg.hard_trials)?;
                        hard_at = Some(t);
                    }
                    alloc.sample_allocation()
                }
                (Arm::Learned { .. }, None) => unreachable!("learned arm always has an allocator"),
            };
            let exploring = precision.mode() == AllocMode::Exploring;

            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let mut g = Graph::<f32>::new();
            let x = g.constant(train_set.images.gather_leading(idx)?);
            let bits_t = Tensor::new([layers], precision.bits().iter().map(|&k| k as f32).collect())?;
            let bits_var = if exploring {
                g.leaf(bits_t.with_grad())
            } else {
                g.constant(bits_t)
            };
            let fwd = model.forward(&mut g, x, bits_var)?;
            let loss = g.softmax_cross_entropy(fwd.logits, &labels)?;
            let loss_value = g.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite { epoch, tau });
            }
            g.backward(loss)?;

            let (w, _) = score(g.value(fwd.logits), &labels)?;
            wrong += w;
            loss_sum += loss_value * labels.len() as f64;
            bits_sum.iter_mut().zip(precision.bits()).for_each(|(s, k)| *s += k);

            for (p, &v) in model.params_mut().into_iter().zip(fwd.params.iter().flatten()) {
                p.zero_grad();
                p.accumulate_grad(g.grad(v).expect("parameter grad"))?;
            }
            adam.step(&mut model.params_mut())?;

            let mut logit_grad = None;
            if exploring {
                let alloc = allocator.as_mut().expect("exploring implies learned");
                let up: Vec<f64> = g.grad(bits_var).expect("bits grad").iter().map(|&v| v as f64).collect();
                let grad = alloc.allocator_backward(&up)?;
                let logits = alloc.logits_mut();
                logits.zero_grad();
                logits.accumulate_grad(&grad)?;
                logit_adam.step(&mut [logits])?;
                logit_grad = Some(grad);
            }
            observe(&StepInfo {
                epoch,
                batch: b,
                tau,
                mode: precision.mode(),
                bits: precision.bits(),
                loss: loss_value,
                logit_grad: logit_grad.as_deref(),
            });
        }

        let logits: Vec<f64> = allocator
            .as_ref()
            .map(|a| a.logits().data().to_vec())
            .unwrap_or_else(|| vec![0.0; layers]);
        let mean_bits: Vec<f64> = bits_sum.iter().map(|s| s / batches as f64).collect();
        history.push(MetricsRow {
            epoch,
            split: MetricSplit::Train,
            error: wrong as f64 / n as f64,
            loss: loss_sum / n as f64,
            tau,
            bits: mean_bits.clone(),
            logits: logits.clone(),
        });

        let eval_bits = match (&cfg.arm, allocator.as_ref().and_then(|a| a.hard_bits())) {
            (Arm::Manual(bits), _) => bits.clone(),
            (_, Some(hard)) => hard.to_vec(),
            (Arm::Learned { budget }, None) => round_allocation(&mean_bits, *budget)?,
        };
        let eval = evaluate(
            &FixedBits {
                model: &model,
                bits: LayerPrecision::hard(&eval_bits),
            },
            val_set,
        )?;
        history.push(MetricsRow {
            epoch,
            split: MetricSplit::Val,
            error: eval.error,
            loss: eval.loss,
            tau,
            bits: eval_bits.iter().map(|&b| b as f64).collect(),
            logits,
        });
        final_bits = eval_bits;
        final_val_error = eval.error;
    }

    let final_logits = allocator
        .as_ref()
        .map(|a| a.logits().data().to_vec())
        .unwrap_or_else(|| vec![0.0; layers]);
    Ok(TrainReport {
        model,
        history,
        final_bits,
        final_val_error,
        hard_at,
        final_logits,
    })
}

/// Trains and writes `metrics.csv`, `summary.csv` and `config.txt` into the
/// configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let report = train(cfg)?;
    write_outputs(cfg, &report)?;
    Ok(report)
}

pub fn write_outputs(cfg: &ExperimentConfig, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    write_metrics_csv(
        &report.history,
        cfg.layers,
        fs::File::create(cfg.output_dir.join("metrics.csv"))?,
    )?;
    report
        .summary(cfg)
        .write_csv(fs::File::create(cfg.output_dir.join("summary.csv"))?)?;
    fs::write(cfg.output_dir.join("config.txt"), cfg.to_string())?;
    Ok(())
}

/// One line in the layout of the results table:
/// network, experiment, validation error, final allocation.
pub fn summary_line(cfg: &ExperimentConfig, report: &TrainReport) -> String {
    format!(
        "{NETWORK_NAME}  {}  {:.2}%  {}",
        cfg.label(),
        100.0 * report.final_val_error,
        allocation_string(&report.final_bits)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Oracle(Vec<usize>);

    impl Predictor for Oracle {
        fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
            // images carry their index in pixel 0
            let n = images.shape()[0];
            let mut out = vec![0.0f32; n * 10];
            for i in 0..n {
                let id = images.data()[i * 784] as usize;
                out[i * 10 + self.0[id]] = 10.0;
            }
            Tensor::new([n, 10], out)
        }
    }

    struct Noise(u64);

    impl Predictor for Noise {
        fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
            let n = images.shape()[0];
            let first = images.data()[0] as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ first);
            Tensor::new([n, 10], (0..n * 10).map(|_| rng.gen::<f32>()).collect())
        }
    }

    fn indexed_set(n: usize) -> MnistSet {
        let mut pixels = vec![0.0f32; n * 784];
        for i in 0..n {
            pixels[i * 784] = i as f32;
        }
        MnistSet {
            images: Tensor::new([n, 1, 28, 28], pixels).unwrap(),
            labels: (0..n).map(|i| (i * 7 + 3) % 10).collect(),
        }
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let set = indexed_set(1200);
        let eval = evaluate(&Oracle(set.labels.clone()), &set).unwrap();
        assert_eq!(eval.error, 0.0);
    }

    #[test]
    fn random_predictor_near_ninety_percent() {
        let set = indexed_set(10_000);
        let eval = evaluate(&Noise(9), &set).unwrap();
        assert!((eval.error - 0.9).abs() < 0.01, "{}", eval.error);
        assert_eq!(eval, evaluate(&Noise(9), &set).unwrap());
    }

    #[test]
    fn empty_set_is_rejected() {
        let set = MnistSet {
            images: Tensor::zeros([1, 1, 28, 28]),
            labels: vec![],
        };
        assert!(matches!(evaluate(&Noise(0), &set), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_logits_loss_is_ln_classes() {
        let logits = Tensor::new([2, 10], vec![0.5f32; 20]).unwrap();
        let (_, loss) = score(&logits, &[1, 4]).unwrap();
        assert!((loss / 2.0 - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn streams_differ() {
        let a: u64 = seed_stream(5, STREAM_DATA).gen();
        let b: u64 = seed_stream(5, STREAM_INIT).gen();
        let c: u64 = seed_stream(5, STREAM_DATA).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn metrics_header_layout() {
        assert_eq!(
            metrics_header(2).join(","),
            "epoch,split,error,loss,tau,bits_0,bits_1,logit_0,logit_1"
        );
    }
}
