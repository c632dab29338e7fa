//! Mini-batch SGD over the combined objective
//! `L = L_main + lambda * sum_i L_mask_i`.
//!
//! Auxiliary Maskout heads are cloned from the main head at the start of
//! epoch `aux_start_epoch` (0-based) and contribute to the loss from then on.
//! Only the main head is used for evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode, AgeLabel, EncodedTarget, EncodingConfig};
use crate::error::{Error, Result};
use crate::loss::{self, LogitBlock};
use crate::maskout::{landmark_masks_with_side, FeatureMap, Mask};
use crate::metrics::{self, Prediction};
use crate::model::{self, backward_into, forward, init_params, ModelDims, ModelParams};
use crate::synth::Sample;

/// Number of Maskout branches (one per facial landmark).
pub const AUX_BRANCHES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(epoch, factor)`: multiply the learning rate by `factor` at the start
    /// of that (0-based) epoch.
    pub lr_drops: Vec<(usize, f64)>,
    /// Weight of the summed auxiliary losses.
    pub lambda: f64,
    pub aux_start_epoch: usize,
    /// Side of the erased square in each Maskout mask.
    pub mask_side: usize,
    pub seed: u64,
    pub encoding: EncodingConfig,
    /// Average main-branch logits over the input and its mirror at test time.
    pub flip_avg: bool,
    /// Multiplier on every loss gradient. Per-sample losses are normalized
    /// to comparable magnitudes across families; a scale of `K/2` restores
    /// the summed-over-pairs gradient size of the ranking losses.
    #[serde(default = "unit_scale")]
    pub loss_scale: f64,
    /// Emit one `epoch=.. loss=.. val_mae=..` line per epoch on stderr.
    #[serde(default)]
    pub progress: bool,
}

fn unit_scale() -> f64 {
    1.0
}

impl TrainConfig {
    /// The desk-scale schedule: SGD with momentum 0.9, weight decay 2e-4,
    /// lr 0.01 dropped tenfold at 80% and 90% of training, batch 64,
    /// lambda 0.3, auxiliary branches from epoch 10, 4x4 holes.
    pub fn desk_default(encoding: EncodingConfig, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 64,
            epochs,
            lr_drops: relative_drops(epochs, &[0.8, 0.9], 0.1),
            lambda: 0.3,
            aux_start_epoch: 10,
            mask_side: 4,
            seed,
            encoding,
            flip_avg: true,
            loss_scale: 1.0,
            progress: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        self.encoding.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return fail(format!("loss scale must be positive, got {}", self.loss_scale));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.mask_side == 0 {
            return fail("mask side must be positive".into());
        }
        let mut prev = None;
        for &(e, f) in &self.lr_drops {
            if e >= self.epochs {
                return fail(format!("lr drop at epoch {e} is not before epoch {}", self.epochs));
            }
            if prev.is_some_and(|p| e <= p) {
                return fail("lr drop epochs must be strictly increasing".into());
            }
            if !(f > 0.0 && f.is_finite()) {
                return fail(format!("lr drop factor must be positive, got {f}"));
            }
            prev = Some(e);
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }
}

/// Drop epochs at the given fractions of `epochs`, deduplicated and kept
/// strictly inside `1..epochs`.
pub fn relative_drops(epochs: usize, fractions: &[f64], factor: f64) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for f in fractions {
        let e = (f * epochs as f64).round() as usize;
        if e >= 1 && e < epochs && out.last().is_none_or(|&(p, _)| e > p) {
            out.push((e, factor));
        }
    }
    out
}

/// Backbone shape; the rest of [`ModelDims`] follows from data and encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: usize,
    pub depth: usize,
}

impl Architecture {
    pub fn dims(&self, c_in: usize, height: usize, width: usize, enc: &EncodingConfig) -> ModelDims {
        ModelDims {
            c_in,
            c_out: self.hidden,
            height,
            width,
            d: enc.logit_len(),
            n_heads: 1 + AUX_BRANCHES,
            depth: self.depth,
        }
    }
}

/// Index sets into a shared sample pool.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub samples: &'a [Sample],
    pub train: &'a [usize],
    /// May be empty; then no validation MAE is recorded.
    pub val: &'a [usize],
    /// May be empty; then no final test metrics are recorded.
    pub test: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub aux_active: bool,
    /// Sample-mean main-branch loss.
    pub main_loss: f64,
    /// Sample-mean of the unweighted sum of auxiliary losses; zero when
    /// lambda is zero, since the branches are then not evaluated.
    pub aux_loss: f64,
    /// Sample-mean of `main + lambda * aux`.
    pub combined_loss: f64,
    /// MAE of the main branch on the training samples as they were seen
    /// during the epoch.
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub mae: f64,
    pub epsilon_error: f64,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub config: TrainConfig,
    pub architecture: Architecture,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub test: Option<EvalMetrics>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<TrainReport> {
        let r: TrainReport = serde_json::from_str(text)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Format {
                path: "<report>".into(),
                reason: format!("unsupported report version {}", r.version),
            });
        }
        Ok(r)
    }
}

/// Classic momentum SGD with L2 in the gradient:
/// `v = momentum * v + g + weight_decay * p; p -= lr * v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    velocity: &mut ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.dims != grads.dims || params.dims != velocity.dims {
        return Err(Error::Contract("sgd_step on mismatched parameter shapes".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    for ((p, g), v) in params
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(velocity.slices_mut())
    {
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// `main + lambda * sum(aux)`.
pub fn combined_loss(main: f64, aux: &[f64], lambda: f64) -> f64 {
    if aux.is_empty() {
        return main;
    }
    main + lambda * aux.iter().sum::<f64>()
}

fn target_table(enc: &EncodingConfig) -> Result<Vec<EncodedTarget>> {
    (1..=enc.max_age as i64)
        .map(|y| encode(AgeLabel::new(y, enc.max_age)?, enc))
        .collect()
}

fn check_data(data: &TrainData<'_>, enc: &EncodingConfig) -> Result<()> {
    for &i in data.train.iter().chain(data.val).chain(data.test) {
        let s = data
            .samples
            .get(i)
            .ok_or_else(|| Error::Contract(format!("sample index {i} out of range")))?;
        if s.age < 1 || s.age > enc.max_age {
            return Err(Error::AgeOutOfRange {
                age: s.age as i64,
                max_age: enc.max_age,
            });
        }
    }
    let train: std::collections::BTreeSet<usize> = data.train.iter().copied().collect();
    if data.test.iter().chain(data.val).any(|i| train.contains(i)) {
        return Err(Error::Contract("train and evaluation splits overlap".into()));
    }
    Ok(())
}

/// Trains a fresh model. Deterministic given `cfg.seed`.
pub fn train(
    arch: Architecture,
    data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let enc = cfg.encoding;
    let first = data
        .train
        .first()
        .map(|&i| &data.samples[i])
        .or_else(|| data.samples.first())
        .ok_or_else(|| Error::Contract("training needs a non-empty dataset".into()))?;
    let (c_in, h, w) = (first.input.channels(), first.input.height(), first.input.width());
    let dims = arch.dims(c_in, h, w, &enc);
    let mut params = init_params(cfg.seed, dims)?;
    let mut report = TrainReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        architecture: arch,
        seed: cfg.seed,
        epochs: Vec::with_capacity(cfg.epochs),
        test: None,
        wall_seconds: 0.0,
    };
    if cfg.epochs > 0 {
        if data.train.is_empty() {
            return Err(Error::Contract("empty training split".into()));
        }
        check_data(&data, &enc)?;
        let masks = landmark_masks_with_side(h, w, cfg.mask_side)?;
        let targets = target_table(&enc)?;
        let mut velocity = params.zeros_like();
        let mut grads = params.zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
        let mut order = data.train.to_vec();
        let mut aux_active = false;
        for epoch in 0..cfg.epochs {
            if epoch == cfg.aux_start_epoch {
                for b in 1..params.heads.len() {
                    model::clone_head(&mut params, 0, b)?;
                    // momentum from the pre-clone weights would make the copies drift apart
                    let v = &mut velocity.heads[b];
                    v.weight.iter_mut().chain(v.bias.iter_mut()).for_each(|x| *x = 0.0);
                }
                aux_active = true;
            }
            let lr = cfg.lr_at(epoch);
            order.shuffle(&mut rng);
            let mut sums = [0.0f64; 4];
            for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
                let last_good = params.clone();
                grads.scale(0.0);
                let scale = cfg.loss_scale / batch.len() as f64;
                let accumulated = batch.iter().try_for_each(|&i| -> Result<()> {
                    let s = &data.samples[i];
                    let target = &targets[s.age - 1];
                    // with lambda = 0 the branches cannot affect training, so skip them
                    let branches = aux_active && cfg.lambda > 0.0;
                    let (logits, trace) = forward(&params, &s.input, &masks, branches)?;
                    let mut branch_grads = Vec::with_capacity(logits.len());
                    let mut aux = Vec::with_capacity(logits.len() - 1);
                    let mut main = 0.0;
                    for (b, o) in logits.into_iter().enumerate() {
                        let block = LogitBlock::new(enc.family, enc.max_age, o)?;
                        let lv = loss::loss(&block, target)?;
                        let weight = if b == 0 {
                            main = lv.value;
                            sums[3] += (loss::predict_age(&block)? - s.age as f64).abs();
                            scale
                        } else {
                            aux.push(lv.value);
                            scale * cfg.lambda
                        };
                        branch_grads.push(lv.grad.iter().map(|g| g * weight).collect::<Vec<_>>());
                    }
                    sums[0] += main;
                    sums[1] += aux.iter().sum::<f64>();
                    sums[2] += combined_loss(main, &aux, cfg.lambda);
                    backward_into(&params, &trace, &branch_grads, &mut grads)
                });
                match accumulated {
                    Err(Error::NonFinite(_)) => {
                        return Err(Error::Diverged {
                            epoch,
                            step,
                            last_good: Box::new(last_good),
                        })
                    }
                    other => other?,
                }
                if !grads.is_finite() || !sums[2].is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        last_good: Box::new(last_good),
                    });
                }
                sgd_step(&mut params, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
                if !params.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        last_good: Box::new(last_good),
                    });
                }
            }
            let n = order.len() as f64;
            let val_mae = if data.val.is_empty() {
                None
            } else {
                Some(
                    evaluate(&params, data.samples, data.val, &enc, cfg.flip_avg)
                        .map_err(|e| overflowed(e, epoch, &params))?
                        .mae,
                )
            };
            let rec = EpochRecord {
                epoch,
                lr,
                aux_active,
                main_loss: sums[0] / n,
                aux_loss: sums[1] / n,
                combined_loss: sums[2] / n,
                train_mae: sums[3] / n,
                val_mae,
            };
            if cfg.progress {
                eprintln!(
                    "epoch={} loss={:.6} main_loss={:.6} aux_loss={:.6} train_mae={:.4} val_mae={}",
                    rec.epoch + 1,
                    rec.combined_loss,
                    rec.main_loss,
                    rec.aux_loss,
                    rec.train_mae,
                    rec.val_mae.map_or("nan".to_string(), |v| format!("{v:.4}")),
                );
            }
            report.epochs.push(rec);
        }
    }
    if !data.test.is_empty() {
        let last = cfg.epochs.saturating_sub(1);
        report.test = Some(
            evaluate(&params, data.samples, data.test, &enc, cfg.flip_avg)
                .map_err(|e| overflowed(e, last, &params))?,
        );
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, report))
}

// Finite weights large enough to overflow on held-out inputs count as divergence.
fn overflowed(e: Error, epoch: usize, params: &ModelParams) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            epoch,
            step: 0,
            last_good: Box::new(params.clone()),
        },
        e => e,
    }
}

/// Main-branch logits, optionally averaged with those of the mirrored input.
pub fn main_logits(params: &ModelParams, input: &FeatureMap, flip_avg: bool) -> Result<Vec<f64>> {
    let (mut logits, _) = forward(params, input, &[], false)?;
    let mut out = logits.swap_remove(0);
    if flip_avg {
        let (flipped, _) = forward(params, &input.mirrored(), &[], false)?;
        for (a, b) in out.iter_mut().zip(&flipped[0]) {
            *a = 0.5 * (*a + b);
        }
    }
    Ok(out)
}

pub fn predict(params: &ModelParams, input: &FeatureMap, enc: &EncodingConfig, flip_avg: bool) -> Result<f64> {
    let block = LogitBlock::new(enc.family, enc.max_age, main_logits(params, input, flip_avg)?)?;
    loss::predict_age(&block)
}

pub fn predictions(
    params: &ModelParams,
    samples: &[Sample],
    idx: &[usize],
    enc: &EncodingConfig,
    flip_avg: bool,
) -> Result<Vec<Prediction>> {
    if params.dims.d != enc.logit_len() {
        return Err(Error::Contract(format!(
            "model outputs {} logits but {} with K={} needs {}",
            params.dims.d,
            enc.family,
            enc.max_age,
            enc.logit_len()
        )));
    }
    idx.iter()
        .map(|&i| {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::Contract(format!("sample index {i} out of range")))?;
            Ok(Prediction::with_sigma(
                predict(params, &s.input, enc, flip_avg)?,
                s.age,
                s.sigma_n,
            ))
        })
        .collect()
}

/// MAE and epsilon-error of the main branch over `idx`.
pub fn evaluate(
    params: &ModelParams,
    samples: &[Sample],
    idx: &[usize],
    enc: &EncodingConfig,
    flip_avg: bool,
) -> Result<EvalMetrics> {
    if idx.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let preds = predictions(params, samples, idx, enc, flip_avg)?;
    Ok(EvalMetrics {
        n: preds.len(),
        mae: metrics::mae(&preds)?,
        epsilon_error: metrics::epsilon_error(&preds)?,
    })
}

/// The five universal masks mirrored along the width, matching a flipped
/// input.
pub fn mirrored_masks(masks: &[Mask]) -> Vec<Mask> {
    masks.iter().map(Mask::mirrored).collect()
}
