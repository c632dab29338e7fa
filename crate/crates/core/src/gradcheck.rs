//! Finite-difference checks of the analytic gradients.
//!
//! Central differences with step `h = 1e-5`. Elements where both the
//! analytic and numeric derivative are below `1e-8` in magnitude are compared
//! absolutely against `1e-8`; all others by relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode, AgeLabel, EncodedTarget, EncodingConfig, Family};
use crate::error::{Error, Result};
use crate::loss::{loss, LogitBlock};
use crate::maskout::{landmark_masks_with_side, FeatureMap, Mask};
use crate::model::{backward, forward, init_params, ModelDims, ModelParams};

pub const FD_STEP: f64 = 1e-5;
pub const SMALL_GRAD: f64 = 1e-8;
/// Threshold the CLI applies to the worst relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Discrepancy {
    /// Worst relative error over elements with magnitude >= `SMALL_GRAD`.
    pub worst_rel: f64,
    /// Worst absolute error over the remaining elements.
    pub worst_abs_small: f64,
    pub compared: usize,
}

impl Discrepancy {
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Discrepancy {
        let mut d = Discrepancy::default();
        for (&a, &n) in analytic.iter().zip(numeric) {
            d.push(a, n);
        }
        d
    }

    fn push(&mut self, a: f64, n: f64) {
        let scale = a.abs().max(n.abs());
        let diff = (a - n).abs();
        if scale < SMALL_GRAD {
            self.worst_abs_small = self.worst_abs_small.max(diff);
        } else {
            let rel = diff / scale;
            // NaN must count as a failure
            self.worst_rel = if rel.is_nan() { f64::INFINITY } else { self.worst_rel.max(rel) };
        }
        self.compared += 1;
    }

    pub fn merge(&mut self, other: &Discrepancy) {
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        self.worst_abs_small = self.worst_abs_small.max(other.worst_abs_small);
        self.compared += other.compared;
    }

    pub fn within(&self, rel_tol: f64) -> bool {
        self.worst_rel <= rel_tol && self.worst_abs_small <= SMALL_GRAD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub family: Family,
    pub trials: usize,
    pub discrepancy: Discrepancy,
}

/// Central difference of `f` around every coordinate of `x`.
pub fn central_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_target(family: Family, k: usize, rng: &mut ChaCha8Rng) -> Result<EncodedTarget> {
    let sigma = match family {
        Family::HardRank => 0.0,
        _ => rng.gen_range(0.4..4.0),
    };
    let cfg = EncodingConfig::new(family, k, sigma)?;
    encode(AgeLabel::new(rng.gen_range(1..=k as i64), k)?, &cfg)
}

/// Loss-level check: `trials` random `(logits, target)` draws for `family`.
/// `perturb` is added to every analytic gradient element (negative control).
pub fn loss_suite(family: Family, seed: u64, trials: usize, perturb: f64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = Discrepancy::default();
    for _ in 0..trials {
        let k = rng.gen_range(3..=15);
        let target = random_target(family, k, &mut rng)?;
        let n = family.logit_len(k);
        let logits: Vec<f64> = (0..n)
            .map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let block = LogitBlock::new(family, k, logits.clone())?;
        let analytic: Vec<f64> = loss(&block, &target)?.grad.iter().map(|g| g + perturb).collect();
        let numeric = central_difference(&logits, |x| {
            loss(&LogitBlock::new(family, k, x.to_vec()).unwrap(), &target)
                .unwrap()
                .value
        });
        total.merge(&Discrepancy::compare(&analytic, &numeric));
    }
    Ok(SuiteResult {
        suite: "loss".into(),
        family,
        trials,
        discrepancy: total,
    })
}

/// One random model configuration for the full-model check.
#[derive(Debug, Clone)]
pub struct ModelCase {
    pub params: ModelParams,
    pub inputs: Vec<FeatureMap>,
    pub targets: Vec<EncodedTarget>,
    pub masks: Vec<Mask>,
    pub aux_active: bool,
    pub lambda: f64,
    pub enc: EncodingConfig,
}

impl ModelCase {
    pub fn random(family: Family, aux_active: bool, rng: &mut ChaCha8Rng) -> Result<ModelCase> {
        let k = rng.gen_range(3..=8);
        let side = rng.gen_range(2..=4);
        let height = rng.gen_range(side.max(4)..=7);
        let width = rng.gen_range(side.max(4)..=7);
        let dims = ModelDims {
            c_in: rng.gen_range(2..=4),
            c_out: rng.gen_range(3..=6),
            height,
            width,
            d: family.logit_len(k),
            n_heads: 6,
            depth: rng.gen_range(1..=2),
        };
        let sigma = if family == Family::HardRank { 0.0 } else { rng.gen_range(0.5..3.0) };
        let enc = EncodingConfig::new(family, k, sigma)?;
        let masks = landmark_masks_with_side(height, width, side)?;
        loop {
            let mut params = init_params(rng.gen(), dims)?;
            // distinct heads so every branch contributes differently
            for h in &mut params.heads {
                for b in &mut h.bias {
                    *b = 0.3 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            for l in &mut params.backbone {
                for b in &mut l.bias {
                    *b = 0.2 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let n_samples = rng.gen_range(1..=3);
            let inputs: Vec<FeatureMap> = (0..n_samples)
                .map(|_| {
                    let data = (0..dims.c_in * height * width)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    FeatureMap::new(dims.c_in, height, width, data)
                })
                .collect::<Result<_>>()?;
            let targets = (0..n_samples)
                .map(|_| encode(AgeLabel::new(rng.gen_range(1..=k as i64), k)?, &enc))
                .collect::<Result<_>>()?;
            let case = ModelCase {
                params,
                inputs,
                targets,
                masks: masks.clone(),
                aux_active,
                lambda: rng.gen_range(0.05..1.0),
                enc,
            };
            // Finite differences are meaningless across a ReLU kink; redraw
            // until every pre-activation is clear of zero.
            if case.min_abs_preactivation()? > 1e-3 {
                return Ok(case);
            }
        }
    }

    fn min_abs_preactivation(&self) -> Result<f64> {
        let mut m = f64::INFINITY;
        for x in &self.inputs {
            let (_, trace) = forward(&self.params, x, &self.masks, self.aux_active)?;
            for z in trace.pre_activations.iter().flatten() {
                m = m.min(z.abs());
            }
        }
        Ok(m)
    }

    /// Batch-mean combined loss.
    pub fn loss(&self, params: &ModelParams) -> Result<f64> {
        let mut total = 0.0;
        for (x, t) in self.inputs.iter().zip(&self.targets) {
            let (logits, _) = forward(params, x, &self.masks, self.aux_active)?;
            for (b, o) in logits.into_iter().enumerate() {
                let w = if b == 0 { 1.0 } else { self.lambda };
                total += w * loss(&LogitBlock::new(self.enc.family, self.enc.max_age, o)?, t)?.value;
            }
        }
        Ok(total / self.inputs.len() as f64)
    }

    pub fn analytic_grad(&self) -> Result<ModelParams> {
        let mut acc = self.params.zeros_like();
        let scale = 1.0 / self.inputs.len() as f64;
        for (x, t) in self.inputs.iter().zip(&self.targets) {
            let (logits, trace) = forward(&self.params, x, &self.masks, self.aux_active)?;
            let mut up = Vec::with_capacity(logits.len());
            for (b, o) in logits.into_iter().enumerate() {
                let w = scale * if b == 0 { 1.0 } else { self.lambda };
                let g = loss(&LogitBlock::new(self.enc.family, self.enc.max_age, o)?, t)?.grad;
                up.push(g.into_iter().map(|v| v * w).collect());
            }
            acc.add_scaled(&backward(&self.params, &trace, &up)?, 1.0);
        }
        Ok(acc)
    }

    pub fn numeric_grad(&self) -> Result<Vec<f64>> {
        let mut probe = self.params.clone();
        let mut err = None;
        let g = central_difference(&self.params.to_flat(), |flat| {
            probe.set_flat(flat).expect("same length");
            self.loss(&probe).unwrap_or_else(|e| {
                err.get_or_insert(e);
                f64::NAN
            })
        });
        match err {
            Some(e) => Err(e),
            None => Ok(g),
        }
    }
}

/// Full-model check over `trials` random configurations, alternating
/// auxiliary branches on and off.
pub fn model_suite(family: Family, seed: u64, trials: usize, perturb: f64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut total = Discrepancy::default();
    for t in 0..trials {
        let case = ModelCase::random(family, t % 2 == 0, &mut rng)?;
        let analytic: Vec<f64> = case
            .analytic_grad()?
            .to_flat()
            .into_iter()
            .map(|g| g + perturb)
            .collect();
        let numeric = case.numeric_grad()?;
        total.merge(&Discrepancy::compare(&analytic, &numeric));
    }
    Ok(SuiteResult {
        suite: "model".into(),
        family,
        trials,
        discrepancy: total,
    })
}

/// Runs the loss and model suites for every requested family.
pub fn run_all(families: &[Family], seed: u64, trials: usize, perturb: f64) -> Result<Vec<SuiteResult>> {
    if trials == 0 {
        return Err(Error::InvalidConfig("gradcheck needs at least one trial".into()));
    }
    let mut out = Vec::new();
    for (i, &family) in families.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        out.push(loss_suite(family, s, trials, perturb)?);
        out.push(model_suite(family, s, trials, perturb)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrepancy_classification() {
        let d = Discrepancy::compare(&[1.0, 1e-9, -2.0], &[1.00001, 2e-9, -2.0]);
        assert!((d.worst_rel - 1e-5 / 1.00001).abs() < 1e-12);
        assert!((d.worst_abs_small - 1e-9).abs() < 1e-20);
        assert_eq!(d.compared, 3);
        assert!(d.within(1e-4));
        assert!(!Discrepancy::compare(&[f64::NAN], &[1.0]).within(1.0));
    }

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(&[1.0, -2.0], |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn perturbed_gradient_fails() {
        let r = loss_suite(Family::SoftRank, 1, 3, 1e-2).unwrap();
        assert!(!r.discrepancy.within(DEFAULT_TOLERANCE));
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run_all(&[Family::Ldl], 0, 0, 0.0).is_err());
    }
}
