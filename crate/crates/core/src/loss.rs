//! Per-sample training losses on raw logits and their analytic gradients.
//!
//! LDL uses one softmax over all `K` outputs. The two ranking families use a
//! softmax over each consecutive pair of outputs: pair `k` occupies logits
//! `(2k, 2k + 1)`. For Hard-ranking the pair is (not older, older); for
//! Soft-ranking it is (`p^k`, `1 - p^k`), i.e. (younger than k, not younger).
//!
//! All losses are per sample and averaged over classifiers (`1/K` for
//! Soft-ranking, `1/(K-1)` for Hard-ranking); batch means are the caller's job.

use crate::encoding::{self, AgeLabel, EncodedTarget, Family};
use crate::error::{Error, Result};

/// Floor applied to predicted probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LogitBlock {
    pub family: Family,
    pub max_age: usize,
    pub logits: Vec<f64>,
}

impl LogitBlock {
    pub fn new(family: Family, max_age: usize, logits: Vec<f64>) -> Result<Self> {
        let want = family.logit_len(max_age);
        if logits.len() != want {
            return Err(Error::shape(
                format!("{want} logits for {family} with K={max_age}"),
                logits.len(),
            ));
        }
        Ok(LogitBlock {
            family,
            max_age,
            logits,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(softmax_unchecked(logits))
}

fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// `p * ln(p / q)` with `0 ln 0 = 0` and `ln q` floored at `ln(LOG_EPS)`.
fn kl_term(p: f64, log_q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p.ln() - log_q.max(LOG_EPS.ln()))
    }
}

/// Two-way softmax over each consecutive pair of logits.
pub fn pair_softmax(logits: &[f64]) -> Result<Vec<(f64, f64)>> {
    if logits.len() % 2 != 0 {
        return Err(Error::shape("even number of logits", logits.len()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(logits
        .chunks_exact(2)
        .map(|c| {
            let (p0, p1) = pair_probs(c[0], c[1]);
            (p0, p1)
        })
        .collect())
}

fn pair_probs(a: f64, b: f64) -> (f64, f64) {
    // sigmoid of the difference, computed on the side that cannot overflow
    let d = b - a;
    if d >= 0.0 {
        let e = (-d).exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    } else {
        let e = d.exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    }
}

fn pair_log_probs(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    (a - lse, b - lse)
}

fn check_block(logits: &LogitBlock, target: &EncodedTarget, family: Family) -> Result<()> {
    if logits.family != family || target.family != family {
        return Err(Error::Contract(format!(
            "{family} loss called with {} logits and {} target",
            logits.family, target.family
        )));
    }
    if target.values.len() != family.target_len(logits.max_age) {
        return Err(Error::shape(
            family.target_len(logits.max_age),
            target.values.len(),
        ));
    }
    if logits.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(())
}

/// KL(p || softmax(o)) with gradient `softmax(o) - p`.
pub fn ldl_loss(logits: &LogitBlock, target: &EncodedTarget) -> Result<LossValue> {
    check_block(logits, target, Family::Ldl)?;
    let log_q = log_softmax(&logits.logits);
    let value = target
        .values
        .iter()
        .zip(&log_q)
        .map(|(&p, &lq)| kl_term(p, lq))
        .sum();
    let grad = log_q
        .iter()
        .zip(&target.values)
        .map(|(&lq, &p)| lq.exp() - p)
        .collect();
    Ok(LossValue { value, grad })
}

/// Mean over the `K` pairs of KL((p, 1-p) || pair softmax).
pub fn soft_rank_loss(logits: &LogitBlock, target: &EncodedTarget) -> Result<LossValue> {
    check_block(logits, target, Family::SoftRank)?;
    let scale = 1.0 / target.values.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.logits.len()];
    for (k, (pair, &p)) in logits.logits.chunks_exact(2).zip(&target.values).enumerate() {
        let (l0, l1) = pair_log_probs(pair[0], pair[1]);
        value += kl_term(p, l0) + kl_term(1.0 - p, l1);
        let (q0, q1) = pair_probs(pair[0], pair[1]);
        grad[2 * k] = scale * (q0 - p);
        grad[2 * k + 1] = scale * (q1 - (1.0 - p));
    }
    Ok(LossValue {
        value: value * scale,
        grad,
    })
}

/// Mean over the `K - 1` binary classifiers of the cross-entropy.
pub fn hard_rank_loss(logits: &LogitBlock, target: &EncodedTarget) -> Result<LossValue> {
    check_block(logits, target, Family::HardRank)?;
    let scale = 1.0 / target.values.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.logits.len()];
    for (k, (pair, &v)) in logits.logits.chunks_exact(2).zip(&target.values).enumerate() {
        let (l0, l1) = pair_log_probs(pair[0], pair[1]);
        let older = v >= 0.5;
        let log_p = if older { l1 } else { l0 };
        value -= log_p.max(LOG_EPS.ln());
        let (q0, q1) = pair_probs(pair[0], pair[1]);
        let (t0, t1) = if older { (0.0, 1.0) } else { (1.0, 0.0) };
        grad[2 * k] = scale * (q0 - t0);
        grad[2 * k + 1] = scale * (q1 - t1);
    }
    Ok(LossValue {
        value: value * scale,
        grad,
    })
}

/// Dispatches on the logits' family.
pub fn loss(logits: &LogitBlock, target: &EncodedTarget) -> Result<LossValue> {
    match logits.family {
        Family::Ldl => ldl_loss(logits, target),
        Family::HardRank => hard_rank_loss(logits, target),
        Family::SoftRank => soft_rank_loss(logits, target),
    }
}

/// Bit `k` is set iff the "older" logit of pair `k` strictly exceeds the
/// "not older" one.
pub fn hard_rank_predict_bits(logits: &LogitBlock) -> Result<Vec<u8>> {
    if logits.family != Family::HardRank {
        return Err(Error::Contract(format!(
            "hard-rank thresholding on {} logits",
            logits.family
        )));
    }
    Ok(logits
        .logits
        .chunks_exact(2)
        .map(|p| u8::from(p[1] > p[0]))
        .collect())
}

/// Decodes network outputs to an age with the family's own rule. LDL returns
/// the (real) expectation; the ranking families return integers.
pub fn predict_age(logits: &LogitBlock) -> Result<f64> {
    match logits.family {
        Family::Ldl => encoding::decode_ldl(&softmax(&logits.logits)?),
        Family::HardRank => {
            encoding::decode_hard_rank(&hard_rank_predict_bits(logits)?).map(|a| a.get() as f64)
        }
        Family::SoftRank => encoding::decode_soft_rank(&pair_softmax(&logits.logits)?)
            .map(|a: AgeLabel| a.get() as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{encode, EncodingConfig};

    fn block(family: Family, k: usize, logits: Vec<f64>) -> LogitBlock {
        LogitBlock::new(family, k, logits).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
        let s = softmax(&[1.0, 2.0]).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((s[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((s[1] - 0.7311).abs() < 1e-4);
        assert!(softmax(&[f64::NAN, 1.0]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn ldl_loss_zero_at_target() {
        let target = EncodedTarget {
            family: Family::Ldl,
            values: vec![0.2, 0.3, 0.5],
        };
        let logits: Vec<f64> = target.values.iter().map(|p: &f64| p.ln() + 7.0).collect();
        let l = ldl_loss(&block(Family::Ldl, 3, logits), &target).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert!(l.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ldl_loss_one_hot_vs_uniform() {
        let target = EncodedTarget {
            family: Family::Ldl,
            values: vec![0.0, 1.0, 0.0, 0.0],
        };
        let l = ldl_loss(&block(Family::Ldl, 4, vec![0.3; 4]), &target).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ldl_loss_clamps_dead_outputs() {
        let target = EncodedTarget {
            family: Family::Ldl,
            values: vec![0.5, 0.5],
        };
        let l = ldl_loss(&block(Family::Ldl, 2, vec![0.0, -1e4]), &target).unwrap();
        assert!(l.value.is_finite());
        let want = 0.5 * 0.5f64.ln() + 0.5 * (0.5f64.ln() - LOG_EPS.ln());
        assert!((l.value - want).abs() < 1e-9);
    }

    #[test]
    fn hard_rank_uniform_pairs_give_ln2() {
        let cfg = EncodingConfig::new(Family::HardRank, 6, 0.0).unwrap();
        for y in 1..=6 {
            let t = encode(AgeLabel::new(y, 6).unwrap(), &cfg).unwrap();
            let l = hard_rank_loss(&block(Family::HardRank, 6, vec![0.4; 10]), &t).unwrap();
            assert!((l.value - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_rank_confident_correct_is_near_zero() {
        let cfg = EncodingConfig::new(Family::HardRank, 5, 0.0).unwrap();
        let t = encode(AgeLabel::new(3, 5).unwrap(), &cfg).unwrap();
        let logits: Vec<f64> = t
            .values
            .iter()
            .flat_map(|&v| if v > 0.5 { [0.0, 40.0] } else { [40.0, 0.0] })
            .collect();
        let l = hard_rank_loss(&block(Family::HardRank, 5, logits), &t).unwrap();
        assert!(l.value < 1e-15);
    }

    #[test]
    fn soft_rank_zero_at_target() {
        let cfg = EncodingConfig::new(Family::SoftRank, 20, 2.0).unwrap();
        let t = encode(AgeLabel::new(9, 20).unwrap(), &cfg).unwrap();
        let logits: Vec<f64> = t
            .values
            .iter()
            .flat_map(|&p| [p.ln(), (1.0 - p).ln()])
            .collect();
        let l = soft_rank_loss(&block(Family::SoftRank, 20, logits), &t).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_wrong_family_or_length() {
        assert!(LogitBlock::new(Family::SoftRank, 5, vec![0.0; 9]).is_err());
        let t = EncodedTarget {
            family: Family::Ldl,
            values: vec![0.5, 0.5],
        };
        let b = block(Family::HardRank, 2, vec![0.0, 0.0]);
        assert!(matches!(loss(&b, &t), Err(Error::Contract(_))));
    }

    #[test]
    fn bits_thresholding() {
        let b = block(Family::HardRank, 4, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(hard_rank_predict_bits(&b).unwrap(), vec![1, 1, 1]);
        let b = block(Family::HardRank, 4, vec![0.5; 6]);
        assert_eq!(hard_rank_predict_bits(&b).unwrap(), vec![0, 0, 0]);
        let b = block(Family::HardRank, 2, vec![2.0, 1.0]);
        assert_eq!(hard_rank_predict_bits(&b).unwrap(), vec![0]);
    }

    #[test]
    fn ldl_expectation_is_biased_at_the_youngest_age() {
        let cfg = EncodingConfig::new(Family::Ldl, 101, 1.0).unwrap();
        let t = encode(AgeLabel::new(1, 101).unwrap(), &cfg).unwrap();
        let mean = encoding::decode_ldl(&t.values).unwrap();
        // truncated half-Gaussian mean, summed by hand over k = 1..6
        let w: Vec<f64> = (0..6).map(|d| (-(d * d) as f64 / 2.0).exp()).collect();
        let want: f64 = w.iter().enumerate().map(|(d, v)| (d + 1) as f64 * v).sum::<f64>()
            / w.iter().sum::<f64>();
        assert!((mean - want).abs() < 1e-6);
        assert!(mean - 1.0 > 0.5);
    }

    #[test]
    fn pair_probs_extreme() {
        let (a, b) = pair_probs(800.0, -800.0);
        assert_eq!((a, b), (1.0, 0.0));
        let (a, b) = pair_probs(-800.0, 800.0);
        assert_eq!((a, b), (0.0, 1.0));
    }

    #[test]
    fn predict_age_on_encoded_truth() {
        let k = 30;
        for family in Family::ALL {
            let sigma = if family == Family::HardRank { 0.0 } else { 1.5 };
            let cfg = EncodingConfig::new(family, k, sigma).unwrap();
            for y in 1..=k as i64 {
                let t = encode(AgeLabel::new(y, k).unwrap(), &cfg).unwrap();
                let logits: Vec<f64> = match family {
                    Family::Ldl => t.values.iter().map(|p| p.max(1e-300).ln()).collect(),
                    Family::HardRank => t
                        .values
                        .iter()
                        .flat_map(|&v| [1.0 - v, v])
                        .collect(),
                    Family::SoftRank => t
                        .values
                        .iter()
                        .flat_map(|&p| [p.max(1e-300).ln(), (1.0 - p).max(1e-300).ln()])
                        .collect(),
                };
                let pred = predict_age(&block(family, k, logits)).unwrap();
                // expectation decoding is pulled inwards near the age limits
                let interior = y as f64 > 4.0 * sigma && (k as f64 - y as f64) > 4.0 * sigma;
                if family != Family::Ldl || interior {
                    assert!((pred - y as f64).abs() <= 0.5, "{family} y={y} pred={pred}");
                }
            }
        }
    }
}
