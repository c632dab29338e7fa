//! Ground-truth age encodings and their decoders.
//!
//! Three families are supported:
//!
//! - **LDL**: a Gaussian bump over the `K` age classes, L1-normalized. Decoded
//!   by the expectation of the predicted distribution.
//! - **Hard-ranking**: `K - 1` binary "older than k" indicators. Decoded by
//!   counting the positive classifiers.
//! - **Soft-ranking**: `K` probabilities "younger than k" taken from the
//!   Gaussian CDF centred on the true age. Decoded by the classifier whose
//!   output pair is closest to (0.5, 0.5).
//!
//! Ages are 1-based integers in `[1, K]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{erf, normal_pdf};

pub const DEFAULT_MAX_AGE: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ldl,
    #[serde(rename = "hard")]
    HardRank,
    #[serde(rename = "soft")]
    SoftRank,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Ldl, Family::HardRank, Family::SoftRank];

    /// Length of the encoded target vector for max age `k`.
    pub fn target_len(self, k: usize) -> usize {
        match self {
            Family::Ldl | Family::SoftRank => k,
            Family::HardRank => k - 1,
        }
    }

    /// Width `D` of the output layer feeding this family's loss.
    pub fn logit_len(self, k: usize) -> usize {
        match self {
            Family::Ldl => k,
            Family::HardRank => 2 * (k - 1),
            Family::SoftRank => 2 * k,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Ldl => "ldl",
            Family::HardRank => "hard",
            Family::SoftRank => "soft",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ldl" => Ok(Family::Ldl),
            "hard" | "hard-rank" | "hardrank" | "hard-ranking" => Ok(Family::HardRank),
            "soft" | "soft-rank" | "softrank" | "soft-ranking" => Ok(Family::SoftRank),
            other => Err(Error::InvalidConfig(format!(
                "unknown encoding family '{other}' (expected ldl, hard or soft)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub family: Family,
    /// Largest representable age `K`, in years.
    pub max_age: usize,
    /// Correlation width between adjacent ages, in years.
    pub sigma: f64,
}

impl EncodingConfig {
    pub fn new(family: Family, max_age: usize, sigma: f64) -> Result<Self> {
        let cfg = EncodingConfig {
            family,
            max_age,
            sigma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_age < 2 {
            return Err(Error::InvalidConfig(format!(
                "max age must be at least 2, got {}",
                self.max_age
            )));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if self.family == Family::Ldl && self.sigma == 0.0 {
            return Err(Error::InvalidConfig(
                "LDL needs sigma > 0 (the Gaussian is degenerate at 0)".into(),
            ));
        }
        Ok(())
    }

    pub fn target_len(&self) -> usize {
        self.family.target_len(self.max_age)
    }

    pub fn logit_len(&self) -> usize {
        self.family.logit_len(self.max_age)
    }
}

/// An integer age in `[1, K]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgeLabel(usize);

impl AgeLabel {
    pub fn new(age: i64, max_age: usize) -> Result<Self> {
        if age < 1 || age as u64 > max_age as u64 {
            return Err(Error::AgeOutOfRange { age, max_age });
        }
        Ok(AgeLabel(age as usize))
    }

    pub fn get(self) -> usize {
        self.0
    }

    fn check(self, max_age: usize) -> Result<()> {
        if self.0 < 1 || self.0 > max_age {
            return Err(Error::AgeOutOfRange {
                age: self.0 as i64,
                max_age,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTarget {
    pub family: Family,
    pub values: Vec<f64>,
}

fn expect_family(cfg: &EncodingConfig, family: Family) -> Result<()> {
    if cfg.family != family {
        return Err(Error::Contract(format!(
            "encoder for {family} called with a {} config",
            cfg.family
        )));
    }
    Ok(())
}

/// Encodes `y` with whichever family `cfg` selects.
pub fn encode(y: AgeLabel, cfg: &EncodingConfig) -> Result<EncodedTarget> {
    match cfg.family {
        Family::Ldl => ldl_encode(y, cfg),
        Family::HardRank => hard_rank_encode(y, cfg),
        Family::SoftRank => soft_rank_encode(y, cfg),
    }
}

/// Gaussian label distribution truncated to `[1, K]` and renormalized.
pub fn ldl_encode(y: AgeLabel, cfg: &EncodingConfig) -> Result<EncodedTarget> {
    expect_family(cfg, Family::Ldl)?;
    cfg.validate()?;
    y.check(cfg.max_age)?;
    let mu = y.get() as f64;
    let mut values: Vec<f64> = (1..=cfg.max_age)
        .map(|k| normal_pdf(k as f64, mu, cfg.sigma))
        .collect();
    let total: f64 = values.iter().sum();
    // The peak sits on an integer, so the sum is at least the peak density and
    // never underflows for any finite sigma > 0.
    for v in &mut values {
        *v /= total;
    }
    Ok(EncodedTarget {
        family: Family::Ldl,
        values,
    })
}

/// `values[k-1] = 1` iff `y > k`, for `k = 1..K-1`.
pub fn hard_rank_encode(y: AgeLabel, cfg: &EncodingConfig) -> Result<EncodedTarget> {
    expect_family(cfg, Family::HardRank)?;
    cfg.validate()?;
    y.check(cfg.max_age)?;
    let values = (1..cfg.max_age)
        .map(|k| if y.get() > k { 1.0 } else { 0.0 })
        .collect();
    Ok(EncodedTarget {
        family: Family::HardRank,
        values,
    })
}

/// `values[k-1] = P(age < k)` under a Gaussian centred on `y`; with `sigma = 0`
/// the pointwise limit (0 below `y`, 0.5 at `y`, 1 above).
pub fn soft_rank_encode(y: AgeLabel, cfg: &EncodingConfig) -> Result<EncodedTarget> {
    expect_family(cfg, Family::SoftRank)?;
    cfg.validate()?;
    y.check(cfg.max_age)?;
    let yv = y.get();
    let values = (1..=cfg.max_age)
        .map(|k| {
            if cfg.sigma == 0.0 {
                match k.cmp(&yv) {
                    std::cmp::Ordering::Less => 0.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Greater => 1.0,
                }
            } else {
                let d = k as f64 - yv as f64;
                0.5 * (1.0 + erf(d / (std::f64::consts::SQRT_2 * cfg.sigma)))
            }
        })
        .collect();
    Ok(EncodedTarget {
        family: Family::SoftRank,
        values,
    })
}

/// Expected age under a predicted distribution over `1..=K`. Not rounded.
pub fn decode_ldl(pred: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Contract("empty prediction".into()));
    }
    if pred.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Contract(
            "prediction must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = pred.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized { sum });
    }
    Ok(pred
        .iter()
        .enumerate()
        .map(|(i, p)| (i + 1) as f64 * p)
        .sum())
}

/// `1 + number of set bits`.
pub fn decode_hard_rank(bits: &[u8]) -> Result<AgeLabel> {
    let mut count = 0;
    for &b in bits {
        match b {
            0 => {}
            1 => count += 1,
            other => {
                return Err(Error::Contract(format!(
                    "hard-rank predictions must be 0 or 1, got {other}"
                )))
            }
        }
    }
    Ok(AgeLabel(1 + count))
}

/// The age `k` whose classifier pair is closest to an even split. Ties go to
/// the smallest `k`.
pub fn decode_soft_rank(pairs: &[(f64, f64)]) -> Result<AgeLabel> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty prediction".into()));
    }
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for (i, &(p0, p1)) in pairs.iter().enumerate() {
        if !(p0.is_finite() && p1.is_finite()) {
            return Err(Error::NonFinite("soft-rank prediction"));
        }
        if (p0 + p1 - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized { sum: p0 + p1 });
        }
        let gap = (p0 - p1).abs();
        if gap < best_gap {
            best_gap = gap;
            best = i;
        }
    }
    Ok(AgeLabel(best + 1))
}

/// Rounds a real-valued age half-up and clamps it to `[1, K]`.
pub fn round_age(age: f64, max_age: usize) -> AgeLabel {
    let r = (age + 0.5).floor();
    AgeLabel(r.clamp(1.0, max_age as f64) as usize)
}
