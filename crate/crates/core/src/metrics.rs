//! Age estimation metrics: MAE and the annotation-weighted epsilon-error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub y_hat: f64,
    pub y: usize,
    /// Spread of the apparent-age annotations; only used by epsilon-error.
    pub sigma_n: f64,
}

impl Prediction {
    pub fn new(y_hat: f64, y: usize) -> Self {
        Prediction {
            y_hat,
            y,
            sigma_n: 1.0,
        }
    }

    pub fn with_sigma(y_hat: f64, y: usize, sigma_n: f64) -> Self {
        Prediction { y_hat, y, sigma_n }
    }

    pub fn abs_error(&self) -> f64 {
        (self.y_hat - self.y as f64).abs()
    }
}

pub fn mae(preds: &[Prediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract("MAE of an empty prediction set".into()));
    }
    Ok(preds.iter().map(Prediction::abs_error).sum::<f64>() / preds.len() as f64)
}

/// Mean of `1 - exp(-(y_hat - y)^2 / (2 sigma_n^2))`.
pub fn epsilon_error(preds: &[Prediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract("epsilon-error of an empty prediction set".into()));
    }
    let mut total = 0.0;
    for p in preds {
        if !(p.sigma_n > 0.0) {
            return Err(Error::Contract(format!(
                "epsilon-error needs sigma_n > 0, got {}",
                p.sigma_n
            )));
        }
        let e = p.y_hat - p.y as f64;
        total += 1.0 - (-(e * e) / (2.0 * p.sigma_n * p.sigma_n)).exp();
    }
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    /// Inclusive age range.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    /// `None` when no sample falls in the band.
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandTable {
    pub bands: Vec<BandRow>,
    pub overall: f64,
}

/// MAE per age band. `edges` are the inclusive lower bounds of consecutive
/// bands, the first being 1; the last band ends at `max_age`.
pub fn mae_by_age_band(preds: &[Prediction], edges: &[usize], max_age: usize) -> Result<BandTable> {
    if edges.first() != Some(&1) {
        return Err(Error::Contract("age bands must start at 1".into()));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) || *edges.last().unwrap() > max_age {
        return Err(Error::Contract(
            "band edges must be strictly increasing and within [1, K]".into(),
        ));
    }
    let overall = mae(preds)?;
    let bands = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| {
            let hi = edges.get(i + 1).map_or(max_age, |&next| next - 1);
            let inside: Vec<Prediction> = preds
                .iter()
                .copied()
                .filter(|p| p.y >= lo && p.y <= hi)
                .collect();
            BandRow {
                lo,
                hi,
                count: inside.len(),
                mae: mae(&inside).ok(),
            }
        })
        .collect();
    Ok(BandTable { bands, overall })
}

/// One `metric,split,fold,value` CSV row.
pub fn csv_row(metric: &str, split: &str, fold: usize, value: f64) -> String {
    format!("{metric},{split},{fold},{value}")
}

pub const CSV_HEADER: &str = "metric,split,fold,value";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        let perfect: Vec<_> = (1..=10).map(|y| Prediction::new(y as f64, y)).collect();
        assert_eq!(mae(&perfect).unwrap(), 0.0);
        let shifted: Vec<_> = (1..=10).map(|y| Prediction::new(y as f64 + 2.0, y)).collect();
        assert_eq!(mae(&shifted).unwrap(), 2.0);
        let mixed = [
            Prediction::new(48.0, 50),
            Prediction::new(33.0, 30),
            Prediction::new(20.0, 20),
        ];
        assert!((mae(&mixed).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert!(mae(&[]).is_err());
    }

    #[test]
    fn epsilon_examples() {
        let perfect = [Prediction::with_sigma(40.0, 40, 3.0)];
        assert_eq!(epsilon_error(&perfect).unwrap(), 0.0);
        let far = [Prediction::with_sigma(1e6, 40, 3.0)];
        assert_eq!(epsilon_error(&far).unwrap(), 1.0);
        let one_sigma = [Prediction::with_sigma(43.5, 40, 3.5)];
        let want = 1.0 - (-0.5f64).exp();
        assert!((epsilon_error(&one_sigma).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.3935).abs() < 1e-4);
        assert!(epsilon_error(&[Prediction::with_sigma(1.0, 1, 0.0)]).is_err());
        assert!(epsilon_error(&[]).is_err());
    }

    #[test]
    fn bands() {
        let preds: Vec<_> = (1..=10).map(|y| Prediction::new(y as f64 + 1.0, y)).collect();
        let single = mae_by_age_band(&preds, &[1], 101).unwrap();
        assert_eq!(single.bands.len(), 1);
        assert_eq!(single.bands[0].mae, Some(mae(&preds).unwrap()));

        let two = mae_by_age_band(&preds, &[1, 20], 101).unwrap();
        assert_eq!(two.bands[0].count, 10);
        assert_eq!(two.bands[1].mae, None);
        assert_eq!((two.bands[1].lo, two.bands[1].hi), (20, 101));

        assert!(mae_by_age_band(&preds, &[2, 20], 101).is_err());
        assert!(mae_by_age_band(&preds, &[1, 20, 20], 101).is_err());
    }

    #[test]
    fn csv_format() {
        assert_eq!(csv_row("mae", "test", 0, 2.5), "mae,test,0,2.5");
    }
}
