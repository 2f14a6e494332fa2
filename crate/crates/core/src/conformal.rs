//! Split conformal calibration over normalized residual scores.
//!
//! Scores are `|mu - d| / sigma`. For a miscoverage rate `alpha` the conformal
//! quantile is the `ceil((n + 1)(1 - alpha))`-th smallest calibration score; when
//! that rank exceeds `n` the quantile is [`Quantile::Infinite`]. The inverse map
//! takes an arbitrary threshold `q` back to the smallest miscoverage rate it
//! certifies, `alpha = 1 - #{S_i <= q} / (n + 1)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

/// A conformal quantile. Infinity is a distinct variant, never a float sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quantile {
    Finite(f64),
    Infinite,
}

impl Quantile {
    pub fn is_finite(&self) -> bool {
        matches!(self, Quantile::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            Quantile::Finite(q) => Some(q),
            Quantile::Infinite => None,
        }
    }
}

/// Normalized residual `|mu - d| / sigma`.
pub fn score(mu: f64, sigma: f64, d_true: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !mu.is_finite() || !d_true.is_finite() {
        return Err(Error::invalid("mu and d_true must be finite"));
    }
    Ok((mu - d_true).abs() / sigma)
}

/// One calibration or test observation: estimate, standard deviation, truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPoint {
    pub mu: f64,
    pub sigma: f64,
    pub d_true: f64,
}

impl ScoredPoint {
    pub fn new(mu: f64, sigma: f64, d_true: f64) -> Self {
        Self { mu, sigma, d_true }
    }
}

/// Prediction interval for the headway. Infinite intervals are flagged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionInterval {
    pub lo: f64,
    pub hi: f64,
    pub finite: bool,
}

impl PredictionInterval {
    pub fn whole_line() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            finite: false,
        }
    }

    pub fn contains(&self, y: f64) -> bool {
        !self.finite || (self.lo <= y && y <= self.hi)
    }

    /// Interval length; `None` for the whole line.
    pub fn length(&self) -> Option<f64> {
        self.finite.then(|| self.hi - self.lo)
    }
}

/// `[mu - q sigma, mu + q sigma]`.
pub fn interval(mu: f64, sigma: f64, q: Quantile) -> PredictionInterval {
    match q {
        Quantile::Finite(q) => PredictionInterval {
            lo: mu - q * sigma,
            hi: mu + q * sigma,
            finite: true,
        },
        Quantile::Infinite => PredictionInterval::whole_line(),
    }
}

/// Sorted calibration scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibrator {
    scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CalibratorFile {
    format: String,
    version: u32,
    n: usize,
    scores: Vec<f64>,
}

impl ConformalCalibrator {
    /// Build from raw scores; they are sorted ascending.
    pub fn from_scores(mut scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("calibration set must be nonempty"));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::invalid(format!("scores must be finite and >= 0, got {bad}")));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn max_score(&self) -> f64 {
        *self.scores.last().expect("nonempty by construction")
    }

    pub fn min_score(&self) -> f64 {
        self.scores[0]
    }

    /// Rank `ceil((n + 1)(1 - alpha))` used by the quantile, 1-based.
    pub fn rank(&self, alpha: f64) -> usize {
        let n1 = (self.n() + 1) as f64;
        let r = (n1 * (1.0 - alpha)).ceil();
        // `(n + 1)(1 - alpha)` computed in floating point can land a hair above
        // an integer it should equal exactly; snap those back.
        let snapped = if (r - 1.0 - n1 * (1.0 - alpha)).abs() < 1e-9 * n1 {
            r - 1.0
        } else {
            r
        };
        snapped.max(0.0) as usize
    }

    pub fn quantile(&self, alpha: f64) -> Quantile {
        assert!(
            (0.0..=1.0).contains(&alpha),
            "alpha must lie in [0, 1], got {alpha}"
        );
        let rank = self.rank(alpha);
        if rank > self.n() {
            Quantile::Infinite
        } else if rank == 0 {
            // alpha = 1: the count condition is vacuous; scores are >= 0.
            Quantile::Finite(0.0)
        } else {
            Quantile::Finite(self.scores[rank - 1])
        }
    }

    /// Number of calibration scores `<= q`.
    pub fn count_le(&self, q: f64) -> usize {
        self.scores.partition_point(|s| *s <= q)
    }

    /// Miscoverage certified by threshold `q_hat`: `1 - count_le(q_hat) / (n + 1)`.
    pub fn inverse_alpha(&self, q_hat: f64) -> f64 {
        assert!(q_hat.is_finite(), "q_hat must be finite");
        1.0 - self.count_le(q_hat) as f64 / (self.n() + 1) as f64
    }

    /// Fraction of `test` points whose truth lies in the conformal interval.
    pub fn empirical_coverage(&self, test: &[ScoredPoint], alpha: f64) -> Result<f64> {
        if test.is_empty() {
            return Err(Error::invalid("test set must be nonempty"));
        }
        let q = self.quantile(alpha);
        let hits = test
            .iter()
            .filter(|p| interval(p.mu, p.sigma, q).contains(p.d_true))
            .count();
        Ok(hits as f64 / test.len() as f64)
    }

    pub fn to_json(&self) -> String {
        let file = CalibratorFile {
            format: "conformal-calibrator".into(),
            version: FORMAT_VERSION,
            n: self.n(),
            scores: self.scores.clone(),
        };
        serde_json::to_string_pretty(&file).expect("calibrator serializes")
    }

    /// Parse the calibrator file. Scores must already be sorted and `n` must match.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: CalibratorFile =
            serde_json::from_str(text).map_err(|e| Error::format(format!("calibrator: {e}")))?;
        if file.format != "conformal-calibrator" {
            return Err(Error::format(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported version {}", file.version)));
        }
        if file.n != file.scores.len() {
            return Err(Error::format(format!(
                "n = {} but {} scores listed",
                file.n,
                file.scores.len()
            )));
        }
        if file.scores.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::format("scores are not sorted ascending"));
        }
        Self::from_scores(file.scores).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Compute and sort the scores of a calibration set.
pub fn calibrate(pairs: &[ScoredPoint]) -> Result<ConformalCalibrator> {
    let scores = pairs
        .iter()
        .map(|p| score(p.mu, p.sigma, p.d_true))
        .collect::<Result<Vec<_>>>()?;
    ConformalCalibrator::from_scores(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_to_nine() -> ConformalCalibrator {
        ConformalCalibrator::from_scores((1..=9).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(10.0, 2.0, 14.0).unwrap(), 2.0);
        assert_eq!(score(3.3, 1.7, 3.3).unwrap(), 0.0);
        assert_eq!(score(5.0, 0.5, 4.0).unwrap(), 2.0);
        assert!(score(1.0, 0.0, 1.0).is_err());
        assert!(score(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn calibrate_sorts_and_is_permutation_invariant() {
        let pts = [
            ScoredPoint::new(0.0, 1.0, 3.0),
            ScoredPoint::new(0.0, 1.0, 1.0),
            ScoredPoint::new(0.0, 1.0, -2.0),
        ];
        let cal = calibrate(&pts).unwrap();
        assert_eq!(cal.scores(), &[1.0, 2.0, 3.0]);
        let rev: Vec<_> = pts.iter().rev().copied().collect();
        assert_eq!(calibrate(&rev).unwrap(), cal);
        assert_eq!(calibrate(&pts[..1]).unwrap().n(), 1);
        assert!(calibrate(&[]).is_err());
        assert!(calibrate(&[ScoredPoint::new(0.0, 0.0, 1.0)]).is_err());
    }

    #[test]
    fn quantile_examples() {
        let cal = one_to_nine();
        assert_eq!(cal.quantile(0.2), Quantile::Finite(8.0));
        assert_eq!(cal.quantile(0.05), Quantile::Infinite);
        let single = ConformalCalibrator::from_scores(vec![4.2]).unwrap();
        assert_eq!(single.quantile(0.5), Quantile::Finite(4.2));
        // exactly 1/(n+1) is still finite: rank n
        assert_eq!(cal.quantile(0.1), Quantile::Finite(9.0));
    }

    #[test]
    fn interval_examples() {
        let iv = interval(10.0, 1.0, Quantile::Finite(2.0));
        assert_eq!((iv.lo, iv.hi, iv.finite), (8.0, 12.0, true));
        let pt = interval(10.0, 1.0, Quantile::Finite(0.0));
        assert_eq!((pt.lo, pt.hi), (10.0, 10.0));
        let inf = interval(10.0, 1.0, Quantile::Infinite);
        assert!(!inf.finite);
        assert!(inf.contains(1e300));
        assert_eq!(inf.length(), None);
    }

    #[test]
    fn inverse_alpha_examples() {
        let cal = one_to_nine();
        assert!((cal.inverse_alpha(8.0) - 0.2).abs() < 1e-15);
        assert_eq!(cal.inverse_alpha(0.5), 1.0);
        assert!((cal.inverse_alpha(100.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ties_count_with_closed_comparison() {
        let cal = ConformalCalibrator::from_scores(vec![1.0, 2.0, 2.0, 2.0, 3.0]).unwrap();
        assert_eq!(cal.count_le(2.0), 4);
        assert_eq!(cal.count_le(1.999), 1);
    }

    #[test]
    fn coverage_examples() {
        let cal = one_to_nine();
        let same: Vec<_> = (1..=9)
            .map(|i| ScoredPoint::new(0.0, 1.0, f64::from(i)))
            .collect();
        assert!(cal.empirical_coverage(&same, 0.2).unwrap() >= 0.8);
        let far = [ScoredPoint::new(0.0, 1.0, 1e9)];
        assert_eq!(cal.empirical_coverage(&far, 0.01).unwrap(), 1.0);
        assert!(cal.empirical_coverage(&[], 0.1).is_err());
    }

    #[test]
    fn file_round_trip_and_validation() {
        let cal = ConformalCalibrator::from_scores(vec![0.1, 1.0 / 3.0, 2.5e-7, 7.0]).unwrap();
        let back = ConformalCalibrator::from_json(&cal.to_json()).unwrap();
        assert_eq!(back, cal);
        let unsorted = r#"{"format":"conformal-calibrator","version":1,"n":2,"scores":[2.0,1.0]}"#;
        assert!(ConformalCalibrator::from_json(unsorted).is_err());
        let wrong_n = r#"{"format":"conformal-calibrator","version":1,"n":3,"scores":[1.0,2.0]}"#;
        assert!(ConformalCalibrator::from_json(wrong_n).is_err());
        let negative = r#"{"format":"conformal-calibrator","version":1,"n":1,"scores":[-1.0]}"#;
        assert!(ConformalCalibrator::from_json(negative).is_err());
    }
}
