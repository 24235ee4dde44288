use serde::Serialize;

use crate::error::{Error, Result};

/// Guards the drop ratio against a zero denominator.
pub const EPSILON: f64 = 1e-12;

/// A curve with no single drop above this fraction of its range is flat.
pub const MIN_DROP_FRACTION: f64 = 0.05;

/// The drop into the elbow must exceed the following drop by this factor.
pub const MIN_SHARPNESS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Elbow {
    At { k: usize, ratio: f64 },
    NotFound,
}

impl Elbow {
    pub fn k(&self) -> Option<usize> {
        match *self {
            Elbow::At { k, .. } => Some(k),
            Elbow::NotFound => None,
        }
    }
}

/// Picks the cluster count at the sharpest bend of an RMSE-versus-k curve.
///
/// The score of an interior point is the drop arriving at it divided by the
/// drop leaving it. A rise after the point counts as a zero drop.
pub fn elbow_select(curve: &[(usize, f64)]) -> Result<Elbow> {
    if curve.len() < 3 {
        return Err(Error::Config(format!(
            "elbow selection needs at least 3 points, got {}",
            curve.len()
        )));
    }
    if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Config("cluster counts must be strictly increasing".into()));
    }
    if curve.iter().any(|p| !p.1.is_finite()) {
        return Err(Error::Config("non-finite RMSE in curve".into()));
    }

    let (lo, hi) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let range = hi - lo;
    let drops: Vec<f64> = curve.windows(2).map(|w| w[0].1 - w[1].1).collect();
    if range <= 0.0 || drops.iter().all(|&d| d <= MIN_DROP_FRACTION * range) {
        return Ok(Elbow::NotFound);
    }

    let mut best: Option<(usize, f64)> = None;
    for i in 1..curve.len() - 1 {
        let into = drops[i - 1];
        if into <= 0.0 {
            continue;
        }
        let ratio = into / (drops[i].max(0.0) + EPSILON);
        if best.is_none_or(|(_, r)| ratio > r) {
            best = Some((curve[i].0, ratio));
        }
    }
    Ok(match best {
        Some((k, ratio)) if ratio >= MIN_SHARPNESS => Elbow::At { k, ratio },
        _ => Elbow::NotFound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharp_drop_at_three() {
        let curve = [(2, 1.0), (3, 0.1), (4, 0.09), (5, 0.089)];
        assert_eq!(elbow_select(&curve).unwrap().k(), Some(3));
    }

    #[test]
    fn linear_curve_has_no_elbow() {
        let curve: Vec<_> = (2..10).map(|k| (k, 10.0 - k as f64)).collect();
        assert_eq!(elbow_select(&curve).unwrap(), Elbow::NotFound);
    }

    #[test]
    fn flat_curve_has_no_elbow() {
        let curve = [(2, 0.5), (3, 0.5), (4, 0.5)];
        assert_eq!(elbow_select(&curve).unwrap(), Elbow::NotFound);
    }

    #[test]
    fn synthetic_drop_at_thirty_two() {
        let curve: Vec<_> = (2..=64)
            .map(|k| {
                let rmse = if k < 32 {
                    0.30 - 0.002 * k as f64
                } else {
                    0.05 - 0.0002 * (k - 32) as f64
                };
                (k, rmse)
            })
            .collect();
        assert_eq!(elbow_select(&curve).unwrap().k(), Some(32));
    }

    #[test]
    fn rising_tail_still_selects_bend() {
        let curve = [(2, 1.0), (3, 0.01), (4, 0.011), (5, 0.0105)];
        assert_eq!(elbow_select(&curve).unwrap().k(), Some(3));
    }

    #[test]
    fn rejects_bad_curves() {
        assert!(elbow_select(&[(2, 1.0), (3, 0.5)]).is_err());
        assert!(elbow_select(&[(2, 1.0), (2, 0.5), (4, 0.1)]).is_err());
        assert!(elbow_select(&[(2, 1.0), (3, f64::NAN), (4, 0.1)]).is_err());
    }
}
