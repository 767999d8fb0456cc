use serde::Serialize;

use crate::harness::MetricsRecord;

/// Per-epoch mean probe-set Q against the oracle value scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QTrace {
    pub epochs: Vec<u32>,
    pub mean_q: Vec<f64>,
    pub oracle_max: f64,
}

impl QTrace {
    pub fn from_records(records: &[MetricsRecord], oracle_max: f64) -> Self {
        Self {
            epochs: records.iter().map(|r| r.epoch).collect(),
            mean_q: records.iter().map(|r| r.mean_q).collect(),
            oracle_max,
        }
    }

    /// First epoch whose mean Q exceeds `factor` times the oracle maximum,
    /// or is no longer finite.
    pub fn divergence_epoch(&self, factor: f64) -> Option<u32> {
        self.epochs
            .iter()
            .zip(&self.mean_q)
            .find(|(_, q)| !q.is_finite() || **q > factor * self.oracle_max)
            .map(|(e, _)| *e)
    }

    pub fn peak(&self) -> f64 {
        self.mean_q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean Q of the last `n` epochs.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.mean_q[self.mean_q.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(q: &[f64]) -> QTrace {
        QTrace {
            epochs: (0..q.len() as u32).collect(),
            mean_q: q.to_vec(),
            oracle_max: 100.0,
        }
    }

    #[test]
    fn detector_fires_on_first_crossing() {
        let t = trace(&[1.0, 50.0, 900.0, 1500.0, 20.0]);
        assert_eq!(t.divergence_epoch(10.0), Some(3));
        assert_eq!(t.divergence_epoch(100.0), None);
        assert_eq!(trace(&[1.0, f64::NAN]).divergence_epoch(10.0), Some(1));
    }

    #[test]
    fn tail_mean_uses_last_epochs() {
        assert_eq!(trace(&[0.0, 2.0, 4.0]).tail_mean(2), 3.0);
    }
}
