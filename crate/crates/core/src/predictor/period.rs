use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodChoice {
    pub period: usize,
    /// Admissible interval in cycles before rounding.
    pub lower: f64,
    pub upper: f64,
    /// Set when the interval held no integer and the lower bound was used.
    pub empty_interval: bool,
}

/// Largest prediction period `N` in `[l_pred / (1000 / q), q / scar]`,
/// clamped to `[1, n_max]`. A zero SCAR caps the upper bound at `n_max`.
pub fn choose_period(l_pred_ms: f64, q: f64, scar: f64, n_max: usize) -> PeriodChoice {
    let n_max = n_max.max(1);
    let lower = (l_pred_ms.max(0.0)) / (1000.0 / q);
    let upper = if scar > 0.0 { q / scar } else { n_max as f64 };
    let lo = lower.ceil().max(1.0);
    let hi = upper.floor();
    let (raw, empty_interval) = if hi >= lo { (hi, false) } else { (lo, true) };
    PeriodChoice {
        period: (raw as usize).clamp(1, n_max),
        lower,
        upper,
        empty_interval,
    }
}

/// Predictions issued over `cycles` cycles when predicting every `period`.
pub fn invocation_count(cycles: usize, period: usize) -> usize {
    cycles.div_ceil(period.max(1))
}

/// Running mean of observed prediction latencies, seeded with a prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyEstimator {
    mean: f64,
    samples: u64,
}

impl LatencyEstimator {
    pub fn new(initial_ms: f64) -> Self {
        Self {
            mean: initial_ms,
            samples: 0,
        }
    }

    /// The seed value counts as one observation.
    pub fn observe(&mut self, latency_ms: f64) {
        self.samples += 1;
        self.mean += (latency_ms - self.mean) / (self.samples + 1) as f64;
    }

    pub fn mean_ms(&self) -> f64 {
        self.mean
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

impl Default for LatencyEstimator {
    fn default() -> Self {
        Self::new(100.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_worked_interval() {
        let c = choose_period(100.0, 3.0, 0.1, 50);
        assert!((c.lower - 0.3).abs() < 1e-12);
        assert!((c.upper - 30.0).abs() < 1e-9);
        assert_eq!(c.period, 30);
        assert!(!c.empty_interval);
    }

    #[test]
    fn zero_scar_uses_cap() {
        assert_eq!(choose_period(100.0, 3.0, 0.0, 20).period, 20);
    }

    #[test]
    fn empty_interval_flagged() {
        // Lower bound 3 cycles, upper 0.3.
        let c = choose_period(1000.0, 3.0, 10.0, 20);
        assert!(c.empty_interval);
        assert_eq!(c.period, 3);
    }

    #[test]
    fn periodic_saving() {
        assert_eq!(invocation_count(9, 3), 3);
        assert_eq!(invocation_count(10, 3), 4);
        for m in 9..200 {
            let saving = 1.0 - invocation_count(m, 3) as f64 / m as f64;
            assert!(saving >= 0.42 - 1e-12 || m < 9, "m={m} saving={saving}");
        }
    }

    #[test]
    fn estimator_running_mean() {
        let mut e = LatencyEstimator::new(100.0);
        e.observe(50.0);
        assert_eq!(e.mean_ms(), 75.0);
        e.observe(0.0);
        assert_eq!(e.mean_ms(), 50.0);
    }

    proptest! {
        #[test]
        fn period_within_bounds(l in 0.0..2000.0f64, q in 0.1..20.0f64, scar in 0.0..5.0f64, n_max in 1usize..100) {
            let p = choose_period(l, q, scar, n_max).period;
            prop_assert!(p >= 1 && p <= n_max);
        }
    }
}
