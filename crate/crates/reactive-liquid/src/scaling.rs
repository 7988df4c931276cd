//! Elastic worker service: queue-depth-driven pool sizing with watermarks,
//! one-step moves toward the target, and a cooldown between size changes.

use thiserror::Error;

use crate::time::Micros;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolConfigError {
    #[error("min_workers must be >= 1")]
    ZeroMin,
    #[error("min_workers must not exceed max_workers")]
    MinAboveMax,
    #[error("low_watermark must be strictly below high_watermark")]
    WatermarksInverted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElasticPoolConfig {
    pub min_workers: u32,
    pub max_workers: u32,
    /// Messages-per-worker above which the pool grows.
    pub high_watermark: u64,
    /// Messages-per-worker below which the pool shrinks (never under min).
    pub low_watermark: u64,
    pub evaluation_period: Micros,
    pub cooldown: Micros,
}

impl ElasticPoolConfig {
    pub fn validate(&self) -> Result<(), PoolConfigError> {
        if self.min_workers == 0 {
            return Err(PoolConfigError::ZeroMin);
        }
        if self.min_workers > self.max_workers {
            return Err(PoolConfigError::MinAboveMax);
        }
        if self.low_watermark >= self.high_watermark {
            return Err(PoolConfigError::WatermarksInverted);
        }
        Ok(())
    }

    fn clamp(&self, target: u64) -> u32 {
        target
            .max(u64::from(self.min_workers))
            .min(u64::from(self.max_workers)) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingDecision {
    Hold,
    ScaleUp(u32),
    ScaleDown(u32),
}

fn div_ceil(a: u64, b: u64) -> u64 {
    if b == 0 {
        return 0;
    }
    a.div_ceil(b)
}

/// Sizing rule: when depth per worker crosses a watermark, move to
/// `clamp(ceil(depth / watermark), min, max)` in a single step. `last_scale`
/// is the time of the previous non-Hold decision; within one cooldown window
/// the answer is always Hold.
pub fn evaluate_scaling(
    config: &ElasticPoolConfig,
    total_queue_depth: u64,
    current_workers: u32,
    now: Micros,
    last_scale: Option<Micros>,
) -> ScalingDecision {
    debug_assert!(current_workers >= 1);
    if let Some(t) = last_scale {
        if now.saturating_sub(t) < config.cooldown {
            return ScalingDecision::Hold;
        }
    }
    let current = u64::from(current_workers);
    if total_queue_depth > config.high_watermark * current {
        let target = config.clamp(div_ceil(total_queue_depth, config.high_watermark));
        if target > current_workers {
            return ScalingDecision::ScaleUp(target - current_workers);
        }
    } else if total_queue_depth < config.low_watermark * current
        && current_workers > config.min_workers
    {
        let target = config.clamp(div_ceil(total_queue_depth, config.low_watermark));
        if target < current_workers {
            return ScalingDecision::ScaleDown(current_workers - target);
        }
    }
    ScalingDecision::Hold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(min: u32, max: u32, high: u64, low: u64) -> ElasticPoolConfig {
        ElasticPoolConfig {
            min_workers: min,
            max_workers: max,
            high_watermark: high,
            low_watermark: low,
            evaluation_period: 1_000_000,
            cooldown: 2_000_000,
        }
    }

    #[test]
    fn scales_up_toward_target() {
        let c = cfg(1, 4, 50, 5);
        assert_eq!(
            evaluate_scaling(&c, 100, 1, 0, None),
            ScalingDecision::ScaleUp(1)
        );
    }

    #[test]
    fn scales_down_toward_min() {
        let c = cfg(1, 4, 50, 5);
        assert_eq!(
            evaluate_scaling(&c, 0, 3, 0, None),
            ScalingDecision::ScaleDown(2)
        );
    }

    #[test]
    fn holds_between_watermarks() {
        let c = cfg(1, 4, 50, 5);
        assert_eq!(evaluate_scaling(&c, 30, 1, 0, None), ScalingDecision::Hold);
    }

    #[test]
    fn never_exits_bounds() {
        let c = cfg(2, 4, 50, 5);
        // Target would be 20 workers; clamped to max.
        assert_eq!(
            evaluate_scaling(&c, 1000, 3, 0, None),
            ScalingDecision::ScaleUp(1)
        );
        // At max already: hold even though overloaded.
        assert_eq!(
            evaluate_scaling(&c, 1000, 4, 0, None),
            ScalingDecision::Hold
        );
        // Empty queue at min: hold.
        assert_eq!(evaluate_scaling(&c, 0, 2, 0, None), ScalingDecision::Hold);
    }

    #[test]
    fn cooldown_blocks_consecutive_changes() {
        let c = cfg(1, 4, 50, 5);
        assert_eq!(
            evaluate_scaling(&c, 400, 1, 1_000_000, Some(0)),
            ScalingDecision::Hold
        );
        assert_eq!(
            evaluate_scaling(&c, 400, 1, 2_000_000, Some(0)),
            ScalingDecision::ScaleUp(3)
        );
    }

    #[test]
    fn constant_depth_reaches_fixed_point() {
        let c = cfg(1, 8, 50, 5);
        let depth = 260u64;
        let mut workers = 1u32;
        let mut last = None;
        let mut changes = 0;
        for step in 0..10u64 {
            let now = step * c.evaluation_period * 3;
            match evaluate_scaling(&c, depth, workers, now, last) {
                ScalingDecision::ScaleUp(k) => {
                    workers += k;
                    last = Some(now);
                    changes += 1;
                }
                ScalingDecision::ScaleDown(k) => {
                    workers -= k;
                    last = Some(now);
                    changes += 1;
                }
                ScalingDecision::Hold => {}
            }
        }
        assert_eq!(workers, 6); // ceil(260 / 50)
        assert_eq!(changes, 1);
    }

    #[test]
    fn config_validation() {
        assert_eq!(cfg(0, 4, 50, 5).validate(), Err(PoolConfigError::ZeroMin));
        assert_eq!(
            cfg(5, 4, 50, 5).validate(),
            Err(PoolConfigError::MinAboveMax)
        );
        assert_eq!(
            cfg(1, 4, 5, 5).validate(),
            Err(PoolConfigError::WatermarksInverted)
        );
        assert!(cfg(1, 4, 50, 5).validate().is_ok());
    }
}
