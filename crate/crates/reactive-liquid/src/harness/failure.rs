//! Failure injection: at every window boundary each Up worker node flips an
//! independent seeded Bernoulli(p) coin; killed nodes restore after a fixed
//! downtime. The schedule is precomputed, so it is reproducible per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::time::Micros;

#[derive(Debug, Clone, Copy)]
pub struct FailurePlan {
    /// Per-window kill probability for each Up node, in [0, 1].
    pub probability: f64,
    pub window: Micros,
    pub downtime: Micros,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FailureEvent {
    pub node: u32,
    pub kill_at: Micros,
    pub restore_at: Micros,
}

/// Expands the plan into concrete (kill, restore) pairs over worker nodes for
/// window boundaries strictly inside the run. Nodes still down at a boundary
/// do not flip a coin there.
pub fn failure_schedule(plan: &FailurePlan, nodes: u32, duration: Micros) -> Vec<FailureEvent> {
    assert!((0.0..=1.0).contains(&plan.probability));
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut down_until = vec![0u64; nodes as usize];
    let mut schedule = Vec::new();
    if plan.window == 0 {
        return schedule;
    }
    let mut boundary = plan.window;
    while boundary < duration {
        for node in 0..nodes {
            if boundary < down_until[node as usize] {
                continue;
            }
            if rng.gen_bool(plan.probability) {
                let restore_at = boundary + plan.downtime;
                schedule.push(FailureEvent {
                    node,
                    kill_at: boundary,
                    restore_at,
                });
                down_until[node as usize] = restore_at;
            }
        }
        boundary += plan.window;
    }
    schedule
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(p: f64) -> FailurePlan {
        FailurePlan {
            probability: p,
            window: 30_000_000,
            downtime: 15_000_000,
            seed: 9,
        }
    }

    #[test]
    fn zero_probability_is_empty() {
        assert!(failure_schedule(&plan(0.0), 3, 120_000_000).is_empty());
    }

    #[test]
    fn certain_failure_kills_every_up_node_at_each_boundary() {
        let schedule = failure_schedule(&plan(1.0), 3, 120_000_000);
        let first: Vec<_> = schedule
            .iter()
            .filter(|e| e.kill_at == 30_000_000)
            .collect();
        assert_eq!(first.len(), 3);
        assert!(first.iter().all(|e| e.restore_at == 45_000_000));
        // Downtime (15s) ends before the next boundary (60s), so all three
        // flip again at every boundary: 3 boundaries inside 120s.
        assert_eq!(schedule.len(), 9);
    }

    #[test]
    fn schedule_is_reproducible_per_seed() {
        let a = failure_schedule(&plan(0.3), 3, 120_000_000);
        let b = failure_schedule(&plan(0.3), 3, 120_000_000);
        assert_eq!(a, b);
        let c = failure_schedule(
            &FailurePlan {
                seed: 10,
                ..plan(0.3)
            },
            3,
            120_000_000,
        );
        assert_ne!(a, c);
    }

    #[test]
    fn down_nodes_skip_the_boundary_coin() {
        let p = FailurePlan {
            probability: 1.0,
            window: 10_000_000,
            downtime: 25_000_000, // spans two boundaries
            seed: 1,
        };
        let schedule = failure_schedule(&p, 1, 100_000_000);
        // Kills at 10s (down until 35s), 40s (down until 65s), 70s (until 95s).
        let kills: Vec<u64> = schedule.iter().map(|e| e.kill_at).collect();
        assert_eq!(kills, vec![10_000_000, 40_000_000, 70_000_000]);
    }
}
