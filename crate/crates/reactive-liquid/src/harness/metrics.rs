//! Run metric collection: per-message completion records (with duplicate
//! accounting by message id), per-second gauge samples, and the derived
//! throughput/cumulative series.

use std::collections::{BTreeMap, BTreeSet};

use crate::time::{Micros, SECOND};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionRecord {
    pub msg_id: u64,
    /// Start of the batch fetch that consumed this message.
    pub consume_us: Micros,
    pub complete_us: Micros,
    /// Dispatch-to-dequeue delay in the task's queue (zero in liquid mode).
    pub queue_wait_us: Micros,
    /// Modeled processing cost the message occupied a core for.
    pub process_us: Micros,
    pub batch_size: u32,
    pub batch_index: u32,
    /// True when this message id had already completed once (at-least-once).
    pub duplicate: bool,
    pub redelivery: bool,
}

#[derive(Debug, Default)]
pub struct JobMetrics {
    pub completions: Vec<CompletionRecord>,
    seen: BTreeSet<u64>,
    pub duplicates: u64,
}

impl JobMetrics {
    pub fn unique_count(&self) -> u64 {
        self.seen.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JobGauge {
    pub live: u32,
    pub active: u32,
    pub depth: u64,
}

#[derive(Debug, Clone)]
pub struct GaugeSample {
    pub t_s: u64,
    pub nodes_up: u32,
    pub jobs: BTreeMap<String, JobGauge>,
}

#[derive(Debug, Default)]
pub struct MetricsRecorder {
    pub primary_job: String,
    pub jobs: BTreeMap<String, JobMetrics>,
    pub gauges: Vec<GaugeSample>,
}

impl MetricsRecorder {
    pub fn new(primary_job: &str) -> Self {
        Self {
            primary_job: primary_job.to_string(),
            jobs: BTreeMap::new(),
            gauges: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn record_completion(
        &mut self,
        job: &str,
        msg_id: u64,
        consume_us: Micros,
        complete_us: Micros,
        queue_wait_us: Micros,
        process_us: Micros,
        batch_size: u32,
        batch_index: u32,
        redelivery: bool,
    ) {
        let metrics = self.jobs.entry(job.to_string()).or_default();
        let duplicate = !metrics.seen.insert(msg_id);
        if duplicate {
            metrics.duplicates += 1;
        }
        metrics.completions.push(CompletionRecord {
            msg_id,
            consume_us,
            complete_us,
            queue_wait_us,
            process_us,
            batch_size,
            batch_index,
            duplicate,
            redelivery,
        });
    }

    pub fn sample_gauges(
        &mut self,
        t_s: u64,
        nodes_up: u32,
        jobs: BTreeMap<String, (u32, u32, u64)>,
    ) {
        self.gauges.push(GaugeSample {
            t_s,
            nodes_up,
            jobs: jobs
                .into_iter()
                .map(|(k, (live, active, depth))| {
                    (
                        k,
                        JobGauge {
                            live,
                            active,
                            depth,
                        },
                    )
                })
                .collect(),
        });
    }

    pub fn job(&self, name: &str) -> Option<&JobMetrics> {
        self.jobs.get(name)
    }

    pub fn primary(&self) -> Option<&JobMetrics> {
        self.jobs.get(&self.primary_job)
    }
}

/// Final cluster summary reported at the end of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterSummary {
    pub count: u64,
    pub total_points: u64,
    /// Top clusters by point count: (id, N, lon, lat).
    pub top: Vec<(String, u64, f64, f64)>,
}

/// Collected outcome of one experiment run.
#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub duration_s: u64,
    /// Unique (non-duplicate) completions of the workload job per second,
    /// index 0 holding second 1.
    pub throughput: Vec<u64>,
    /// Running total of the same series; always non-decreasing.
    pub cumulative: Vec<u64>,
    /// Every completion record of the workload job, duplicates included.
    pub completions: Vec<CompletionRecord>,
    pub unique_count: u64,
    pub duplicate_count: u64,
    pub clusters: ClusterSummary,
}

impl RunMetrics {
    /// Builds the per-second series from raw completion records. Second `s`
    /// covers times in ((s-1)s, s*s]; completions after the horizon are kept
    /// in `completions` but not in the series.
    pub fn from_completions(
        duration_s: u64,
        completions: Vec<CompletionRecord>,
        unique_count: u64,
        duplicate_count: u64,
        clusters: ClusterSummary,
    ) -> Self {
        let mut throughput = vec![0u64; duration_s as usize];
        for c in completions.iter().filter(|c| !c.duplicate) {
            let bucket = c.complete_us.div_ceil(SECOND);
            if bucket >= 1 && bucket <= duration_s {
                throughput[bucket as usize - 1] += 1;
            }
        }
        let mut cumulative = Vec::with_capacity(duration_s as usize);
        let mut total = 0u64;
        for t in &throughput {
            total += t;
            cumulative.push(total);
        }
        Self {
            duration_s,
            throughput,
            cumulative,
            completions,
            unique_count,
            duplicate_count,
            clusters,
        }
    }

    pub fn total_processed(&self) -> u64 {
        self.cumulative.last().copied().unwrap_or(0)
    }

    pub fn median_completion_time(&self) -> Option<Micros> {
        let mut times: Vec<Micros> = self
            .completions
            .iter()
            .filter(|c| !c.duplicate)
            .map(|c| c.complete_us - c.consume_us)
            .collect();
        if times.is_empty() {
            return None;
        }
        times.sort_unstable();
        Some(times[times.len() / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_accounting_by_msg_id() {
        let mut rec = MetricsRecorder::new("job");
        rec.record_completion("job", 7, 0, 10, 0, 5, 1, 1, false);
        rec.record_completion("job", 7, 0, 20, 0, 5, 1, 1, true);
        rec.record_completion("job", 8, 0, 30, 0, 5, 1, 1, false);
        let job = rec.job("job").unwrap();
        assert_eq!(job.unique_count(), 2);
        assert_eq!(job.duplicates, 1);
        assert!(job.completions[1].duplicate);
        assert!(!job.completions[2].duplicate);
    }

    #[test]
    fn series_bucketing_and_monotonicity() {
        let completions = vec![
            CompletionRecord {
                msg_id: 1,
                consume_us: 0,
                complete_us: 500_000,
                queue_wait_us: 0,
                process_us: 0,
                batch_size: 1,
                batch_index: 1,
                duplicate: false,
                redelivery: false,
            },
            CompletionRecord {
                msg_id: 2,
                consume_us: 0,
                complete_us: 1_000_000, // boundary lands in second 1
                queue_wait_us: 0,
                process_us: 0,
                batch_size: 1,
                batch_index: 1,
                duplicate: false,
                redelivery: false,
            },
            CompletionRecord {
                msg_id: 3,
                consume_us: 0,
                complete_us: 2_500_000,
                queue_wait_us: 0,
                process_us: 0,
                batch_size: 1,
                batch_index: 1,
                duplicate: false,
                redelivery: false,
            },
            CompletionRecord {
                msg_id: 4,
                consume_us: 0,
                complete_us: 9_500_000, // past horizon: not in the series
                queue_wait_us: 0,
                process_us: 0,
                batch_size: 1,
                batch_index: 1,
                duplicate: false,
                redelivery: false,
            },
        ];
        let m = RunMetrics::from_completions(3, completions, 4, 0, ClusterSummary::default());
        assert_eq!(m.throughput, vec![2, 0, 1]);
        assert_eq!(m.cumulative, vec![2, 2, 3]);
        assert!(m.cumulative.windows(2).all(|w| w[0] <= w[1]));
        for (t, cum) in m.cumulative.iter().enumerate() {
            let prev = if t == 0 { 0 } else { m.cumulative[t - 1] };
            assert_eq!(m.throughput[t], cum - prev);
        }
    }
}
