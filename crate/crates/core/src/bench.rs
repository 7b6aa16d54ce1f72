//! Timing of scan-based returns against the backward loop.
//!
//! Outputs are checked before anything is timed: the scan must match the
//! loop within `1e-6` relative and be bitwise identical across worker
//! budgets, otherwise the run stops with an error.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::returns::{naive_return_to_go, return_to_go};
use crate::scan::ScanSchedule;

pub const BENCH_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsBench {
    /// Episode lengths are uniform in `[1, max_len]`.
    pub max_len: usize,
    pub trials: usize,
    /// Episodes per trial.
    pub episodes: usize,
    /// When set, each trial instead draws episodes until exactly this many
    /// timesteps (the last episode is cut short).
    pub total_steps: Option<usize>,
    pub gamma: f64,
    pub workers: Vec<usize>,
    pub seed: u64,
}

impl Default for ReturnsBench {
    fn default() -> Self {
        Self {
            max_len: 1000,
            trials: 5,
            episodes: 32,
            total_steps: None,
            gamma: 0.99,
            workers: vec![1],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub mean_seconds: Option<f64>,
    pub std_seconds: Option<f64>,
}

impl Timing {
    fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self {
                mean_seconds: None,
                std_seconds: None,
            };
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        Self {
            mean_seconds: Some(mean),
            std_seconds: Some(var.sqrt()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanTiming {
    pub workers: usize,
    #[serde(flatten)]
    pub timing: Timing,
    /// Mean naive time over mean scan time.
    pub speedup_vs_naive: Option<f64>,
    /// Mean single-budget scan time over this budget's, when the first
    /// budget listed is 1.
    pub speedup_vs_one_worker: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub schema: u32,
    pub max_len: usize,
    pub trials: usize,
    pub episodes: usize,
    pub total_steps: Option<usize>,
    pub gamma: f64,
    pub seed: u64,
    pub timesteps: Vec<usize>,
    pub max_relative_error: f64,
    pub identical_across_workers: bool,
    pub naive: Timing,
    pub scan: Vec<ScanTiming>,
}

fn instance(cfg: &ReturnsBench, rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let mut rewards = Vec::new();
    let mut dones = Vec::new();
    let mut episodes = 0;
    loop {
        let done_yet = match cfg.total_steps {
            Some(n) => rewards.len() >= n,
            None => episodes >= cfg.episodes,
        };
        if done_yet {
            break;
        }
        let mut len = rng.gen_range(1..=cfg.max_len);
        if let Some(n) = cfg.total_steps {
            len = len.min(n - rewards.len());
        }
        for t in 0..len {
            rewards.push(rng.gen_range(-1.0..1.0));
            dones.push(t + 1 == len);
        }
        episodes += 1;
    }
    (rewards, dones)
}

impl ReturnsBench {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::invalid("max_len", "must be at least 1"));
        }
        if self.workers.is_empty() {
            return Err(Error::invalid("workers", "need at least one worker budget"));
        }
        if self.workers.contains(&0) {
            return Err(Error::invalid("workers", "budgets must be at least 1"));
        }
        if self.total_steps.is_none() && self.episodes == 0 {
            return Err(Error::invalid("episodes", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn run(&self) -> Result<BenchReport> {
        self.validate()?;
        let scheds = self
            .workers
            .iter()
            .map(|&w| ScanSchedule::serial().with_workers(w))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut naive_times = Vec::with_capacity(self.trials);
        let mut scan_times = vec![Vec::with_capacity(self.trials); scheds.len()];
        let mut timesteps = Vec::with_capacity(self.trials);
        let mut worst = 0.0f64;
        for trial in 0..self.trials {
            let (rewards, dones) = instance(self, &mut rng);
            timesteps.push(rewards.len());
            let reference = naive_return_to_go(&rewards, &dones, self.gamma)?;
            let first = return_to_go(&rewards, &dones, self.gamma, &scheds[0])?;
            for (a, b) in first.iter().zip(&reference) {
                let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
                worst = worst.max(err);
            }
            if worst > 1e-6 {
                return Err(Error::Precondition(format!(
                    "trial {trial}: scan returns differ from the backward loop by {worst:e}"
                )));
            }
            for sched in &scheds[1..] {
                let other = return_to_go(&rewards, &dones, self.gamma, sched)?;
                if other.iter().zip(&first).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(Error::Precondition(format!(
                        "trial {trial}: {} workers changed the output bits",
                        sched.worker_budget()
                    )));
                }
            }

            let start = Instant::now();
            std::hint::black_box(naive_return_to_go(&rewards, &dones, self.gamma)?);
            naive_times.push(start.elapsed().as_secs_f64());
            for (sched, times) in scheds.iter().zip(&mut scan_times) {
                let start = Instant::now();
                std::hint::black_box(return_to_go(&rewards, &dones, self.gamma, sched)?);
                times.push(start.elapsed().as_secs_f64());
            }
        }
        let naive = Timing::from_samples(&naive_times);
        let base = (self.workers[0] == 1)
            .then(|| Timing::from_samples(&scan_times[0]).mean_seconds)
            .flatten();
        let scan = self
            .workers
            .iter()
            .zip(&scan_times)
            .map(|(&workers, times)| {
                let timing = Timing::from_samples(times);
                let ratio = |num: Option<f64>| num.zip(timing.mean_seconds).map(|(n, d)| n / d);
                ScanTiming {
                    workers,
                    speedup_vs_naive: ratio(naive.mean_seconds),
                    speedup_vs_one_worker: ratio(base),
                    timing,
                }
            })
            .collect();
        Ok(BenchReport {
            schema: BENCH_SCHEMA,
            max_len: self.max_len,
            trials: self.trials,
            episodes: self.episodes,
            total_steps: self.total_steps,
            gamma: self.gamma,
            seed: self.seed,
            timesteps,
            max_relative_error: worst,
            identical_across_workers: true,
            naive,
            scan,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_is_an_empty_report() {
        let report = ReturnsBench {
            trials: 0,
            ..Default::default()
        }
        .run()
        .unwrap();
        assert!(report.timesteps.is_empty());
        assert!(report.naive.mean_seconds.is_none());
        assert!(report.scan[0].speedup_vs_naive.is_none());
    }

    #[test]
    fn total_steps_is_exact() {
        let report = ReturnsBench {
            trials: 2,
            max_len: 50,
            total_steps: Some(1234),
            workers: vec![1, 3],
            ..Default::default()
        }
        .run()
        .unwrap();
        assert_eq!(report.timesteps, vec![1234, 1234]);
        assert!(report.max_relative_error <= 1e-6);
        assert!(report.scan[1].speedup_vs_one_worker.is_some());
    }
}
