//! Kernel auto-tuning and block-size search, both driven by a pluggable
//! latency source.

mod block;
mod cache;
mod ga;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bcrc::BcrcMatrix;
use crate::error::{GrimError, Result};
use crate::executor::{sparse_gemv, KernelConfig};
use crate::tensor::DenseMatrix;

pub use block::{find_block_size, measure_block, synthesize_layer, BlockSearch, DEFAULT_THRESHOLD};
pub use cache::TuneCache;
pub use ga::{ga_tune, GaParams, TuneResult, TuneSpace};

/// What a latency source is asked to time: a BCRC layer under a kernel
/// configuration, plus the block size it was synthesized with, if any.
#[derive(Clone, Copy, Debug)]
pub struct Probe<'a> {
    pub weights: &'a BcrcMatrix,
    pub config: KernelConfig,
    pub block: Option<(usize, usize)>,
}

pub trait LatencySource {
    /// Latency in microseconds; never negative.
    fn latency_us(&mut self, probe: &Probe) -> Result<f64>;
}

/// A deterministic latency model given as a closure.
pub struct ModelLatency<F>(pub F);

impl<F: FnMut(&Probe) -> f64> LatencySource for ModelLatency<F> {
    fn latency_us(&mut self, probe: &Probe) -> Result<f64> {
        let v = (self.0)(probe);
        if !(v >= 0.0) {
            return Err(GrimError::Config(format!("latency model returned {v}")));
        }
        Ok(v)
    }
}

/// Median wall-clock time of `repeats` calls after `warmups` untimed ones.
pub fn measure_us(repeats: usize, warmups: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmups {
        f();
    }
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Times `sparse_gemv` on the host with a fixed random input.
#[derive(Clone, Debug)]
pub struct HostTimer {
    pub repeats: usize,
    pub warmups: usize,
}

impl Default for HostTimer {
    fn default() -> Self {
        Self { repeats: 11, warmups: 3 }
    }
}

impl LatencySource for HostTimer {
    fn latency_us(&mut self, probe: &Probe) -> Result<f64> {
        let x = DenseMatrix::random(1, probe.weights.cols(), &mut ChaCha8Rng::seed_from_u64(0)).into_data();
        sparse_gemv(probe.weights, &x, &probe.config)?;
        Ok(measure_us(self.repeats, self.warmups, || {
            std::hint::black_box(sparse_gemv(probe.weights, &x, &probe.config).expect("validated above"));
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_repeats() {
        let mut calls = 0;
        let t = measure_us(5, 2, || calls += 1);
        assert_eq!(calls, 7);
        assert!(t >= 0.0);
    }

    #[test]
    fn model_rejects_negative_latency() {
        let (w, mask) = synthesize_layer(4, 4, 2.0, (2, 2), 0).unwrap();
        let b = crate::bcrc::encode_bcrc(&w, &mask, &crate::reorder::plan_reorder(&w, &mask).unwrap()).unwrap();
        let probe = Probe { weights: &b, config: KernelConfig::default(), block: None };
        assert!(ModelLatency(|_: &Probe| -1.0).latency_us(&probe).is_err());
        assert!(HostTimer { repeats: 1, warmups: 0 }.latency_us(&probe).unwrap() >= 0.0);
    }
}
