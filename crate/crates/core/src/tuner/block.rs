//! Layer synthesis and the block-size search.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LatencySource, Probe};
use crate::bcrc::encode_bcrc;
use crate::error::{GrimError, Result};
use crate::executor::KernelConfig;
use crate::pruner::{BcrMask, BlockPartition};
use crate::reorder::plan_reorder;
use crate::tensor::DenseMatrix;

pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// Random weights under a random block mask with `block` = (block height,
/// block width). Every block keeps all its rows and a random subset of
/// columns; the kept column count over all blocks is
/// `floor(blocks * block_w / rate)`, spread as evenly as possible, so the
/// zero fraction is at least `1 - 1/rate` and within one column stripe of it.
pub fn synthesize_layer(rows: usize, cols: usize, pruning_rate: f64, block: (usize, usize), seed: u64) -> Result<(DenseMatrix, BcrMask)> {
    if !(pruning_rate >= 1.0) {
        return Err(GrimError::Config(format!("pruning rate must be >= 1, got {pruning_rate}")));
    }
    let p = BlockPartition::from_block_size(rows, cols, block.0, block.1)?;
    let blocks = p.block_count();
    let total = ((blocks * p.block_w) as f64 / pruning_rate + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra: Vec<bool> = {
        let mut v = vec![false; blocks];
        for i in sample(&mut rng, blocks, total % blocks) {
            v[i] = true;
        }
        v
    };
    let rows_kept = vec![vec![true; p.block_h]; blocks];
    let cols_kept: Vec<Vec<bool>> = (0..blocks)
        .map(|b| {
            let k = total / blocks + usize::from(extra[b]);
            let mut v = vec![false; p.block_w];
            for c in sample(&mut rng, p.block_w, k) {
                v[c] = true;
            }
            v
        })
        .collect();
    let mask = BcrMask::from_parts(p, rows_kept, cols_kept)?;
    let w = DenseMatrix::from_fn(rows, cols, |r, c| {
        let v: f64 = StandardNormal.sample(&mut rng);
        if mask.is_kept(r, c) { v as f32 } else { 0.0 }
    });
    Ok((w, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSearch {
    pub best: (usize, usize),
    pub best_us: f64,
    /// Each measured candidate with its latency, in order.
    pub trace: Vec<((usize, usize), f64)>,
}

impl BlockSearch {
    /// Relative latency reduction of the chosen block over `baseline_us`,
    /// e.g. the latency of whole-matrix row and column pruning.
    pub fn improvement_over(&self, baseline_us: f64) -> f64 {
        if baseline_us > 0.0 { 1.0 - self.best_us / baseline_us } else { 0.0 }
    }
}

/// Latency of a layer synthesized with `block`. A block covering the whole
/// matrix gives the plain row and column pruning baseline.
pub fn measure_block(rows: usize, cols: usize, rate: f64, block: (usize, usize), seed: u64, lat: &mut dyn LatencySource) -> Result<f64> {
    let (w, mask) = synthesize_layer(rows, cols, rate, block, seed)?;
    let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask)?)?;
    lat.latency_us(&Probe { weights: &b, config: KernelConfig::default(), block: Some(block) })
}

/// Walks the candidates that divide the layer, ordered by area, and moves the
/// local optimum forward while the next candidate improves on it by more than
/// `threshold` (relative). Stops at the first candidate that does not.
pub fn find_block_size(
    rows: usize,
    cols: usize,
    pruning_rate: f64,
    candidates: &[(usize, usize)],
    threshold: f64,
    seed: u64,
    lat: &mut dyn LatencySource,
) -> Result<BlockSearch> {
    if !(threshold > 0.0) {
        return Err(GrimError::Config(format!("threshold must be positive, got {threshold}")));
    }
    let mut usable: Vec<(usize, usize)> = candidates
        .iter()
        .copied()
        .filter(|&(h, w)| h > 0 && w > 0 && rows % h == 0 && cols % w == 0)
        .collect();
    if usable.is_empty() {
        return Err(GrimError::NoCandidate { rows, cols });
    }
    usable.sort_by_key(|&(h, w)| h * w);
    let mut trace = Vec::new();
    let mut best = usable[0];
    let mut best_us = measure_block(rows, cols, pruning_rate, best, seed, lat)?;
    trace.push((best, best_us));
    for &cand in &usable[1..] {
        let t = measure_block(rows, cols, pruning_rate, cand, seed, lat)?;
        trace.push((cand, t));
        if best_us > 0.0 && (best_us - t) / best_us > threshold {
            best = cand;
            best_us = t;
        } else {
            break;
        }
    }
    Ok(BlockSearch { best, best_us, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::{is_feasible, SparsityConstraint};
    use crate::tuner::ModelLatency;

    #[test]
    fn rate_one_is_dense() {
        let (w, mask) = synthesize_layer(8, 8, 1.0, (2, 4), 3).unwrap();
        assert_eq!(mask.pruned_count(), 0);
        assert_eq!(w.count_nonzero(), 64);
    }

    #[test]
    fn kept_count_follows_rate() {
        let (w, mask) = synthesize_layer(1024, 1024, 8.0, (8, 8), 1).unwrap();
        assert_eq!(mask.kept_count(), 131_072);
        assert_eq!(w.count_nonzero(), 131_072);
        let (_, mask) = synthesize_layer(64, 64, 10.0, (4, 16), 1).unwrap();
        let alpha = 0.9;
        assert!(mask.zero_fraction() >= alpha);
        assert!(mask.zero_fraction() - alpha <= 4.0 / (64.0 * 64.0));
    }

    #[test]
    fn masks_are_feasible_and_seeded() {
        for seed in 0..10 {
            let (w, mask) = synthesize_layer(32, 48, 3.6, (4, 16), seed).unwrap();
            let c = SparsityConstraint::for_block_size(1.0 - 1.0 / 3.6, 32, 48, 4, 16).unwrap();
            assert!(is_feasible(&w, &c).unwrap());
            assert!(mask.covers(&w));
        }
        assert_eq!(synthesize_layer(16, 16, 4.0, (4, 4), 9).unwrap(), synthesize_layer(16, 16, 4.0, (4, 4), 9).unwrap());
        assert_ne!(synthesize_layer(16, 16, 4.0, (4, 4), 9).unwrap().1, synthesize_layer(16, 16, 4.0, (4, 4), 10).unwrap().1);
        assert!(matches!(synthesize_layer(16, 16, 4.0, (3, 4), 0), Err(GrimError::Divisibility(_))));
    }

    fn candidates() -> Vec<(usize, usize)> {
        vec![(1, 16), (2, 16), (4, 16), (8, 16), (16, 16)]
    }

    #[test]
    fn plateau_model_stops_at_knee() {
        let mut lat = ModelLatency(|p: &Probe| match p.block {
            Some((h, _)) if h < 4 => 400.0 / h as f64,
            Some((h, _)) if h <= 16 => 100.0 - h as f64 * 0.1,
            _ => 500.0,
        });
        let r = find_block_size(64, 64, 10.0, &candidates(), DEFAULT_THRESHOLD, 0, &mut lat).unwrap();
        assert_eq!(r.best, (4, 16));
        assert_eq!(r.trace.len(), 4);
        let baseline = measure_block(64, 64, 10.0, (64, 64), 0, &mut lat).unwrap();
        assert!(r.improvement_over(baseline) > 0.0);
    }

    #[test]
    fn flat_and_decreasing_models() {
        let r = find_block_size(64, 64, 4.0, &candidates(), DEFAULT_THRESHOLD, 0, &mut ModelLatency(|_: &Probe| 10.0)).unwrap();
        assert_eq!(r.best, (1, 16));
        let mut falling = ModelLatency(|p: &Probe| 1000.0 / (p.block.unwrap().0 as f64));
        let r = find_block_size(64, 64, 4.0, &candidates(), DEFAULT_THRESHOLD, 0, &mut falling).unwrap();
        assert_eq!(r.best, (16, 16));
    }

    #[test]
    fn no_dividing_candidate() {
        let err = find_block_size(30, 30, 4.0, &[(4, 16), (8, 8)], 0.05, 0, &mut ModelLatency(|_: &Probe| 1.0)).unwrap_err();
        assert!(matches!(err, GrimError::NoCandidate { rows: 30, cols: 30 }));
        assert!(find_block_size(30, 30, 4.0, &[(3, 3)], 0.0, 0, &mut ModelLatency(|_: &Probe| 1.0)).is_err());
    }
}
