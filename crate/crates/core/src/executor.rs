//! Sparse GEMV/GEMM over BCRC matrices.
//!
//! Work is scheduled run by run. Each run's rows are split into contiguous
//! chunks of `ceil(rows / threads)`, one per worker, and each chunk is walked
//! in tiles of `tile_rows` rows. With load redundancy elimination (LRE) the
//! input entries named by a run's column list are gathered once per tile and
//! reused by every row in it; without it every row gathers for itself. Both
//! paths accumulate each output in the same order, so they agree bitwise.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::bcrc::BcrcMatrix;
use crate::error::{GrimError, Result};
use crate::tensor::{DenseMatrix, MatVec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelConfig {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub unroll: usize,
    pub threads: usize,
    pub lre_enabled: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            tile_rows: 8,
            tile_cols: 64,
            unroll: 4,
            threads: 1,
            lre_enabled: true,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 || self.unroll == 0 || self.threads == 0 {
            return Err(GrimError::Config(format!("kernel parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Compact `tr8-tc64-u4-t1-lre` style label.
    pub fn label(&self) -> String {
        format!(
            "tr{}-tc{}-u{}-t{}-{}",
            self.tile_rows,
            self.tile_cols,
            self.unroll,
            self.threads,
            if self.lre_enabled { "lre" } else { "nolre" }
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub input_loads: u64,
    pub weight_loads: u64,
}

/// Reordered rows `[start, end)` of one run, processed together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Tile {
    run: usize,
    start: usize,
    end: usize,
}

/// Row tiles per worker.
fn schedule(b: &BcrcMatrix, threads: usize, tile_rows: usize) -> Vec<Vec<Tile>> {
    let mut work = vec![Vec::new(); threads];
    for run in 0..b.run_count() {
        let (s, e) = b.run_rows(run);
        let chunk = (e - s).div_ceil(threads);
        for (t, tiles) in work.iter_mut().enumerate() {
            let cs = (s + t * chunk).min(e);
            let ce = (cs + chunk).min(e);
            let mut k = cs;
            while k < ce {
                let end = (k + tile_rows).min(ce);
                tiles.push(Tile { run, start: k, end });
                k = end;
            }
        }
    }
    work
}

fn pool(threads: usize) -> Arc<ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    pools
        .entry(threads)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("thread pool"),
            )
        })
        .clone()
}

/// Runs `f` once per worker index and collects the results in worker order.
fn for_workers<T: Send>(threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if threads == 1 {
        return vec![f(0)];
    }
    pool(threads).install(|| (0..threads).into_par_iter().map(&f).collect())
}

/// Dot product with `U` interleaved accumulators: element `i` goes to lane
/// `i % U`, and lanes are summed in order at the end.
#[inline(always)]
fn dot_lanes<const U: usize>(w: &[f32], x: impl Fn(usize) -> f32) -> f32 {
    let mut acc = [0.0f64; U];
    let full = w.len() / U * U;
    let mut i = 0;
    while i < full {
        for l in 0..U {
            acc[l] += f64::from(w[i + l]) * f64::from(x(i + l));
        }
        i += U;
    }
    for l in 0..w.len() - full {
        acc[l] += f64::from(w[full + l]) * f64::from(x(full + l));
    }
    let mut s = acc[0];
    for a in &acc[1..] {
        s += a;
    }
    s as f32
}

fn dot_dyn(unroll: usize, w: &[f32], x: impl Fn(usize) -> f32) -> f32 {
    let mut acc = vec![0.0f64; unroll];
    for (i, &wv) in w.iter().enumerate() {
        acc[i % unroll] += f64::from(wv) * f64::from(x(i));
    }
    let mut s = acc[0];
    for a in &acc[1..] {
        s += a;
    }
    s as f32
}

#[inline(always)]
fn dot(unroll: usize, w: &[f32], x: impl Fn(usize) -> f32) -> f32 {
    match unroll {
        1 => dot_lanes::<1>(w, x),
        2 => dot_lanes::<2>(w, x),
        4 => dot_lanes::<4>(w, x),
        8 => dot_lanes::<8>(w, x),
        16 => dot_lanes::<16>(w, x),
        u => dot_dyn(u, w, x),
    }
}

/// `y = W x` in original row order.
pub fn sparse_gemv(b: &BcrcMatrix, x: &[f32], cfg: &KernelConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    if x.len() != b.cols() {
        return Err(GrimError::shape(format!(
            "vector of length {} for a {}x{} matrix",
            x.len(),
            b.rows(),
            b.cols()
        )));
    }
    let work = schedule(b, cfg.threads, cfg.tile_rows);
    let parts = for_workers(cfg.threads, |t| {
        let mut out = Vec::new();
        let mut packed = Vec::new();
        for tile in &work[t] {
            let cols = b.run_columns(tile.run);
            // A lone row has nothing to share its loads with.
            if cfg.lre_enabled && tile.end - tile.start > 1 {
                packed.clear();
                packed.extend(cols.iter().map(|&c| x[c as usize]));
                for k in tile.start..tile.end {
                    out.push(dot(cfg.unroll, b.row_weights(k), |i| packed[i]));
                }
            } else {
                for k in tile.start..tile.end {
                    out.push(dot(cfg.unroll, b.row_weights(k), |i| x[cols[i] as usize]));
                }
            }
        }
        out
    });
    let mut y = vec![0.0f32; b.rows()];
    let reorder = b.reorder();
    for (tiles, vals) in work.iter().zip(parts) {
        let mut it = vals.into_iter();
        for tile in tiles {
            for k in tile.start..tile.end {
                y[reorder[k] as usize] = it.next().expect("one value per row");
            }
        }
    }
    Ok(y)
}

/// `W X` together with the number of multiply-adds executed.
pub fn sparse_gemm_counted(b: &BcrcMatrix, x: &DenseMatrix, cfg: &KernelConfig) -> Result<(DenseMatrix, u64)> {
    cfg.validate()?;
    if x.rows() != b.cols() {
        return Err(GrimError::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            b.rows(),
            b.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let n = x.cols();
    if n == 1 {
        let y = sparse_gemv(b, x.data(), cfg)?;
        return Ok((DenseMatrix::new(b.rows(), 1, y)?, b.nnz() as u64));
    }
    let work = schedule(b, cfg.threads, cfg.tile_rows);
    let parts = for_workers(cfg.threads, |t| {
        let rows: usize = work[t].iter().map(|tile| tile.end - tile.start).sum();
        let mut out = vec![0.0f32; rows * n];
        let mut macs = 0u64;
        let mut packed = Vec::new();
        let mut base = 0;
        for tile in &work[t] {
            let cols = b.run_columns(tile.run);
            let s = cols.len();
            let mut j0 = 0;
            while j0 < n {
                let j1 = (j0 + cfg.tile_cols).min(n);
                if cfg.lre_enabled {
                    // Column-major pack of the tile: entry (i, j) at (j - j0) * s + i.
                    packed.clear();
                    for j in j0..j1 {
                        packed.extend(cols.iter().map(|&c| x.get(c as usize, j)));
                    }
                }
                for k in tile.start..tile.end {
                    let w = b.row_weights(k);
                    let row = &mut out[(base + k - tile.start) * n..][..n];
                    for j in j0..j1 {
                        row[j] = if cfg.lre_enabled {
                            let off = (j - j0) * s;
                            dot(cfg.unroll, w, |i| packed[off + i])
                        } else {
                            dot(cfg.unroll, w, |i| x.get(cols[i] as usize, j))
                        };
                    }
                    macs += (w.len() * (j1 - j0)) as u64;
                }
                j0 = j1;
            }
            base += tile.end - tile.start;
        }
        (out, macs)
    });
    let mut y = DenseMatrix::zeros(b.rows(), n);
    let reorder = b.reorder();
    let mut macs = 0;
    for (tiles, (vals, m)) in work.iter().zip(parts) {
        macs += m;
        let mut base = 0;
        for tile in tiles {
            for k in tile.start..tile.end {
                y.row_mut(reorder[k] as usize).copy_from_slice(&vals[base * n..(base + 1) * n]);
                base += 1;
            }
        }
    }
    Ok((y, macs))
}

/// `W X`; column tiles of width `tile_cols` share one packed input tile.
pub fn sparse_gemm(b: &BcrcMatrix, x: &DenseMatrix, cfg: &KernelConfig) -> Result<DenseMatrix> {
    sparse_gemm_counted(b, x, cfg).map(|(y, _)| y)
}

/// Replays the kernel schedule and counts register loads of input and weight
/// elements. With LRE a tile loads each input element of its run once per
/// column tile; without it every row loads every element it reads.
pub fn count_loads(b: &BcrcMatrix, x_cols: usize, cfg: &KernelConfig) -> LoadStats {
    let mut stats = LoadStats::default();
    let tile_cols = cfg.tile_cols.max(1);
    let col_tiles = x_cols.div_ceil(tile_cols) as u64;
    for tiles in schedule(b, cfg.threads.max(1), cfg.tile_rows.max(1)) {
        for tile in tiles {
            let s = b.run_columns(tile.run).len() as u64;
            let rows = (tile.end - tile.start) as u64;
            let per_tile = s * x_cols as u64;
            stats.input_loads += if cfg.lre_enabled { per_tile } else { rows * per_tile };
            stats.weight_loads += rows * s * col_tiles;
        }
    }
    stats
}

/// Row-major dense GEMV in `f32` with eight accumulators; the baseline the
/// sparse kernels are timed against.
pub fn dense_gemv_baseline(w: &DenseMatrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != w.cols() {
        return Err(GrimError::shape(format!(
            "vector of length {} for a {}x{} matrix",
            x.len(),
            w.rows(),
            w.cols()
        )));
    }
    Ok((0..w.rows()).map(|r| dot_lanes::<8>(w.row(r), |i| x[i])).collect())
}

/// Dense `W * X` in `f32`, one baseline GEMV per column of `X`.
pub fn dense_gemm_baseline(w: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() != w.cols() {
        return Err(GrimError::shape(format!(
            "{}x{} times {}x{}",
            w.rows(),
            w.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let xt = x.transpose();
    let mut out = DenseMatrix::zeros(w.rows(), x.cols());
    for j in 0..x.cols() {
        let col = xt.row(j);
        for r in 0..w.rows() {
            out.set(r, j, dot_lanes::<8>(w.row(r), |i| col[i]));
        }
    }
    Ok(out)
}

/// A BCRC matrix bound to a kernel configuration, usable wherever a
/// matrix-vector product is expected.
#[derive(Clone, Debug)]
pub struct SparseLinear {
    pub matrix: BcrcMatrix,
    pub cfg: KernelConfig,
}

impl MatVec for SparseLinear {
    fn out_dim(&self) -> usize {
        self.matrix.rows()
    }

    fn in_dim(&self) -> usize {
        self.matrix.cols()
    }

    fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        sparse_gemv(&self.matrix, x, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcrc::{decode_bcrc, encode_bcrc};
    use crate::pruner::{project_bcr, BcrMask, BlockPartition, SparsityConstraint};
    use crate::reorder::plan_reorder;
    use crate::tensor::dense_gemm;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pruned(seed: u64, rows: usize, cols: usize, n: usize, m: usize, alpha: f64) -> (DenseMatrix, BcrcMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DenseMatrix::random(rows, cols, &mut rng);
        let (w, mask) = project_bcr(&x, &SparsityConstraint::new(alpha, n, m).unwrap()).unwrap();
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        (w, b)
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
    }

    fn configs() -> Vec<KernelConfig> {
        let mut out = Vec::new();
        for tile_rows in [1, 3, 8] {
            for unroll in [1, 3, 4] {
                for threads in [1, 2] {
                    for lre_enabled in [false, true] {
                        out.push(KernelConfig {
                            tile_rows,
                            tile_cols: 2,
                            unroll,
                            threads,
                            lre_enabled,
                        });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_zero() {
        let w = DenseMatrix::identity(5);
        let mask = BcrMask::covering(&w, BlockPartition::new(5, 5, 5, 5).unwrap()).unwrap();
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        let x = [1.0, -2.0, 3.5, 0.25, 9.0];
        assert_eq!(sparse_gemv(&b, &x, &KernelConfig::default()).unwrap(), x.to_vec());

        let z = DenseMatrix::zeros(4, 6);
        let mask = BcrMask::covering(&z, BlockPartition::new(4, 6, 2, 3).unwrap()).unwrap();
        let b = encode_bcrc(&z, &mask, &plan_reorder(&z, &mask).unwrap()).unwrap();
        assert_eq!(sparse_gemv(&b, &[1.0; 6], &KernelConfig::default()).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn gemm_with_identity_decodes() {
        let (_, b) = pruned(1, 12, 10, 3, 2, 0.6);
        let y = sparse_gemm(&b, &DenseMatrix::identity(10), &KernelConfig::default()).unwrap();
        assert_eq!(y, decode_bcrc(&b).unwrap());
    }

    #[test]
    fn every_config_matches_dense() {
        let (w, b) = pruned(2, 24, 16, 4, 2, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::random(16, 5, &mut rng);
        let want = dense_gemm(&w, &x).unwrap();
        let v = DenseMatrix::random(16, 1, &mut rng);
        let want_v = dense_gemm(&w, &v).unwrap();
        let reference = sparse_gemm(&b, &x, &configs()[0]).unwrap();
        for cfg in configs() {
            let (y, macs) = sparse_gemm_counted(&b, &x, &cfg).unwrap();
            assert!(close(y.data(), want.data(), 1e-5), "{cfg:?}");
            assert_eq!(macs, (b.nnz() * 5) as u64);
            assert!(close(&sparse_gemv(&b, v.data(), &cfg).unwrap(), want_v.data(), 1e-5));
            if cfg.unroll == configs()[0].unroll {
                assert_eq!(y, reference);
            }
        }
    }

    #[test]
    fn threads_and_lre_do_not_change_bits() {
        let (_, b) = pruned(4, 64, 48, 8, 3, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DenseMatrix::random(48, 7, &mut rng);
        let base = KernelConfig {
            threads: 1,
            lre_enabled: false,
            ..KernelConfig::default()
        };
        let want = sparse_gemm(&b, &x, &base).unwrap();
        for threads in [2, 3, 4] {
            for lre_enabled in [false, true] {
                let cfg = KernelConfig { threads, lre_enabled, ..base };
                assert_eq!(sparse_gemm(&b, &x, &cfg).unwrap(), want);
            }
        }
    }

    #[test]
    fn single_column_gemm_is_gemv() {
        let (_, b) = pruned(6, 16, 16, 2, 2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DenseMatrix::random(16, 1, &mut rng);
        let cfg = KernelConfig::default();
        assert_eq!(sparse_gemm(&b, &x, &cfg).unwrap().data(), &sparse_gemv(&b, x.data(), &cfg).unwrap()[..]);
    }

    #[test]
    fn shape_and_config_errors() {
        let (_, b) = pruned(8, 4, 4, 1, 1, 0.5);
        assert!(sparse_gemv(&b, &[1.0; 3], &KernelConfig::default()).is_err());
        assert!(sparse_gemm(&b, &DenseMatrix::zeros(5, 2), &KernelConfig::default()).is_err());
        let bad = KernelConfig {
            unroll: 0,
            ..KernelConfig::default()
        };
        assert!(sparse_gemv(&b, &[1.0; 4], &bad).is_err());
    }

    #[test]
    fn one_shared_run_load_counts() {
        let (k, s) = (6usize, 4usize);
        let p = BlockPartition::new(k, 8, 1, 1).unwrap();
        let kept: Vec<bool> = (0..8).map(|c| c < s).collect();
        let mask = BcrMask::from_parts(p, vec![vec![true; k]], vec![kept]).unwrap();
        let w = mask.apply(&DenseMatrix::from_fn(k, 8, |_, _| 1.0)).unwrap();
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        let cfg = KernelConfig {
            tile_rows: k,
            ..KernelConfig::default()
        };
        assert_eq!(count_loads(&b, 1, &cfg).input_loads, s as u64);
        let off = KernelConfig { lre_enabled: false, ..cfg };
        assert_eq!(count_loads(&b, 1, &off).input_loads, (k * s) as u64);
        assert_eq!(count_loads(&b, 1, &off).weight_loads, (k * s) as u64);
    }

    #[test]
    fn distinct_rows_gain_nothing_from_lre() {
        let w = DenseMatrix::identity(6);
        let mask = BcrMask::covering(&w, BlockPartition::new(6, 6, 6, 6).unwrap()).unwrap();
        let b = encode_bcrc(&w, &mask, &plan_reorder(&w, &mask).unwrap()).unwrap();
        let on = KernelConfig::default();
        let off = KernelConfig { lre_enabled: false, ..on };
        assert_eq!(count_loads(&b, 3, &on), count_loads(&b, 3, &off));
    }

    #[test]
    fn schedule_covers_each_row_once() {
        let (_, b) = pruned(9, 40, 16, 5, 2, 0.7);
        for threads in 1..5 {
            for tile_rows in [1, 2, 7] {
                let mut seen = vec![0; b.rows()];
                for tiles in schedule(&b, threads, tile_rows) {
                    for t in tiles {
                        let (s, e) = b.run_rows(t.run);
                        assert!(s <= t.start && t.end <= e && t.end - t.start <= tile_rows);
                        for k in t.start..t.end {
                            seen[k] += 1;
                        }
                    }
                }
                assert!(seen.iter().all(|&c| c == 1));
            }
        }
    }

    #[test]
    fn dense_baseline_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = DenseMatrix::random(9, 13, &mut rng);
        let x = DenseMatrix::random(13, 1, &mut rng);
        let want = dense_gemm(&w, &x).unwrap();
        assert!(close(&dense_gemv_baseline(&w, x.data()).unwrap(), want.data(), 1e-5));
        let x = DenseMatrix::random(13, 5, &mut rng);
        let want = dense_gemm(&w, &x).unwrap();
        assert!(close(dense_gemm_baseline(&w, &x).unwrap().data(), want.data(), 1e-5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_dense_oracle(
            seed in any::<u64>(), n in 1usize..4, m in 1usize..4, bh in 1usize..6, bw in 1usize..6,
            alpha in 0.0f64..0.95, xc in 1usize..5, tile_rows in 1usize..6, tile_cols in 1usize..4,
            unroll in 1usize..6, threads in 1usize..4, lre in any::<bool>(),
        ) {
            let (w, b) = pruned(seed, n * bh, m * bw, n, m, alpha);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let x = DenseMatrix::random(m * bw, xc, &mut rng);
            let cfg = KernelConfig { tile_rows, tile_cols, unroll, threads, lre_enabled: lre };
            let (y, macs) = sparse_gemm_counted(&b, &x, &cfg).unwrap();
            prop_assert!(close(y.data(), dense_gemm(&w, &x).unwrap().data(), 1e-5));
            prop_assert_eq!(macs, (b.nnz() * xc) as u64);
            let on = count_loads(&b, xc, &KernelConfig { lre_enabled: true, ..cfg });
            let off = count_loads(&b, xc, &KernelConfig { lre_enabled: false, ..cfg });
            prop_assert!(on.input_loads <= off.input_loads);
            prop_assert_eq!(on.weight_loads, off.weight_loads);
        }
    }
}
