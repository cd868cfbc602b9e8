//! Greedy Euclidean projection onto the set of BCR-sparse matrices.
//!
//! Every kept row or column segment inside a block is a "stripe". The
//! projection repeatedly drops the stripe whose squared norm per newly zeroed
//! element is smallest, until the zero ratio reaches alpha. Ties go to the
//! smaller block index, then columns before rows, then the smaller stripe
//! index, so the output is deterministic.
//!
//! Pruned stripes are then re-admitted while the ratio allows. Matrices of up
//! to 65536 weights are polished further: each block is re-fitted over all
//! shapes that fit its kept count, single stripes are traded between blocks,
//! and, when the table is small, the kept budget is split across blocks by
//! dynamic programming over per-block selections; the better answer wins.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use super::mask::{BcrMask, BlockPartition, SparsityConstraint};
use crate::error::Result;
use crate::tensor::DenseMatrix;

/// Matrices with more weights than this skip the re-fit, trade and
/// allocation passes, whose cost grows faster than the greedy pass.
const POLISH_LIMIT: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum StripeKind {
    Col,
    Row,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    score: f64,
    block: usize,
    kind: StripeKind,
    index: usize,
    zeroed: usize,
}

impl Candidate {
    fn key(&self) -> (usize, StripeKind, usize) {
        (self.block, self.kind, self.index)
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| self.key().cmp(&other.key()))
    }
}

/// Energies of the kept stripes of one block.
struct BlockState {
    row_energy: Vec<f64>,
    col_energy: Vec<f64>,
}

struct Projector<'a> {
    x: &'a DenseMatrix,
    p: BlockPartition,
    mask: BcrMask,
    blocks: Vec<BlockState>,
}

impl<'a> Projector<'a> {
    fn new(x: &'a DenseMatrix, p: BlockPartition) -> Self {
        let blocks = (0..p.block_count())
            .map(|_| BlockState {
                row_energy: vec![0.0; p.block_h],
                col_energy: vec![0.0; p.block_w],
            })
            .collect();
        let mut s = Self {
            x,
            p,
            mask: BcrMask::full(p),
            blocks,
        };
        for b in 0..p.block_count() {
            s.refresh_rows(b);
            s.refresh_cols(b);
        }
        s
    }

    #[inline]
    fn sq(&self, b: usize, i: usize, j: usize) -> f64 {
        let (r0, c0) = self.p.block_origin(b);
        let v = f64::from(self.x.get(r0 + i, c0 + j));
        v * v
    }

    fn refresh_rows(&mut self, b: usize) {
        for i in 0..self.p.block_h {
            let mut e = 0.0;
            if self.mask.kept_rows(b)[i] {
                for j in 0..self.p.block_w {
                    if self.mask.kept_cols(b)[j] {
                        e += self.sq(b, i, j);
                    }
                }
            }
            self.blocks[b].row_energy[i] = e;
        }
    }

    fn refresh_cols(&mut self, b: usize) {
        for j in 0..self.p.block_w {
            let mut e = 0.0;
            if self.mask.kept_cols(b)[j] {
                for i in 0..self.p.block_h {
                    if self.mask.kept_rows(b)[i] {
                        e += self.sq(b, i, j);
                    }
                }
            }
            self.blocks[b].col_energy[j] = e;
        }
    }

    /// Cheapest stripe of block `b`, if removing any stripe zeroes anything.
    fn best(&self, b: usize) -> Option<Candidate> {
        let kept_r = self.mask.kept_rows(b).iter().filter(|&&k| k).count();
        let kept_c = self.mask.kept_cols(b).iter().filter(|&&k| k).count();
        if kept_r == 0 || kept_c == 0 {
            return None;
        }
        let mut best: Option<Candidate> = None;
        let mut offer = |c: Candidate| {
            if best.map_or(true, |cur| c < cur) {
                best = Some(c);
            }
        };
        for (j, &k) in self.mask.kept_cols(b).iter().enumerate() {
            if k {
                offer(Candidate {
                    score: self.blocks[b].col_energy[j] / kept_r as f64,
                    block: b,
                    kind: StripeKind::Col,
                    index: j,
                    zeroed: kept_r,
                });
            }
        }
        for (i, &k) in self.mask.kept_rows(b).iter().enumerate() {
            if k {
                offer(Candidate {
                    score: self.blocks[b].row_energy[i] / kept_c as f64,
                    block: b,
                    kind: StripeKind::Row,
                    index: i,
                    zeroed: kept_c,
                });
            }
        }
        best
    }

    fn remove(&mut self, c: &Candidate) {
        match c.kind {
            StripeKind::Col => {
                self.mask.kept_cols_mut(c.block)[c.index] = false;
                self.blocks[c.block].col_energy[c.index] = 0.0;
                self.refresh_rows(c.block);
            }
            StripeKind::Row => {
                self.mask.kept_rows_mut(c.block)[c.index] = false;
                self.blocks[c.block].row_energy[c.index] = 0.0;
                self.refresh_cols(c.block);
            }
        }
    }

    fn kept_counts(&self, b: usize) -> (usize, usize) {
        (
            self.mask.kept_rows(b).iter().filter(|&&k| k).count(),
            self.mask.kept_cols(b).iter().filter(|&&k| k).count(),
        )
    }

    /// Lowest-energy stripe anywhere whose removal alone zeroes at least
    /// `deficit` more weights.
    fn cheapest_finisher(&self, deficit: usize) -> Option<Candidate> {
        let mut best: Option<(f64, Candidate)> = None;
        for b in 0..self.p.block_count() {
            let (kept_r, kept_c) = self.kept_counts(b);
            if kept_r == 0 || kept_c == 0 {
                continue;
            }
            let stripes = self
                .mask
                .kept_cols(b)
                .iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(j, _)| (StripeKind::Col, j, self.blocks[b].col_energy[j], kept_r))
                .chain(
                    self.mask
                        .kept_rows(b)
                        .iter()
                        .enumerate()
                        .filter(|(_, &k)| k)
                        .map(|(i, _)| (StripeKind::Row, i, self.blocks[b].row_energy[i], kept_c)),
                );
            for (kind, index, energy, zeroed) in stripes {
                if zeroed < deficit {
                    continue;
                }
                let c = Candidate {
                    score: energy / zeroed as f64,
                    block: b,
                    kind,
                    index,
                    zeroed,
                };
                let better = match &best {
                    None => true,
                    Some((e, cur)) => energy < *e || (energy == *e && c.key() < cur.key()),
                };
                if better {
                    best = Some((energy, c));
                }
            }
        }
        best.map(|(_, c)| c)
    }

    /// Re-admits pruned stripes, largest energy first, while the pruned count
    /// stays at or above `target`.
    fn restore(&mut self, target: usize, mut pruned: usize) {
        loop {
            let slack = pruned - target;
            let mut best: Option<(f64, usize, StripeKind, usize, usize)> = None;
            for b in 0..self.p.block_count() {
                let (r0, c0) = self.p.block_origin(b);
                let (kept_r, kept_c) = self.kept_counts(b);
                let mut offer = |gain: f64, kind: StripeKind, index: usize, added: usize| {
                    if added == 0 || added > slack || gain <= 0.0 {
                        return;
                    }
                    let better = match &best {
                        None => true,
                        Some((g, bb, k, i, _)) => gain > *g || (gain == *g && (b, kind, index) < (*bb, *k, *i)),
                    };
                    if better {
                        best = Some((gain, b, kind, index, added));
                    }
                };
                for j in 0..self.p.block_w {
                    if self.mask.kept_cols(b)[j] {
                        continue;
                    }
                    let gain: f64 = (0..self.p.block_h)
                        .filter(|&i| self.mask.kept_rows(b)[i])
                        .map(|i| {
                            let v = f64::from(self.x.get(r0 + i, c0 + j));
                            v * v
                        })
                        .sum();
                    offer(gain, StripeKind::Col, j, kept_r);
                }
                for i in 0..self.p.block_h {
                    if self.mask.kept_rows(b)[i] {
                        continue;
                    }
                    let gain: f64 = (0..self.p.block_w)
                        .filter(|&j| self.mask.kept_cols(b)[j])
                        .map(|j| {
                            let v = f64::from(self.x.get(r0 + i, c0 + j));
                            v * v
                        })
                        .sum();
                    offer(gain, StripeKind::Row, i, kept_c);
                }
            }
            let Some((_, b, kind, index, added)) = best else { break };
            match kind {
                StripeKind::Col => self.mask.kept_cols_mut(b)[index] = true,
                StripeKind::Row => self.mask.kept_rows_mut(b)[index] = true,
            }
            self.refresh_rows(b);
            self.refresh_cols(b);
            pruned -= added;
        }
    }

    /// Energy of stripe `index` over the kept cross-stripes, whether or not
    /// the stripe itself is kept.
    fn stripe_energy(&self, b: usize, kind: StripeKind, index: usize) -> f64 {
        match kind {
            StripeKind::Row => (0..self.p.block_w)
                .filter(|&j| self.mask.kept_cols(b)[j])
                .map(|j| self.sq(b, index, j))
                .sum(),
            StripeKind::Col => (0..self.p.block_h)
                .filter(|&i| self.mask.kept_rows(b)[i])
                .map(|i| self.sq(b, i, index))
                .sum(),
        }
    }

    fn top_k(scores: &[f64], k: usize) -> Vec<bool> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut keep = vec![false; scores.len()];
        for &i in order.iter().take(k) {
            keep[i] = true;
        }
        keep
    }

    fn row_scores(&self, b: usize, cols: &[bool]) -> Vec<f64> {
        (0..self.p.block_h)
            .map(|i| (0..self.p.block_w).filter(|&j| cols[j]).map(|j| self.sq(b, i, j)).sum())
            .collect()
    }

    fn col_scores(&self, b: usize, rows: &[bool]) -> Vec<f64> {
        (0..self.p.block_w)
            .map(|j| (0..self.p.block_h).filter(|&i| rows[i]).map(|i| self.sq(b, i, j)).sum())
            .collect()
    }

    fn sub_energy(&self, b: usize, rows: &[bool], cols: &[bool]) -> f64 {
        self.row_scores(b, cols)
            .iter()
            .zip(rows)
            .filter(|(_, &k)| k)
            .map(|(e, _)| e)
            .sum()
    }

    /// Alternates best-rows-for-these-columns and best-columns-for-these-rows
    /// until the selection settles.
    fn alternate(&self, b: usize, mut rows: Vec<bool>, kr: usize, kc: usize) -> (Vec<bool>, Vec<bool>, f64) {
        let mut cols = Self::top_k(&self.col_scores(b, &rows), kc);
        let mut energy = self.sub_energy(b, &rows, &cols);
        for _ in 0..16 {
            let next_rows = Self::top_k(&self.row_scores(b, &cols), kr);
            let next_cols = Self::top_k(&self.col_scores(b, &next_rows), kc);
            let e = self.sub_energy(b, &next_rows, &next_cols);
            if e <= energy {
                break;
            }
            rows = next_rows;
            cols = next_cols;
            energy = e;
        }
        (rows, cols, energy)
    }

    /// Re-chooses the kept rows and columns of block `b` over every block
    /// shape that fits in its current kept count, keeping the result only if
    /// it retains strictly more energy.
    fn reshape_block(&mut self, b: usize) {
        let kept_r = self.mask.kept_rows(b).iter().filter(|&&k| k).count();
        let kept_c = self.mask.kept_cols(b).iter().filter(|&&k| k).count();
        let budget = kept_r * kept_c;
        if budget == 0 || budget == self.p.block_h * self.p.block_w {
            return;
        }
        let current = self.sub_energy(b, self.mask.kept_rows(b), self.mask.kept_cols(b));
        let mut best: Option<(Vec<bool>, Vec<bool>, f64)> = None;
        let full_cols = vec![true; self.p.block_w];
        let full_rows = vec![true; self.p.block_h];
        for kr in 1..=self.p.block_h {
            let kc = (budget / kr).min(self.p.block_w);
            if kc == 0 {
                break;
            }
            let mut starts = vec![
                Self::top_k(&self.row_scores(b, &full_cols), kr),
                Self::top_k(&self.row_scores(b, &Self::top_k(&self.col_scores(b, &full_rows), kc)), kr),
            ];
            // Seed from each row's own strongest columns.
            for i in 0..self.p.block_h {
                let mut single = vec![false; self.p.block_h];
                single[i] = true;
                let cols = Self::top_k(&self.col_scores(b, &single), kc);
                starts.push(Self::top_k(&self.row_scores(b, &cols), kr));
            }
            if kr == kept_r {
                starts.push(self.mask.kept_rows(b).to_vec());
            }
            for rows in starts {
                let cand = self.alternate(b, rows, kr, kc);
                if best.as_ref().map_or(true, |(.., e)| cand.2 > *e) {
                    best = Some(cand);
                }
            }
        }
        if let Some((rows, cols, e)) = best {
            if e > current * (1.0 + 1e-12) {
                self.mask.kept_rows_mut(b).copy_from_slice(&rows);
                self.mask.kept_cols_mut(b).copy_from_slice(&cols);
                self.refresh_rows(b);
                self.refresh_cols(b);
            }
        }
    }

    /// Best single move that re-admits a pruned stripe in one block and drops
    /// a kept stripe in another, staying at or above `target` pruned weights.
    /// Returns whether a strictly improving move was applied.
    fn exchange(&mut self, target: usize) -> bool {
        let pruned = self.mask.pruned_count();
        let max_len = self.p.block_h.max(self.p.block_w);
        // Two cheapest kept stripes (from different blocks) per zeroed count.
        let mut cheapest: Vec<Vec<(f64, usize, StripeKind, usize)>> = vec![Vec::new(); max_len + 1];
        for b in 0..self.p.block_count() {
            let (kept_r, kept_c) = self.kept_counts(b);
            let rows = (0..self.p.block_h)
                .filter(|&i| self.mask.kept_rows(b)[i])
                .map(|i| (self.blocks[b].row_energy[i], StripeKind::Row, i, kept_c));
            let cols = (0..self.p.block_w)
                .filter(|&j| self.mask.kept_cols(b)[j])
                .map(|j| (self.blocks[b].col_energy[j], StripeKind::Col, j, kept_r));
            for (loss, kind, index, zeroed) in cols.chain(rows) {
                if zeroed == 0 {
                    continue;
                }
                let slot = &mut cheapest[zeroed];
                slot.push((loss, b, kind, index));
                slot.sort_by(|a, c| a.0.total_cmp(&c.0).then((a.1, a.2, a.3).cmp(&(c.1, c.2, c.3))));
                let mut seen = Vec::new();
                slot.retain(|e| {
                    if seen.contains(&e.1) || seen.len() == 2 {
                        false
                    } else {
                        seen.push(e.1);
                        true
                    }
                });
            }
        }
        let mut best: Option<(f64, (usize, StripeKind, usize), (usize, StripeKind, usize))> = None;
        for b in 0..self.p.block_count() {
            let (kept_r, kept_c) = self.kept_counts(b);
            let restores = (0..self.p.block_w)
                .filter(|&j| !self.mask.kept_cols(b)[j])
                .map(|j| (StripeKind::Col, j, kept_r))
                .chain(
                    (0..self.p.block_h)
                        .filter(|&i| !self.mask.kept_rows(b)[i])
                        .map(|i| (StripeKind::Row, i, kept_c)),
                );
            for (kind, index, added) in restores {
                if added == 0 {
                    continue;
                }
                let gain = self.stripe_energy(b, kind, index);
                let need = (target + added).saturating_sub(pruned);
                if need > max_len {
                    continue;
                }
                for slot in &cheapest[need.max(1)..] {
                    let Some(&(loss, ob, ok, oi)) = slot.iter().find(|e| e.1 != b) else { continue };
                    let delta = gain - loss;
                    if delta > 1e-12 * gain && best.as_ref().map_or(true, |(d, ..)| delta > *d) {
                        best = Some((delta, (b, kind, index), (ob, ok, oi)));
                    }
                }
            }
        }
        let Some((_, (b, kind, index), (ob, ok, oi))) = best else { return false };
        match kind {
            StripeKind::Col => self.mask.kept_cols_mut(b)[index] = true,
            StripeKind::Row => self.mask.kept_rows_mut(b)[index] = true,
        }
        self.refresh_rows(b);
        self.refresh_cols(b);
        match ok {
            StripeKind::Col => self.mask.kept_cols_mut(ob)[oi] = false,
            StripeKind::Row => self.mask.kept_rows_mut(ob)[oi] = false,
        }
        self.refresh_rows(ob);
        self.refresh_cols(ob);
        true
    }

    /// Best row/column selection found for every kept count of block `b`,
    /// indexed by `kr * kc`.
    fn frontier(&self, b: usize) -> Vec<Option<(Vec<bool>, Vec<bool>, f64)>> {
        let (bh, bw) = (self.p.block_h, self.p.block_w);
        let mut out: Vec<Option<(Vec<bool>, Vec<bool>, f64)>> = vec![None; bh * bw + 1];
        out[0] = Some((vec![false; bh], vec![false; bw], 0.0));
        let full_cols = vec![true; bw];
        let full_rows = vec![true; bh];
        for kr in 1..=bh {
            for kc in 1..=bw {
                let mut starts = vec![
                    Self::top_k(&self.row_scores(b, &full_cols), kr),
                    Self::top_k(&self.row_scores(b, &Self::top_k(&self.col_scores(b, &full_rows), kc)), kr),
                ];
                for i in 0..bh {
                    let mut single = vec![false; bh];
                    single[i] = true;
                    let cols = Self::top_k(&self.col_scores(b, &single), kc);
                    starts.push(Self::top_k(&self.row_scores(b, &cols), kr));
                }
                for rows in starts {
                    let cand = self.alternate(b, rows, kr, kc);
                    let slot = &mut out[kr * kc];
                    if slot.as_ref().map_or(true, |(.., e)| cand.2 > *e) {
                        *slot = Some(cand);
                    }
                }
            }
        }
        out
    }

    /// Splits the kept budget across blocks by dynamic programming over the
    /// per-block frontiers. Only attempted when the table stays small.
    fn allocate(&self, target: usize) -> Option<(BcrMask, f64)> {
        let blocks = self.p.block_count();
        let area = self.p.block_h * self.p.block_w;
        let budget = self.p.total().checked_sub(target)?;
        if area > 256 || blocks.saturating_mul(budget + 1) > 1 << 16 {
            return None;
        }
        let fronts: Vec<_> = (0..blocks).map(|b| self.frontier(b)).collect();
        let mut best = vec![f64::NEG_INFINITY; budget + 1];
        best[0] = 0.0;
        let mut choice = vec![vec![0usize; budget + 1]; blocks];
        for (b, front) in fronts.iter().enumerate() {
            let mut next = vec![f64::NEG_INFINITY; budget + 1];
            for used in 0..=budget {
                if best[used] == f64::NEG_INFINITY {
                    continue;
                }
                for (k, entry) in front.iter().enumerate() {
                    let Some((.., e)) = entry else { continue };
                    if used + k > budget {
                        break;
                    }
                    let v = best[used] + e;
                    if v > next[used + k] {
                        next[used + k] = v;
                        choice[b][used + k] = k;
                    }
                }
            }
            best = next;
        }
        let (mut used, energy) = best
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_finite())
            .fold((0, f64::NEG_INFINITY), |acc, (k, &e)| if e > acc.1 { (k, e) } else { acc });
        let mut mask = BcrMask::full(self.p);
        for b in (0..blocks).rev() {
            let k = choice[b][used];
            let (rows, cols, _) = fronts[b][k].as_ref()?;
            mask.kept_rows_mut(b).copy_from_slice(rows);
            mask.kept_cols_mut(b).copy_from_slice(cols);
            used -= k;
        }
        Some((mask, energy))
    }

    fn run(mut self, target: usize) -> BcrMask {
        let max_stripe = self.p.block_h.max(self.p.block_w);
        let mut pruned = 0usize;
        let mut queue: BTreeSet<Candidate> =
            (0..self.p.block_count()).filter_map(|b| self.best(b)).collect();
        while pruned < target {
            let Some(&greedy) = queue.first() else { break };
            let deficit = target - pruned;
            let mut pick = greedy;
            // Near the end a single stripe can close the gap; take it when it
            // is no dearer than continuing at the current greedy rate.
            if deficit <= max_stripe {
                let continuing = if greedy.zeroed >= deficit {
                    greedy.score * greedy.zeroed as f64
                } else {
                    greedy.score * deficit as f64
                };
                if let Some(f) = self.cheapest_finisher(deficit) {
                    if f.score * f.zeroed as f64 <= continuing {
                        pick = f;
                    }
                }
            }
            let block_best = self.best(pick.block).expect("picked block has stripes");
            queue.remove(&block_best);
            self.remove(&pick);
            pruned += pick.zeroed;
            if let Some(next) = self.best(pick.block) {
                queue.insert(next);
            }
        }
        if pruned > target {
            self.restore(target, pruned);
        }
        if self.p.total() > POLISH_LIMIT {
            return self.mask;
        }
        for b in 0..self.p.block_count() {
            self.reshape_block(b);
        }
        let pruned = self.mask.pruned_count();
        if pruned > target {
            self.restore(target, pruned);
        }
        let mut moves = 0;
        while moves < 4 * self.p.block_count() && self.exchange(target) {
            moves += 1;
        }
        if let Some((mask, energy)) = self.allocate(target) {
            let current: f64 = (0..self.p.block_count())
                .map(|b| self.sub_energy(b, self.mask.kept_rows(b), self.mask.kept_cols(b)))
                .sum();
            if energy > current * (1.0 + 1e-12) {
                return mask;
            }
        }
        self.mask
    }
}

/// Projects `x` onto the BCR-sparse set defined by `c`. Returns the projected
/// matrix and the mask it satisfies.
pub fn project_bcr(x: &DenseMatrix, c: &SparsityConstraint) -> Result<(DenseMatrix, BcrMask)> {
    let p = c.bind(x.rows(), x.cols())?;
    let target = c.target_pruned(p.total());
    let mask = Projector::new(x, p).run(target);
    let z = mask.apply(x)?;
    Ok((z, mask))
}

/// Squared norm of `x` restricted to the kept positions of `mask`, divided by
/// the squared norm of `x` (1 for the zero matrix).
pub fn retained_energy(x: &DenseMatrix, mask: &BcrMask) -> f64 {
    let total = x.squared_norm();
    if total == 0.0 {
        return 1.0;
    }
    let mut kept = 0.0;
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            if mask.is_kept(r, c) {
                let v = f64::from(x.get(r, c));
                kept += v * v;
            }
        }
    }
    kept / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::mask::is_feasible;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Every combination of per-block kept-row and kept-column subsets;
    /// returns the best retained squared norm among feasible ones.
    fn exhaustive_optimum(x: &DenseMatrix, c: &SparsityConstraint) -> f64 {
        let p = c.bind(x.rows(), x.cols()).unwrap();
        let target = c.target_pruned(p.total());
        let per_block = 1usize << (p.block_h + p.block_w);
        let blocks = p.block_count();
        // Per block: (kept count, retained energy) for each subset pair.
        let options: Vec<Vec<(usize, f64)>> = (0..blocks)
            .map(|b| {
                let (r0, c0) = p.block_origin(b);
                (0..per_block)
                    .map(|bits| {
                        let rows = bits & ((1 << p.block_h) - 1);
                        let cols = bits >> p.block_h;
                        let mut kept = 0;
                        let mut e = 0.0;
                        for i in 0..p.block_h {
                            for j in 0..p.block_w {
                                if rows >> i & 1 == 1 && cols >> j & 1 == 1 {
                                    kept += 1;
                                    let v = f64::from(x.get(r0 + i, c0 + j));
                                    e += v * v;
                                }
                            }
                        }
                        (kept, e)
                    })
                    .collect()
            })
            .collect();
        let max_kept = p.total() - target;
        let mut best = 0.0f64;
        let mut idx = vec![0usize; blocks];
        loop {
            let (kept, e) = idx
                .iter()
                .enumerate()
                .fold((0, 0.0), |(k, e), (b, &o)| (k + options[b][o].0, e + options[b][o].1));
            if kept <= max_kept {
                best = best.max(e);
            }
            let mut carry = 0;
            while carry < blocks {
                idx[carry] += 1;
                if idx[carry] < per_block {
                    break;
                }
                idx[carry] = 0;
                carry += 1;
            }
            if carry == blocks {
                break;
            }
        }
        best
    }

    #[test]
    fn feasible_input_is_fixed_point() {
        // 2x2 grid on 4x4; each block keeps one row and one column except
        // the last, which keeps everything: 4 + 1 + 1 + 1 = 7 kept, so the
        // pattern prunes 9/16 >= 0.5.
        let p = BlockPartition::new(4, 4, 2, 2).unwrap();
        let mut mask = BcrMask::full(p);
        for b in 0..3 {
            mask.kept_rows_mut(b).copy_from_slice(&[b % 2 == 0, b % 2 == 1]);
            mask.kept_cols_mut(b).copy_from_slice(&[true, false]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dense = DenseMatrix::from_fn(4, 4, |_, _| rng.random_range(1.0..2.0));
        let x = mask.apply(&dense).unwrap();
        let c = SparsityConstraint::new(9.0 / 16.0, 2, 2).unwrap();
        assert!(is_feasible(&x, &c).unwrap());
        let (z, got) = project_bcr(&x, &c).unwrap();
        assert_eq!(z, x);
        for r in 0..4 {
            for col in 0..4 {
                assert_eq!(got.is_kept(r, col), mask.is_kept(r, col));
            }
        }
    }

    #[test]
    fn zero_matrix_prunes_lowest_columns_first() {
        let x = DenseMatrix::zeros(4, 4);
        let c = SparsityConstraint::new(0.25, 1, 1).unwrap();
        let (z, mask) = project_bcr(&x, &c).unwrap();
        assert_eq!(z, x);
        assert_eq!(mask.kept_cols(0), &[false, true, true, true]);
        assert_eq!(mask.kept_rows(0), &[true; 4]);
    }

    #[test]
    fn matches_exhaustive_optimum_on_fixed_instance() {
        let x = DenseMatrix::new(
            4,
            4,
            vec![
                0.9, -0.1, 0.3, 1.2, //
                0.2, 0.05, -1.5, 0.4, //
                -0.7, 0.8, 0.1, -0.2, //
                0.6, -0.3, 0.25, 0.9,
            ],
        )
        .unwrap();
        let c = SparsityConstraint::new(0.5, 2, 2).unwrap();
        let (z, mask) = project_bcr(&x, &c).unwrap();
        assert!(mask.zero_fraction() >= 0.5);
        let opt = exhaustive_optimum(&x, &c);
        assert!((z.squared_norm() - opt).abs() < 1e-9, "{} vs {opt}", z.squared_norm());
    }

    #[test]
    fn greedy_close_to_exhaustive_on_random_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst = f64::INFINITY;
        let shapes = [(4, 4, 2, 2), (4, 4, 1, 1), (4, 4, 1, 2), (2, 4, 2, 2), (4, 2, 2, 1), (3, 3, 1, 1)];
        for case in 0..300 {
            let (rows, cols, n, m) = shapes[case % shapes.len()];
            let x = DenseMatrix::random(rows, cols, &mut rng);
            let alpha = [0.25, 0.5, 0.6, 0.75][case % 4];
            let c = SparsityConstraint::new(alpha, n, m).unwrap();
            let (z, mask) = project_bcr(&x, &c).unwrap();
            assert!(mask.zero_fraction() >= alpha);
            let opt = exhaustive_optimum(&x, &c);
            let ratio = z.squared_norm() / opt;
            worst = worst.min(ratio);
        }
        assert!(worst >= 0.95, "worst ratio {worst}");
    }

    #[test]
    fn rejects_bad_grid() {
        let x = DenseMatrix::zeros(4, 6);
        let c = SparsityConstraint::new(0.5, 3, 2).unwrap();
        assert!(project_bcr(&x, &c).is_err());
    }

    #[test]
    fn alpha_near_one_may_empty_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::random(8, 8, &mut rng);
        let c = SparsityConstraint::new(0.99, 2, 2).unwrap();
        let (z, mask) = project_bcr(&x, &c).unwrap();
        assert_eq!(mask.kept_count(), 0);
        assert_eq!(z.count_nonzero(), 0);
    }

    proptest! {
        #[test]
        fn projection_invariants(
            seed in any::<u64>(),
            n in 1usize..4, m in 1usize..4, bh in 1usize..5, bw in 1usize..5,
            alpha in 0.0f64..0.95,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DenseMatrix::random(n * bh, m * bw, &mut rng);
            let c = SparsityConstraint::new(alpha, n, m).unwrap();
            let (z, mask) = project_bcr(&x, &c).unwrap();
            prop_assert!(mask.zero_fraction() >= alpha);
            for r in 0..x.rows() {
                for col in 0..x.cols() {
                    if mask.is_kept(r, col) {
                        prop_assert_eq!(z.get(r, col).to_bits(), x.get(r, col).to_bits());
                    } else {
                        prop_assert_eq!(z.get(r, col).to_bits(), 0);
                    }
                }
            }
            let (z2, _) = project_bcr(&z, &c).unwrap();
            prop_assert_eq!(z2, z.clone());
            prop_assert!(is_feasible(&z, &c).unwrap());
        }
    }
}
