//! Genetic search over kernel configurations. A chromosome is one index per
//! candidate list.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LatencySource, Probe};
use crate::bcrc::BcrcMatrix;
use crate::error::{GrimError, Result};
use crate::executor::KernelConfig;
use crate::reorder::column_fingerprint;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TuneSpace {
    pub tile_rows: Vec<usize>,
    pub tile_cols: Vec<usize>,
    pub unroll: Vec<usize>,
    pub threads: Vec<usize>,
}

impl Default for TuneSpace {
    fn default() -> Self {
        Self {
            tile_rows: vec![1, 2, 4, 8, 16, 32],
            tile_cols: vec![16, 32, 64, 128],
            unroll: vec![1, 2, 4, 8],
            threads: vec![1],
        }
    }
}

type Genes = [usize; 4];

impl TuneSpace {
    fn lists(&self) -> [&[usize]; 4] {
        [&self.tile_rows, &self.tile_cols, &self.unroll, &self.threads]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in ["tile_rows", "tile_cols", "unroll", "threads"].iter().zip(self.lists()) {
            if list.is_empty() {
                return Err(GrimError::EmptySpace(format!("no {name} candidates")));
            }
            if list.contains(&0) {
                return Err(GrimError::Config(format!("{name} candidates must be positive")));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.lists().iter().map(|l| l.len()).product()
    }

    /// Stable hash of the candidate lists.
    pub fn hash(&self) -> u64 {
        let mut flat = Vec::new();
        for list in self.lists() {
            flat.push(list.len());
            flat.extend_from_slice(list);
        }
        column_fingerprint(&flat)
    }

    pub fn contains(&self, cfg: &KernelConfig) -> bool {
        self.tile_rows.contains(&cfg.tile_rows)
            && self.tile_cols.contains(&cfg.tile_cols)
            && self.unroll.contains(&cfg.unroll)
            && self.threads.contains(&cfg.threads)
    }

    fn config(&self, g: &Genes) -> KernelConfig {
        KernelConfig {
            tile_rows: self.tile_rows[g[0]],
            tile_cols: self.tile_cols[g[1]],
            unroll: self.unroll[g[2]],
            threads: self.threads[g[3]],
            lre_enabled: true,
        }
    }

    /// Every configuration, in index order.
    pub fn all(&self) -> Vec<KernelConfig> {
        let mut out = Vec::with_capacity(self.size());
        for a in 0..self.tile_rows.len() {
            for b in 0..self.tile_cols.len() {
                for c in 0..self.unroll.len() {
                    for d in 0..self.threads.len() {
                        out.push(self.config(&[a, b, c, d]));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub seed: u64,
    /// Stop once this many distinct configurations have been timed.
    pub max_evaluations: Option<usize>,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population: 16,
            generations: 20,
            crossover_rate: 0.8,
            mutation_rate: 0.2,
            seed: 0,
            max_evaluations: None,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(GrimError::Config("population must be at least 2".into()));
        }
        for (name, r) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(GrimError::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if self.max_evaluations == Some(0) {
            return Err(GrimError::Config("max_evaluations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub best: KernelConfig,
    pub best_us: f64,
    /// Best latency after each generation, starting with the initial one.
    pub history: Vec<f64>,
    /// Distinct configurations timed.
    pub evaluations: usize,
}

struct Search<'a> {
    space: &'a TuneSpace,
    weights: &'a BcrcMatrix,
    lat: &'a mut dyn LatencySource,
    seen: HashMap<Genes, f64>,
    budget: usize,
}

impl Search<'_> {
    fn exhausted(&self) -> bool {
        self.seen.len() >= self.budget
    }

    /// Latency of `g`, or `None` when the budget is spent and `g` is new.
    fn eval(&mut self, g: &Genes) -> Result<Option<f64>> {
        if let Some(&v) = self.seen.get(g) {
            return Ok(Some(v));
        }
        if self.exhausted() {
            return Ok(None);
        }
        let probe = Probe { weights: self.weights, config: self.space.config(g), block: None };
        let v = self.lat.latency_us(&probe)?;
        self.seen.insert(*g, v);
        Ok(Some(v))
    }
}

fn tournament(pop: &[(Genes, f64)], rng: &mut ChaCha8Rng) -> Genes {
    let a = &pop[rng.random_range(0..pop.len())];
    let b = &pop[rng.random_range(0..pop.len())];
    if b.1 < a.1 { b.0 } else { a.0 }
}

/// Searches `space` for the configuration with the lowest latency on
/// `weights`. Each distinct configuration is timed once; the best individual
/// always survives into the next generation.
pub fn ga_tune(weights: &BcrcMatrix, space: &TuneSpace, params: &GaParams, lat: &mut dyn LatencySource) -> Result<TuneResult> {
    space.validate()?;
    params.validate()?;
    let lens = space.lists().map(<[usize]>::len);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut search = Search {
        space,
        weights,
        lat,
        seen: HashMap::new(),
        budget: params.max_evaluations.unwrap_or(usize::MAX),
    };
    let random_genes = |rng: &mut ChaCha8Rng| -> Genes { std::array::from_fn(|i| rng.random_range(0..lens[i])) };

    let mut pop: Vec<(Genes, f64)> = Vec::with_capacity(params.population);
    for _ in 0..params.population {
        let g = random_genes(&mut rng);
        match search.eval(&g)? {
            Some(v) => pop.push((g, v)),
            None => break,
        }
    }
    let best_of = |pop: &[(Genes, f64)]| *pop.iter().min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))).expect("non-empty");
    let mut best = best_of(&pop);
    let mut history = vec![best.1];

    for _ in 0..params.generations {
        if search.exhausted() && search.seen.len() < space.size() {
            break;
        }
        let mut next = vec![best];
        while next.len() < params.population {
            let mut child = tournament(&pop, &mut rng);
            if rng.random_bool(params.crossover_rate) {
                let other = tournament(&pop, &mut rng);
                let cut = rng.random_range(1..4);
                child[cut..].copy_from_slice(&other[cut..]);
            }
            for (i, gene) in child.iter_mut().enumerate() {
                if rng.random_bool(params.mutation_rate) {
                    *gene = rng.random_range(0..lens[i]);
                }
            }
            match search.eval(&child)? {
                Some(v) => next.push((child, v)),
                None => break,
            }
        }
        pop = next;
        best = best_of(&pop);
        history.push(best.1);
    }
    Ok(TuneResult {
        best: space.config(&best.0),
        best_us: best.1,
        history,
        evaluations: search.seen.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuner::{synthesize_layer, ModelLatency};

    fn layer() -> BcrcMatrix {
        let (w, mask) = synthesize_layer(16, 32, 4.0, (4, 8), 1).unwrap();
        crate::bcrc::encode_bcrc(&w, &mask, &crate::reorder::plan_reorder(&w, &mask).unwrap()).unwrap()
    }

    fn bowl(p: &Probe) -> f64 {
        let lr = (p.config.tile_rows as f64).log2() - 3.0;
        let lu = (p.config.unroll as f64).log2() - 2.0;
        100.0 + 10.0 * lr * lr + 6.0 * lu * lu + (p.config.tile_cols as f64).log2()
    }

    #[test]
    fn single_point_space() {
        let space = TuneSpace { tile_rows: vec![4], tile_cols: vec![32], unroll: vec![2], threads: vec![1] };
        let mut calls = 0;
        let mut lat = ModelLatency(|_: &Probe| {
            calls += 1;
            5.0
        });
        let r = ga_tune(&layer(), &space, &GaParams::default(), &mut lat).unwrap();
        assert_eq!(r.evaluations, 1);
        assert_eq!(calls, 1);
        assert_eq!(r.best.tile_rows, 4);
    }

    #[test]
    fn finds_bowl_minimum_with_monotone_history() {
        let b = layer();
        let space = TuneSpace::default();
        let optimum = space.all().iter().map(|c| bowl(&Probe { weights: &b, config: *c, block: None })).fold(f64::INFINITY, f64::min);
        for seed in 0..20 {
            let params = GaParams { seed, ..GaParams::default() };
            let r = ga_tune(&b, &space, &params, &mut ModelLatency(bowl)).unwrap();
            assert!(r.best_us <= optimum * 1.05, "seed {seed}: {} vs {optimum}", r.best_us);
            assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
            assert!(space.contains(&r.best));
        }
    }

    #[test]
    fn deterministic_and_budgeted() {
        let b = layer();
        let space = TuneSpace::default();
        let params = GaParams { seed: 7, max_evaluations: Some(20), ..GaParams::default() };
        let a = ga_tune(&b, &space, &params, &mut ModelLatency(bowl)).unwrap();
        let c = ga_tune(&b, &space, &params, &mut ModelLatency(bowl)).unwrap();
        assert_eq!(a, c);
        assert!(a.evaluations <= 20);
    }

    #[test]
    fn empty_space_is_an_error() {
        let space = TuneSpace { unroll: vec![], ..TuneSpace::default() };
        let err = ga_tune(&layer(), &space, &GaParams::default(), &mut ModelLatency(bowl)).unwrap_err();
        assert!(matches!(err, GrimError::EmptySpace(_)));
        let bad = GaParams { population: 1, ..GaParams::default() };
        assert!(ga_tune(&layer(), &TuneSpace::default(), &bad, &mut ModelLatency(bowl)).is_err());
    }
}
