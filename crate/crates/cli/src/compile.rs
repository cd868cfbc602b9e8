use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use grim_core::bcrc::encode_bcrc;
use grim_core::ir::{load_model, save_model, Weight};
use grim_core::pruner::{BcrMask, BlockPartition};
use grim_core::reorder::plan_reorder;
use grim_core::tuner::{ga_tune, GaParams, HostTimer, TuneCache, TuneSpace};

pub const CACHE_FILE: &str = "tune_cache.txt";

#[derive(Args, Debug)]
pub struct CompileArgs {
    /// Pruned model directory or DSL file.
    pub model: PathBuf,
    /// Output model directory.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Tune tiling and unrolling per layer with the genetic search.
    #[arg(long, conflicts_with = "default_config")]
    pub tune: bool,
    /// Keep each layer's tiling and unrolling as written.
    #[arg(long)]
    pub default_config: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub population: usize,
    #[arg(long, default_value_t = 10)]
    pub generations: usize,
}

pub fn run(a: CompileArgs, threads: usize) -> Result<()> {
    let mut g = load_model(&a.model)?;
    if g.nodes.is_empty() {
        eprintln!("warning: model has no layers");
    }
    let cache_path = a.output.join(CACHE_FILE);
    let mut cache = if cache_path.exists() || !a.model.is_dir() {
        TuneCache::load(&cache_path)?
    } else {
        TuneCache::load(&a.model.join(CACHE_FILE))?
    };
    let space = TuneSpace {
        threads: if threads > 1 { vec![1, threads] } else { vec![1] },
        ..TuneSpace::default()
    };
    for i in 0..g.nodes.len() {
        let node = &g.nodes[i];
        if !node.kind.has_weights() {
            continue;
        }
        let name = node.args[0].clone();
        let Some(Weight::Dense(w)) = g.weights.get(&name) else { continue };
        let mask = match g.masks.get(&name) {
            Some(m) => m.clone(),
            None => {
                let (bh, bw) = node.info.block_size.unwrap_or((w.rows(), w.cols()));
                let p = BlockPartition::from_block_size(w.rows(), w.cols(), bh, bw)
                    .or_else(|_| BlockPartition::new(w.rows(), w.cols(), 1, 1))?;
                BcrMask::covering(w, p)?
            }
        };
        let masked = mask.apply(w)?;
        let plan = plan_reorder(&masked, &mask)?;
        let b = encode_bcrc(&masked, &mask, &plan)?;
        if a.tune {
            let key = (b.rows(), b.cols(), b.nnz(), space.hash());
            let (cfg, us) = match cache.get(key.0, key.1, key.2, key.3) {
                Some(hit) => hit,
                None => {
                    let params = GaParams {
                        population: a.population,
                        generations: a.generations,
                        seed: a.seed,
                        ..GaParams::default()
                    };
                    let r = ga_tune(&b, &space, &params, &mut HostTimer::default())?;
                    cache.insert(key.0, key.1, key.2, key.3, r.best, r.best_us);
                    (r.best, r.best_us)
                }
            };
            let info = &mut g.nodes[i].info;
            info.tiling = (cfg.tile_rows, cfg.tile_cols);
            info.unroll = cfg.unroll;
            println!("{name}: {} ({us:.1} us)", cfg.label());
        }
        println!(
            "{name}: {}x{} nnz {} runs {}",
            b.rows(),
            b.cols(),
            b.nnz(),
            b.run_count()
        );
        g.masks.insert(name.clone(), mask);
        g.weights.insert(name, Weight::Sparse(b));
    }
    save_model(&g, &a.output)?;
    if a.tune || !cache.is_empty() {
        cache.save(&cache_path)?;
    }
    Ok(())
}
