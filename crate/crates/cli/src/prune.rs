use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use grim_core::ir::{load_model, save_model, Graph, OpKind};
use grim_core::pruner::{
    evaluate_network, prune_network, AdmmSchedule, BcrMask, BlockPartition, Dataset, LayerReport, PruneReport, SparsityConstraint,
    TrainOptions,
};
use grim_core::tuner::{find_block_size, HostTimer, DEFAULT_THRESHOLD};
use grim_core::GrimError;

use crate::args;

pub const REPORT_FILE: &str = "prune_report.txt";

#[derive(Args, Debug)]
pub struct PruneArgs {
    /// Model directory or DSL file.
    pub model: PathBuf,
    /// Output model directory.
    #[arg(long, short)]
    pub output: PathBuf,
    /// CSV dataset, class label in the last column. Without it a seeded
    /// synthetic dataset is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Samples in the synthetic dataset.
    #[arg(long, default_value_t = 400)]
    pub samples: usize,
    /// Target fraction of zero weights per layer.
    #[arg(long, conflicts_with = "rate")]
    pub alpha: Option<f64>,
    /// Target pruning rate; alpha = 1 - 1/rate.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Block height x width.
    #[arg(long, value_parser = args::pair, conflicts_with_all = ["grid", "auto_block"])]
    pub block: Option<(usize, usize)>,
    /// Block grid (row blocks x column blocks) instead of a block size.
    #[arg(long, value_parser = args::pair, conflicts_with = "auto_block")]
    pub grid: Option<(usize, usize)>,
    /// Pick each layer's block size with the block-size search.
    #[arg(long)]
    pub auto_block: bool,
    /// Comma-separated weight names to prune (default: every FC weight).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    /// ADMM iterations.
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub retrain_epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub rho_start: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub rho_end: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn constraint(a: &PruneArgs, alpha: f64, rows: usize, cols: usize) -> Result<SparsityConstraint> {
    if let Some((n, m)) = a.grid {
        let c = SparsityConstraint::new(alpha, n, m)?;
        c.bind(rows, cols)?;
        return Ok(c);
    }
    let (h, w) = if a.auto_block {
        let rate = 1.0 / (1.0 - alpha);
        let search = find_block_size(rows, cols, rate, &args::default_candidates(), DEFAULT_THRESHOLD, a.seed, &mut HostTimer::default())?;
        search.best
    } else {
        a.block.unwrap_or((4, 16))
    };
    Ok(SparsityConstraint::for_block_size(alpha, rows, cols, h, w)?)
}

/// Keeps every weight: masks are full and the graph is unchanged.
fn keep_all(g: &Graph, cons: &BTreeMap<String, SparsityConstraint>, data: &Dataset) -> Result<(Graph, PruneReport)> {
    let mut out = g.clone();
    let mut layers = Vec::new();
    for (name, c) in cons {
        let (rows, cols) = g.weights[name].dims();
        let p: BlockPartition = c.bind(rows, cols)?;
        out.masks.insert(name.clone(), BcrMask::full(p));
        layers.push(LayerReport {
            name: name.clone(),
            shape: (rows, cols),
            grid: (p.n, p.m),
            alpha: 0.0,
            zero_fraction: 0.0,
            retained_energy: 1.0,
        });
    }
    let (loss, acc) = evaluate_network(g, data)?;
    let report = PruneReport {
        layers,
        dense_loss: loss,
        dense_accuracy: acc,
        train_loss: loss,
        val_loss: loss,
        train_accuracy: acc,
        val_accuracy: acc,
        residuals: Vec::new(),
    };
    Ok((out, report))
}

pub fn run(a: PruneArgs) -> Result<()> {
    let alpha = args::alpha(a.alpha, a.rate)?;
    let g = load_model(&a.model)?;
    let fc_weights: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| n.kind == OpKind::FC)
        .filter_map(|n| n.weight().map(str::to_string))
        .collect();
    let targets = if a.layers.is_empty() { fc_weights.clone() } else { a.layers.clone() };
    let mut cons = BTreeMap::new();
    for name in &targets {
        if !fc_weights.contains(name) {
            return Err(GrimError::Config(format!("`{name}` is not the weight of an FC layer")).into());
        }
        let (rows, cols) = g.weights[name].dims();
        cons.insert(name.clone(), constraint(&a, alpha, rows, cols)?);
    }

    let input_dim = g.weights[&fc_weights.first().cloned().ok_or_else(|| GrimError::Unsupported("model has no FC layers".into()))?]
        .dims()
        .1;
    let data = match &a.data {
        Some(path) => {
            if !path.exists() {
                return Err(GrimError::from(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} not found", path.display()),
                ))
                .into());
            }
            Dataset::from_csv(path)?
        }
        None => {
            let classes = g.weights[fc_weights.last().unwrap()].dims().0.clamp(2, 10);
            Dataset::blobs(a.samples, input_dim, classes, a.seed)
        }
    };

    let (out, report) = if alpha == 0.0 {
        keep_all(&g, &cons, &data)?
    } else {
        let sched = AdmmSchedule {
            rho_start: a.rho_start,
            rho_end: a.rho_end,
            admm_epochs: a.epochs,
            retrain_epochs: a.retrain_epochs,
            sgd_step: a.lr,
            batch_size: a.batch,
        };
        let opts = TrainOptions { pretrain_epochs: a.pretrain_epochs, seed: a.seed, ..TrainOptions::default() };
        prune_network(&g, &data, &cons, &sched, &opts)?
    };
    save_model(&out, &a.output)?;
    let text = report.to_text();
    fs::write(a.output.join(REPORT_FILE), &text).map_err(GrimError::from)?;
    print!("{text}");
    Ok(())
}
