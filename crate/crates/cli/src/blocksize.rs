use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use grim_core::ir::load_model;
use grim_core::tuner::{find_block_size, measure_block, HostTimer, LatencySource, Probe, DEFAULT_THRESHOLD};
use grim_core::GrimError;

use crate::args;

#[derive(Args, Debug)]
pub struct BlocksizeArgs {
    /// Model directory or DSL file.
    pub model: PathBuf,
    /// Weight tensor (or the node using it) to size blocks for.
    #[arg(long)]
    pub layer: String,
    #[arg(long, default_value_t = 10.0)]
    pub rate: f64,
    /// Comma-separated `HxW` candidates (default: powers of two up to 32).
    #[arg(long, value_parser = args::pair, value_delimiter = ',')]
    pub candidates: Vec<(usize, usize)>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// CSV of `h,w,us` rows replayed instead of timing on this machine.
    #[arg(long)]
    pub latency_table: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Latencies looked up by block size from a table.
struct TableLatency(BTreeMap<(usize, usize), f64>);

impl TableLatency {
    fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => GrimError::from(io),
                other => GrimError::Data(format!("{other:?}")),
            })?;
        let mut table = BTreeMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| GrimError::Data(e.to_string()))?;
            let f: Vec<&str> = rec.iter().collect();
            let parsed = (f.len() == 3)
                .then(|| Some((f[0].parse::<usize>().ok()?, f[1].parse::<usize>().ok()?, f[2].parse::<f64>().ok()?)))
                .flatten();
            match parsed {
                Some((h, w, us)) if us >= 0.0 => {
                    table.insert((h, w), us);
                }
                None if i == 0 => {}
                _ => return Err(GrimError::Data(format!("{} row {}: expected h,w,us", path.display(), i + 1)).into()),
            }
        }
        Ok(Self(table))
    }
}

impl LatencySource for TableLatency {
    fn latency_us(&mut self, probe: &Probe) -> grim_core::Result<f64> {
        let block = probe.block.ok_or_else(|| GrimError::Config("table lookups need a block size".into()))?;
        self.0
            .get(&block)
            .copied()
            .ok_or_else(|| GrimError::Data(format!("latency table has no entry for {}x{}", block.0, block.1)))
    }
}

pub fn run(a: BlocksizeArgs) -> Result<()> {
    let g = load_model(&a.model)?;
    let name = match g.node(&a.layer).and_then(|n| n.weight()) {
        Some(w) => w.to_string(),
        None => a.layer.clone(),
    };
    let decl = g
        .tensor(&name)
        .ok_or_else(|| GrimError::Config(format!("no tensor or layer named `{}`", a.layer)))?;
    let (rows, cols) = decl.matrix_dims();
    let candidates = if a.candidates.is_empty() { args::default_candidates() } else { a.candidates.clone() };
    let mut lat: Box<dyn LatencySource> = match &a.latency_table {
        Some(p) => Box::new(TableLatency::load(p)?),
        None => Box::new(HostTimer { repeats: a.repeats, ..HostTimer::default() }),
    };
    let r = find_block_size(rows, cols, a.rate, &candidates, a.threshold, a.seed, lat.as_mut())?;
    for ((h, w), us) in &r.trace {
        println!("candidate {h}x{w} {us:.3} us");
    }
    match measure_block(rows, cols, a.rate, (rows, cols), a.seed, lat.as_mut()) {
        Ok(base) => println!("baseline {rows}x{cols} {base:.3} us, improvement {:.1}%", 100.0 * r.improvement_over(base)),
        Err(_) => println!("baseline n/a"),
    }
    println!("best {}x{}", r.best.0, r.best.1);
    Ok(())
}
