use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use grim_core::executor::{count_loads, dense_gemm_baseline, dense_gemv_baseline, sparse_gemm, sparse_gemv, KernelConfig};
use grim_core::ir::{kernel_config, load_model, lower_layer, run_graph, run_graph_traced, Graph, RunOptions, Weight};
use grim_core::tensor::DenseMatrix;
use grim_core::tuner::measure_us;
use grim_core::GrimError;

use crate::args;
use crate::run::random_inputs;

pub const HEADER: [&str; 11] = [
    "layer",
    "nnz",
    "config",
    "sparse_us",
    "dense_us",
    "speedup",
    "input_loads_lre",
    "input_loads_nolre",
    "rows",
    "cols",
    "flops",
];

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Compiled model directory.
    pub model: PathBuf,
    /// Where to write the CSV.
    #[arg(long)]
    pub csv: PathBuf,
    /// Timed runs per measurement; the median is reported.
    #[arg(long, default_value_t = 11)]
    pub repeats: usize,
    /// Untimed runs before each measurement.
    #[arg(long, default_value_t = 3)]
    pub warmups: usize,
    /// Shape of the first input, e.g. `1,3,32,32`.
    #[arg(long, value_parser = args::dims)]
    pub input_shape: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

struct Row {
    layer: String,
    nnz: usize,
    config: String,
    sparse_us: f64,
    dense_us: f64,
    loads_lre: u64,
    loads_nolre: u64,
    rows: usize,
    cols: usize,
    flops: u64,
}

impl Row {
    fn record(&self) -> Vec<String> {
        let speedup = if self.sparse_us > 0.0 { self.dense_us / self.sparse_us } else { 0.0 };
        vec![
            self.layer.clone(),
            self.nnz.to_string(),
            self.config.clone(),
            format!("{:.3}", self.sparse_us),
            format!("{:.3}", self.dense_us),
            format!("{speedup:.3}"),
            self.loads_lre.to_string(),
            self.loads_nolre.to_string(),
            self.rows.to_string(),
            self.cols.to_string(),
            self.flops.to_string(),
        ]
    }
}

fn time_product(a: &BenchArgs, w: &Weight, x: &DenseMatrix, cfg: &KernelConfig) -> Result<f64> {
    let vector = x.cols() == 1;
    let xv = x.data();
    let run = || -> grim_core::Result<()> {
        match w {
            Weight::Sparse(b) if vector => sparse_gemv(b, xv, cfg).map(drop),
            Weight::Sparse(b) => sparse_gemm(b, x, cfg).map(drop),
            Weight::Dense(m) if vector => dense_gemv_baseline(m, xv).map(drop),
            Weight::Dense(m) => dense_gemm_baseline(m, x).map(drop),
        }
    };
    run()?;
    Ok(measure_us(a.repeats, a.warmups, || {
        std::hint::black_box(run().expect("checked above"));
    }))
}

fn densified(g: &Graph) -> Result<Graph> {
    let mut d = g.clone();
    for w in d.weights.values_mut() {
        if let Weight::Sparse(b) = w {
            *w = Weight::Dense(grim_core::bcrc::decode_bcrc(b)?);
        }
    }
    Ok(d)
}

pub fn run(a: BenchArgs, threads: usize) -> Result<()> {
    let mut g = load_model(&a.model)?;
    if let Some(shape) = &a.input_shape {
        let first = g
            .inputs
            .first_mut()
            .ok_or_else(|| GrimError::Config("the model has no inputs".into()))?;
        first.shape = shape.clone();
    }
    let inputs = random_inputs(&g, a.seed)?;
    let opts = RunOptions { threads, lre: true };
    let acts = run_graph_traced(&g, &inputs, &opts)?;

    let dense_g = densified(&g)?;
    let mut rows = Vec::new();
    for node in &g.nodes {
        if !node.kind.has_weights() {
            continue;
        }
        let Some(Weight::Sparse(orig)) = g.weights.get(&node.args[0]) else { continue };
        let low = lower_layer(&g, node, &acts[&node.activations()[0]])?;
        let Weight::Sparse(b) = low.weight.as_ref() else { continue };
        let cfg = kernel_config(node, &opts);
        let sparse_us = time_product(&a, &low.weight, &low.x, &cfg)?;
        let dense = lower_layer(&dense_g, node, &acts[&node.activations()[0]])?;
        let dense_us = time_product(&a, &dense.weight, &dense.x, &cfg)?;
        let with = count_loads(b, low.x.cols(), &KernelConfig { lre_enabled: true, ..cfg });
        let without = count_loads(b, low.x.cols(), &KernelConfig { lre_enabled: false, ..cfg });
        rows.push(Row {
            layer: node.name.clone(),
            nnz: b.nnz(),
            config: cfg.label(),
            sparse_us,
            dense_us,
            loads_lre: with.input_loads,
            loads_nolre: without.input_loads,
            rows: orig.rows(),
            cols: orig.cols(),
            flops: 2 * b.nnz() as u64 * low.x.cols() as u64,
        });
    }

    run_graph(&dense_g, &inputs, &opts)?;
    let sparse_us = measure_us(a.repeats, a.warmups, || {
        std::hint::black_box(run_graph(&g, &inputs, &opts).expect("ran above"));
    });
    let dense_us = measure_us(a.repeats, a.warmups, || {
        std::hint::black_box(run_graph(&dense_g, &inputs, &opts).expect("ran above"));
    });
    let total = Row {
        layer: "end_to_end".into(),
        nnz: rows.iter().map(|r| r.nnz).sum(),
        config: "-".into(),
        sparse_us,
        dense_us,
        loads_lre: rows.iter().map(|r| r.loads_lre).sum(),
        loads_nolre: rows.iter().map(|r| r.loads_nolre).sum(),
        rows: 0,
        cols: 0,
        flops: rows.iter().map(|r| r.flops).sum(),
    };
    rows.push(total);

    if let Some(dir) = a.csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(GrimError::from)?;
    }
    let mut w = csv::Writer::from_path(&a.csv).map_err(|e| GrimError::Data(e.to_string()))?;
    w.write_record(HEADER).map_err(|e| GrimError::Data(e.to_string()))?;
    for r in &rows {
        let rec = r.record();
        w.write_record(&rec).map_err(|e| GrimError::Data(e.to_string()))?;
        println!(
            "{:<24} {:>5}x{:<5} nnz {:>8}  sparse {:>10} us  dense {:>10} us  speedup {}",
            rec[0], rec[8], rec[9], rec[1], rec[3], rec[4], rec[5]
        );
    }
    w.flush().map_err(GrimError::from)?;
    Ok(())
}
