use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use grim_core::ir::{input_dims, load_model, run_graph, Graph, RunOptions};
use grim_core::tensor::Tensor4;
use grim_core::GrimError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Model directory or DSL file.
    pub model: PathBuf,
    /// `name=path` of a raw little-endian f32 file for a declared input.
    #[arg(long = "input", value_parser = parse_input)]
    pub inputs: Vec<(String, PathBuf)>,
    /// Fill inputs not given with `--input` from a seeded normal distribution.
    #[arg(long)]
    pub random_inputs: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the outputs, one `<name>.bin` each.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Disable load-redundancy elimination in sparse kernels.
    #[arg(long)]
    pub no_lre: bool,
}

fn parse_input(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected name=path, got `{s}`"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

/// Random tensors for every declared input, in declaration order.
pub fn random_inputs(g: &Graph, seed: u64) -> Result<BTreeMap<String, Tensor4>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for decl in &g.inputs {
        let [n, c, h, w] = input_dims(&decl.shape)?;
        out.insert(decl.name.clone(), Tensor4::random(n, c, h, w, &mut rng));
    }
    Ok(out)
}

pub fn run(a: RunArgs, threads: usize) -> Result<()> {
    let g = load_model(&a.model)?;
    let mut inputs = if a.random_inputs { random_inputs(&g, a.seed)? } else { BTreeMap::new() };
    for (name, path) in &a.inputs {
        let decl = g
            .input(name)
            .ok_or_else(|| GrimError::Config(format!("the model has no input `{name}`")))?;
        let [n, c, h, w] = input_dims(&decl.shape)?;
        let bytes = fs::read(path).map_err(GrimError::from)?;
        if bytes.len() != n * c * h * w * 4 {
            return Err(GrimError::Format(format!(
                "{} holds {} bytes, input `{name}` needs {}",
                path.display(),
                bytes.len(),
                n * c * h * w * 4
            ))
            .into());
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        inputs.insert(name.clone(), Tensor4::new(n, c, h, w, data)?);
    }
    let outputs = run_graph(&g, &inputs, &RunOptions { threads, lre: !a.no_lre })?;
    if let Some(dir) = &a.output {
        fs::create_dir_all(dir).map_err(GrimError::from)?;
    }
    for (name, t) in &outputs {
        let head: Vec<String> = t.data().iter().take(8).map(|v| format!("{v:.6}")).collect();
        let sum: f64 = t.data().iter().map(|&v| f64::from(v)).sum();
        println!("{name} {:?} sum {sum:.6} head [{}]", t.shape(), head.join(", "));
        if let Some(dir) = &a.output {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(format!("{name}.bin")), bytes).map_err(GrimError::from)?;
        }
    }
    Ok(())
}
