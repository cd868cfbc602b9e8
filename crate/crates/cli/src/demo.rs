use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use grim_core::ir::{parse_dsl, save_model, Graph, Weight};
use grim_core::pruner::Dataset;
use grim_core::tuner::synthesize_layer;
use grim_core::GrimError;

use crate::args;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DemoKind {
    /// Two stacked GRU layers (512 and 1024 units) and a 152-way FC head,
    /// pruned at `--rate` with `--block`.
    Gru,
    /// Dense 16-8-2 MLP plus a matching `data.csv`, ready for `prune`.
    Mlp,
    /// Conv, ReLU, pool and FC on 3x16x16 inputs, pruned at `--rate`.
    Cnn,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    pub kind: DemoKind,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub rate: f64,
    #[arg(long, value_parser = args::pair, default_value = "4x16")]
    pub block: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Replaces each listed weight with a synthesized pruned one, scaled by
/// `1/sqrt(fan_in)`.
fn prune_weights(g: &mut Graph, names: &[(&str, (usize, usize))], rate: f64, seed: u64) -> Result<()> {
    for (i, (name, block)) in names.iter().enumerate() {
        let (rows, cols) = g.weights[*name].dims();
        let (mut w, mask) = synthesize_layer(rows, cols, rate, *block, seed.wrapping_add(i as u64))?;
        let scale = (rate / cols as f64).sqrt() as f32;
        w.data_mut().iter_mut().for_each(|v| *v *= scale);
        g.weights.insert(name.to_string(), Weight::Dense(w));
        g.masks.insert(name.to_string(), mask);
    }
    Ok(())
}

fn gru_layer(out: &mut String, layer: &str, x: &str, h: &str, hidden: usize, input: usize, block: (usize, usize)) {
    for gate in ["z", "r", "h"] {
        let _ = writeln!(out, "{layer}_w{gate} = Tensor([{hidden}, {input}], \"random\");");
        let _ = writeln!(out, "{layer}_u{gate} = Tensor([{hidden}, {hidden}], \"random\");");
        let _ = writeln!(out, "{layer}_b{gate} = Tensor([{hidden}], \"zeros\");");
    }
    let args: Vec<String> = ["wz", "uz", "wr", "ur", "wh", "uh", "bz", "br", "bh"]
        .iter()
        .map(|s| format!("{layer}_{s}"))
        .collect();
    let _ = writeln!(
        out,
        "{layer} = GRU({x}, {h}, {}, info{{block_size: [{}, {}]}});",
        args.join(", "),
        block.0,
        block.1
    );
}

fn gru(a: &DemoArgs) -> Result<Graph> {
    let mut text = String::from("x = Input([1, 1024]);\nh1 = Input([1, 512]);\nh2 = Input([1, 1024]);\n");
    gru_layer(&mut text, "gru1", "x", "h1", 512, 1024, a.block);
    gru_layer(&mut text, "gru2", "gru1", "h2", 1024, 512, a.block);
    let _ = writeln!(text, "fc_w = Tensor([152, 1024], \"random\");\nfc_b = Tensor([152], \"zeros\");");
    let _ = writeln!(text, "y = FC(fc_w, gru2, fc_b, info{{block_size: [{}, {}]}});", a.block.0, a.block.1);
    let mut g = parse_dsl(&text)?;
    let mut names: Vec<String> = Vec::new();
    for layer in ["gru1", "gru2"] {
        for m in ["wz", "uz", "wr", "ur", "wh", "uh"] {
            names.push(format!("{layer}_{m}"));
        }
    }
    names.push("fc_w".into());
    let targets: Vec<(&str, (usize, usize))> = names.iter().map(|n| (n.as_str(), a.block)).collect();
    prune_weights(&mut g, &targets, a.rate, a.seed)?;
    Ok(g)
}

fn mlp(a: &DemoArgs) -> Result<Graph> {
    let g = parse_dsl(
        "x = Input([1, 16]);
         w1 = Tensor([8, 16], \"random\");
         b1 = Tensor([8], \"zeros\");
         h = FC(w1, x, b1);
         a = ReLU(h);
         w2 = Tensor([2, 8], \"random\");
         b2 = Tensor([2], \"zeros\");
         y = FC(w2, a, b2);
         p = Softmax(y);",
    )?;
    let data = Dataset::blobs(400, 16, 2, a.seed);
    std::fs::create_dir_all(&a.output).map_err(GrimError::from)?;
    let mut w = csv::Writer::from_path(a.output.join("data.csv")).map_err(|e| GrimError::Data(e.to_string()))?;
    let mut header: Vec<String> = (0..16).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| GrimError::Data(e.to_string()))?;
    for (x, y) in data.features.iter().zip(&data.labels) {
        let mut rec: Vec<String> = x.iter().map(f32::to_string).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(|e| GrimError::Data(e.to_string()))?;
    }
    w.flush().map_err(GrimError::from)?;
    Ok(g)
}

fn cnn(a: &DemoArgs) -> Result<Graph> {
    let mut g = parse_dsl(
        "x = Input([1, 3, 16, 16]);
         cw = Tensor([8, 3, 3, 3], \"random\");
         cb = Tensor([8], \"zeros\");
         c = Conv2D(cw, x, cb, info{padding: [1, 1], block_size: [2, 9]});
         r = ReLU(c);
         p = Pool(r, info{kernel: [2, 2], strides: [2, 2]});
         fw = Tensor([10, 512], \"random\");
         y = FC(fw, p, info{block_size: [2, 16]});
         s = Softmax(y);",
    )?;
    prune_weights(&mut g, &[("cw", (2, 9)), ("fw", (2, 16))], a.rate, a.seed)?;
    Ok(g)
}

pub fn run(a: DemoArgs) -> Result<()> {
    let g = match a.kind {
        DemoKind::Gru => gru(&a)?,
        DemoKind::Mlp => mlp(&a)?,
        DemoKind::Cnn => cnn(&a)?,
    };
    save_model(&g, &a.output)?;
    println!(
        "wrote {} ({} layers, {} weight tensors)",
        a.output.display(),
        g.nodes.len(),
        g.tensors.len()
    );
    Ok(())
}
