//! Network-level pruning: pretraining, the ADMM loop over every constrained
//! layer, hard pruning and masked retraining of an MLP graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::admm::{admm_u_step, admm_w_step, admm_z_step, AdmmSchedule, PruneState};
use super::mask::{BcrMask, SparsityConstraint};
use super::projection::{project_bcr, retained_energy};
use crate::error::{GrimError, Result};
use crate::ir::{Graph, OpKind, Weight};
use crate::tensor::DenseMatrix;

/// Labelled samples: one feature row per sample and a class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f32>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(GrimError::Data(format!("{} samples but {} labels", features.len(), labels.len())));
        }
        if let Some(f) = features.first() {
            if features.iter().any(|r| r.len() != f.len()) {
                return Err(GrimError::Data("samples have different feature counts".into()));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Reads a CSV file whose last column is the integer class label. A first
    /// row that does not parse as numbers is taken as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| GrimError::Data(e.to_string()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| GrimError::Data(e.to_string()))?;
            let values: std::result::Result<Vec<f32>, _> = record.iter().map(str::parse::<f32>).collect();
            let values = match values {
                Ok(v) => v,
                Err(_) if i == 0 => continue,
                Err(_) => return Err(GrimError::Data(format!("row {}: non-numeric field", i + 1))),
            };
            let Some((&label, row)) = values.split_last() else { continue };
            if label < 0.0 || label.fract() != 0.0 {
                return Err(GrimError::Data(format!("row {}: label {label} is not a class index", i + 1)));
            }
            features.push(row.to_vec());
            labels.push(label as usize);
        }
        Self::new(features, labels)
    }

    /// Gaussian blobs around well separated class centres.
    pub fn blobs(samples: usize, features: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres: Vec<Vec<f32>> = (0..classes)
            .map(|_| (0..features).map(|_| if rng.random::<bool>() { 1.5 } else { -1.5 }).collect())
            .collect();
        let mut out = Self { features: Vec::new(), labels: Vec::new() };
        for s in 0..samples {
            let class = s % classes;
            let row = centres[class]
                .iter()
                .map(|&c| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    c + (0.5 * noise) as f32
                })
                .collect();
            out.features.push(row);
            out.labels.push(class);
        }
        out
    }

    /// Shuffles and splits off the first `train_fraction` as the training set.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64 * train_fraction).round() as usize).min(self.len());
        let pick = |ids: &[usize]| Dataset {
            features: ids.iter().map(|&i| self.features[i].clone()).collect(),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
        };
        (pick(&idx[..cut]), pick(&idx[cut..]))
    }
}

#[derive(Clone, Debug)]
struct Layer {
    weight: String,
    bias: Option<String>,
    w: DenseMatrix,
    b: Vec<f32>,
    relu: bool,
}

struct Grads {
    w: Vec<DenseMatrix>,
    b: Vec<Vec<f32>>,
}

/// FC layers in execution order, each optionally followed by ReLU, with an
/// optional trailing Softmax.
fn extract_mlp(g: &Graph) -> Result<Vec<Layer>> {
    let unsupported = |msg: String| GrimError::Unsupported(format!("pruning needs an FC/ReLU chain: {msg}"));
    if g.inputs.len() != 1 {
        return Err(unsupported(format!("{} inputs", g.inputs.len())));
    }
    let mut current = g.inputs[0].name.clone();
    let mut layers: Vec<Layer> = Vec::new();
    let mut softmax_seen = false;
    for i in g.topo_order()? {
        let node = &g.nodes[i];
        if softmax_seen || node.activations().first() != Some(&current) {
            return Err(unsupported(format!("`{}` does not continue the chain", node.name)));
        }
        match node.kind {
            OpKind::FC => {
                let weight = node.args[0].clone();
                let w = match g.weights.get(&weight) {
                    Some(Weight::Dense(m)) => m.clone(),
                    Some(Weight::Sparse(_)) => return Err(unsupported(format!("`{weight}` is already encoded"))),
                    None => return Err(GrimError::MissingWeights(weight)),
                };
                if let Some(prev) = layers.last() {
                    if prev.w.rows() != w.cols() {
                        return Err(GrimError::shape(format!("`{weight}` expects {} inputs, gets {}", w.cols(), prev.w.rows())));
                    }
                }
                let bias = node.bias().map(str::to_string);
                let b = match &bias {
                    Some(name) => g
                        .weights
                        .get(name)
                        .ok_or_else(|| GrimError::MissingWeights(name.clone()))?
                        .to_dense()?
                        .into_data(),
                    None => vec![0.0; w.rows()],
                };
                if b.len() != w.rows() {
                    return Err(GrimError::shape(format!("bias of `{weight}` has {} values", b.len())));
                }
                layers.push(Layer { weight, bias, w, b, relu: false });
            }
            OpKind::ReLU if layers.last().is_some_and(|l| !l.relu) => layers.last_mut().unwrap().relu = true,
            OpKind::Softmax if !layers.is_empty() => softmax_seen = true,
            _ => return Err(unsupported(format!("`{}` is a {}", node.name, node.kind.name()))),
        }
        current = node.name.clone();
    }
    if layers.is_empty() {
        return Err(unsupported("no FC layers".into()));
    }
    Ok(layers)
}

/// Pre-activations of every layer for one sample.
fn forward(layers: &[Layer], x: &[f32]) -> Vec<Vec<f64>> {
    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut a: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    for l in layers {
        let z: Vec<f64> = (0..l.w.rows())
            .map(|r| l.w.row(r).iter().zip(&a).map(|(&w, &v)| f64::from(w) * v).sum::<f64>() + f64::from(l.b[r]))
            .collect();
        a = if l.relu { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
        zs.push(z);
    }
    zs
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy and accuracy.
fn evaluate(layers: &[Layer], data: &Dataset) -> (f64, f64) {
    if data.is_empty() {
        return (0.0, 0.0);
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let zs = forward(layers, x);
        let p = softmax(zs.last().unwrap());
        loss -= p[y].max(1e-300).ln();
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        correct += usize::from(best == y);
    }
    (loss / data.len() as f64, correct as f64 / data.len() as f64)
}

/// Mean cross-entropy and accuracy of an FC/ReLU chain graph on `data`.
pub fn evaluate_network(model: &Graph, data: &Dataset) -> Result<(f64, f64)> {
    let layers = extract_mlp(model)?;
    if data.feature_count() != layers[0].w.cols() {
        return Err(GrimError::Data(format!(
            "samples have {} features, the network takes {}",
            data.feature_count(),
            layers[0].w.cols()
        )));
    }
    Ok(evaluate(&layers, data))
}

fn gradients(layers: &[Layer], data: &Dataset, batch: &[usize]) -> Grads {
    let mut gw: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.w.rows() * l.w.cols()]).collect();
    let mut gb: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.w.rows()]).collect();
    for &s in batch {
        let x = &data.features[s];
        let zs = forward(layers, x);
        let mut dz = softmax(zs.last().unwrap());
        dz[data.labels[s]] -= 1.0;
        for li in (0..layers.len()).rev() {
            let l = &layers[li];
            let input: Vec<f64> = if li == 0 {
                x.iter().map(|&v| f64::from(v)).collect()
            } else if layers[li - 1].relu {
                zs[li - 1].iter().map(|v| v.max(0.0)).collect()
            } else {
                zs[li - 1].clone()
            };
            let cols = l.w.cols();
            for (r, &d) in dz.iter().enumerate() {
                gb[li][r] += d;
                for (c, &a) in input.iter().enumerate() {
                    gw[li][r * cols + c] += d * a;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; cols];
                for (r, &d) in dz.iter().enumerate() {
                    for (c, p) in prev.iter_mut().enumerate() {
                        *p += f64::from(l.w.get(r, c)) * d;
                    }
                }
                if layers[li - 1].relu {
                    for (p, z) in prev.iter_mut().zip(&zs[li - 1]) {
                        if *z <= 0.0 {
                            *p = 0.0;
                        }
                    }
                }
                dz = prev;
            }
        }
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    Grads {
        w: layers
            .iter()
            .zip(gw)
            .map(|(l, g)| {
                DenseMatrix::new(l.w.rows(), l.w.cols(), g.into_iter().map(|v| (v * scale) as f32).collect())
                    .expect("gradient matches weight shape")
            })
            .collect(),
        b: gb.into_iter().map(|g| g.into_iter().map(|v| (v * scale) as f32).collect()).collect(),
    }
}

fn sgd(values: &mut [f32], grad: &[f32], lr: f64) {
    for (v, &g) in values.iter_mut().zip(grad) {
        *v = (f64::from(*v) - lr * f64::from(g)) as f32;
    }
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Plain SGD epochs; `masks[i]`, when present, zeroes the gradient at pruned
/// positions of layer `i`.
fn train_epochs(layers: &mut [Layer], data: &Dataset, masks: &[Option<BcrMask>], sched: &AdmmSchedule, epochs: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    for _ in 0..epochs {
        for batch in batches(data.len(), sched.batch_size, rng) {
            let g = gradients(layers, data, &batch);
            for (i, l) in layers.iter_mut().enumerate() {
                let gw = match &masks[i] {
                    Some(mask) => mask.apply(&g.w[i])?,
                    None => g.w[i].clone(),
                };
                sgd(l.w.data_mut(), gw.data(), sched.sgd_step);
                sgd(&mut l.b, &g.b[i], sched.sgd_step);
            }
        }
    }
    Ok(())
}

/// Outcome for one constrained layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub shape: (usize, usize),
    pub grid: (usize, usize),
    pub alpha: f64,
    pub zero_fraction: f64,
    pub retained_energy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub layers: Vec<LayerReport>,
    pub dense_loss: f64,
    pub dense_accuracy: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// `sqrt(sum ||W - Z||_F^2)` over constrained layers after each ADMM epoch.
    pub residuals: Vec<f64>,
}

impl PruneReport {
    /// Kept weights over all constrained layers relative to their size.
    pub fn overall_rate(&self) -> f64 {
        let total: f64 = self.layers.iter().map(|l| (l.shape.0 * l.shape.1) as f64).sum();
        let kept: f64 = self
            .layers
            .iter()
            .map(|l| (l.shape.0 * l.shape.1) as f64 * (1.0 - l.zero_fraction))
            .sum();
        if kept == 0.0 { f64::INFINITY } else { total / kept }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("prune-report 1\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer {} shape {}x{} grid {}x{} alpha {:.6} zero_fraction {:.6} rate {:.3} retained_energy {:.6}",
                l.name,
                l.shape.0,
                l.shape.1,
                l.grid.0,
                l.grid.1,
                l.alpha,
                l.zero_fraction,
                1.0 / (1.0 - l.zero_fraction).max(f64::MIN_POSITIVE),
                l.retained_energy
            );
        }
        let _ = writeln!(s, "dense val_loss {:.6} val_accuracy {:.4}", self.dense_loss, self.dense_accuracy);
        let _ = writeln!(
            s,
            "pruned train_loss {:.6} val_loss {:.6} train_accuracy {:.4} val_accuracy {:.4}",
            self.train_loss, self.val_loss, self.train_accuracy, self.val_accuracy
        );
        let res: Vec<String> = self.residuals.iter().map(|r| format!("{r:.6}")).collect();
        let _ = writeln!(s, "residuals {}", res.join(" "));
        s
    }
}

/// Network-level options that sit outside the ADMM schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub pretrain_epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { pretrain_epochs: 20, train_fraction: 0.8, seed: 0 }
    }
}

/// Pretrains the dense network, runs ADMM on every layer whose weight name
/// has a constraint, hard-prunes with the final projection and retrains with
/// pruned positions frozen at zero. Biases are never pruned.
pub fn prune_network(
    model: &Graph,
    data: &Dataset,
    constraints: &BTreeMap<String, SparsityConstraint>,
    sched: &AdmmSchedule,
    opts: &TrainOptions,
) -> Result<(Graph, PruneReport)> {
    sched.validate()?;
    if data.is_empty() {
        return Err(GrimError::Data("dataset is empty".into()));
    }
    let mut layers = extract_mlp(model)?;
    if data.feature_count() != layers[0].w.cols() {
        return Err(GrimError::Data(format!(
            "samples have {} features, the network takes {}",
            data.feature_count(),
            layers[0].w.cols()
        )));
    }
    let outputs = layers.last().unwrap().w.rows();
    if data.class_count() > outputs {
        return Err(GrimError::Data(format!("{} classes but only {outputs} outputs", data.class_count())));
    }
    if let Some(name) = constraints.keys().find(|k| !layers.iter().any(|l| &l.weight == *k)) {
        return Err(GrimError::Config(format!("no FC layer uses weight `{name}`")));
    }
    let cons: Vec<Option<SparsityConstraint>> = layers.iter().map(|l| constraints.get(&l.weight).copied()).collect();
    for (l, c) in layers.iter().zip(&cons) {
        if let Some(c) = c {
            c.bind(l.w.rows(), l.w.cols())?;
        }
    }

    let (train, val) = data.split(opts.train_fraction, opts.seed);
    let val = if val.is_empty() { train.clone() } else { val };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let none: Vec<Option<BcrMask>> = vec![None; layers.len()];
    train_epochs(&mut layers, &train, &none, sched, opts.pretrain_epochs, &mut rng)?;
    let (dense_loss, dense_accuracy) = evaluate(&layers, &val);

    let mut states: Vec<Option<PruneState>> = layers
        .iter()
        .zip(&cons)
        .map(|(l, c)| c.as_ref().map(|c| PruneState::init(l.w.clone(), c, sched.rho_at(0))).transpose())
        .collect::<Result<_>>()?;
    let mut residuals = Vec::with_capacity(sched.admm_epochs);
    for epoch in 0..sched.admm_epochs {
        let rho = sched.rho_at(epoch);
        for batch in batches(train.len(), sched.batch_size, &mut rng) {
            let g = gradients(&layers, &train, &batch);
            for (i, l) in layers.iter_mut().enumerate() {
                match &mut states[i] {
                    Some(st) => {
                        st.rho = rho;
                        st.w = admm_w_step(st, |_| Ok(g.w[i].clone()), 1, sched.sgd_step)?;
                        l.w = st.w.clone();
                    }
                    None => sgd(l.w.data_mut(), g.w[i].data(), sched.sgd_step),
                }
                sgd(&mut l.b, &g.b[i], sched.sgd_step);
            }
        }
        let mut sq = 0.0;
        for (st, c) in states.iter_mut().zip(&cons) {
            if let (Some(st), Some(c)) = (st, c) {
                st.z = admm_z_step(st, c)?.0;
                st.u = admm_u_step(st)?;
                st.t += 1;
                sq += st.residual().powi(2);
            }
        }
        residuals.push(sq.sqrt());
    }

    let mut masks: Vec<Option<BcrMask>> = vec![None; layers.len()];
    let mut reports = Vec::new();
    for (i, l) in layers.iter_mut().enumerate() {
        if let Some(c) = &cons[i] {
            let (z, mask) = project_bcr(&l.w, c)?;
            let energy = retained_energy(&l.w, &mask);
            l.w = z;
            let p = mask.partition();
            reports.push(LayerReport {
                name: l.weight.clone(),
                shape: l.w.shape(),
                grid: (p.n, p.m),
                alpha: c.alpha,
                zero_fraction: 0.0,
                retained_energy: energy,
            });
            masks[i] = Some(mask);
        }
    }
    train_epochs(&mut layers, &train, &masks, sched, sched.retrain_epochs, &mut rng)?;
    let mut ri = 0;
    for (l, mask) in layers.iter_mut().zip(&masks) {
        if let Some(mask) = mask {
            l.w = mask.apply(&l.w)?;
            reports[ri].zero_fraction = mask.zero_fraction();
            ri += 1;
        }
    }
    let (train_loss, train_accuracy) = evaluate(&layers, &train);
    let (val_loss, val_accuracy) = evaluate(&layers, &val);

    let mut out = model.clone();
    for (l, mask) in layers.into_iter().zip(masks) {
        if let Some(mask) = mask {
            let p = *mask.partition();
            for node in out.nodes.iter_mut().filter(|n| n.weight() == Some(l.weight.as_str())) {
                node.info.block_size = Some((p.block_h, p.block_w));
            }
            out.masks.insert(l.weight.clone(), mask);
        }
        out.weights.insert(l.weight.clone(), Weight::Dense(l.w));
        if let Some(bias) = l.bias {
            out.weights.insert(bias, Weight::Dense(DenseMatrix::new(1, l.b.len(), l.b)?));
        }
    }
    let report = PruneReport {
        layers: reports,
        dense_loss,
        dense_accuracy,
        train_loss,
        val_loss,
        train_accuracy,
        val_accuracy,
        residuals,
    };
    Ok((out, report))
}
