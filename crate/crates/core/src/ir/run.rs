//! Graph execution. FC and Conv2D layers use the sparse executor when their
//! weights are BCRC-encoded and the dense reference kernels otherwise.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::{Graph, LayerIr, OpKind, Weight};
use crate::error::{GrimError, Result};
use crate::executor::{dense_gemm_baseline, sparse_gemm, KernelConfig};
use crate::tensor::{gemm_output_to_nchw, im2col, im2col_skipping, sigmoid, ConvSpec, DenseMatrix, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub threads: usize,
    pub lre: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { threads: 1, lre: true }
    }
}

/// NCHW dims for a declared input shape: `[f]`, `[n, f]`, `[c, h, w]` or
/// `[n, c, h, w]`.
pub fn input_dims(shape: &[usize]) -> Result<[usize; 4]> {
    Ok(match *shape {
        [f] => [1, f, 1, 1],
        [n, f] => [n, f, 1, 1],
        [c, h, w] => [1, c, h, w],
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(GrimError::shape(format!("inputs have 1 to 4 dimensions, got {shape:?}"))),
    })
}

/// Kernel settings for a layer: tiling and unrolling from its metadata,
/// threading and LRE from the run options.
pub fn kernel_config(node: &LayerIr, opts: &RunOptions) -> KernelConfig {
    KernelConfig {
        tile_rows: node.info.tiling.0,
        tile_cols: node.info.tiling.1,
        unroll: node.info.unroll,
        threads: opts.threads,
        lre_enabled: opts.lre,
    }
}

fn weight<'g>(g: &'g Graph, name: &str) -> Result<&'g Weight> {
    g.weights.get(name).ok_or_else(|| GrimError::MissingWeights(name.to_string()))
}

fn bias_values(g: &Graph, node: &LayerIr, len: usize) -> Result<Option<Vec<f32>>> {
    let Some(b) = node.bias() else { return Ok(None) };
    let m = weight(g, b)?.to_dense()?;
    if m.data().len() != len {
        return Err(GrimError::shape(format!("bias `{b}` has {} values, expected {len}", m.data().len())));
    }
    Ok(Some(m.into_data()))
}

fn multiply(w: &Weight, x: &DenseMatrix, cfg: &KernelConfig) -> Result<DenseMatrix> {
    match w {
        Weight::Dense(m) => dense_gemm_baseline(m, x),
        Weight::Sparse(b) => sparse_gemm(b, x, cfg),
    }
}

/// An FC or Conv2D layer reduced to one matrix product `weight * x`.
#[derive(Clone, Debug)]
pub struct LoweredLayer<'g> {
    /// The layer weights; for sparse convolutions, without the columns no
    /// kept weight uses.
    pub weight: Cow<'g, Weight>,
    pub x: DenseMatrix,
    /// Output height and width (1x1 for FC).
    pub out_hw: (usize, usize),
}

/// Lowers an FC layer (`x` transposed to features by batch) or a Conv2D
/// layer (im2col, skipping rows of dead weight columns) applied to `x`.
pub fn lower_layer<'g>(g: &'g Graph, node: &LayerIr, x: &Tensor4) -> Result<LoweredLayer<'g>> {
    let w = weight(g, &node.args[0])?;
    match node.kind {
        OpKind::FC => {
            let f = w.dims().1;
            if x.features() != f {
                return Err(GrimError::shape(format!("FC expects {f} features, got {}", x.features())));
            }
            Ok(LoweredLayer { weight: Cow::Borrowed(w), x: x.to_batch_matrix().transpose(), out_hw: (1, 1) })
        }
        OpKind::Conv2D => {
            let decl = g
                .tensor(&node.args[0])
                .ok_or_else(|| GrimError::MissingWeights(node.args[0].clone()))?;
            let [f, c, kh, kw] = decl.shape[..] else {
                return Err(GrimError::shape(format!("Conv2D weights must be [f, c, kh, kw], got {:?}", decl.shape)));
            };
            if x.c != c {
                return Err(GrimError::shape(format!("filters expect {c} channels, input has {}", x.c)));
            }
            if w.dims() != (f, c * kh * kw) {
                return Err(GrimError::shape(format!("weights are {:?}, declared {:?}", w.dims(), decl.shape)));
            }
            let spec = ConvSpec::new((kh, kw), node.info.strides, node.info.padding);
            let out_hw = spec.output_dims(x.h, x.w)?;
            let (weight, cols) = match w {
                Weight::Dense(_) => (Cow::Borrowed(w), im2col(x, &spec)?),
                Weight::Sparse(b) => {
                    let mut live = vec![false; b.cols()];
                    for &col in b.compact_column() {
                        live[col as usize] = true;
                    }
                    let dead: Vec<usize> = (0..b.cols()).filter(|&col| !live[col]).collect();
                    let cols = im2col_skipping(x, &spec, &dead)?;
                    let weight = if dead.is_empty() {
                        Cow::Borrowed(w)
                    } else if dead.len() == b.cols() {
                        Cow::Owned(Weight::Dense(DenseMatrix::zeros(f, 0)))
                    } else {
                        Cow::Owned(Weight::Sparse(b.without_columns(&dead)?))
                    };
                    (weight, cols)
                }
            };
            Ok(LoweredLayer { weight, x: cols, out_hw })
        }
        other => Err(GrimError::Unsupported(format!("{} has no matrix form", other.name()))),
    }
}

fn fully_connected(g: &Graph, node: &LayerIr, x: &Tensor4, opts: &RunOptions) -> Result<Tensor4> {
    let low = lower_layer(g, node, x)?;
    let y = multiply(&low.weight, &low.x, &kernel_config(node, opts))?;
    let o = y.rows();
    let bias = bias_values(g, node, o)?;
    let mut out = Tensor4::zeros(x.n, o, 1, 1);
    for i in 0..x.n {
        for j in 0..o {
            let b = bias.as_ref().map_or(0.0, |b| b[j]);
            out.set(i, j, 0, 0, y.get(j, i) + b);
        }
    }
    Ok(out)
}

fn convolution(g: &Graph, node: &LayerIr, x: &Tensor4, opts: &RunOptions) -> Result<Tensor4> {
    let low = lower_layer(g, node, x)?;
    let y = multiply(&low.weight, &low.x, &kernel_config(node, opts))?;
    let (oh, ow) = low.out_hw;
    let f = y.rows();
    let mut out = gemm_output_to_nchw(&y, x.n, oh, ow)?;
    if let Some(bias) = bias_values(g, node, f)? {
        let plane = oh * ow;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(i / plane) % f];
        }
    }
    Ok(out)
}

fn max_pool(node: &LayerIr, x: &Tensor4) -> Result<Tensor4> {
    let spec = ConvSpec::new(node.info.kernel, node.info.strides, node.info.padding);
    let (oh, ow) = spec.output_dims(x.h, x.w)?;
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..spec.kernel_h {
                        for kx in 0..spec.kernel_w {
                            let iy = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                            let ix = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                m = m.max(x.get(n, c, iy as usize, ix as usize));
                            }
                        }
                    }
                    out.set(n, c, oy, ox, m);
                }
            }
        }
    }
    Ok(out)
}

fn softmax(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    let f = x.features();
    for item in out.data_mut().chunks_mut(f) {
        let m = item.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in item.iter_mut() {
            *v = (*v - m).exp();
            sum += f64::from(*v);
        }
        for v in item.iter_mut() {
            *v = (f64::from(*v) / sum) as f32;
        }
    }
    out
}

fn map(x: &Tensor4, f: impl Fn(f32) -> f32) -> Tensor4 {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

fn zip(xs: &[&Tensor4], f: impl Fn(&[f32]) -> f32) -> Result<Tensor4> {
    let shape = xs[0].shape();
    if let Some(bad) = xs.iter().find(|t| t.shape() != shape) {
        return Err(GrimError::shape(format!("operands {:?} and {:?} differ", shape, bad.shape())));
    }
    let mut out = xs[0].clone();
    let mut buf = vec![0.0; xs.len()];
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        for (slot, t) in buf.iter_mut().zip(xs) {
            *slot = t.data()[i];
        }
        *v = f(&buf);
    }
    Ok(out)
}

fn eval(g: &Graph, node: &LayerIr, acts: &HashMap<String, Tensor4>, opts: &RunOptions) -> Result<Tensor4> {
    let arg = |name: &str| {
        acts.get(name)
            .ok_or_else(|| GrimError::Consistency(format!("`{name}` has not been computed")))
    };
    let ins: Vec<&Tensor4> = node.activations().iter().map(|a| arg(a)).collect::<Result<_>>()?;
    match node.kind {
        OpKind::FC => fully_connected(g, node, ins[0], opts),
        OpKind::Conv2D => convolution(g, node, ins[0], opts),
        OpKind::Pool => max_pool(node, ins[0]),
        OpKind::ReLU => Ok(map(ins[0], |v| v.max(0.0))),
        OpKind::Sigmoid => Ok(map(ins[0], sigmoid)),
        OpKind::Tanh => Ok(map(ins[0], f32::tanh)),
        OpKind::Softmax => Ok(softmax(ins[0])),
        OpKind::Add => zip(&ins, |v| v[0] + v[1]),
        OpKind::Mul => zip(&ins, |v| v[0] * v[1]),
        OpKind::Blend => zip(&ins, |v| v[0] * v[1] + (1.0 - v[0]) * v[2]),
    }
}

/// Executes the graph and returns every activation, inputs included, by name.
pub fn run_graph_traced(g: &Graph, inputs: &BTreeMap<String, Tensor4>, opts: &RunOptions) -> Result<BTreeMap<String, Tensor4>> {
    Ok(execute(g, inputs, opts, &g.topo_order()?)?.into_iter().collect())
}

/// Executes the graph in topological order and returns every output tensor
/// (produced but never consumed) by name.
pub fn run_graph(g: &Graph, inputs: &BTreeMap<String, Tensor4>, opts: &RunOptions) -> Result<BTreeMap<String, Tensor4>> {
    run_graph_in_order(g, inputs, opts, &g.topo_order()?)
}

/// Like [`run_graph`] with an explicit node order, which must list every node
/// once with producers before consumers.
pub fn run_graph_in_order(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor4>,
    opts: &RunOptions,
    order: &[usize],
) -> Result<BTreeMap<String, Tensor4>> {
    let mut acts = execute(g, inputs, opts, order)?;
    Ok(g.outputs()
        .into_iter()
        .map(|name| {
            let t = acts.remove(&name).expect("every node ran");
            (name, t)
        })
        .collect())
}

fn execute(g: &Graph, inputs: &BTreeMap<String, Tensor4>, opts: &RunOptions, order: &[usize]) -> Result<HashMap<String, Tensor4>> {
    let mut acts: HashMap<String, Tensor4> = HashMap::new();
    for decl in &g.inputs {
        let t = inputs
            .get(&decl.name)
            .ok_or_else(|| GrimError::MissingInput(decl.name.clone()))?;
        let want = input_dims(&decl.shape)?;
        if t.shape() != want {
            return Err(GrimError::shape(format!(
                "input `{}` is {:?}, declared {:?}",
                decl.name,
                t.shape(),
                want
            )));
        }
        acts.insert(decl.name.clone(), t.clone());
    }
    for node in &g.nodes {
        if let Some(w) = node.weight().into_iter().chain(node.bias()).find(|w| !g.weights.contains_key(*w)) {
            return Err(GrimError::MissingWeights(w.to_string()));
        }
    }
    let mut seen = vec![false; g.nodes.len()];
    for &i in order {
        if i >= g.nodes.len() || std::mem::replace(&mut seen[i], true) {
            return Err(GrimError::Consistency(format!("node index {i} is invalid or repeated")));
        }
        let node = &g.nodes[i];
        let out = eval(g, node, &acts, opts).map_err(|e| e.at_node(&node.name))?;
        acts.insert(node.name.clone(), out);
    }
    if seen.iter().any(|s| !s) {
        return Err(GrimError::Consistency("order does not cover every node".into()));
    }
    Ok(acts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcrc::encode_bcrc;
    use crate::ir::parse_dsl;
    use crate::pruner::{BcrMask, BlockPartition};
    use crate::reorder::plan_reorder;
    use crate::tensor::{conv2d_direct, GruWeights, gru_cell};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
    }

    fn inputs(pairs: &[(&str, Tensor4)]) -> BTreeMap<String, Tensor4> {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    fn to_sparse(g: &mut Graph, name: &str) {
        let m = g.weights[name].to_dense().unwrap();
        let mask = BcrMask::full(BlockPartition::new(m.rows(), m.cols(), 1, 1).unwrap());
        let b = encode_bcrc(&m, &mask, &plan_reorder(&m, &mask).unwrap()).unwrap();
        g.weights.insert(name.to_string(), Weight::Sparse(b));
    }

    #[test]
    fn relu_only() {
        let g = parse_dsl("x = Input([1, 4]); y = ReLU(x);").unwrap();
        let x = Tensor4::new(1, 4, 1, 1, vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let out = run_graph(&g, &inputs(&[("x", x)]), &RunOptions::default()).unwrap();
        assert_eq!(out["y"].data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn dense_and_encoded_fc_agree() {
        let mut g = parse_dsl("x = Input([3, 12]); w = Tensor([5, 12], \"random\"); b = Tensor([5], \"random\"); y = FC(w, x, b);").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = inputs(&[("x", Tensor4::random(3, 12, 1, 1, &mut rng))]);
        let dense = run_graph(&g, &ins, &RunOptions::default()).unwrap();
        to_sparse(&mut g, "w");
        let sparse = run_graph(&g, &ins, &RunOptions::default()).unwrap();
        assert!(close(sparse["y"].data(), dense["y"].data(), 1e-6));
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut g = parse_dsl(
            "x = Input([2, 3, 6, 6]); w = Tensor([4, 3, 3, 3], \"random\");
             y = Conv2D(w, x, info{padding: [1, 1], strides: [2, 1]});",
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::random(2, 3, 6, 6, &mut rng);
        let wm = g.weights["w"].to_dense().unwrap();
        let filters = Tensor4::new(4, 3, 3, 3, wm.data().to_vec()).unwrap();
        let want = conv2d_direct(&x, &filters, &ConvSpec::new((3, 3), (2, 1), (1, 1))).unwrap();
        let ins = inputs(&[("x", x)]);
        assert!(close(run_graph(&g, &ins, &RunOptions::default()).unwrap()["y"].data(), want.data(), 1e-5));
        to_sparse(&mut g, "w");
        assert!(close(run_graph(&g, &ins, &RunOptions::default()).unwrap()["y"].data(), want.data(), 1e-5));
    }

    #[test]
    fn expanded_gru_matches_cell() {
        let g = parse_dsl(
            "x = Input([1, 6]); h = Input([1, 4]);
             wz = Tensor([4, 6], \"random\"); uz = Tensor([4, 4], \"random\");
             wr = Tensor([4, 6], \"random\"); ur = Tensor([4, 4], \"random\");
             wh = Tensor([4, 6], \"random\"); uh = Tensor([4, 4], \"random\");
             bz = Tensor([4], \"random\"); br = Tensor([4], \"random\"); bh = Tensor([4], \"random\");
             out = GRU(x, h, wz, uz, wr, ur, wh, uh, bz, br, bh);",
        )
        .unwrap();
        let w = |n: &str| g.weights[n].to_dense().unwrap();
        let weights = GruWeights {
            w_z: w("wz"),
            u_z: w("uz"),
            w_r: w("wr"),
            u_r: w("ur"),
            w_h: w("wh"),
            u_h: w("uh"),
            b_z: w("bz").into_data(),
            b_r: w("br").into_data(),
            b_h: w("bh").into_data(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::random(1, 6, 1, 1, &mut rng);
        let h = Tensor4::random(1, 4, 1, 1, &mut rng);
        let want = gru_cell(x.data(), h.data(), &weights).unwrap();
        let out = run_graph(&g, &inputs(&[("x", x), ("h", h)]), &RunOptions::default()).unwrap();
        assert!(close(out["out"].data(), &want, 1e-5));
    }

    #[test]
    fn pool_and_softmax() {
        let g = parse_dsl("x = Input([1, 1, 4, 4]); p = Pool(x, info{kernel: [2, 2], strides: [2, 2]}); s = Softmax(p);").unwrap();
        let x = Tensor4::new(1, 1, 4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        let out = run_graph(&g, &inputs(&[("x", x)]), &RunOptions::default()).unwrap();
        let s = out["s"].data();
        let e: Vec<f64> = [5.0f64, 7.0, 13.0, 15.0].iter().map(|v| (v - 15.0).exp()).collect();
        let total: f64 = e.iter().sum();
        for (a, b) in s.iter().zip(&e) {
            assert!((f64::from(*a) - b / total).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_input_and_weights() {
        let g = parse_dsl("x = Input([1, 4]); y = ReLU(x);").unwrap();
        assert!(matches!(run_graph(&g, &BTreeMap::new(), &RunOptions::default()), Err(GrimError::MissingInput(_))));
        let g = parse_dsl("x = Input([1, 4]); w = Tensor([2, 4], \"w.bin\"); y = FC(w, x);").unwrap();
        let err = run_graph(&g, &inputs(&[("x", Tensor4::zeros(1, 4, 1, 1))]), &RunOptions::default()).unwrap_err();
        assert!(matches!(err, GrimError::MissingWeights(ref w) if w == "w"), "{err}");
        let bad = inputs(&[("x", Tensor4::zeros(1, 5, 1, 1))]);
        assert!(run_graph(&parse_dsl("x = Input([1, 4]); y = ReLU(x);").unwrap(), &bad, &RunOptions::default()).is_err());
    }

    #[test]
    fn any_topological_order_gives_the_same_result() {
        let g = parse_dsl(
            "x = Input([1, 8]); a = Tensor([8, 8], \"random\"); b = Tensor([8, 8], \"random\");
             p = FC(a, x); q = FC(b, x); r = ReLU(p); s = Tanh(q); t = Add(r, s);",
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = inputs(&[("x", Tensor4::random(1, 8, 1, 1, &mut rng))]);
        let opts = RunOptions::default();
        let a = run_graph_in_order(&g, &ins, &opts, &[0, 1, 2, 3, 4]).unwrap();
        let b = run_graph_in_order(&g, &ins, &opts, &[1, 3, 0, 2, 4]).unwrap();
        assert_eq!(a, b);
        assert!(run_graph_in_order(&g, &ins, &opts, &[4, 0, 1, 2, 3]).is_err());
        let all = run_graph_traced(&g, &ins, &opts).unwrap();
        assert_eq!(all.len(), 6);
        assert_eq!(all["t"], a["t"]);
    }
}
