//! Layerwise IR and the computational graph built from DSL text.

mod model;
mod parse;
mod print;
mod run;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bcrc::BcrcMatrix;
use crate::error::{GrimError, Result};
use crate::pruner::BcrMask;
use crate::reorder::column_fingerprint;
use crate::tensor::DenseMatrix;

pub use model::{load_model, resolve_tensor_files, save_model, GRAPH_FILE, MANIFEST_FILE};
pub use parse::parse_dsl;
pub use print::graph_to_dsl;
pub use run::{input_dims, kernel_config, lower_layer, run_graph, run_graph_in_order, run_graph_traced, LoweredLayer, RunOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2D,
    FC,
    Pool,
    ReLU,
    Softmax,
    Sigmoid,
    Tanh,
    Add,
    Mul,
    /// `Blend(z, a, b) = z * a + (1 - z) * b`.
    Blend,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Conv2D,
        OpKind::FC,
        OpKind::Pool,
        OpKind::ReLU,
        OpKind::Softmax,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Blend,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2D => "Conv2D",
            OpKind::FC => "FC",
            OpKind::Pool => "Pool",
            OpKind::ReLU => "ReLU",
            OpKind::Softmax => "Softmax",
            OpKind::Sigmoid => "Sigmoid",
            OpKind::Tanh => "Tanh",
            OpKind::Add => "Add",
            OpKind::Mul => "Mul",
            OpKind::Blend => "Blend",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Allowed argument counts, inclusive.
    pub fn arity(self) -> (usize, usize) {
        match self {
            OpKind::Conv2D | OpKind::FC => (2, 3),
            OpKind::Pool | OpKind::ReLU | OpKind::Softmax | OpKind::Sigmoid | OpKind::Tanh => (1, 1),
            OpKind::Add | OpKind::Mul => (2, 2),
            OpKind::Blend => (3, 3),
        }
    }

    /// Whether the first argument is a weight tensor.
    pub fn has_weights(self) -> bool {
        matches!(self, OpKind::Conv2D | OpKind::FC)
    }
}

/// Block, tuning and geometry metadata attached to a layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerInfo {
    pub strides: (usize, usize),
    pub padding: (usize, usize),
    /// Pooling window; ignored by other ops.
    pub kernel: (usize, usize),
    pub block_size: Option<(usize, usize)>,
    pub layout: String,
    pub unroll: usize,
    pub tiling: (usize, usize),
    pub device: String,
}

impl Default for LayerInfo {
    fn default() -> Self {
        Self {
            strides: (1, 1),
            padding: (0, 0),
            kernel: (2, 2),
            block_size: None,
            layout: "row_major".into(),
            unroll: 4,
            tiling: (8, 64),
            device: "CPU".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIr {
    /// Name of the tensor this layer produces.
    pub name: String,
    pub kind: OpKind,
    pub args: Vec<String>,
    pub info: LayerInfo,
}

impl LayerIr {
    pub fn new(name: impl Into<String>, kind: OpKind, args: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            args,
            info: LayerInfo::default(),
        }
    }

    pub fn weight(&self) -> Option<&str> {
        self.kind.has_weights().then(|| self.args[0].as_str())
    }

    pub fn bias(&self) -> Option<&str> {
        (self.kind.has_weights() && self.args.len() == 3).then(|| self.args[2].as_str())
    }

    /// Activation arguments (everything except weights and bias).
    pub fn activations(&self) -> &[String] {
        if self.kind.has_weights() {
            &self.args[1..2]
        } else {
            &self.args
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputDecl {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
    /// `"random"`, `"zeros"`, or a file name relative to the model directory.
    pub data_ref: String,
}

impl TensorDecl {
    /// Matrix view: first dimension by the product of the rest; a vector
    /// becomes a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weight {
    Dense(DenseMatrix),
    Sparse(BcrcMatrix),
}

impl Weight {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Weight::Dense(m) => m.shape(),
            Weight::Sparse(b) => (b.rows(), b.cols()),
        }
    }

    pub fn to_dense(&self) -> Result<DenseMatrix> {
        match self {
            Weight::Dense(m) => Ok(m.clone()),
            Weight::Sparse(b) => crate::bcrc::decode_bcrc(b),
        }
    }

    pub fn nnz(&self) -> usize {
        match self {
            Weight::Dense(m) => m.count_nonzero(),
            Weight::Sparse(b) => b.nnz(),
        }
    }
}

/// Deterministic initial values for a `"random"` tensor: normal with
/// variance `1 / fan_in`, seeded from the tensor name.
pub fn random_init(name: &str, rows: usize, cols: usize) -> DenseMatrix {
    let bytes: Vec<usize> = name.bytes().map(usize::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(column_fingerprint(&bytes));
    let scale = 1.0 / (cols as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        (v * scale) as f32
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    pub inputs: Vec<InputDecl>,
    pub tensors: Vec<TensorDecl>,
    pub nodes: Vec<LayerIr>,
    pub weights: BTreeMap<String, Weight>,
    /// Pruning masks by weight name, when known.
    pub masks: BTreeMap<String, BcrMask>,
}

impl Graph {
    pub fn input(&self, name: &str) -> Option<&InputDecl> {
        self.inputs.iter().find(|i| i.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorDecl> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn node(&self, name: &str) -> Option<&LayerIr> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut LayerIr> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    /// Fills the weight store for every `"random"` or `"zeros"` tensor that
    /// has no entry yet.
    pub fn init_generated_weights(&mut self) {
        for t in &self.tensors {
            if self.weights.contains_key(&t.name) {
                continue;
            }
            let (r, c) = t.matrix_dims();
            match t.data_ref.as_str() {
                "random" => {
                    self.weights.insert(t.name.clone(), Weight::Dense(random_init(&t.name, r, c)));
                }
                "zeros" => {
                    self.weights.insert(t.name.clone(), Weight::Dense(DenseMatrix::zeros(r, c)));
                }
                _ => {}
            }
        }
    }

    /// Tensors produced by some node and consumed by none, in node order.
    pub fn outputs(&self) -> Vec<String> {
        let consumed: BTreeSet<&str> = self.nodes.iter().flat_map(|n| n.args.iter().map(String::as_str)).collect();
        self.nodes
            .iter()
            .filter(|n| !consumed.contains(n.name.as_str()))
            .map(|n| n.name.clone())
            .collect()
    }

    /// Node indices in an order where every producer precedes its consumers.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let producer: HashMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut consumers = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for a in &n.args {
                if let Some(&p) = producer.get(a.as_str()) {
                    indegree[i] += 1;
                    consumers[p].push(i);
                }
            }
        }
        let mut ready: Vec<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).rev().collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in consumers[i].iter().rev() {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(GrimError::Consistency("graph has a cycle".into()));
        }
        Ok(order)
    }

    /// Checks names are unique, every argument is defined, weight arguments
    /// name declared tensors and the graph is acyclic.
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for n in self
            .inputs
            .iter()
            .map(|i| &i.name)
            .chain(self.tensors.iter().map(|t| &t.name))
            .chain(self.nodes.iter().map(|n| &n.name))
        {
            if !names.insert(n.as_str()) {
                return Err(GrimError::Consistency(format!("`{n}` is defined twice")));
            }
        }
        for node in &self.nodes {
            let (lo, hi) = node.kind.arity();
            if node.args.len() < lo || node.args.len() > hi {
                return Err(GrimError::Node {
                    node: node.name.clone(),
                    message: format!("{} takes {lo} to {hi} arguments", node.kind.name()),
                });
            }
            for a in &node.args {
                if !names.contains(a.as_str()) {
                    return Err(GrimError::Node {
                        node: node.name.clone(),
                        message: format!("undefined tensor `{a}`"),
                    });
                }
            }
            for w in node.weight().into_iter().chain(node.bias()) {
                if self.tensor(w).is_none() {
                    return Err(GrimError::Node {
                        node: node.name.clone(),
                        message: format!("`{w}` must be a Tensor"),
                    });
                }
            }
        }
        self.topo_order().map(|_| ())
    }

    /// Same declarations and the same nodes (by output name, kind, arguments
    /// and metadata), regardless of statement order.
    pub fn is_isomorphic(&self, other: &Graph) -> bool {
        fn sorted<T: Clone, K: Ord>(v: &[T], key: impl Fn(&T) -> K) -> Vec<T> {
            let mut v = v.to_vec();
            v.sort_by_key(|t| key(t));
            v
        }
        sorted(&self.inputs, |i| i.name.clone()) == sorted(&other.inputs, |i| i.name.clone())
            && sorted(&self.tensors, |t| t.name.clone()) == sorted(&other.tensors, |t| t.name.clone())
            && sorted(&self.nodes, |n| n.name.clone()) == sorted(&other.nodes, |n| n.name.clone())
    }
}
