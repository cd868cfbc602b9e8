//! On-disk models: a directory holding the graph text, a manifest and one
//! file per weight tensor.
//!
//! The manifest starts with `grim-model 1`, then one line per tensor:
//! `tensor <name> <rows> <cols> <dense|bcrc> <file> [<mask file>]`.
//! Dense weights are raw little-endian f32, row-major.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{parse_dsl, graph_to_dsl, Graph, Weight};
use crate::bcrc::BcrcMatrix;
use crate::error::{GrimError, Result};
use crate::pruner::BcrMask;
use crate::tensor::DenseMatrix;

pub const GRAPH_FILE: &str = "graph.grim";
pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "grim-model 1";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GrimError::io_at(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GrimError::io_at(path, e))
}

pub(crate) fn read_f32_file(path: &Path, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| GrimError::io_at(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(GrimError::Format(format!(
            "{} holds {} bytes, expected {} for {rows}x{cols} f32",
            path.display(),
            bytes.len(),
            rows * cols * 4
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    DenseMatrix::new(rows, cols, data)
}

pub(crate) fn write_f32_file(path: &Path, m: &DenseMatrix) -> Result<()> {
    let bytes: Vec<u8> = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| GrimError::io_at(path, e))?;
    Ok(())
}

fn load_weight(path: &Path, rows: usize, cols: usize) -> Result<Weight> {
    if path.extension().is_some_and(|e| e == "bcrc") {
        let b = BcrcMatrix::read_file(path)?;
        if (b.rows(), b.cols()) != (rows, cols) {
            return Err(GrimError::Format(format!(
                "{} is {}x{}, expected {rows}x{cols}",
                path.display(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(Weight::Sparse(b))
    } else {
        Ok(Weight::Dense(read_f32_file(path, rows, cols)?))
    }
}

fn load_manifest(g: &mut Graph, dir: &Path, text: &str) -> Result<()> {
    let bad = |line: usize, msg: &str| GrimError::Format(format!("{MANIFEST_FILE}:{line}: {msg}"));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    if lines.next().map(|(_, l)| l.trim()) != Some(MANIFEST_HEADER) {
        return Err(bad(1, "missing `grim-model 1` header"));
    }
    for (i, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(6..=7).contains(&f.len()) || f[0] != "tensor" {
            return Err(bad(i + 1, "expected `tensor <name> <rows> <cols> <dense|bcrc> <file> [<mask>]`"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
        let (rows, cols) = (num(f[2])?, num(f[3])?);
        let decl = g
            .tensor(f[1])
            .ok_or_else(|| bad(i + 1, &format!("`{}` is not declared in the graph", f[1])))?;
        if decl.matrix_dims() != (rows, cols) {
            return Err(bad(i + 1, &format!("`{}` is declared {:?}", f[1], decl.shape)));
        }
        let path = dir.join(f[5]);
        let w = match f[4] {
            "dense" => Weight::Dense(read_f32_file(&path, rows, cols)?),
            "bcrc" => load_weight(&path.with_extension("bcrc"), rows, cols)?,
            _ => return Err(bad(i + 1, "format must be `dense` or `bcrc`")),
        };
        if let Some(mask_file) = f.get(6) {
            let mask = BcrMask::from_text(&read_text(&dir.join(mask_file))?)?;
            if (mask.partition().rows, mask.partition().cols) != (rows, cols) {
                return Err(bad(i + 1, "mask shape differs from the tensor"));
            }
            g.masks.insert(f[1].to_string(), mask);
        }
        g.weights.insert(f[1].to_string(), w);
    }
    Ok(())
}

/// Resolves file-backed tensors of a parsed graph relative to `dir`.
/// Tensors that already have weights are left alone.
pub fn resolve_tensor_files(g: &mut Graph, dir: &Path) -> Result<()> {
    let pending: Vec<(String, String, (usize, usize))> = g
        .tensors
        .iter()
        .filter(|t| !g.weights.contains_key(&t.name))
        .map(|t| (t.name.clone(), t.data_ref.clone(), t.matrix_dims()))
        .collect();
    for (name, file, (rows, cols)) in pending {
        let w = load_weight(&dir.join(&file), rows, cols)?;
        g.weights.insert(name, w);
    }
    Ok(())
}

/// Loads a model directory, or a single DSL file whose tensor files live
/// next to it.
pub fn load_model(path: &Path) -> Result<Graph> {
    let (dir, graph_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(GRAPH_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let mut g = parse_dsl(&read_text(&graph_path)?)?;
    let manifest = dir.join(MANIFEST_FILE);
    if path.is_dir() && manifest.exists() {
        load_manifest(&mut g, &dir, &read_text(&manifest)?)?;
    }
    resolve_tensor_files(&mut g, &dir)?;
    g.validate()?;
    Ok(g)
}

/// Writes `g` into `dir` (created if needed). Every tensor is stored in a
/// file named after it and the graph text refers to those files.
pub fn save_model(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GrimError::io_at(dir, e))?;
    let mut g = g.clone();
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for t in &mut g.tensors {
        let w = g.weights.get(&t.name).ok_or_else(|| GrimError::MissingWeights(t.name.clone()))?;
        let (rows, cols) = w.dims();
        let (kind, file) = match w {
            Weight::Dense(m) => {
                let file = format!("{}.bin", t.name);
                write_f32_file(&dir.join(&file), m)?;
                ("dense", file)
            }
            Weight::Sparse(b) => {
                let file = format!("{}.bcrc", t.name);
                b.write_file(&dir.join(&file))?;
                ("bcrc", file)
            }
        };
        let _ = write!(manifest, "tensor {} {rows} {cols} {kind} {file}", t.name);
        if let Some(mask) = g.masks.get(&t.name) {
            let mask_file = format!("{}.mask", t.name);
            write_text(&dir.join(&mask_file), &mask.to_text())?;
            let _ = write!(manifest, " {mask_file}");
        }
        manifest.push('\n');
        t.data_ref = file;
    }
    write_text(&dir.join(GRAPH_FILE), &graph_to_dsl(&g))?;
    write_text(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}
