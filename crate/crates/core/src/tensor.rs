//! Dense tensors, reference computations and the CONV to GEMM lowering.
//!
//! Everything here is a reference path: storage is `f32`, every reduction
//! accumulates in `f64` and rounds once on store. The sparse executor is
//! checked against these routines.
//!
//! Filters are flattened as one row per output channel with the kernel
//! elements in `(c, kh, kw)` order, which is the same order `im2col` uses for
//! its rows.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GrimError, Result};

/// Row-major matrix of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(GrimError::shape(format!(
                "matrix dims must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(GrimError::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    /// Elementwise combination of two equally shaped matrices.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(GrimError::shape(format!(
                "expected {}x{}, got {}x{}",
                shape.0, shape.1, self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Number of entries whose bit pattern is not `+0.0`.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| v.to_bits() != 0).count()
    }
}

/// NCHW tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(GrimError::shape(format!(
                "{n}x{c}x{h}x{w} tensor needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, c: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let data = (0..n * c * h * w).map(|_| rng.sample(StandardNormal)).collect();
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Features per batch item (`c * h * w`).
    #[inline]
    pub fn features(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Views the tensor as an `n x (c*h*w)` matrix.
    pub fn to_batch_matrix(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.n,
            cols: self.features(),
            data: self.data.clone(),
        }
    }
}

/// Convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
        }
    }

    /// Output spatial dims for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride_h == 0 || self.stride_w == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(GrimError::shape("kernel and stride must be positive"));
        }
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(GrimError::shape(format!(
                "{}x{} kernel does not fit padded {ph}x{pw} input",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride_h + 1,
            (pw - self.kernel_w) / self.stride_w + 1,
        ))
    }

    /// Rows of the im2col matrix for `channels` input channels.
    pub fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel_h * self.kernel_w
    }
}

fn gather_rows(
    input: &Tensor4,
    spec: &ConvSpec,
    rows: &[usize],
    oh: usize,
    ow: usize,
) -> DenseMatrix {
    let cols = input.n * oh * ow;
    let khw = spec.kernel_h * spec.kernel_w;
    let mut out = DenseMatrix::zeros(rows.len(), cols);
    for (dst, &row) in rows.iter().enumerate() {
        let ci = row / khw;
        let ky = (row % khw) / spec.kernel_w;
        let kx = row % spec.kernel_w;
        let out_row = out.row_mut(dst);
        for ni in 0..input.n {
            for oy in 0..oh {
                let iy = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                if iy < 0 || iy >= input.h as isize {
                    continue;
                }
                let base = (ni * oh + oy) * ow;
                for ox in 0..ow {
                    let ix = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                    if ix < 0 || ix >= input.w as isize {
                        continue;
                    }
                    out_row[base + ox] = input.get(ni, ci, iy as usize, ix as usize);
                }
            }
        }
    }
    out
}

/// Expands receptive fields into columns: the result is
/// `(c*kh*kw) x (n*out_h*out_w)` and column `j` is output position `j`.
pub fn im2col(input: &Tensor4, spec: &ConvSpec) -> Result<DenseMatrix> {
    let (oh, ow) = spec.output_dims(input.h, input.w)?;
    let rows: Vec<usize> = (0..spec.patch_len(input.c)).collect();
    Ok(gather_rows(input, spec, &rows, oh, ow))
}

/// `im2col` that never materializes the rows listed in `dead_weight_cols`.
///
/// Row `k` of the expansion multiplies column `k` of the filter matrix, so a
/// fully pruned weight column makes that row dead. The result may have zero
/// rows when every column is dead.
pub fn im2col_skipping(
    input: &Tensor4,
    spec: &ConvSpec,
    dead_weight_cols: &[usize],
) -> Result<DenseMatrix> {
    let (oh, ow) = spec.output_dims(input.h, input.w)?;
    let patch = spec.patch_len(input.c);
    let mut dead = vec![false; patch];
    for &d in dead_weight_cols {
        if d >= patch {
            return Err(GrimError::Index(format!(
                "dead column {d} out of range for patch length {patch}"
            )));
        }
        dead[d] = true;
    }
    let rows: Vec<usize> = (0..patch).filter(|&r| !dead[r]).collect();
    Ok(gather_rows(input, spec, &rows, oh, ow))
}

/// Reference product with `f64` accumulation in ascending `k` order.
pub fn dense_gemm(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(GrimError::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    let mut acc = vec![0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = f64::from(aik);
            for (slot, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *slot += aik * f64::from(bkj);
            }
        }
        for (dst, &v) in out.row_mut(i).iter_mut().zip(&acc) {
            *dst = v as f32;
        }
    }
    Ok(out)
}

/// Filter tensor `f x c x kh x kw` as the `f x (c*kh*kw)` GEMM operand.
pub fn filters_as_matrix(filters: &Tensor4) -> DenseMatrix {
    DenseMatrix {
        rows: filters.n,
        cols: filters.features(),
        data: filters.data.clone(),
    }
}

/// Scatters a `f x (n*oh*ow)` GEMM result back into an NCHW tensor.
pub fn gemm_output_to_nchw(out: &DenseMatrix, n: usize, oh: usize, ow: usize) -> Result<Tensor4> {
    if out.cols != n * oh * ow {
        return Err(GrimError::shape(format!(
            "GEMM output has {} columns, expected {}",
            out.cols,
            n * oh * ow
        )));
    }
    let f = out.rows;
    let mut t = Tensor4::zeros(n, f, oh, ow);
    let plane = oh * ow;
    for fi in 0..f {
        let row = out.row(fi);
        for ni in 0..n {
            let dst = (ni * f + fi) * plane;
            t.data[dst..dst + plane].copy_from_slice(&row[ni * plane..(ni + 1) * plane]);
        }
    }
    Ok(t)
}

/// Naive direct convolution used as the oracle for the GEMM path.
pub fn conv2d_direct(input: &Tensor4, filters: &Tensor4, spec: &ConvSpec) -> Result<Tensor4> {
    if filters.c != input.c {
        return Err(GrimError::shape(format!(
            "filters expect {} channels, input has {}",
            filters.c, input.c
        )));
    }
    if filters.h != spec.kernel_h || filters.w != spec.kernel_w {
        return Err(GrimError::shape(format!(
            "filters are {}x{}, spec kernel is {}x{}",
            filters.h, filters.w, spec.kernel_h, spec.kernel_w
        )));
    }
    let (oh, ow) = spec.output_dims(input.h, input.w)?;
    let mut out = Tensor4::zeros(input.n, filters.n, oh, ow);
    for ni in 0..input.n {
        for fi in 0..filters.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0f64;
                    for ci in 0..input.c {
                        for ky in 0..spec.kernel_h {
                            let iy = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                            if iy < 0 || iy >= input.h as isize {
                                continue;
                            }
                            for kx in 0..spec.kernel_w {
                                let ix = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                                if ix < 0 || ix >= input.w as isize {
                                    continue;
                                }
                                acc += f64::from(filters.get(fi, ci, ky, kx))
                                    * f64::from(input.get(ni, ci, iy as usize, ix as usize));
                            }
                        }
                    }
                    out.set(ni, fi, oy, ox, acc as f32);
                }
            }
        }
    }
    Ok(out)
}

/// A linear operator that can be applied to a vector. Lets recurrent cells
/// run on either dense or sparse weights.
pub trait MatVec {
    fn out_dim(&self) -> usize;
    fn in_dim(&self) -> usize;
    fn matvec(&self, x: &[f32]) -> Result<Vec<f32>>;
}

impl MatVec for DenseMatrix {
    fn out_dim(&self) -> usize {
        self.rows
    }

    fn in_dim(&self) -> usize {
        self.cols
    }

    fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(GrimError::shape(format!(
                "vector of length {} for {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .map(|(&w, &v)| f64::from(w) * f64::from(v))
                    .sum::<f64>() as f32
            })
            .collect())
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate weights of one GRU cell. `w_*` act on the input, `u_*` on the
/// previous hidden state.
#[derive(Clone, Debug)]
pub struct GruWeights<M> {
    pub w_z: M,
    pub u_z: M,
    pub w_r: M,
    pub u_r: M,
    pub w_h: M,
    pub u_h: M,
    pub b_z: Vec<f32>,
    pub b_r: Vec<f32>,
    pub b_h: Vec<f32>,
}

impl<M: MatVec> GruWeights<M> {
    pub fn hidden(&self) -> usize {
        self.w_z.out_dim()
    }

    fn check(&self, input: usize) -> Result<()> {
        let hidden = self.hidden();
        for (name, m, cols) in [
            ("w_z", &self.w_z, input),
            ("w_r", &self.w_r, input),
            ("w_h", &self.w_h, input),
            ("u_z", &self.u_z, hidden),
            ("u_r", &self.u_r, hidden),
            ("u_h", &self.u_h, hidden),
        ] {
            if m.out_dim() != hidden || m.in_dim() != cols {
                return Err(GrimError::shape(format!(
                    "{name} is {}x{}, expected {hidden}x{cols}",
                    m.out_dim(),
                    m.in_dim()
                )));
            }
        }
        for (name, b) in [("b_z", &self.b_z), ("b_r", &self.b_r), ("b_h", &self.b_h)] {
            if b.len() != hidden {
                return Err(GrimError::shape(format!(
                    "{name} has length {}, expected {hidden}",
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

/// One GRU step. Every matrix-vector product goes through `M`.
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = z * h + (1 - z) * h~
/// ```
pub fn gru_cell<M: MatVec>(x: &[f32], h_prev: &[f32], weights: &GruWeights<M>) -> Result<Vec<f32>> {
    weights.check(x.len())?;
    if h_prev.len() != weights.hidden() {
        return Err(GrimError::shape(format!(
            "hidden state has length {}, expected {}",
            h_prev.len(),
            weights.hidden()
        )));
    }
    let gate = |w: &M, u: &M, h: &[f32], b: &[f32]| -> Result<Vec<f32>> {
        let wx = w.matvec(x)?;
        let uh = u.matvec(h)?;
        Ok(wx.iter().zip(&uh).zip(b).map(|((a, c), d)| a + c + d).collect())
    };
    let z: Vec<f32> = gate(&weights.w_z, &weights.u_z, h_prev, &weights.b_z)?
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f32> = gate(&weights.w_r, &weights.u_r, h_prev, &weights.b_r)?
        .into_iter()
        .map(sigmoid)
        .collect();
    let rh: Vec<f32> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let cand: Vec<f32> = gate(&weights.w_h, &weights.u_h, &rh, &weights.b_h)?
        .into_iter()
        .map(f32::tanh)
        .collect();
    Ok(z
        .iter()
        .zip(h_prev)
        .zip(&cand)
        .map(|((&z, &h), &c)| z * h + (1.0 - z) * c)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_close(a: &[f32], b: &[f32], tol: f64) -> bool {
        let scale = b.iter().fold(1e-12f64, |m, &v| m.max(f64::from(v).abs()));
        a.len() == b.len()
            && a
                .iter()
                .zip(b)
                .all(|(&x, &y)| (f64::from(x) - f64::from(y)).abs() <= tol * scale)
    }

    /// Gathers element (row, col) of the im2col matrix straight from the
    /// convolution definition.
    fn im2col_entry(input: &Tensor4, spec: &ConvSpec, row: usize, col: usize) -> f32 {
        let (oh, ow) = spec.output_dims(input.h, input.w).unwrap();
        let ci = row / (spec.kernel_h * spec.kernel_w);
        let ky = row / spec.kernel_w % spec.kernel_h;
        let kx = row % spec.kernel_w;
        let ni = col / (oh * ow);
        let oy = col / ow % oh;
        let ox = col % ow;
        let iy = (oy * spec.stride_h + ky) as i64 - spec.pad_h as i64;
        let ix = (ox * spec.stride_w + kx) as i64 - spec.pad_w as i64;
        if iy < 0 || ix < 0 || iy >= input.h as i64 || ix >= input.w as i64 {
            0.0
        } else {
            input.get(ni, ci, iy as usize, ix as usize)
        }
    }

    #[test]
    fn matrix_rejects_bad_dims() {
        assert!(DenseMatrix::new(0, 3, vec![]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn im2col_identity_case() {
        let input = Tensor4::new(1, 1, 1, 1, vec![5.0]).unwrap();
        let m = im2col(&input, &ConvSpec::new((1, 1), (1, 1), (0, 0))).unwrap();
        assert_eq!(m, DenseMatrix::new(1, 1, vec![5.0]).unwrap());
    }

    #[test]
    fn im2col_full_kernel_of_ones() {
        let input = Tensor4::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let m = im2col(&input, &ConvSpec::new((3, 3), (1, 1), (0, 0))).unwrap();
        assert_eq!(m.shape(), (9, 1));
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn im2col_matches_index_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor4::random(1, 2, 4, 4, &mut rng);
        let spec = ConvSpec::new((3, 3), (1, 1), (1, 1));
        let m = im2col(&input, &spec).unwrap();
        assert_eq!(m.shape(), (18, 16));
        for r in 0..18 {
            for c in 0..16 {
                assert_eq!(m.get(r, c).to_bits(), im2col_entry(&input, &spec, r, c).to_bits());
            }
        }
    }

    #[test]
    fn im2col_rejects_kernel_larger_than_input() {
        let input = Tensor4::zeros(1, 1, 2, 2);
        let err = im2col(&input, &ConvSpec::new((3, 3), (1, 1), (0, 0))).unwrap_err();
        assert!(matches!(err, GrimError::Shape(_)));
    }

    #[test]
    fn skipping_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = Tensor4::random(1, 2, 4, 4, &mut rng);
        let spec = ConvSpec::new((3, 3), (1, 1), (1, 1));
        let full = im2col(&input, &spec).unwrap();
        assert_eq!(im2col_skipping(&input, &spec, &[]).unwrap(), full);

        let all: Vec<usize> = (0..18).collect();
        let none = im2col_skipping(&input, &spec, &all).unwrap();
        assert_eq!(none.shape(), (0, 16));

        let skipped = im2col_skipping(&input, &spec, &[0, 4]).unwrap();
        assert_eq!(skipped.shape(), (16, 16));
        let kept: Vec<usize> = (0..18).filter(|r| *r != 0 && *r != 4).collect();
        for (dst, &src) in kept.iter().enumerate() {
            assert_eq!(skipped.row(dst), full.row(src));
        }

        assert!(matches!(
            im2col_skipping(&input, &spec, &[18]),
            Err(GrimError::Index(_))
        ));
    }

    #[test]
    fn gemm_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DenseMatrix::random(3, 4, &mut rng);
        assert_eq!(dense_gemm(&DenseMatrix::identity(3), &m).unwrap(), m);
        let a = DenseMatrix::new(1, 1, vec![2.0]).unwrap();
        let b = DenseMatrix::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(dense_gemm(&a, &b).unwrap().data(), &[6.0]);
        assert!(dense_gemm(&m, &m).is_err());
    }

    #[test]
    fn gemm_matches_reversed_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DenseMatrix::random(7, 5, &mut rng);
        let b = DenseMatrix::random(5, 3, &mut rng);
        let got = dense_gemm(&a, &b).unwrap();
        // Independent order: column-major walk, k descending, f32 partials.
        let mut want = vec![0f32; 21];
        for j in 0..3 {
            for i in 0..7 {
                let mut s = 0f64;
                for k in (0..5).rev() {
                    s += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
                }
                want[i * 3 + j] = s as f32;
            }
        }
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0));
        }
    }

    #[test]
    fn conv_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = Tensor4::random(1, 1, 4, 4, &mut rng);
        let unit = Tensor4::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let spec = ConvSpec::new((1, 1), (1, 1), (0, 0));
        assert_eq!(conv2d_direct(&input, &unit, &spec).unwrap(), input);

        let zero = Tensor4::zeros(2, 1, 3, 3);
        let out = conv2d_direct(&input, &zero, &ConvSpec::new((3, 3), (1, 1), (1, 1))).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_equals_im2col_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = Tensor4::random(1, 2, 5, 5, &mut rng);
        let filters = Tensor4::random(3, 2, 3, 3, &mut rng);
        let spec = ConvSpec::new((3, 3), (1, 1), (1, 1));
        let direct = conv2d_direct(&input, &filters, &spec).unwrap();
        let prod = dense_gemm(&filters_as_matrix(&filters), &im2col(&input, &spec).unwrap()).unwrap();
        let via_gemm = gemm_output_to_nchw(&prod, 1, 5, 5).unwrap();
        assert!(rel_close(via_gemm.data(), direct.data(), 1e-5));
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let zero = || DenseMatrix::zeros(4, 4);
        let w = GruWeights {
            w_z: zero(),
            u_z: zero(),
            w_r: zero(),
            u_r: zero(),
            w_h: zero(),
            u_h: zero(),
            b_z: vec![0.0; 4],
            b_r: vec![0.0; 4],
            b_h: vec![0.0; 4],
        };
        let h = gru_cell(&[1.0, 2.0, 3.0, 4.0], &[1.0, -2.0, 0.5, 8.0], &w).unwrap();
        assert_eq!(h, vec![0.5, -1.0, 0.25, 4.0]);
    }

    #[test]
    fn gru_zero_state_and_candidate_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = GruWeights {
            w_z: DenseMatrix::random(3, 2, &mut rng),
            u_z: DenseMatrix::random(3, 3, &mut rng),
            w_r: DenseMatrix::random(3, 2, &mut rng),
            u_r: DenseMatrix::random(3, 3, &mut rng),
            w_h: DenseMatrix::zeros(3, 2),
            u_h: DenseMatrix::zeros(3, 3),
            b_z: vec![0.1; 3],
            b_r: vec![0.2; 3],
            b_h: vec![0.0; 3],
        };
        assert_eq!(gru_cell(&[0.3, -0.7], &[0.0; 3], &w).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn gru_rejects_bad_shapes() {
        let w = GruWeights {
            w_z: DenseMatrix::zeros(3, 2),
            u_z: DenseMatrix::zeros(3, 3),
            w_r: DenseMatrix::zeros(3, 2),
            u_r: DenseMatrix::zeros(3, 3),
            w_h: DenseMatrix::zeros(3, 2),
            u_h: DenseMatrix::zeros(3, 3),
            b_z: vec![0.0; 3],
            b_r: vec![0.0; 3],
            b_h: vec![0.0; 3],
        };
        assert!(gru_cell(&[0.0; 3], &[0.0; 3], &w).is_err());
        assert!(gru_cell(&[0.0; 2], &[0.0; 2], &w).is_err());
    }

    proptest! {
        #[test]
        fn conv_as_gemm_property(
            seed in any::<u64>(),
            n in 1usize..3, c in 1usize..4, f in 1usize..4,
            h in 1usize..8, w in 1usize..8,
            kh in 1usize..4, kw in 1usize..4,
            sh in 1usize..3, sw in 1usize..3,
            ph in 0usize..2, pw in 0usize..2,
        ) {
            let spec = ConvSpec::new((kh, kw), (sh, sw), (ph, pw));
            prop_assume!(spec.output_dims(h, w).is_ok());
            let (oh, ow) = spec.output_dims(h, w).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = Tensor4::random(n, c, h, w, &mut rng);
            let filters = Tensor4::random(f, c, kh, kw, &mut rng);
            let direct = conv2d_direct(&input, &filters, &spec).unwrap();
            let prod = dense_gemm(&filters_as_matrix(&filters), &im2col(&input, &spec).unwrap()).unwrap();
            let lowered = gemm_output_to_nchw(&prod, n, oh, ow).unwrap();
            prop_assert!(rel_close(lowered.data(), direct.data(), 1e-5));
        }

        #[test]
        fn skipping_deletes_rows_exactly(seed in any::<u64>(), dead_bits in any::<u32>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = Tensor4::random(2, 2, 5, 4, &mut rng);
            let spec = ConvSpec::new((3, 2), (2, 1), (1, 0));
            let patch = spec.patch_len(2);
            let dead: Vec<usize> = (0..patch).filter(|i| dead_bits >> i & 1 == 1).collect();
            let full = im2col(&input, &spec).unwrap();
            let skipped = im2col_skipping(&input, &spec, &dead).unwrap();
            let kept: Vec<usize> = (0..patch).filter(|i| !dead.contains(i)).collect();
            prop_assert_eq!(skipped.rows(), kept.len());
            for (dst, &src) in kept.iter().enumerate() {
                for (a, b) in skipped.row(dst).iter().zip(full.row(src)) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }

        #[test]
        fn gemm_associative_with_identity(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DenseMatrix::random(m, k, &mut rng);
            let b = DenseMatrix::random(k, n, &mut rng);
            let c = DenseMatrix::random(n, p, &mut rng);
            let left = dense_gemm(&dense_gemm(&a, &b).unwrap(), &c).unwrap();
            let right = dense_gemm(&a, &dense_gemm(&b, &c).unwrap()).unwrap();
            prop_assert!(rel_close(left.data(), right.data(), 1e-5));
            prop_assert_eq!(dense_gemm(&a, &DenseMatrix::identity(k)).unwrap(), a);
        }
    }
}
