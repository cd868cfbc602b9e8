//! The three ADMM updates for one constrained layer.

use super::mask::{BcrMask, SparsityConstraint};
use super::projection::project_bcr;
use crate::error::{GrimError, Result};
use crate::tensor::DenseMatrix;

/// ADMM variables of one layer: weights, auxiliary copy, scaled dual.
#[derive(Clone, Debug)]
pub struct PruneState {
    pub w: DenseMatrix,
    pub z: DenseMatrix,
    pub u: DenseMatrix,
    pub rho: f64,
    pub t: usize,
}

impl PruneState {
    pub fn new(w: DenseMatrix, z: DenseMatrix, u: DenseMatrix, rho: f64) -> Result<Self> {
        z.expect_shape(w.shape())?;
        u.expect_shape(w.shape())?;
        // rho = 0 degenerates to plain SGD; negative or NaN is a bug upstream.
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(GrimError::Config(format!("rho must be finite and >= 0, got {rho}")));
        }
        Ok(Self { w, z, u, rho, t: 0 })
    }

    /// Starts from `Z = proj(W)` and `U = 0`.
    pub fn init(w: DenseMatrix, c: &SparsityConstraint, rho: f64) -> Result<Self> {
        let (z, _) = project_bcr(&w, c)?;
        let u = DenseMatrix::zeros(w.rows(), w.cols());
        Self::new(w, z, u, rho)
    }

    /// `||W - Z||_F`.
    pub fn residual(&self) -> f64 {
        self.w
            .data()
            .iter()
            .zip(self.z.data())
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Runs `steps` SGD updates on `f(W) + rho/2 ||W - Z + U||^2`:
/// `W <- W - lr * (grad f(W) + rho (W - Z + U))`.
pub fn admm_w_step<F>(state: &PruneState, mut loss_grad: F, steps: usize, lr: f64) -> Result<DenseMatrix>
where
    F: FnMut(&DenseMatrix) -> Result<DenseMatrix>,
{
    if !(lr > 0.0) {
        return Err(GrimError::Config(format!("learning rate must be positive, got {lr}")));
    }
    let mut w = state.w.clone();
    for _ in 0..steps {
        let g = loss_grad(&w)?;
        g.expect_shape(w.shape())?;
        let z = state.z.data();
        let u = state.u.data();
        for (i, (wv, &gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
            let prox = state.rho * (f64::from(*wv) - f64::from(z[i]) + f64::from(u[i]));
            *wv = (f64::from(*wv) - lr * (f64::from(gv) + prox)) as f32;
        }
    }
    Ok(w)
}

/// `Z = proj(W + U)`.
pub fn admm_z_step(state: &PruneState, c: &SparsityConstraint) -> Result<(DenseMatrix, BcrMask)> {
    let sum = state.w.zip_map(&state.u, |a, b| a + b)?;
    project_bcr(&sum, c)
}

/// `U = U + W - Z`.
pub fn admm_u_step(state: &PruneState) -> Result<DenseMatrix> {
    state.z.expect_shape(state.w.shape())?;
    state.u.expect_shape(state.w.shape())?;
    let data = state
        .u
        .data()
        .iter()
        .zip(state.w.data())
        .zip(state.z.data())
        .map(|((&u, &w), &z)| u + (w - z))
        .collect();
    DenseMatrix::new(state.w.rows(), state.w.cols(), data)
}

/// Penalty and epoch settings for ADMM pruning and masked retraining.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmSchedule {
    pub rho_start: f64,
    pub rho_end: f64,
    pub admm_epochs: usize,
    pub retrain_epochs: usize,
    pub sgd_step: f64,
    pub batch_size: usize,
}

impl Default for AdmmSchedule {
    fn default() -> Self {
        Self {
            rho_start: 1e-4,
            rho_end: 1e-1,
            admm_epochs: 40,
            retrain_epochs: 20,
            sgd_step: 0.05,
            batch_size: 32,
        }
    }
}

impl AdmmSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_start > 0.0) || !(self.rho_end >= self.rho_start) {
            return Err(GrimError::Config(format!(
                "need 0 < rho_start <= rho_end, got {} and {}",
                self.rho_start, self.rho_end
            )));
        }
        if !(self.sgd_step > 0.0) || self.batch_size == 0 {
            return Err(GrimError::Config("sgd_step and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Penalty for ADMM epoch `epoch`, interpolated geometrically.
    pub fn rho_at(&self, epoch: usize) -> f64 {
        if self.admm_epochs <= 1 {
            return self.rho_start;
        }
        let t = epoch.min(self.admm_epochs - 1) as f64 / (self.admm_epochs - 1) as f64;
        self.rho_start * (self.rho_end / self.rho_start).powf(t)
    }
}
