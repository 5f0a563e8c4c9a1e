//! Layerwise proximal preconditioners.
//!
//! Layer `l` keeps `Λ_l = (I + ω_l Z_lᵀ Z_l)⁻¹`, where `Z_l` stacks the
//! bias-augmented inputs the current network produces at that layer for
//! replay-buffer exemplars. Multiplying a layer gradient by `Λ_l` on the left
//! damps exactly the directions that would move the replay activations'
//! outputs, and leaves directions orthogonal to them untouched.

use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, matmul, spd_inverse, Matrix};
use crate::net::{Gradients, Network};
use crate::rng::SplitMix64;

/// Base proximal strength `ω₀` and the per-layer scaling exponent `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaConfig {
    pub omega0: f64,
    pub beta: f64,
}

impl OmegaConfig {
    pub fn new(omega0: f64, beta: f64) -> Result<Self> {
        if !(omega0 >= 0.0) || !omega0.is_finite() {
            return Err(Error::Input(format!("omega0 must be finite and >= 0, got {omega0}")));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::Input(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(Self { omega0, beta })
    }
}

/// `ω_l = (ω₀ / n_eff^β) / n` for a refresh computed from `n` exemplars.
///
/// `n_replay_rows` must be positive; callers skip the refresh otherwise.
pub fn layer_omega(cfg: &OmegaConfig, n_eff: usize, n_replay_rows: usize) -> f64 {
    debug_assert!(n_eff >= 1 && n_replay_rows >= 1);
    if cfg.omega0 == 0.0 {
        return 0.0;
    }
    cfg.omega0 / (n_eff as f64).powf(cfg.beta) / n_replay_rows as f64
}

fn identity_plus(gram: Matrix, omega: f64) -> Matrix {
    let n = gram.rows();
    let mut p = gram.scale(omega);
    for i in 0..n {
        p.set(i, i, p.get(i, i) + 1.0);
    }
    p
}

/// `(I + ω zᵀz)⁻¹` by direct SPD inversion.
pub fn build_lambda(z: &Matrix, omega: f64) -> Result<Matrix> {
    if !(omega >= 0.0) {
        return Err(Error::Input(format!("omega must be >= 0, got {omega}")));
    }
    if omega == 0.0 {
        return Ok(Matrix::identity(z.cols()));
    }
    spd_inverse(&identity_plus(z.gram(), omega))
}

/// `I − zᵀ(ω⁻¹ I_m + z zᵀ)⁻¹ z`, the same matrix as [`build_lambda`] computed
/// through an `m × m` solve. Cheaper when `z` has fewer rows than columns.
pub fn woodbury_lambda(z: &Matrix, omega: f64) -> Result<Matrix> {
    if !(omega > 0.0) {
        return Err(Error::Input(format!("woodbury path needs omega > 0, got {omega}")));
    }
    let d = z.cols();
    let mut inner = z.matmul_t(z)?;
    for i in 0..inner.rows() {
        inner.set(i, i, inner.get(i, i) + 1.0 / omega);
    }
    let l = cholesky(&inner)?;
    let solved = cholesky_solve(&l, z)?;
    let correction = z.t_matmul(&solved)?;
    let mut out = Matrix::identity(d).sub(&correction)?;
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (out.get(i, j) + out.get(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// `(I + Σᵢ wᵢ mᵢᵀ mᵢ)⁻¹` with a separate penalty for every row `mᵢ`.
pub fn weighted_lambda(m_rows: &Matrix, weights: &[f64]) -> Result<Matrix> {
    if weights.len() != m_rows.rows() {
        return Err(Error::shape("weighted_lambda", m_rows.shape(), (weights.len(), 1)));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Input(format!("weights must be >= 0, got {w}")));
    }
    let weighted = Matrix::from_fn(m_rows.rows(), m_rows.cols(), |i, j| {
        weights[i].sqrt() * m_rows.get(i, j)
    });
    spd_inverse(&identity_plus(weighted.gram(), 1.0))
}

/// Per-layer inverse preconditioners and their refresh schedule.
#[derive(Debug, Clone)]
pub struct PreconditionerState {
    lambdas: Vec<Matrix>,
    refresh_interval: usize,
    subsample_fraction: f64,
    last_refresh_tau: Option<usize>,
}

impl PreconditionerState {
    /// Identity preconditioners shaped for `net`.
    pub fn new(net: &Network, refresh_interval: usize, subsample_fraction: f64) -> Result<Self> {
        if refresh_interval == 0 {
            return Err(Error::Input("refresh interval must be at least 1".into()));
        }
        if !(subsample_fraction > 0.0 && subsample_fraction <= 1.0) {
            return Err(Error::Input(format!(
                "subsample fraction {subsample_fraction} outside (0, 1]"
            )));
        }
        Ok(Self {
            lambdas: net
                .layers()
                .iter()
                .map(|l| Matrix::identity(l.theta.rows()))
                .collect(),
            refresh_interval,
            subsample_fraction,
            last_refresh_tau: None,
        })
    }

    pub fn lambdas(&self) -> &[Matrix] {
        &self.lambdas
    }

    /// Direct access for fault-injection fixtures.
    pub fn lambdas_mut(&mut self) -> &mut [Matrix] {
        &mut self.lambdas
    }

    pub fn refresh_interval(&self) -> usize {
        self.refresh_interval
    }

    pub fn subsample_fraction(&self) -> f64 {
        self.subsample_fraction
    }

    pub fn last_refresh_tau(&self) -> Option<usize> {
        self.last_refresh_tau
    }

    /// Whether the 1-based batch index `tau` is a refresh point.
    pub fn is_due(&self, tau: usize) -> bool {
        tau.is_multiple_of(self.refresh_interval)
    }

    /// Rebuilds every `Λ_l` from the current network's activations on (a
    /// fraction of) the replay buffer. An empty buffer leaves the state as is.
    pub fn refresh(
        &mut self,
        net: &Network,
        buf: &ReplayBuffer,
        cfg: &OmegaConfig,
        tau: usize,
        rng: &mut SplitMix64,
    ) -> Result<()> {
        if net.num_layers() != self.lambdas.len() {
            return Err(Error::shape(
                "refresh",
                (net.num_layers(), 0),
                (self.lambdas.len(), 0),
            ));
        }
        let features = buf.sample_for_preconditioner(self.subsample_fraction, rng)?;
        let n = features.rows();
        if n == 0 {
            return Ok(());
        }
        let trace = net.forward(&features)?;
        for ((lambda, layer), z) in self.lambdas.iter_mut().zip(net.layers()).zip(&trace.z) {
            let omega = layer_omega(cfg, layer.n_eff, n);
            *lambda = build_lambda(z, omega)?;
        }
        self.last_refresh_tau = Some(tau);
        Ok(())
    }

    /// `Λ_l · g_l` for every layer.
    pub fn apply(&self, grads: &Gradients) -> Result<Gradients> {
        if grads.layers.len() != self.lambdas.len() {
            return Err(Error::shape(
                "apply",
                (grads.layers.len(), 0),
                (self.lambdas.len(), 0),
            ));
        }
        let layers = self
            .lambdas
            .iter()
            .zip(&grads.layers)
            .map(|(lambda, g)| matmul(lambda, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { layers })
    }
}
