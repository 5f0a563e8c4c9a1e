//! Parameter updates: plain SGD, the preconditioned proximal step, a soft
//! orthogonal-projection baseline, and a numerical proximal-argmin oracle.

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_floor, cholesky_solve, matmul, spd_inverse, Matrix};
use crate::net::{Gradients, Network};
use crate::precond::PreconditionerState;

const CG_TOL: f64 = 1e-10;

fn check_grads(net: &Network, grads: &Gradients) -> Result<()> {
    if grads.layers.len() != net.num_layers() {
        return Err(Error::shape(
            "update",
            (net.num_layers(), 0),
            (grads.layers.len(), 0),
        ));
    }
    for (layer, g) in net.layers().iter().zip(&grads.layers) {
        if layer.theta.shape() != g.shape() {
            return Err(Error::shape("update", layer.theta.shape(), g.shape()));
        }
    }
    Ok(())
}

/// `Θ_l ← Θ_l − η g_l`.
pub fn sgd_step(net: &mut Network, grads: &Gradients, eta: f64) -> Result<()> {
    check_grads(net, grads)?;
    for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
        layer.theta.add_scaled_assign(-eta, g)?;
    }
    Ok(())
}

/// `Θ_l ← Θ_l − η Λ_l g_l`.
pub fn lpr_step(
    net: &mut Network,
    grads: &Gradients,
    state: &PreconditionerState,
    eta: f64,
) -> Result<()> {
    check_grads(net, grads)?;
    let pre = state.apply(grads)?;
    sgd_step(net, &pre, eta)
}

/// Minimizer of the single-layer proximal objective
///
/// `⟨g, Θ − Θⱼ⟩ + 1/(2η) ‖Θ − Θⱼ‖²_F + ω/(2η) ‖zΘ − zΘⱼ‖²_F`
///
/// found by solving its stationarity condition `(I + ω zᵀz) Δ = −η g` with
/// matrix-free conjugate gradients, one column of `Δ` at a time.
pub fn proximal_oracle(
    theta: &Matrix,
    grad: &Matrix,
    z: &Matrix,
    eta: f64,
    omega: f64,
) -> Result<Matrix> {
    if theta.shape() != grad.shape() {
        return Err(Error::shape("proximal_oracle", theta.shape(), grad.shape()));
    }
    if z.cols() != theta.rows() {
        return Err(Error::shape("proximal_oracle", z.shape(), theta.shape()));
    }
    let d = theta.rows();
    // v ↦ v + ω zᵀ(z v)
    let apply = |v: &[f64]| -> Vec<f64> {
        let zv: Vec<f64> = (0..z.rows()).map(|i| crate::linalg::dot(z.row(i), v)).collect();
        let mut out = v.to_vec();
        for (i, &s) in zv.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for (o, &zij) in out.iter_mut().zip(z.row(i)) {
                *o += omega * s * zij;
            }
        }
        out
    };
    let mut result = theta.clone();
    for c in 0..theta.cols() {
        let b: Vec<f64> = (0..d).map(|i| -eta * grad.get(i, c)).collect();
        let delta = conjugate_gradient(&apply, &b, 10 * d + 10)?;
        for (i, v) in delta.iter().enumerate() {
            result.set(i, c, theta.get(i, c) + v);
        }
    }
    Ok(result)
}

fn conjugate_gradient(apply: &impl Fn(&[f64]) -> Vec<f64>, b: &[f64], max_iter: usize) -> Result<Vec<f64>> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let b_norm = norm(b);
    let mut x = vec![0.0; b.len()];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..max_iter {
        let ap = apply(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        if rr_new.sqrt() <= CG_TOL * b_norm {
            // Confirm against the true residual, not the recurrence.
            let ax = apply(&x);
            let true_res = norm(&b.iter().zip(&ax).map(|(a, c)| a - c).collect::<Vec<_>>());
            if true_res <= CG_TOL * b_norm.max(1.0) {
                return Ok(x);
            }
        }
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    let ax = apply(&x);
    let res = norm(&b.iter().zip(&ax).map(|(a, c)| a - c).collect::<Vec<_>>());
    if res <= CG_TOL * b_norm.max(1.0) {
        Ok(x)
    } else {
        Err(Error::Numeric(format!(
            "conjugate gradients did not converge: residual {res:e} after {max_iter} iterations"
        )))
    }
}

/// Value of the objective [`proximal_oracle`] minimizes, at `candidate`.
pub fn proximal_objective(
    candidate: &Matrix,
    theta: &Matrix,
    grad: &Matrix,
    z: &Matrix,
    eta: f64,
    omega: f64,
) -> Result<f64> {
    let delta = candidate.sub(theta)?;
    let linear: f64 = grad.data().iter().zip(delta.data()).map(|(a, b)| a * b).sum();
    let prox = delta.frobenius_norm().powi(2) / (2.0 * eta);
    let act = matmul(z, &delta)?.frobenius_norm().powi(2) * omega / (2.0 * eta);
    Ok(linear + prox + act)
}

/// Soft projector `I − Φᵀ(αI + ΦΦᵀ)⁻¹Φ` for a basis with one representative
/// per row. With more rows than columns the equal form `α(αI + ΦᵀΦ)⁻¹` is used.
pub fn soft_projector(phi: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(alpha > 0.0) {
        return Err(Error::Input(format!("projection alpha must be > 0, got {alpha}")));
    }
    let d = phi.cols();
    if phi.rows() == 0 {
        return Ok(Matrix::identity(d));
    }
    if phi.rows() <= d {
        let mut inner = phi.matmul_t(phi)?;
        for i in 0..inner.rows() {
            inner.set(i, i, inner.get(i, i) + alpha);
        }
        let inv = spd_inverse(&inner)?;
        let corr = phi.t_matmul(&matmul(&inv, phi)?)?;
        Matrix::identity(d).sub(&corr)
    } else {
        let mut gram = phi.gram();
        for i in 0..d {
            gram.set(i, i, gram.get(i, i) + alpha);
        }
        Ok(spd_inverse(&gram)?.scale(alpha))
    }
}

/// SGD on gradients passed through each layer's soft projector.
pub fn projection_step(
    net: &mut Network,
    grads: &Gradients,
    basis: &[Matrix],
    eta: f64,
    alpha: f64,
) -> Result<()> {
    let projectors = basis
        .iter()
        .map(|phi| soft_projector(phi, alpha))
        .collect::<Result<Vec<_>>>()?;
    projected_step(net, grads, &projectors, eta)
}

/// SGD on `P_l g_l` for precomputed per-layer operators `P_l`.
pub fn projected_step(
    net: &mut Network,
    grads: &Gradients,
    projectors: &[Matrix],
    eta: f64,
) -> Result<()> {
    check_grads(net, grads)?;
    if projectors.len() != grads.layers.len() {
        return Err(Error::shape(
            "projected_step",
            (projectors.len(), 0),
            (grads.layers.len(), 0),
        ));
    }
    let layers = projectors
        .iter()
        .zip(&grads.layers)
        .map(|(p, g)| matmul(p, g))
        .collect::<Result<Vec<_>>>()?;
    sgd_step(net, &Gradients { layers }, eta)
}

/// Per-layer running basis for the projection baseline: one row per trained
/// batch, the mean bias-augmented activation of that batch at the layer.
/// Rows are appended and never recomputed.
#[derive(Debug, Clone)]
pub struct ProjectionMemory {
    alpha: f64,
    basis: Vec<Matrix>,
    projectors: Vec<Matrix>,
}

impl ProjectionMemory {
    pub fn new(net: &Network, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Input(format!("projection alpha must be > 0, got {alpha}")));
        }
        let widths: Vec<usize> = net.layers().iter().map(|l| l.theta.rows()).collect();
        Ok(Self {
            alpha,
            basis: widths.iter().map(|&w| Matrix::zeros(0, w)).collect(),
            projectors: widths.iter().map(|&w| Matrix::identity(w)).collect(),
        })
    }

    pub fn basis(&self) -> &[Matrix] {
        &self.basis
    }

    pub fn projectors(&self) -> &[Matrix] {
        &self.projectors
    }

    /// Appends the batch-mean activation of every layer and rebuilds the
    /// projectors.
    pub fn record(&mut self, net: &Network, features: &Matrix) -> Result<()> {
        if features.rows() == 0 {
            return Ok(());
        }
        let trace = net.forward(features)?;
        for ((basis, proj), z) in self.basis.iter_mut().zip(&mut self.projectors).zip(&trace.z) {
            let n = z.rows() as f64;
            let mean = Matrix::from_fn(1, z.cols(), |_, j| {
                (0..z.rows()).map(|i| z.get(i, j)).sum::<f64>() / n
            });
            *basis = basis.vstack(&mean)?;
            *proj = soft_projector(basis, self.alpha)?;
        }
        Ok(())
    }
}

/// Exact orthogonal projector onto the complement of the column space of
/// `phi` (`d × k`), `I − Φ(ΦᵀΦ)⁻¹Φᵀ`.
pub fn complement_projector(phi: &Matrix) -> Result<Matrix> {
    let gram = phi.gram();
    let floor = 1e-12 * gram.trace().max(f64::MIN_POSITIVE);
    let l = cholesky_with_floor(&gram, floor).map_err(|e| match e {
        Error::NotPositiveDefinite { row, pivot } => Error::Numeric(format!(
            "basis is rank deficient (pivot {pivot:e} at column {row})"
        )),
        other => other,
    })?;
    // X = (ΦᵀΦ)⁻¹Φᵀ
    let x = cholesky_solve(&l, &phi.transpose())?;
    Matrix::identity(phi.rows()).sub(&matmul(phi, &x)?)
}

/// Builds replay activations lying entirely in the span of `phi`
/// (`zᵀ = Φ a`), forms the replay gradient `G = zᵀ v`, projects it with the
/// exact complement projector and returns the Frobenius norm of what is left.
pub fn replay_gradient_annihilation_check(phi: &Matrix, a: &Matrix, v: &Matrix) -> Result<f64> {
    if phi.cols() != a.rows() {
        return Err(Error::shape("annihilation_check", phi.shape(), a.shape()));
    }
    if a.cols() != v.rows() {
        return Err(Error::shape("annihilation_check", a.shape(), v.shape()));
    }
    let z = matmul(phi, a)?.transpose();
    let g = z.t_matmul(v)?;
    let proj = complement_projector(phi)?;
    Ok(matmul(&proj, &g)?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precond::build_lambda;
    use crate::rng::SplitMix64;

    fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn scalar_net(theta: f64) -> Network {
        use crate::net::{Activation, Layer};
        let layer = Layer::new(Matrix::from_rows(&[[theta]]), Activation::Identity).unwrap();
        Network::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn sgd_examples() {
        let mut net = scalar_net(3.0);
        let g = Gradients { layers: vec![Matrix::from_rows(&[[2.0]])] };
        sgd_step(&mut net, &g, 0.5).unwrap();
        assert_eq!(net.layers()[0].theta.get(0, 0), 2.0);
        sgd_step(&mut net, &g, 0.0).unwrap();
        assert_eq!(net.layers()[0].theta.get(0, 0), 2.0);
        let zero = Gradients::zeros_like(&net);
        sgd_step(&mut net, &zero, 0.3).unwrap();
        assert_eq!(net.layers()[0].theta.get(0, 0), 2.0);
        let bad = Gradients { layers: vec![Matrix::zeros(2, 1)] };
        assert!(sgd_step(&mut net, &bad, 0.1).is_err());
    }

    #[test]
    fn lpr_identity_is_sgd_bitwise() {
        let mut rng = SplitMix64::new(1);
        let net = Network::new(&[4, 5, 3], &mut rng).unwrap();
        let grads = Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| random(l.theta.rows(), l.theta.cols(), &mut rng))
                .collect(),
        };
        let state = PreconditionerState::new(&net, 10, 1.0).unwrap();
        let mut a = net.clone();
        let mut b = net.clone();
        sgd_step(&mut a, &grads, 0.07).unwrap();
        lpr_step(&mut b, &grads, &state, 0.07).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lpr_hand_case() {
        use crate::net::{Activation, Layer};
        let layer = Layer::new(Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]), Activation::Identity).unwrap();
        let mut net = Network::from_layers(vec![layer]).unwrap();
        let mut state = PreconditionerState::new(&net, 1, 1.0).unwrap();
        state.lambdas_mut()[0] = Matrix::from_rows(&[[0.5, 0.0], [0.0, 1.0]]);
        let g = Gradients { layers: vec![Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]])] };
        lpr_step(&mut net, &g, &state, 0.5).unwrap();
        assert_eq!(net.layers()[0].theta, Matrix::from_rows(&[[0.5, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn proximal_oracle_reductions() {
        let mut rng = SplitMix64::new(2);
        let theta = random(5, 3, &mut rng);
        let grad = random(5, 3, &mut rng);
        let z = random(4, 5, &mut rng);
        let sgd = theta.sub(&grad.scale(0.1)).unwrap();
        let prox = proximal_oracle(&theta, &grad, &z, 0.1, 0.0).unwrap();
        assert_eq!(prox, sgd);
        let still = proximal_oracle(&theta, &Matrix::zeros(5, 3), &z, 0.1, 3.0).unwrap();
        assert_eq!(still, theta);
        assert!(proximal_oracle(&theta, &grad, &random(4, 6, &mut rng), 0.1, 1.0).is_err());
    }

    #[test]
    fn proximal_oracle_matches_closed_form_and_minimizes() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..50 {
            let d = 1 + rng.below(16);
            let m = 1 + rng.below(8);
            let k = 1 + rng.below(4);
            let eta = rng.uniform(0.01, 1.0);
            let omega = rng.uniform(0.0, 50.0);
            let theta = random(d, k, &mut rng);
            let grad = random(d, k, &mut rng);
            let z = random(m, d, &mut rng);
            let oracle = proximal_oracle(&theta, &grad, &z, eta, omega).unwrap();
            let lambda = build_lambda(&z, omega).unwrap();
            let closed = theta.sub(&matmul(&lambda, &grad).unwrap().scale(eta)).unwrap();
            let err = oracle.sub(&closed).unwrap().frobenius_norm() / theta.frobenius_norm();
            assert!(err < 1e-6, "{err:e}");

            let best = proximal_objective(&oracle, &theta, &grad, &z, eta, omega).unwrap();
            let nudged = oracle.add(&random(d, k, &mut rng).scale(1e-3)).unwrap();
            assert!(proximal_objective(&nudged, &theta, &grad, &z, eta, omega).unwrap() > best);
        }
    }

    #[test]
    fn update_magnitude_ordering() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..20 {
            let z = random(3, 6, &mut rng);
            let grad = random(6, 2, &mut rng);
            let lambda = build_lambda(&z, 2.0).unwrap();
            let lpr = matmul(&lambda, &grad).unwrap().frobenius_norm();
            assert!(lpr < grad.frobenius_norm());
        }
    }

    #[test]
    fn soft_projection_limits() {
        let mut rng = SplitMix64::new(5);
        let net = Network::new(&[3, 4, 2], &mut rng).unwrap();
        let grads = Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| random(l.theta.rows(), l.theta.cols(), &mut rng))
                .collect(),
        };
        let empty: Vec<Matrix> = net.layers().iter().map(|l| Matrix::zeros(0, l.theta.rows())).collect();
        let mut a = net.clone();
        let mut b = net.clone();
        sgd_step(&mut a, &grads, 0.1).unwrap();
        projection_step(&mut b, &grads, &empty, 0.1, 1.0).unwrap();
        assert_eq!(a, b);

        let basis: Vec<Matrix> = net.layers().iter().map(|l| random(2, l.theta.rows(), &mut rng)).collect();
        let mut c = net.clone();
        projection_step(&mut c, &grads, &basis, 0.1, 1e8).unwrap();
        let pa = a.flat_params();
        let pc = c.flat_params();
        let diff: f64 = pa.iter().zip(&pc).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff <= 1e-6 * norm);

        // Replay gradients whose activations lie in span(Φ) are removed.
        let phi = random(3, 8, &mut rng);
        let coeffs = random(5, 3, &mut rng);
        let z = matmul(&coeffs, &phi).unwrap();
        let v = random(5, 4, &mut rng);
        let g = z.t_matmul(&v).unwrap();
        let p = soft_projector(&phi, 1e-8).unwrap();
        let projected = matmul(&p, &g).unwrap();
        assert!(projected.frobenius_norm() < 1e-6 * g.frobenius_norm());
    }

    #[test]
    fn soft_projector_forms_agree() {
        let mut rng = SplitMix64::new(6);
        // Rows ≤ cols uses the Φ-row form; compare with the dual form by hand.
        let phi = random(4, 6, &mut rng);
        let p = soft_projector(&phi, 0.7).unwrap();
        let mut gram = phi.gram();
        for i in 0..6 {
            gram.set(i, i, gram.get(i, i) + 0.7);
        }
        let dual = spd_inverse(&gram).unwrap().scale(0.7);
        assert!(p.max_abs_diff(&dual).unwrap() < 1e-12);
        let tall = random(9, 4, &mut rng);
        let p = soft_projector(&tall, 0.7).unwrap();
        let mut inner = tall.matmul_t(&tall).unwrap();
        for i in 0..9 {
            inner.set(i, i, inner.get(i, i) + 0.7);
        }
        let primal = Matrix::identity(4)
            .sub(&tall.t_matmul(&matmul(&spd_inverse(&inner).unwrap(), &tall).unwrap()).unwrap())
            .unwrap();
        assert!(p.max_abs_diff(&primal).unwrap() < 1e-12);
    }

    #[test]
    fn projection_memory_grows() {
        let mut rng = SplitMix64::new(7);
        let net = Network::new(&[3, 4, 2], &mut rng).unwrap();
        let mut mem = ProjectionMemory::new(&net, 1.0).unwrap();
        assert!(mem.projectors().iter().all(|p| *p == Matrix::identity(p.rows())));
        for _ in 0..3 {
            mem.record(&net, &random(5, 3, &mut rng)).unwrap();
        }
        assert!(mem.basis().iter().all(|b| b.rows() == 3));
        assert_eq!(mem.basis()[0].get(1, 3), 1.0);
        assert!(ProjectionMemory::new(&net, 0.0).is_err());
    }

    #[test]
    fn annihilation_cases() {
        let mut rng = SplitMix64::new(8);
        let phi = random(7, 3, &mut rng);
        let a = random(3, 5, &mut rng);
        let v = random(5, 4, &mut rng);
        let resid = replay_gradient_annihilation_check(&phi, &a, &v).unwrap();
        assert!(resid < 1e-8 * 1f64.max(matmul(&phi, &matmul(&a, &v).unwrap()).unwrap().frobenius_norm()));
        assert_eq!(replay_gradient_annihilation_check(&phi, &a, &Matrix::zeros(5, 4)).unwrap(), 0.0);

        let mut deficient = phi.clone();
        for i in 0..7 {
            deficient.set(i, 2, deficient.get(i, 0));
        }
        assert!(matches!(
            replay_gradient_annihilation_check(&deficient, &a, &v),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn complement_projector_idempotent() {
        let mut rng = SplitMix64::new(9);
        let phi = random(6, 2, &mut rng);
        let p = complement_projector(&phi).unwrap();
        let pp = matmul(&p, &p).unwrap();
        assert!(pp.max_abs_diff(&p).unwrap() < 1e-10);
    }
}
