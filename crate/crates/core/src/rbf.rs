//! Radial-basis-function estimate of the decoder precision.
//!
//! `β_j(z) = ζ_j + Σ_k w_jk · exp(-γ‖z - c_k‖²)` with positive weights
//! stored as logarithms. Far from every center the kernels vanish and β
//! drops to the floor ζ, so the standard deviation `σ = β^{-1/2}` grows off
//! the data and the pull-back metric builds walls around the latent codes.

use rand::Rng;

use crate::error::{check_len, Result, RvaeError};
use crate::linalg::{dot, DenseMatrix, DenseVector};
use crate::nn::AdamState;

pub const DEFAULT_BANDWIDTH: f64 = 0.01;
pub const DEFAULT_PRECISION_FLOOR: f64 = 1e-2;
pub const MAX_CENTERS: usize = 350;

#[derive(Clone, Debug, PartialEq)]
pub struct RbfNetwork {
    centers: DenseMatrix,
    bandwidth: f64,
    log_weights: DenseMatrix,
    floor: DenseVector,
    weights: DenseMatrix,
}

/// Per-point kernel sums shared by the precision, its Jacobian and the
/// quadratic-form gradient.
struct KernelSums {
    phi: DenseVector,
    /// `Σ_k w_jk φ_k`
    s0: DenseVector,
    /// `z·s0_j - Σ_k w_jk φ_k c_k` (row j holds a latent vector)
    b: DenseMatrix,
}

impl RbfNetwork {
    pub fn new(
        centers: DenseMatrix,
        bandwidth: f64,
        log_weights: DenseMatrix,
        floor: DenseVector,
    ) -> Result<Self> {
        if centers.rows() == 0 {
            return Err(RvaeError::contract("an RBF network needs at least one center"));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(RvaeError::contract(format!("RBF bandwidth must be positive, got {bandwidth}")));
        }
        check_len("rbf log-weight columns", centers.rows(), log_weights.cols())?;
        check_len("rbf floor", log_weights.rows(), floor.len())?;
        if floor.iter().any(|&f| !(f > 0.0)) {
            return Err(RvaeError::contract("RBF precision floor must be positive"));
        }
        let mut net = RbfNetwork {
            weights: DenseMatrix::zeros(log_weights.rows(), log_weights.cols()),
            centers,
            bandwidth,
            log_weights,
            floor,
        };
        net.refresh_weights();
        Ok(net)
    }

    /// Every weight set to `exp(log_weight)`, floor `ζ` on every output.
    pub fn with_uniform_weights(
        centers: DenseMatrix,
        bandwidth: f64,
        out_dim: usize,
        log_weight: f64,
        floor: f64,
    ) -> Result<Self> {
        let k = centers.rows();
        let lw = DenseMatrix::from_vec(out_dim, k, vec![log_weight; out_dim * k])?;
        Self::new(centers, bandwidth, lw, vec![floor; out_dim])
    }

    fn refresh_weights(&mut self) {
        for (w, lw) in self.weights.data_mut().iter_mut().zip(self.log_weights.data()) {
            *w = lw.exp();
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.log_weights.rows()
    }

    pub fn n_centers(&self) -> usize {
        self.centers.rows()
    }

    pub fn centers(&self) -> &DenseMatrix {
        &self.centers
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn log_weights(&self) -> &DenseMatrix {
        &self.log_weights
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn floor(&self) -> &[f64] {
        &self.floor
    }

    /// Mutable access to the free (log) weights; the cached positive
    /// weights are rebuilt afterwards.
    pub fn update_log_weights<T>(&mut self, f: impl FnOnce(&mut [f64]) -> T) -> T {
        let out = f(self.log_weights.data_mut());
        self.refresh_weights();
        out
    }

    pub fn kernels(&self, z: &[f64]) -> DenseVector {
        (0..self.n_centers())
            .map(|k| {
                let c = self.centers.row(k);
                let r2: f64 = z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                (-self.bandwidth * r2).exp()
            })
            .collect()
    }

    fn sums(&self, z: &[f64]) -> KernelSums {
        let d = self.latent_dim();
        let k = self.n_centers();
        let phi = self.kernels(z);
        // φ⊙c_i for each latent coordinate, laid out as d rows of length K
        let mut phi_c = DenseMatrix::zeros(d, k);
        for kk in 0..k {
            let c = self.centers.row(kk);
            for i in 0..d {
                phi_c.set(i, kk, phi[kk] * c[i]);
            }
        }
        let m = self.output_dim();
        let mut s0 = vec![0.0; m];
        let mut b = DenseMatrix::zeros(m, d);
        for j in 0..m {
            let wrow = self.weights.row(j);
            let s = dot(wrow, &phi);
            s0[j] = s;
            for i in 0..d {
                b.set(j, i, z[i] * s - dot(wrow, phi_c.row(i)));
            }
        }
        KernelSums { phi, s0, b }
    }

    pub fn precision(&self, z: &[f64]) -> Result<DenseVector> {
        check_len("rbf input", self.latent_dim(), z.len())?;
        let phi = self.kernels(z);
        Ok((0..self.output_dim())
            .map(|j| self.floor[j] + dot(self.weights.row(j), &phi))
            .collect())
    }

    pub fn sigma(&self, z: &[f64]) -> Result<DenseVector> {
        Ok(self.precision(z)?.into_iter().map(|b| b.powf(-0.5)).collect())
    }

    /// `M × d` Jacobian of `σ(z) = β(z)^{-1/2}`.
    pub fn sigma_jacobian(&self, z: &[f64]) -> Result<DenseMatrix> {
        check_len("rbf input", self.latent_dim(), z.len())?;
        let sums = self.sums(z);
        let g = self.bandwidth;
        let mut jac = sums.b;
        for j in 0..self.output_dim() {
            let beta = self.floor[j] + sums.s0[j];
            let scale = g * beta.powf(-1.5);
            jac.row_mut(j).iter_mut().for_each(|v| *v *= scale);
        }
        Ok(jac)
    }

    /// `Σ_j u_j ∂β_j/∂z`, optionally accumulating `scale · Σ_j u_j ∂β_j/∂log w`
    /// into `log_weight_grad`.
    pub fn precision_vjp(
        &self,
        z: &[f64],
        upstream: &[f64],
        log_weight_grad: Option<(&mut [f64], f64)>,
    ) -> Result<DenseVector> {
        check_len("rbf input", self.latent_dim(), z.len())?;
        check_len("rbf upstream", self.output_dim(), upstream.len())?;
        let sums = self.sums(z);
        let d = self.latent_dim();
        let mut gz = vec![0.0; d];
        for (j, &u) in upstream.iter().enumerate() {
            for i in 0..d {
                gz[i] += u * (-2.0 * self.bandwidth) * sums.b.get(j, i);
            }
        }
        if let Some((grad, scale)) = log_weight_grad {
            check_len("rbf log-weight gradient", self.weights.data().len(), grad.len())?;
            let k = self.n_centers();
            for (j, &u) in upstream.iter().enumerate() {
                let f = scale * u;
                if f == 0.0 {
                    continue;
                }
                let wrow = self.weights.row(j);
                let grow = &mut grad[j * k..(j + 1) * k];
                for kk in 0..k {
                    grow[kk] += f * sums.phi[kk] * wrow[kk];
                }
            }
        }
        Ok(gz)
    }

    /// `‖J_σ(z)·v‖²` with gradients with respect to `z` and `v`; with
    /// `log_weight_grad` set, also accumulates `scale · ∂/∂log w`.
    pub fn sigma_jvp_sq_norm(
        &self,
        z: &[f64],
        v: &[f64],
        log_weight_grad: Option<(&mut [f64], f64)>,
    ) -> Result<(f64, DenseVector, DenseVector)> {
        let d = self.latent_dim();
        check_len("rbf input", d, z.len())?;
        check_len("rbf tangent", d, v.len())?;
        let k = self.n_centers();
        let m = self.output_dim();
        let g = self.bandwidth;
        let phi = self.kernels(z);
        let mut u = vec![0.0; k];
        for kk in 0..k {
            let c = self.centers.row(kk);
            u[kk] = (0..d).map(|i| (z[i] - c[i]) * v[i]).sum();
        }
        let phi_u: DenseVector = phi.iter().zip(&u).map(|(p, q)| p * q).collect();
        let mut phi_c = DenseMatrix::zeros(d, k);
        let mut phi_u_c = DenseMatrix::zeros(d, k);
        for kk in 0..k {
            let c = self.centers.row(kk);
            for i in 0..d {
                phi_c.set(i, kk, phi[kk] * c[i]);
                phi_u_c.set(i, kk, phi_u[kk] * c[i]);
            }
        }

        let mut value = 0.0;
        let mut gz = vec![0.0; d];
        let mut gv = vec![0.0; d];
        let mut b = vec![0.0; d];
        let mut c_vec = vec![0.0; d];
        let mut weight_grad = log_weight_grad;
        for j in 0..m {
            let wrow = self.weights.row(j);
            let s0 = dot(wrow, &phi);
            let a = dot(wrow, &phi_u);
            for i in 0..d {
                b[i] = z[i] * s0 - dot(wrow, phi_c.row(i));
                c_vec[i] = z[i] * a - dot(wrow, phi_u_c.row(i));
            }
            let beta = self.floor[j] + s0;
            let pre = g * beta.powf(-1.5);
            let s = pre * a;
            value += s * s;
            for i in 0..d {
                let ds = pre * (3.0 * g * a * b[i] / beta - 2.0 * g * c_vec[i] + s0 * v[i]);
                gz[i] += 2.0 * s * ds;
                gv[i] += 2.0 * s * pre * b[i];
            }
            if let Some((grad, scale)) = weight_grad.as_mut() {
                let f = *scale * 2.0 * s * pre;
                if f != 0.0 {
                    let shift = 1.5 * a / beta;
                    let grow = &mut grad[j * k..(j + 1) * k];
                    for kk in 0..k {
                        grow[kk] += f * phi[kk] * (u[kk] - shift) * wrow[kk];
                    }
                }
            }
        }
        if !value.is_finite() {
            return Err(RvaeError::numerical("non-finite RBF Jacobian-vector product"));
        }
        Ok((value, gz, gv))
    }

    /// Adam on the log-weights maximizing the Gaussian likelihood of squared
    /// residuals `r²_nj` at the latent codes; centers and bandwidth stay
    /// fixed. One full-batch step per epoch. Returns the mean negative
    /// log-likelihood before each step and after the last one.
    pub fn fit_weights(
        &mut self,
        codes: &DenseMatrix,
        sq_residuals: &DenseMatrix,
        epochs: usize,
        lr: f64,
    ) -> Result<Vec<f64>> {
        check_len("rbf codes", self.latent_dim(), codes.cols())?;
        check_len("rbf targets rows", codes.rows(), sq_residuals.rows())?;
        check_len("rbf targets cols", self.output_dim(), sq_residuals.cols())?;
        let n = codes.rows();
        if n == 0 {
            return Err(RvaeError::contract("fit_weights needs at least one code"));
        }
        let k = self.n_centers();
        let m = self.output_dim();
        let phis: Vec<DenseVector> = (0..n).map(|i| self.kernels(codes.row(i))).collect();
        let mut adam = AdamState::new(&[m * k]);
        let mut trace = Vec::with_capacity(epochs + 1);
        let nll = |net: &RbfNetwork, grad: Option<&mut [f64]>| -> f64 {
            let mut total = 0.0;
            let mut grad = grad;
            for (i, phi) in phis.iter().enumerate() {
                let r2 = sq_residuals.row(i);
                for j in 0..m {
                    let wrow = net.weights.row(j);
                    let beta = net.floor[j] + dot(wrow, phi);
                    total += 0.5 * (beta * r2[j] - beta.ln());
                    if let Some(g) = grad.as_mut() {
                        let f = 0.5 * (r2[j] - 1.0 / beta) / n as f64;
                        let grow = &mut g[j * k..(j + 1) * k];
                        for kk in 0..k {
                            grow[kk] += f * phi[kk] * wrow[kk];
                        }
                    }
                }
            }
            total / n as f64
        };
        for _ in 0..epochs {
            let mut grad = vec![0.0; m * k];
            trace.push(nll(self, Some(&mut grad)));
            self.update_log_weights(|lw| adam.step(&mut [lw], &[&grad], lr))?;
        }
        trace.push(nll(self, None));
        Ok(trace)
    }
}

/// k-means with k-means++ seeding; at most 50 Lloyd iterations, stopping
/// early once no center moves by more than 1e-6.
pub fn fit_centers<R: Rng + ?Sized>(codes: &DenseMatrix, k: usize, rng: &mut R) -> Result<DenseMatrix> {
    let n = codes.rows();
    let d = codes.cols();
    if n == 0 || k == 0 || k > n {
        return Err(RvaeError::contract(format!(
            "fit_centers needs 1 <= k <= N, got k = {k}, N = {n}"
        )));
    }
    let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };

    let mut centers = DenseMatrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(codes.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(codes.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            if nearest[chosen] == 0.0 {
                // rounding ran past the end; take the last point with mass
                chosen = nearest.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(codes.row(pick));
        for i in 0..n {
            nearest[i] = nearest[i].min(sq(codes.row(i), centers.row(c)));
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..50 {
        for (i, slot) in assignment.iter_mut().enumerate() {
            let x = codes.row(i);
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist = sq(x, centers.row(c));
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            *slot = best.1;
        }
        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums.row_mut(c).iter_mut().zip(codes.row(i)) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let new: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
            shift = shift.max(sq(&new, centers.row(c)).sqrt());
            centers.row_mut(c).copy_from_slice(&new);
        }
        if shift < 1e-6 {
            break;
        }
    }
    Ok(centers)
}
