//! Feedforward networks with analytic input Jacobians.
//!
//! Besides the usual forward pass and backprop, [`Mlp`] exposes the
//! Jacobian of its output with respect to its input and the gradient of the
//! squared Jacobian-vector product `‖J(z)·v‖²`, which is what the pull-back
//! metric and the curve energy are built from.

mod adam;

pub use adam::AdamState;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{check_len, Result, RvaeError};
use crate::linalg::{axpy, dot, numerical_rank, DenseMatrix, DenseVector};

/// Pre-activations above this are passed straight through by softplus.
const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Elu,
    Softplus,
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Elu => {
                if a >= 0.0 {
                    a
                } else {
                    a.exp_m1()
                }
            }
            Activation::Softplus => softplus(a),
            Activation::Linear => a,
            Activation::Relu => a.max(0.0),
            Activation::Tanh => a.tanh(),
        }
    }

    /// First derivative. ELU uses the right limit (1) at the kink.
    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Elu => {
                if a >= 0.0 {
                    1.0
                } else {
                    a.exp()
                }
            }
            Activation::Softplus => sigmoid(a),
            Activation::Linear => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
        }
    }

    #[inline]
    pub fn second_derivative(self, a: f64) -> f64 {
        match self {
            Activation::Elu => {
                if a >= 0.0 {
                    0.0
                } else {
                    a.exp()
                }
            }
            Activation::Softplus => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
            Activation::Linear | Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = a.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    /// Whether the activation is smooth and strictly monotone, as required
    /// for the network to be an immersion.
    pub fn is_smooth_monotone(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Elu => 0,
            Activation::Softplus => 1,
            Activation::Linear => 2,
            Activation::Relu => 3,
            Activation::Tanh => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Activation::Elu,
            1 => Activation::Softplus,
            2 => Activation::Linear,
            3 => Activation::Relu,
            4 => Activation::Tanh,
            _ => return None,
        })
    }
}

#[inline]
pub fn softplus(a: f64) -> f64 {
    if a > SOFTPLUS_LINEAR_ABOVE {
        a
    } else {
        a.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > SOFTPLUS_LINEAR_ABOVE {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Entries i.i.d. uniform on `[-√(6/fan_in), √(6/fan_in)]` with `fan_in = cols`.
pub fn he_uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    assert!(rows > 0 && cols > 0, "he_uniform_init needs positive dimensions");
    let bound = (6.0 / cols as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized above")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weights: DenseMatrix,
    pub bias: DenseVector,
    pub activation: Activation,
}

impl Layer {
    pub fn units(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    fn pre_activation(&self, input: &[f64]) -> DenseVector {
        (0..self.weights.rows())
            .map(|r| dot(self.weights.row(r), input) + self.bias[r])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `outputs[0]` is the input; `outputs[k+1]` the activation of layer k.
    pub outputs: Vec<DenseVector>,
    pub pre_activations: Vec<DenseVector>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("trace holds the input at least")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DenseVector>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net
                .layers
                .iter()
                .map(|l| DenseMatrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b).expect("gradient shapes match");
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            axpy(1.0, b, a);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.scale(s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImmersionReport {
    pub widths_ok: bool,
    pub ranks_ok: bool,
    pub activations_ok: bool,
}

impl ImmersionReport {
    pub fn all_ok(&self) -> bool {
        self.widths_ok && self.ranks_ok && self.activations_ok
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(RvaeError::contract("an Mlp needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            check_len("layer bias", layer.weights.rows(), layer.bias.len())?;
            if k > 0 {
                check_len("layer chaining", layers[k - 1].units(), layer.weights.cols())?;
            }
        }
        Ok(Mlp { layers })
    }

    /// He-uniform weights and zero biases for the given widths
    /// (`sizes[0]` is the input dimension).
    pub fn he_init<R: Rng + ?Sized>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(sizes.len(), activations.len() + 1, "one activation per layer");
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                weights: he_uniform_init(w[1], w[0], rng),
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").units()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// Parameter slices in the same order as [`MlpGrads::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            out.push(layer.weights.data_mut());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    pub fn forward(&self, z: &[f64]) -> Result<DenseVector> {
        check_len("mlp input", self.input_dim(), z.len())?;
        let mut h = z.to_vec();
        for layer in &self.layers {
            let mut a = layer.pre_activation(&h);
            a.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            h = a;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, z: &[f64]) -> Result<ForwardTrace> {
        check_len("mlp input", self.input_dim(), z.len())?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        outputs.push(z.to_vec());
        for layer in &self.layers {
            let a = layer.pre_activation(outputs.last().expect("non-empty"));
            let h = a.iter().map(|&v| layer.activation.apply(v)).collect();
            pre_activations.push(a);
            outputs.push(h);
        }
        Ok(ForwardTrace {
            outputs,
            pre_activations,
        })
    }

    /// `output_dim × input_dim` Jacobian, accumulated layer by layer in
    /// forward mode (the latent dimension is small).
    pub fn input_jacobian(&self, z: &[f64]) -> Result<DenseMatrix> {
        check_len("mlp input", self.input_dim(), z.len())?;
        let d = z.len();
        let mut h = z.to_vec();
        // jt[c] holds column c of the running Jacobian
        let mut jt: Vec<DenseVector> = (0..d)
            .map(|c| {
                let mut e = vec![0.0; d];
                e[c] = 1.0;
                e
            })
            .collect();
        for (k, layer) in self.layers.iter().enumerate() {
            let a = layer.pre_activation(&h);
            let deriv: DenseVector = a.iter().map(|&v| layer.activation.derivative(v)).collect();
            jt = jt
                .iter()
                .map(|col| {
                    (0..layer.units())
                        .map(|r| deriv[r] * dot(layer.weights.row(r), col))
                        .collect()
                })
                .collect();
            h = a.iter().map(|&v| layer.activation.apply(v)).collect();
            if jt.iter().any(|c| c.iter().any(|v| !v.is_finite())) || h.iter().any(|v| !v.is_finite()) {
                return Err(RvaeError::numerical(format!(
                    "non-finite Jacobian intermediate at layer {k}"
                )));
            }
        }
        let m = self.output_dim();
        let mut jac = DenseMatrix::zeros(m, d);
        for (c, col) in jt.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                jac.set(r, c, v);
            }
        }
        Ok(jac)
    }

    /// Backprop of `⟨upstream, output⟩` through a recorded trace. Returns the
    /// parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<(MlpGrads, DenseVector)> {
        check_len("mlp upstream", self.output_dim(), upstream.len())?;
        let mut grads = MlpGrads::zeros_like(self);
        let mut adj = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let delta: DenseVector = adj
                .iter()
                .zip(&trace.pre_activations[k])
                .map(|(g, &a)| g * layer.activation.derivative(a))
                .collect();
            let input = &trace.outputs[k];
            let gw = &mut grads.weights[k];
            for (r, &dr) in delta.iter().enumerate() {
                if dr != 0.0 {
                    axpy(dr, input, gw.row_mut(r));
                }
            }
            grads.biases[k].copy_from_slice(&delta);
            adj = layer.weights.tr_matvec(&delta)?;
        }
        Ok((grads, adj))
    }

    /// Input gradient of `⟨upstream, output⟩` without parameter gradients.
    pub fn input_gradient(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<DenseVector> {
        check_len("mlp upstream", self.output_dim(), upstream.len())?;
        let mut adj = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let delta: DenseVector = adj
                .iter()
                .zip(&trace.pre_activations[k])
                .map(|(g, &a)| g * layer.activation.derivative(a))
                .collect();
            adj = layer.weights.tr_matvec(&delta)?;
        }
        Ok(adj)
    }

    pub fn param_gradients(&self, z: &[f64], upstream: &[f64]) -> Result<MlpGrads> {
        let trace = self.forward_trace(z)?;
        Ok(self.backward(&trace, upstream)?.0)
    }

    /// `‖J(z)·v‖²` together with its gradients with respect to `z` and `v`,
    /// by reverse-mode differentiation of the tangent (JVP) forward pass.
    pub fn jvp_sq_norm(&self, z: &[f64], v: &[f64]) -> Result<(f64, DenseVector, DenseVector)> {
        check_len("mlp input", self.input_dim(), z.len())?;
        check_len("mlp tangent", self.input_dim(), v.len())?;
        let n = self.layers.len();
        let mut pre = Vec::with_capacity(n);
        let mut tan_pre = Vec::with_capacity(n);
        let mut h = z.to_vec();
        let mut hdot = v.to_vec();
        for layer in &self.layers {
            let a = layer.pre_activation(&h);
            let adot: DenseVector = (0..layer.units())
                .map(|r| dot(layer.weights.row(r), &hdot))
                .collect();
            h = a.iter().map(|&x| layer.activation.apply(x)).collect();
            hdot = adot
                .iter()
                .zip(&a)
                .map(|(&t, &x)| layer.activation.derivative(x) * t)
                .collect();
            pre.push(a);
            tan_pre.push(adot);
        }
        let value = dot(&hdot, &hdot);
        if !value.is_finite() {
            return Err(RvaeError::numerical("non-finite Jacobian-vector product"));
        }
        let mut adj_tan: DenseVector = hdot.iter().map(|&y| 2.0 * y).collect();
        let mut adj_val = vec![0.0; hdot.len()];
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let act = layer.activation;
            let units = layer.units();
            let mut adj_adot = vec![0.0; units];
            let mut adj_a = vec![0.0; units];
            for r in 0..units {
                let a = pre[k][r];
                let d1 = act.derivative(a);
                adj_adot[r] = d1 * adj_tan[r];
                adj_a[r] = act.second_derivative(a) * tan_pre[k][r] * adj_tan[r] + d1 * adj_val[r];
            }
            adj_tan = layer.weights.tr_matvec(&adj_adot)?;
            adj_val = layer.weights.tr_matvec(&adj_a)?;
        }
        Ok((value, adj_val, adj_tan))
    }

    pub fn check_immersion_conditions(&self) -> ImmersionReport {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(Layer::units));
        let widths_ok = widths.windows(2).all(|w| w[1] >= w[0]);
        let ranks_ok = self.layers.iter().all(|l| {
            let full = l.weights.rows().min(l.weights.cols());
            numerical_rank(&l.weights, 1e-8) == full
        });
        let activations_ok = self.layers.iter().all(|l| l.activation.is_smooth_monotone());
        ImmersionReport {
            widths_ok,
            ranks_ok,
            activations_ok,
        }
    }
}
