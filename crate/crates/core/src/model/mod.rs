//! Encoder/decoder wiring for the Riemannian model and its Euclidean
//! baseline, plus checkpoint conversion.

mod objective;
mod train;

pub use objective::{
    elbo, elbo_euclidean_with_noise, euclidean_loss_grad, gaussian_kl_standard, kl_mc, kl_mc_terms, recon_loglik,
    riemannian_loss_grad, ElboOptions, ElboTerms, GeodesicCache, LossGrad, PriorGrad,
};
pub use train::{train, write_metrics_csv, MetricRow, TrainConfig, TrainReport};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::brownian::HeatKernel;
use crate::checkpoint::Checkpoint;
use crate::error::{check_len, Result, RvaeError};
use crate::geometry::DecoderImmersion;
use crate::linalg::DenseVector;
use crate::nn::{sigmoid, softplus, Activation, Layer, Mlp};
use crate::rbf::RbfNetwork;

/// Lower bound added to every softplus time or variance output.
pub const TIME_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Riemannian,
    EuclideanBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Riemannian => "riemannian",
            Mode::EuclideanBaseline => "euclidean_baseline",
        }
    }

    fn code(self) -> f64 {
        match self {
            Mode::Riemannian => 0.0,
            Mode::EuclideanBaseline => 1.0,
        }
    }

    fn from_code(code: f64) -> Result<Self> {
        match code {
            c if c == 0.0 => Ok(Mode::Riemannian),
            c if c == 1.0 => Ok(Mode::EuclideanBaseline),
            c => Err(RvaeError::format(format!("unknown mode code {c}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = RvaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "riemannian" => Ok(Mode::Riemannian),
            "euclidean_baseline" | "euclidean" => Ok(Mode::EuclideanBaseline),
            other => Err(RvaeError::Config(format!(
                "unknown mode {other:?}; expected riemannian or euclidean_baseline"
            ))),
        }
    }
}

/// Encoder outputs for one input, with the trunk features kept for the
/// time-head gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub features: DenseVector,
    pub mean: DenseVector,
    /// Time head before the softplus.
    pub time_pre: DenseVector,
    /// One diffusion time (Riemannian) or `d` variances (baseline).
    pub time: DenseVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvaeModel {
    pub mode: Mode,
    pub encoder_trunk: Mlp,
    pub encoder_mean: Mlp,
    pub encoder_time: Mlp,
    pub decoder_mean: Mlp,
    /// Absent until the second training stage builds it.
    pub decoder_precision: Option<RbfNetwork>,
    /// Learned in Riemannian mode; fixed at `N(0, I)` for the baseline.
    pub prior: HeatKernel,
}

pub(crate) fn time_transform(pre: f64) -> f64 {
    softplus(pre) + TIME_FLOOR
}

pub(crate) fn time_transform_derivative(pre: f64) -> f64 {
    sigmoid(pre)
}

impl RvaeModel {
    /// ELU networks with the trunk `M → h_k → … → h_1`, linear mean and time
    /// heads on the trunk, and the decoder `d → h_1 → … → h_k → M` with a
    /// linear output.
    pub fn new(mode: Mode, data_dim: usize, latent_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if data_dim == 0 || latent_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(RvaeError::contract(format!(
                "model needs positive sizes, got M = {data_dim}, d = {latent_dim}, hidden = {hidden:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk_sizes = vec![data_dim];
        trunk_sizes.extend(hidden.iter().rev());
        let trunk_acts = vec![Activation::Elu; hidden.len()];
        let encoder_trunk = Mlp::he_init(&trunk_sizes, &trunk_acts, &mut rng);
        let width = *trunk_sizes.last().expect("non-empty");
        let encoder_mean = Mlp::he_init(&[width, latent_dim], &[Activation::Linear], &mut rng);
        let mut dec_sizes = vec![latent_dim];
        dec_sizes.extend(hidden);
        dec_sizes.push(data_dim);
        let mut dec_acts = vec![Activation::Elu; hidden.len()];
        dec_acts.push(Activation::Linear);
        let decoder_mean = Mlp::he_init(&dec_sizes, &dec_acts, &mut rng);
        let time_dim = match mode {
            Mode::Riemannian => 1,
            Mode::EuclideanBaseline => latent_dim,
        };
        let mut encoder_time = Mlp::he_init(&[width, time_dim], &[Activation::Linear], &mut rng);
        // start with small, input-independent spread
        for layer in encoder_time.layers_mut() {
            layer.weights.scale(0.0);
            layer.bias.iter_mut().for_each(|b| *b = -4.0);
        }
        let prior = HeatKernel::new(vec![0.0; latent_dim], 1.0)?;
        Ok(RvaeModel {
            mode,
            encoder_trunk,
            encoder_mean,
            encoder_time,
            decoder_mean,
            decoder_precision: None,
            prior,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.encoder_trunk.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder_mean.input_dim()
    }

    pub fn encode_full(&self, x: &[f64]) -> Result<Encoding> {
        check_len("encoder input", self.data_dim(), x.len())?;
        let features = self.encoder_trunk.forward(x)?;
        let mean = self.encoder_mean.forward(&features)?;
        let time_pre = self.encoder_time.forward(&features)?;
        let time = time_pre.iter().map(|&a| time_transform(a)).collect();
        Ok(Encoding { features, mean, time_pre, time })
    }

    /// Posterior heat kernel `(μ_q(x), t_q(x))`. The baseline posterior is a
    /// diagonal Gaussian; use [`RvaeModel::encode_full`] for it.
    pub fn encode(&self, x: &[f64]) -> Result<HeatKernel> {
        if self.mode != Mode::Riemannian {
            return Err(RvaeError::contract(
                "the baseline posterior is a diagonal Gaussian, not a heat kernel",
            ));
        }
        let enc = self.encode_full(x)?;
        HeatKernel::new(enc.mean, enc.time[0])
    }

    pub fn precision_network(&self) -> Result<&RbfNetwork> {
        self.decoder_precision
            .as_ref()
            .ok_or_else(|| RvaeError::contract("model has no precision network yet; run the second stage"))
    }

    /// `(μ_θ(z), β(z))`.
    pub fn decode(&self, z: &[f64]) -> Result<(DenseVector, DenseVector)> {
        check_len("decoder input", self.latent_dim(), z.len())?;
        let mean = self.decoder_mean.forward(z)?;
        let precision = self.precision_network()?.precision(z)?;
        Ok((mean, precision))
    }

    pub fn immersion(&self) -> Result<DecoderImmersion<'_>> {
        DecoderImmersion::new(&self.decoder_mean, self.decoder_precision.as_ref())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_scalar("meta/mode", self.mode.code())?;
        push_mlp(&mut ck, "encoder_trunk", &self.encoder_trunk)?;
        push_mlp(&mut ck, "encoder_mean", &self.encoder_mean)?;
        push_mlp(&mut ck, "encoder_time", &self.encoder_time)?;
        push_mlp(&mut ck, "decoder_mean", &self.decoder_mean)?;
        if let Some(net) = &self.decoder_precision {
            ck.push_matrix("rbf/centers", net.centers())?;
            ck.push_matrix("rbf/log_weights", net.log_weights())?;
            ck.push_vector("rbf/floor", net.floor())?;
            ck.push_scalar("rbf/bandwidth", net.bandwidth())?;
        }
        ck.push_vector("prior/mu", self.prior.center())?;
        ck.push_scalar("prior/log_t", self.prior.log_time())?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mode = Mode::from_code(ck.scalar("meta/mode")?)?;
        let decoder_precision = if ck.get("rbf/centers").is_some() {
            Some(RbfNetwork::new(
                ck.matrix("rbf/centers")?,
                ck.scalar("rbf/bandwidth")?,
                ck.matrix("rbf/log_weights")?,
                ck.vector("rbf/floor")?,
            )?)
        } else {
            None
        };
        let model = RvaeModel {
            mode,
            encoder_trunk: read_mlp(ck, "encoder_trunk")?,
            encoder_mean: read_mlp(ck, "encoder_mean")?,
            encoder_time: read_mlp(ck, "encoder_time")?,
            decoder_mean: read_mlp(ck, "decoder_mean")?,
            decoder_precision,
            prior: HeatKernel::from_log_time(ck.vector("prior/mu")?, ck.scalar("prior/log_t")?)?,
        };
        model.validate().map_err(|e| RvaeError::format(e.to_string()))?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let width = self.encoder_trunk.output_dim();
        check_len("encoder mean head input", width, self.encoder_mean.input_dim())?;
        check_len("encoder time head input", width, self.encoder_time.input_dim())?;
        check_len("encoder mean head output", self.latent_dim(), self.encoder_mean.output_dim())?;
        let time_dim = match self.mode {
            Mode::Riemannian => 1,
            Mode::EuclideanBaseline => self.latent_dim(),
        };
        check_len("encoder time head output", time_dim, self.encoder_time.output_dim())?;
        check_len("decoder output", self.data_dim(), self.decoder_mean.output_dim())?;
        check_len("prior center", self.latent_dim(), self.prior.dim())?;
        self.immersion()?;
        Ok(())
    }
}

fn push_mlp(ck: &mut Checkpoint, prefix: &str, net: &Mlp) -> Result<()> {
    ck.push_scalar(format!("{prefix}/layers"), net.layers().len() as f64)?;
    for (k, layer) in net.layers().iter().enumerate() {
        ck.push_matrix(format!("{prefix}/layer{k}/weight"), &layer.weights)?;
        ck.push_vector(format!("{prefix}/layer{k}/bias"), &layer.bias)?;
        ck.push_scalar(format!("{prefix}/layer{k}/activation"), layer.activation.code() as f64)?;
    }
    Ok(())
}

fn read_mlp(ck: &Checkpoint, prefix: &str) -> Result<Mlp> {
    let count = ck.scalar(&format!("{prefix}/layers"))?;
    if !(count >= 1.0 && count.fract() == 0.0 && count <= 1024.0) {
        return Err(RvaeError::format(format!("{prefix}: bad layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count as usize);
    for k in 0..count as usize {
        let code = ck.scalar(&format!("{prefix}/layer{k}/activation"))?;
        let activation = Activation::from_code(code as u32)
            .filter(|_| code.fract() == 0.0 && code >= 0.0)
            .ok_or_else(|| RvaeError::format(format!("{prefix}/layer{k}: unknown activation code {code}")))?;
        layers.push(Layer {
            weights: ck.matrix(&format!("{prefix}/layer{k}/weight"))?,
            bias: ck.vector(&format!("{prefix}/layer{k}/bias"))?,
            activation,
        });
    }
    Mlp::new(layers).map_err(|e| RvaeError::format(format!("{prefix}: {e}")))
}
