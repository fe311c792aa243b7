//! Commands behind the `rvae` binary. Every command writes CSV files with a
//! header row, each next to a `.meta` sidecar holding the resolved inputs
//! and the content hash of the checkpoint involved.

pub mod classify;
pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha1::{Digest, Sha1};

pub use classify::{classify_codes, f1_scores, train_classifier, Classifier, ClassifierConfig, F1Report};
pub use config::{parse_config, parse_config_text, DatasetSpec, RunConfig, Source, KEYS};

use crate::brownian::{logpdf_with_distance, sample_prior_paths, write_paths_csv, BrownianPath, HeatKernel};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Result, RvaeError};
use crate::geometry::{
    curve_length, fit_geodesic, fit_geodesic_from, log_volume_measure, pullback_metric, GeodesicOptions,
    GeodesicSpline, NaturalCubicBasis,
};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::model::{elbo, train, write_metrics_csv, ElboOptions, Mode, RvaeModel, TrainReport};
use crate::parallel::stream_rng;

/// Git-style object hash: SHA-1 over `"blob <len>\0"` followed by the bytes.
pub fn blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_os_string();
    name.push(".meta");
    PathBuf::from(name)
}

/// `key = value` lines recorded beside every output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metadata {
    lines: Vec<(String, String)>,
}

impl Metadata {
    pub fn new(command: &str) -> Self {
        let mut m = Metadata::default();
        m.push("command", command);
        m.push("rvae_version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self, config: Option<&RunConfig>) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(cfg) = config {
            out.push_str("# resolved run configuration\n");
            out.push_str(&cfg.render());
        }
        out
    }
}

fn write_with_sidecar(path: &Path, body: &[u8], meta: &str) -> Result<()> {
    fs::write(path, body)?;
    fs::write(sidecar_path(path), meta)?;
    Ok(())
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn columns(prefix: &str, n: usize) -> String {
    (1..=n).map(|k| format!("{prefix}{k}")).collect::<Vec<_>>().join(",")
}

/// Reads a checkpoint and returns the model with the file's content hash.
pub fn load_model(path: &Path) -> Result<(RvaeModel, String)> {
    let bytes = fs::read(path)?;
    let hash = blob_sha1(&bytes);
    let model = RvaeModel::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    Ok((model, hash))
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub checkpoint_sha1: String,
    pub report: TrainReport,
    pub model: RvaeModel,
}

/// Trains on the configured split and writes `model.ckpt`, `metrics.csv`
/// and `codes.csv` (encoder means of both splits) into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (train_set, test_set) = cfg.load_split()?;
    let mut model = RvaeModel::new(cfg.train.mode, train_set.dim(), cfg.latent_dim, &cfg.hidden, cfg.train.seed)?;
    let report = train(&mut model, &train_set, &cfg.train)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let bytes = model.to_checkpoint()?.to_bytes();
    let hash = blob_sha1(&bytes);
    let checkpoint = cfg.out_dir.join("model.ckpt");
    fs::write(&checkpoint, &bytes)?;

    let mut meta = Metadata::new("train");
    meta.push("checkpoint", checkpoint.display());
    meta.push("checkpoint_sha1", &hash);
    meta.push("train_size", train_set.len());
    meta.push("test_size", test_set.len());
    let meta_text = meta.render(Some(cfg));
    fs::write(cfg.out_dir.join("run.meta"), &meta_text)?;

    let mut metrics = Vec::new();
    write_metrics_csv(&report.metrics, cfg.wall_clock, &mut metrics)?;
    write_with_sidecar(&cfg.out_dir.join("metrics.csv"), &metrics, &meta_text)?;

    let mut codes = format!("split,index,label,{}\n", columns("z", cfg.latent_dim));
    for (name, ds) in [("train", &train_set), ("test", &test_set)] {
        for (i, row) in encode_means(&model, ds)?.iter().enumerate() {
            let _ = writeln!(codes, "{name},{i},{},{}", ds.labels[i], join(row.iter().copied()));
        }
    }
    write_with_sidecar(&cfg.out_dir.join("codes.csv"), codes.as_bytes(), &meta_text)?;
    Ok(TrainOutcome { checkpoint, checkpoint_sha1: hash, report, model })
}

/// Encoder means for every row, in order.
pub fn encode_means(model: &RvaeModel, data: &Dataset) -> Result<Vec<DenseVector>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| Ok(model.encode_full(data.features.row(i))?.mean))
        .collect()
}

pub struct SampleRequest<'a> {
    pub checkpoint: &'a Path,
    pub n_paths: usize,
    /// Multiplies the learned prior time.
    pub t_scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub out_dir: &'a Path,
}

/// Prior walks from a Riemannian checkpoint: `paths.csv` with every step and
/// `decoded.csv` with the decoder mean at each endpoint.
pub fn cmd_sample(req: &SampleRequest<'_>) -> Result<Vec<BrownianPath>> {
    let (model, hash) = load_model(req.checkpoint)?;
    if model.mode != Mode::Riemannian {
        return Err(RvaeError::contract("prior walks need a riemannian checkpoint"));
    }
    let prior = model.prior.scaled_time(req.t_scale)?;
    let imm = model.immersion()?;
    let paths = sample_prior_paths(&prior, &imm, req.steps, req.n_paths, req.seed)?;

    let mut meta = Metadata::new("sample");
    meta.push("checkpoint", req.checkpoint.display());
    meta.push("checkpoint_sha1", hash);
    meta.push("n_paths", req.n_paths);
    meta.push("t_scale", req.t_scale);
    meta.push("diffusion_time", prior.time());
    meta.push("steps", req.steps);
    meta.push("seed", req.seed);
    let meta_text = meta.render(None);
    fs::create_dir_all(req.out_dir)?;

    let mut csv = Vec::new();
    write_paths_csv(&paths, model.latent_dim(), &mut csv)?;
    write_with_sidecar(&req.out_dir.join("paths.csv"), &csv, &meta_text)?;

    let decoded = paths
        .par_iter()
        .map(|p| model.decoder_mean.forward(p.endpoint()))
        .collect::<Result<Vec<_>>>()?;
    let mut text = format!("path,{}\n", columns("x", model.data_dim()));
    for (k, x) in decoded.iter().enumerate() {
        let _ = writeln!(text, "{k},{}", join(x.iter().copied()));
    }
    write_with_sidecar(&req.out_dir.join("decoded.csv"), text.as_bytes(), &meta_text)?;
    Ok(paths)
}

/// Box around the codes widened by `n_std` standard deviations per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeBox {
    pub lo: DenseVector,
    pub hi: DenseVector,
}

impl CodeBox {
    pub fn around(codes: &[DenseVector], n_std: f64) -> Result<Self> {
        let first = codes.first().ok_or_else(|| RvaeError::contract("box needs at least one code"))?;
        let d = first.len();
        let n = codes.len() as f64;
        let mut lo = first.clone();
        let mut hi = first.clone();
        let mut mean = vec![0.0; d];
        for c in codes {
            for k in 0..d {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
                mean[k] += c[k] / n;
            }
        }
        for k in 0..d {
            let sd = (codes.iter().map(|c| (c[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
            lo[k] -= n_std * sd;
            hi[k] += n_std * sd;
        }
        Ok(CodeBox { lo, hi })
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Share of path endpoints inside the box.
    pub fn endpoint_fraction_inside(&self, paths: &[BrownianPath]) -> f64 {
        if paths.is_empty() {
            return 0.0;
        }
        paths.iter().filter(|p| self.contains(p.endpoint())).count() as f64 / paths.len() as f64
    }

    /// Share of all walk points, starts excluded, outside the box.
    pub fn path_fraction_outside(&self, paths: &[BrownianPath]) -> f64 {
        let (mut outside, mut total) = (0usize, 0usize);
        for p in paths {
            for z in &p.steps[1..] {
                total += 1;
                outside += usize::from(!self.contains(z));
            }
        }
        if total == 0 {
            0.0
        } else {
            outside as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicSummary {
    pub geodesic_length: f64,
    pub straight_length: f64,
    /// Mean of `√det G` over the exported points.
    pub geodesic_mean_volume: f64,
    pub straight_mean_volume: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const GEODESIC_FRAMES: usize = 16;

/// Fits the geodesic between two codes and writes `geodesic.csv`,
/// `straight.csv`, the decoded `frames.csv` along both and `summary.csv`.
/// Equal endpoints give single-row curves.
pub fn cmd_geodesic(
    checkpoint: &Path,
    a: &[f64],
    b: &[f64],
    opts: &GeodesicOptions,
    out_dir: &Path,
) -> Result<GeodesicSummary> {
    let (model, hash) = load_model(checkpoint)?;
    let imm = model.immersion()?;
    let spline = fit_geodesic(&imm, a, b, opts)?;
    let straight = GeodesicSpline::new(a, b, 0)?;
    let n_points = if a == b { 1 } else { GEODESIC_FRAMES };
    let grid: Vec<f64> = if n_points == 1 {
        vec![0.0]
    } else {
        (0..n_points).map(|p| p as f64 / (n_points - 1) as f64).collect()
    };
    let (geodesic_length, straight_length) = if a == b {
        (0.0, 0.0)
    } else {
        (curve_length(&imm, &spline, opts.n_segments)?, curve_length(&imm, &straight, opts.n_segments)?)
    };

    let mut meta = Metadata::new("geodesic");
    meta.push("checkpoint", checkpoint.display());
    meta.push("checkpoint_sha1", hash);
    meta.push("from", join(a.iter().copied()));
    meta.push("to", join(b.iter().copied()));
    meta.push("n_basis", opts.n_basis);
    meta.push("n_segments", opts.n_segments);
    meta.push("max_iters", opts.max_iters);
    meta.push("lr", opts.lr);
    meta.push("rel_tol", opts.rel_tol);
    let meta_text = meta.render(None);
    fs::create_dir_all(out_dir)?;

    let d = model.latent_dim();
    let mut frames = format!("curve,s,{}\n", columns("x", model.data_dim()));
    let mut volumes = [0.0; 2];
    for (c, (name, curve)) in [("geodesic", &spline), ("straight", &straight)].into_iter().enumerate() {
        let mut text = format!("s,{},speed,log_volume\n", columns("z", d));
        for &s in &grid {
            let z = curve.point(s)?;
            let metric = pullback_metric(&imm, &z)?;
            let speed = metric.inner(&curve.velocity(s)?, &curve.velocity(s)?).max(0.0).sqrt();
            let log_vol = log_volume_measure(&metric);
            volumes[c] += log_vol.exp() / grid.len() as f64;
            let _ = writeln!(text, "{s},{},{speed},{log_vol}", join(z.iter().copied()));
            let x = model.decoder_mean.forward(&z)?;
            let _ = writeln!(frames, "{name},{s},{}", join(x));
        }
        write_with_sidecar(&out_dir.join(format!("{name}.csv")), text.as_bytes(), &meta_text)?;
    }
    write_with_sidecar(&out_dir.join("frames.csv"), frames.as_bytes(), &meta_text)?;
    let summary = GeodesicSummary {
        geodesic_length,
        straight_length,
        geodesic_mean_volume: volumes[0],
        straight_mean_volume: volumes[1],
        iterations: spline.iterations,
        converged: spline.converged,
    };
    let text = format!(
        "geodesic_length,straight_length,geodesic_mean_volume,straight_mean_volume,iterations,converged\n{},{},{},{},{},{}\n",
        summary.geodesic_length,
        summary.straight_length,
        summary.geodesic_mean_volume,
        summary.straight_mean_volume,
        summary.iterations,
        summary.converged
    );
    write_with_sidecar(&out_dir.join("summary.csv"), text.as_bytes(), &meta_text)?;
    Ok(summary)
}

/// Regular 2-D grid, `lo:hi:n` per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub n: [usize; 2],
}

impl GridSpec {
    /// Parses `lo:hi:n,lo:hi:n`.
    pub fn parse(raw: &str) -> Result<Self> {
        let bad = || RvaeError::Config(format!("grid must look like `lo:hi:n,lo:hi:n`, got {raw:?}"));
        let axes: Vec<&str> = raw.split(',').collect();
        if axes.len() != 2 {
            return Err(bad());
        }
        let mut spec = GridSpec { lo: [0.0; 2], hi: [0.0; 2], n: [0; 2] };
        for (k, axis) in axes.iter().enumerate() {
            let parts: Vec<&str> = axis.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            spec.lo[k] = parts[0].trim().parse().map_err(|_| bad())?;
            spec.hi[k] = parts[1].trim().parse().map_err(|_| bad())?;
            spec.n[k] = parts[2].trim().parse().map_err(|_| bad())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Square-celled grid over the codes' mean ± `n_std` standard deviations.
    pub fn around_codes(codes: &[DenseVector], n_std: f64, n: usize) -> Result<Self> {
        let count = codes.len() as f64;
        if codes.is_empty() || codes[0].len() != 2 {
            return Err(RvaeError::contract("density grids need 2-D codes"));
        }
        let mut spec = GridSpec { lo: [0.0; 2], hi: [0.0; 2], n: [n, n] };
        for k in 0..2 {
            let mean = codes.iter().map(|c| c[k]).sum::<f64>() / count;
            let sd = (codes.iter().map(|c| (c[k] - mean).powi(2)).sum::<f64>() / count).sqrt();
            spec.lo[k] = mean - n_std * sd;
            spec.hi[k] = mean + n_std * sd;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        for k in 0..2 {
            if self.n[k] < 2 || !(self.hi[k] > self.lo[k]) {
                return Err(RvaeError::Config(format!("grid axis {} needs lo < hi and n ≥ 2", k + 1)));
            }
        }
        Ok(())
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (self.hi[axis] - self.lo[axis]) * i as f64 / (self.n[axis] - 1) as f64
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.n[axis] - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    /// Row-major over the second axis, then the first: `values[j][i]` is
    /// `(log volume, log prior)` at `(x_i, y_j)`.
    pub values: Vec<Vec<(f64, f64)>>,
}

impl DensityGrid {
    /// Trapezoid integral of the prior converted to a coordinate density.
    pub fn prior_mass(&self) -> f64 {
        let weight = |i: usize, n: usize| if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
        let [nx, ny] = self.spec.n;
        let mut total = 0.0;
        for (j, row) in self.values.iter().enumerate() {
            for (i, (log_vol, log_prior)) in row.iter().enumerate() {
                total += weight(i, nx) * weight(j, ny) * (log_prior + log_vol).exp();
            }
        }
        total * self.spec.step(0) * self.spec.step(1)
    }
}

/// Log volume measure and log prior density (with respect to the volume
/// measure) on a grid; geodesics to the prior center are warm-started
/// along each row. Writes `density.csv`.
pub fn cmd_density(checkpoint: &Path, grid: &GridSpec, opts: &GeodesicOptions, out_dir: &Path) -> Result<DensityGrid> {
    let (model, hash) = load_model(checkpoint)?;
    if model.latent_dim() != 2 {
        return Err(RvaeError::contract(format!("density grids need d = 2, checkpoint has d = {}", model.latent_dim())));
    }
    let imm = model.immersion()?;
    let prior: HeatKernel = match model.mode {
        Mode::Riemannian => model.prior.clone(),
        Mode::EuclideanBaseline => HeatKernel::new(vec![0.0; 2], 1.0)?,
    };
    let values = (0..grid.n[1])
        .into_par_iter()
        .map(|j| -> Result<Vec<(f64, f64)>> {
            let y = grid.coordinate(1, j);
            let mut warm: Option<GeodesicSpline> = None;
            let mut row = Vec::with_capacity(grid.n[0]);
            for i in 0..grid.n[0] {
                let z = [grid.coordinate(0, i), y];
                let log_vol = log_volume_measure(&pullback_metric(&imm, &z)?);
                let log_prior = match model.mode {
                    Mode::Riemannian => {
                        let sq = if z.as_slice() == prior.center() {
                            0.0
                        } else {
                            let init = match warm.take() {
                                Some(mut s) => {
                                    s.set_endpoints(&z, prior.center())?;
                                    s
                                }
                                None => GeodesicSpline::with_basis(
                                    &z,
                                    prior.center(),
                                    NaturalCubicBasis::snapped(opts.n_basis, opts.n_segments),
                                )?,
                            };
                            let (spline, _) = fit_geodesic_from(&imm, init, opts)?;
                            let l = spline.length;
                            warm = Some(spline);
                            l * l
                        };
                        logpdf_with_distance(&prior, &z, &imm, sq)?
                    }
                    // standard normal, moved onto the volume measure
                    Mode::EuclideanBaseline => {
                        -(2.0 * std::f64::consts::PI).ln() - 0.5 * (z[0] * z[0] + z[1] * z[1]) - log_vol
                    }
                };
                row.push((log_vol, log_prior));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut meta = Metadata::new("density");
    meta.push("checkpoint", checkpoint.display());
    meta.push("checkpoint_sha1", hash);
    meta.push("grid", format!("{}:{}:{},{}:{}:{}", grid.lo[0], grid.hi[0], grid.n[0], grid.lo[1], grid.hi[1], grid.n[1]));
    meta.push("n_basis", opts.n_basis);
    meta.push("n_segments", opts.n_segments);
    meta.push("max_iters", opts.max_iters);
    fs::create_dir_all(out_dir)?;
    let mut text = String::from("z1,z2,log_volume,log_prior\n");
    for (j, row) in values.iter().enumerate() {
        for (i, (v, p)) in row.iter().enumerate() {
            let _ = writeln!(text, "{},{},{v},{p}", grid.coordinate(0, i), grid.coordinate(1, j));
        }
    }
    write_with_sidecar(&out_dir.join("density.csv"), text.as_bytes(), &meta.render(None))?;
    Ok(DensityGrid { spec: grid.clone(), values })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub checkpoint_sha1: String,
    pub neg_elbo: f64,
    pub rec: f64,
    pub kl: f64,
    /// Mean over test points of the KL Monte-Carlo standard error.
    pub kl_se: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mode: Mode,
    pub latent_dim: usize,
    pub runs: Vec<EvalRun>,
    /// `(mean, std)` across runs of Neg. ELBO, Rec and KL.
    pub neg_elbo: (f64, f64),
    pub rec: (f64, f64),
    pub kl: (f64, f64),
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Test-set average of one model's `(-ELBO, -recon, KL, KL s.e.)`. Point
/// `i` draws from stream `i` of `seed`.
pub fn evaluate_model(model: &RvaeModel, test: &Dataset, opts: &ElboOptions, seed: u64) -> Result<[f64; 4]> {
    if test.is_empty() {
        return Err(RvaeError::contract("evaluation needs a non-empty test set"));
    }
    let terms = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            elbo(model, test.features.row(i), opts, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len() as f64;
    let mut out = [0.0; 4];
    for t in &terms {
        out[0] -= t.elbo / n;
        out[1] -= t.recon / n;
        out[2] += t.kl / n;
        out[3] += t.kl_se / n;
    }
    Ok(out)
}

/// Evaluates each checkpoint (one per training seed) on the test set and
/// writes `eval_runs.csv` and the `eval.csv` table row.
pub fn cmd_eval(
    checkpoints: &[PathBuf],
    test: &Dataset,
    opts: &ElboOptions,
    seed: u64,
    out_dir: &Path,
) -> Result<EvalSummary> {
    if checkpoints.is_empty() {
        return Err(RvaeError::contract("evaluation needs at least one checkpoint"));
    }
    let mut runs = Vec::with_capacity(checkpoints.len());
    let mut shape: Option<(Mode, usize)> = None;
    for path in checkpoints {
        let (model, hash) = load_model(path)?;
        match shape {
            None => shape = Some((model.mode, model.latent_dim())),
            Some(s) if s != (model.mode, model.latent_dim()) => {
                return Err(RvaeError::contract("all evaluated checkpoints must share mode and latent dimension"))
            }
            Some(_) => {}
        }
        let [neg_elbo, rec, kl, kl_se] = evaluate_model(&model, test, opts, seed)?;
        runs.push(EvalRun { checkpoint_sha1: hash, neg_elbo, rec, kl, kl_se });
    }
    let (mode, latent_dim) = shape.expect("at least one checkpoint");
    let pick = |f: fn(&EvalRun) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    let summary = EvalSummary {
        mode,
        latent_dim,
        neg_elbo: pick(|r| r.neg_elbo),
        rec: pick(|r| r.rec),
        kl: pick(|r| r.kl),
        runs,
    };

    let mut meta = Metadata::new("eval");
    for (k, (path, run)) in checkpoints.iter().zip(&summary.runs).enumerate() {
        meta.push(&format!("checkpoint_{k}"), path.display());
        meta.push(&format!("checkpoint_{k}_sha1"), &run.checkpoint_sha1);
    }
    meta.push("test_size", test.len());
    meta.push("samples", opts.samples);
    meta.push("walk_steps", opts.walk_steps);
    meta.push("geodesic_basis", opts.geodesic.n_basis);
    meta.push("geodesic_segments", opts.geodesic.n_segments);
    meta.push("geodesic_iters", opts.geodesic.max_iters);
    meta.push("seed", seed);
    let meta_text = meta.render(None);
    fs::create_dir_all(out_dir)?;
    let mut text = String::from("run,checkpoint_sha1,neg_elbo,rec,kl,kl_se\n");
    for (k, r) in summary.runs.iter().enumerate() {
        let _ = writeln!(text, "{k},{},{},{},{},{}", r.checkpoint_sha1, r.neg_elbo, r.rec, r.kl, r.kl_se);
    }
    write_with_sidecar(&out_dir.join("eval_runs.csv"), text.as_bytes(), &meta_text)?;
    let text = format!(
        "mode,latent_dim,runs,neg_elbo_mean,neg_elbo_std,rec_mean,rec_std,kl_mean,kl_std\n{},{},{},{},{},{},{},{},{}\n",
        summary.mode,
        summary.latent_dim,
        summary.runs.len(),
        summary.neg_elbo.0,
        summary.neg_elbo.1,
        summary.rec.0,
        summary.rec.1,
        summary.kl.0,
        summary.kl.1
    );
    write_with_sidecar(&out_dir.join("eval.csv"), text.as_bytes(), &meta_text)?;
    Ok(summary)
}

/// Reads the `label` column and the `z*` columns of a codes file as written
/// by [`cmd_train`].
pub fn read_codes_csv(path: &Path) -> Result<(DenseMatrix, Vec<usize>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| RvaeError::format(format!("{}: empty codes file", path.display())))?
        .split(',')
        .collect();
    let label_col = header
        .iter()
        .position(|h| *h == "label")
        .ok_or_else(|| RvaeError::format("codes file has no `label` column"))?;
    let code_cols: Vec<usize> = (0..header.len())
        .filter(|&c| header[c].strip_prefix('z').is_some_and(|rest| rest.parse::<usize>().is_ok()))
        .collect();
    if code_cols.is_empty() {
        return Err(RvaeError::format("codes file has no `z` columns"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(RvaeError::format(format!("codes line {}: expected {} fields", n + 2, header.len())));
        }
        let parse_err = || RvaeError::format(format!("codes line {}: unreadable number", n + 2));
        labels.push(fields[label_col].parse().map_err(|_| parse_err())?);
        for &c in &code_cols {
            data.push(fields[c].parse::<f64>().map_err(|_| parse_err())?);
        }
    }
    Ok((DenseMatrix::from_vec(labels.len(), code_cols.len(), data)?, labels))
}

/// One classifier per seed on the codes file; writes `f1.csv` with a row
/// per seed and a final row of means.
pub fn cmd_classify(
    codes_path: &Path,
    cfg: &ClassifierConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<F1Report>> {
    let (codes, labels) = read_codes_csv(codes_path)?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let reports = seeds
        .iter()
        .map(|&s| classify_codes(&codes, &labels, n_classes, cfg, s))
        .collect::<Result<Vec<_>>>()?;

    let mut meta = Metadata::new("classify");
    meta.push("codes", codes_path.display());
    meta.push("codes_sha1", blob_sha1(&fs::read(codes_path)?));
    meta.push("seeds", seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    meta.push("hidden", cfg.hidden);
    meta.push("lr", cfg.lr);
    meta.push("batch_size", cfg.batch_size);
    meta.push("epochs", cfg.epochs);
    meta.push("test_fraction", cfg.test_fraction);
    meta.push("split_seed", cfg.split_seed);
    fs::create_dir_all(out_dir)?;
    let mut text = format!("seed,{},macro_f1,degenerate\n", (0..n_classes).map(|c| format!("f1_{c}")).collect::<Vec<_>>().join(","));
    for (s, r) in seeds.iter().zip(&reports) {
        let degenerate = r.degenerate.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
        let _ = writeln!(text, "{s},{},{},{degenerate}", join(r.per_class.iter().copied()), r.macro_f1);
    }
    if !reports.is_empty() {
        let n = reports.len() as f64;
        let per_class = (0..n_classes).map(|c| reports.iter().map(|r| r.per_class[c]).sum::<f64>() / n);
        let avg = reports.iter().map(|r| r.macro_f1).sum::<f64>() / n;
        let _ = writeln!(text, "mean,{},{avg},", join(per_class));
    }
    write_with_sidecar(&out_dir.join("f1.csv"), text.as_bytes(), &meta.render(None))?;
    Ok(reports)
}
