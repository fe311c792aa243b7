//! Acceptance suite: one PASS/FAIL line per criterion. Pass criterion
//! numbers as arguments to run a subset, e.g.
//! `cargo test -p rvae --test acceptance -- 1 4`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rvae::brownian::{
    heat_kernel_logpdf, heat_kernel_logpdf_straight, logpdf_with_distance, sample_posterior, sample_prior_paths, HeatKernel,
};
use rvae::data::Dataset;
use rvae::geometry::{
    fit_geodesic, fit_geodesic_from, pullback_metric, GeodesicOptions, GeodesicSpline, Immersion, NaturalCubicBasis,
    Reparameterized,
};
use rvae::harness::{
    classify_codes, cmd_train, encode_means, evaluate_model, parse_config, ClassifierConfig, CodeBox, RunConfig,
};
use rvae::linalg::DenseMatrix;
use rvae::model::{kl_mc, kl_mc_terms, RvaeModel};
use rvae::nn::{Activation, Layer, Mlp};
use rvae::oracles::{finite_diff_jacobian, gaussian_kl_closed_form, gof_radial_chisquare, grid_geodesic, AnalyticImmersion};
use rvae::parallel::configure_threads;
use rvae::rbf::RbfNetwork;
use rvae::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

/// State shared by the training-based criteria.
struct Shared {
    root: PathBuf,
    /// Seed-0 Riemannian toy model and its configuration.
    toy_model: Option<(RvaeModel, RunConfig)>,
}

const ACTIVATIONS: [Activation; 5] =
    [Activation::Elu, Activation::Softplus, Activation::Linear, Activation::Relu, Activation::Tanh];

fn norm_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    diff / analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8)
}

fn random_net(rng: &mut ChaCha8Rng) -> Result<Mlp> {
    let depth = rng.random_range(1..=4);
    let mut width = rng.random_range(1..=4);
    let mut layers = Vec::new();
    for _ in 0..depth {
        let units = rng.random_range(1..=6);
        let data = (0..units * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        layers.push(Layer {
            weights: DenseMatrix::from_vec(units, width, data)?,
            bias: (0..units).map(|_| rng.random_range(-0.5..0.5)).collect(),
            activation: ACTIVATIONS[rng.random_range(0..ACTIVATIONS.len())],
        });
        width = units;
    }
    Mlp::new(layers)
}

fn near_kink(net: &Mlp, z: &[f64]) -> Result<bool> {
    let trace = net.forward_trace(z)?;
    Ok(net.layers().iter().zip(&trace.pre_activations).any(|(l, pre)| {
        matches!(l.activation, Activation::Elu | Activation::Relu) && pre.iter().any(|a| a.abs() < 1e-3)
    }))
}

fn jacobians() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_input, mut worst_param, mut worst_rbf) = (0.0f64, 0.0f64, 0.0f64);
    let mut accepted = 0;
    while accepted < 100 {
        let net = random_net(&mut rng)?;
        let z: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        if near_kink(&net, &z)? {
            continue;
        }
        accepted += 1;
        let numeric = finite_diff_jacobian(|p| net.forward(p).unwrap(), &z, 1e-5);
        worst_input = worst_input.max(norm_rel(net.input_jacobian(&z)?.data(), numeric.data()));

        let upstream: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: Vec<f64> = net.param_gradients(&z, &upstream)?.slices().concat();
        let mut numeric = Vec::with_capacity(analytic.len());
        let h = 1e-5;
        let n_slices = net.clone().param_slices_mut().len();
        for s in 0..n_slices {
            let len = net.clone().param_slices_mut()[s].len();
            for k in 0..len {
                let loss = |delta: f64| {
                    let mut m = net.clone();
                    m.param_slices_mut()[s][k] += delta;
                    m.forward(&z).unwrap().iter().zip(&upstream).map(|(y, u)| y * u).sum::<f64>()
                };
                numeric.push((loss(h) - loss(-h)) / (2.0 * h));
            }
        }
        worst_param = worst_param.max(norm_rel(&analytic, &numeric));

        // spread network of the decoder
        let k = rng.random_range(1..6);
        let centers = DenseMatrix::from_vec(k, 2, (0..2 * k).map(|_| rng.random_range(-2.0..2.0)).collect())?;
        let lw = DenseMatrix::from_vec(3, k, (0..3 * k).map(|_| rng.random_range(-3.0..3.0)).collect())?;
        let bandwidth = rng.random_range(0.1..3.0);
        // within a kernel width of a center; far out the jacobian underflows to round-off
        let reach = 1.5 / f64::sqrt(bandwidth);
        let anchor = centers.row(rng.random_range(0..k)).to_vec();
        let zr = [anchor[0] + rng.random_range(-reach..reach), anchor[1] + rng.random_range(-reach..reach)];
        let rbf = RbfNetwork::new(centers, bandwidth, lw, vec![0.05; 3])?;
        let numeric = finite_diff_jacobian(|p| rbf.sigma(p).unwrap(), &zr, 1e-5);
        worst_rbf = worst_rbf.max(norm_rel(rbf.sigma_jacobian(&zr)?.data(), numeric.data()));
    }
    let worst = worst_input.max(worst_param).max(worst_rbf);
    verdict(
        worst < 1e-5,
        format!("100 configs, worst rel. error: input {worst_input:.1e}, params {worst_param:.1e}, spread net {worst_rbf:.1e}"),
    )
}

fn euclidean_reduction() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let imm = AnalyticImmersion::identity_pad(2, 4);
    let opts = GeodesicOptions::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = rng.random_range(0.1..2.0);
        let hk = HeatKernel::new(mu.clone(), t)?;
        let got = heat_kernel_logpdf(&hk, &z, &imm, &opts)?;
        let sq: f64 = z.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum();
        let want = -(2.0 * std::f64::consts::PI * t).ln() - sq / (2.0 * t);
        worst = worst.max((got - want).abs());
    }
    verdict(worst < 1e-3, format!("100 points, worst abs. error {worst:.1e}"))
}

fn kl_consistency() -> Result<Verdict> {
    let opts = GeodesicOptions::default();
    let saddle = AnalyticImmersion::Saddle;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let q = HeatKernel::new(vec![0.3, -0.2], 0.4)?;
    let self_kl = kl_mc(&q, &q, &saddle, 50, &opts, &mut rng)?;

    let n = 10_000;
    let mut pairs = vec![(vec![1.0, 0.0], 1.0, vec![0.0, 0.0], 1.0)];
    while pairs.len() < 10 {
        let d = rng.random_range(2..=3);
        let mut draw = || (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (mq, mp) = (draw(), draw());
        pairs.push((mq, rng.random_range(0.3..2.0), mp, rng.random_range(0.3..2.0)));
    }
    let mut worst_z = 0.0f64;
    let mut anchor = (0.0, 0.0);
    for (i, (mq, tq, mp, tp)) in pairs.iter().enumerate() {
        let d = mq.len();
        let imm = AnalyticImmersion::identity_pad(d, d + 2);
        let (hq, hp) = (HeatKernel::new(mq.clone(), *tq)?, HeatKernel::new(mp.clone(), *tp)?);
        let samples = (0..n).map(|_| Ok(sample_posterior(&hq, &imm, 10, &mut rng)?.z)).collect::<Result<Vec<_>>>()?;
        let terms = kl_mc_terms(&hq, &hp, &imm, &samples, &opts)?;
        let mean = terms.iter().sum::<f64>() / n as f64;
        let sd = (terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        let eye = |s: f64| DenseMatrix::from_diag(&vec![s; d]);
        let exact = gaussian_kl_closed_form(mq, &eye(*tq), mp, &eye(*tp))?;
        worst_z = worst_z.max((mean - exact).abs() / se.max(1e-300));
        if i == 0 {
            anchor = (mean, exact);
        }
    }

    let qs = HeatKernel::new(vec![0.2, 0.1], 0.3)?;
    let ps = HeatKernel::new(vec![-0.4, 0.5], 0.9)?;
    let samples = (0..200).map(|_| Ok(sample_posterior(&qs, &saddle, 10, &mut rng)?.z)).collect::<Result<Vec<_>>>()?;
    let cancelled = kl_mc_terms(&qs, &ps, &saddle, &samples, &opts)?.iter().sum::<f64>() / 200.0;
    let mut direct = 0.0;
    for z in &samples {
        let lq = fit_geodesic(&saddle, z, qs.center(), &opts)?.length;
        let lp = fit_geodesic(&saddle, z, ps.center(), &opts)?.length;
        direct += (logpdf_with_distance(&qs, z, &saddle, lq * lq)? - logpdf_with_distance(&ps, z, &saddle, lp * lp)?) / 200.0;
    }
    let gap = (cancelled - direct).abs();
    verdict(
        self_kl == 0.0 && worst_z < 3.0 && gap < 1e-8,
        format!(
            "(a) KL(q,q) = {self_kl}; (b) worst |MC - exact| = {worst_z:.2} SE, anchor {:.4} vs {:.4}; (c) gap {gap:.1e}",
            anchor.0, anchor.1
        ),
    )
}

fn sampler_density() -> Result<Verdict> {
    let a = DenseMatrix::from_rows(&[&[2.0, 0.5], &[0.0, 1.0], &[0.3, -0.4]]);
    let imm = AnalyticImmersion::Linear(a.clone());
    let hk = HeatKernel::new(vec![0.5, -1.0], 0.8)?;
    let n = 10_000;
    let paths = sample_prior_paths(&hk, &imm, 10, n, 4)?;
    let mut flat = Vec::with_capacity(2 * n);
    paths.iter().for_each(|p| flat.extend_from_slice(p.endpoint()));
    let samples = DenseMatrix::from_vec(n, 2, flat)?;

    let g = a.transpose().matmul(&a)?;
    let det = g.get(0, 0) * g.get(1, 1) - g.get(0, 1) * g.get(1, 0);
    let t = hk.time();
    let want = [[t * g.get(1, 1) / det, -t * g.get(0, 1) / det], [-t * g.get(1, 0) / det, t * g.get(0, 0) / det]];
    let mean: Vec<f64> = (0..2).map(|k| (0..n).map(|i| samples.get(i, k)).sum::<f64>() / n as f64).collect();
    let mut worst_se = 0.0f64;
    let mut worst_cov = 0.0f64;
    for i in 0..2 {
        worst_se = worst_se.max((mean[i] - hk.center()[i]).abs() / (want[i][i] / n as f64).sqrt());
        for j in 0..2 {
            let c = (0..n).map(|r| (samples.get(r, i) - mean[i]) * (samples.get(r, j) - mean[j])).sum::<f64>() / (n - 1) as f64;
            worst_cov = worst_cov.max((c - want[i][j]).abs() / want[i][j].abs());
        }
    }
    let half_log_det = 0.5 * pullback_metric(&imm, hk.center())?.log_det();
    let p = gof_radial_chisquare(
        &samples,
        |z| heat_kernel_logpdf_straight(&hk, z, &imm, 4).unwrap() + half_log_det,
        hk.center(),
        10,
    )?;
    verdict(
        worst_se < 3.0 && worst_cov < 0.05 && p > 0.01,
        format!("mean off by {worst_se:.2} SE, covariance rel. error {worst_cov:.3}, radial chi-square p = {p:.3}"),
    )
}

fn geodesic_solver() -> Result<Verdict> {
    let saddle = AnalyticImmersion::Saddle;
    let flat = AnalyticImmersion::identity_pad(2, 5);
    let opts = GeodesicOptions::default();
    let bounds = [(-2.0, 2.0), (-2.0, 2.0)];
    let pairs = [([-1.0, 0.3], [1.0, 0.6]), ([-1.2, -1.0], [0.5, 1.3]), ([0.2, -1.5], [0.3, 1.5])];
    let (mut worst_grid, mut worst_energy, mut worst_coef) = (0.0f64, 0.0f64, 0.0f64);
    let mut all_converged = true;
    for (a, b) in pairs {
        let g = fit_geodesic(&saddle, &a, &b, &opts)?;
        let grid = grid_geodesic(&saddle, bounds, 200, &a, &b)?;
        worst_grid = worst_grid.max((g.length - grid).abs() / grid);
        all_converged &= g.converged;
        let half_sq = 0.5 * g.length * g.length;
        worst_energy = worst_energy.max((g.energy - half_sq).abs() / half_sq);
        let f = fit_geodesic(&flat, &a, &b, &opts)?;
        worst_coef = worst_coef.max(f.coefficients().data().iter().map(|c| c * c).sum::<f64>().sqrt());
    }
    verdict(
        worst_grid < 0.03 && worst_energy < 0.01 && worst_coef < 1e-4 && all_converged,
        format!(
            "vs grid {:.2}%, |E - L²/2| {:.3}%, flat coefficients {worst_coef:.1e}, converged {all_converged}",
            100.0 * worst_grid,
            100.0 * worst_energy
        ),
    )
}

fn reparameterization() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let base = AnalyticImmersion::Saddle;
    let opts = GeodesicOptions::default();
    let (mut worst_metric, mut worst_length) = (0.0f64, 0.0f64);
    let mut made = 0;
    while made < 3 {
        let r = DenseMatrix::from_vec(2, 2, (0..4).map(|_| rng.random_range(-1.5..1.5)).collect())?;
        let det = r.get(0, 0) * r.get(1, 1) - r.get(0, 1) * r.get(1, 0);
        if det.abs() < 0.3 {
            continue;
        }
        made += 1;
        let inv = DenseMatrix::from_rows(&[&[r.get(1, 1) / det, -r.get(0, 1) / det], &[-r.get(1, 0) / det, r.get(0, 0) / det]]);
        let moved = Reparameterized::new(&base, r.clone())?;
        for _ in 0..20 {
            let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let want = r.transpose().matmul(&base.metric_matrix(&r.matvec(&z)?)?)?.matmul(&r)?;
            worst_metric = worst_metric.max(norm_rel(want.data(), moved.metric_matrix(&z)?.data()));
        }
        for _ in 0..3 {
            let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let direct = fit_geodesic(&base, &a, &b, &opts)?.length;
            let pulled = fit_geodesic(&moved, &inv.matvec(&a)?, &inv.matvec(&b)?, &opts)?.length;
            worst_length = worst_length.max((direct - pulled).abs() / direct);
        }
    }
    verdict(
        worst_metric < 1e-6 && worst_length < 0.01,
        format!("metric rel. error {worst_metric:.1e}, length rel. error {:.3}%", 100.0 * worst_length),
    )
}

fn toy_config(root: &Path, mode: &str, seed: u64) -> Result<RunConfig> {
    let flags = [
        ("dataset", "toy".to_string()),
        ("mode", mode.to_string()),
        ("seed", seed.to_string()),
        ("out_dir", root.join(format!("toy-{mode}-{seed}")).display().to_string()),
    ];
    parse_config(None, &flags.map(|(k, v)| (k.to_string(), v)))
}

fn desk_comparison(shared: &mut Shared) -> Result<Verdict> {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let mut scores = Vec::new();
        for mode in ["riemannian", "euclidean_baseline"] {
            let cfg = toy_config(&shared.root, mode, seed)?;
            let (_, test) = cfg.load_split()?;
            let out = cmd_train(&cfg)?;
            let [neg_elbo, ..] = evaluate_model(&out.model, &test, &cfg.train.elbo_options(), cfg.train.seed)?;
            scores.push(neg_elbo);
            if seed == 0 && mode == "riemannian" {
                shared.toy_model = Some((out.model, cfg));
            }
        }
        wins += usize::from(scores[0] < scores[1]);
        rows.push(format!("seed {seed}: {:.2} vs {:.2}", scores[0], scores[1]));
    }
    verdict(wins >= 4, format!("riemannian better in {wins}/5 ({})", rows.join("; ")))
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

fn classifier_comparison(shared: &Shared) -> Result<Verdict> {
    let dir = mnist_dir();
    let dataset = format!(
        "idx:{}:{}",
        dir.join("images-idx3-ubyte").display(),
        dir.join("labels-idx1-ubyte").display()
    );
    let mut f1 = Vec::new();
    for mode in ["riemannian", "euclidean_baseline"] {
        // codes come from the encoder mean, which is frozen after stage one
        let flags = [
            ("dataset", dataset.clone()),
            ("mode", mode.to_string()),
            ("hidden", "64,128".to_string()),
            ("stage2_epochs", "0".to_string()),
            ("out_dir", shared.root.join(format!("mnist-{mode}")).display().to_string()),
        ];
        let cfg = parse_config(None, &flags.map(|(k, v)| (k.to_string(), v)))?;
        let model = cmd_train(&cfg)?.model;
        let all: Dataset = cfg.dataset.load(cfg.data_seed)?;
        let codes = encode_means(&model, &all)?;
        let flat: Vec<f64> = codes.concat();
        let codes = DenseMatrix::from_vec(all.len(), cfg.latent_dim, flat)?;
        let scores = (0..5)
            .map(|s| Ok(classify_codes(&codes, &all.labels, 10, &ClassifierConfig::default(), s)?.macro_f1))
            .collect::<Result<Vec<f64>>>()?;
        f1.push(scores);
    }
    let wins = f1[0].iter().zip(&f1[1]).filter(|(r, e)| r >= e).count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
    verdict(wins >= 4, format!("riemannian >= baseline in {wins}/5 (F1 {} vs {})", fmt(&f1[0]), fmt(&f1[1])))
}

fn toy_model(shared: &mut Shared) -> Result<&(RvaeModel, RunConfig)> {
    if shared.toy_model.is_none() {
        let cfg = toy_config(&shared.root, "riemannian", 0)?;
        shared.toy_model = Some((cmd_train(&cfg)?.model, cfg));
    }
    Ok(shared.toy_model.as_ref().expect("just set"))
}

fn containment(shared: &mut Shared) -> Result<Verdict> {
    let (model, cfg) = toy_model(shared)?;
    let (train, _) = cfg.load_split()?;
    let codebox = CodeBox::around(&encode_means(model, &train)?, 2.0)?;
    let imm = model.immersion()?;
    let steps = cfg.train.walk_steps;
    let at_t = sample_prior_paths(&model.prior, &imm, steps, 200, 9)?;
    let at_10t = sample_prior_paths(&model.prior.scaled_time(10.0)?, &imm, steps, 200, 10)?;
    let inside = codebox.endpoint_fraction_inside(&at_t);
    let outside = codebox.path_fraction_outside(&at_10t);
    verdict(
        inside >= 0.9 && outside <= 0.25,
        format!("endpoints inside at t: {:.1}%, path points outside at 10t: {:.1}%", 100.0 * inside, 100.0 * outside),
    )
}

fn sampling_scaling(shared: &mut Shared) -> Result<Verdict> {
    let (model, cfg) = toy_model(shared)?;
    let imm = model.immersion()?;
    let steps = cfg.train.walk_steps;
    let best = |k: usize| -> Result<f64> {
        let mut times = Vec::new();
        for rep in 0..5 {
            let start = Instant::now();
            sample_prior_paths(&model.prior, &imm, steps, k, rep)?;
            times.push(start.elapsed().as_secs_f64());
        }
        Ok(times.into_iter().fold(f64::INFINITY, f64::min))
    };
    best(50)?;
    let (single, double) = (best(400)?, best(800)?);
    let ratio = double / single;
    verdict((1.6..=2.4).contains(&ratio), format!("K 400 -> 800: {single:.3}s -> {double:.3}s, ratio {ratio:.2}"))
}

/// Runs the geodesic warm start once so a broken solver shows up here
/// rather than inside the training criteria.
fn solver_smoke() -> Result<()> {
    let init = GeodesicSpline::with_basis(&[-1.0, 0.0], &[1.0, 0.5], NaturalCubicBasis::snapped(4, 16))?;
    fit_geodesic_from(&AnalyticImmersion::Saddle, init, &GeodesicOptions::default())?;
    Ok(())
}

fn main() {
    configure_threads().expect("thread pool");
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut shared = Shared { root: tmp.path().to_path_buf(), toy_model: None };
    solver_smoke().expect("geodesic solver");

    let names = [
        "jacobian correctness",
        "euclidean reduction of the heat kernel",
        "KL consistency",
        "sampler-density consistency",
        "geodesic solver",
        "reparameterization covariance",
        "toy data: riemannian vs baseline neg. ELBO",
        "MNIST codes: classifier macro F1",
        "prior sampler containment",
        "sampling time linear in paths",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = match id {
            1 => jacobians(),
            2 => euclidean_reduction(),
            3 => kl_consistency(),
            4 => sampler_density(),
            5 => geodesic_solver(),
            6 => reparameterization(),
            7 => desk_comparison(&mut shared),
            8 => classifier_comparison(&shared),
            9 => containment(&mut shared),
            _ => sampling_scaling(&mut shared),
        };
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} {id:>2} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
