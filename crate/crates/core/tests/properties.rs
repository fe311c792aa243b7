use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rvae::checkpoint::Checkpoint;
use rvae::data::{encode_idx, make_toy_manifold, parse_idx_pair, Dataset};
use rvae::geometry::{
    curve_length, fit_geodesic, pullback_metric, GeodesicOptions, GeodesicSpline, Immersion, Reparameterized,
};
use rvae::linalg::{symmetric_eigenvalues, DenseMatrix};
use rvae::model::{kl_mc, train, Mode, RvaeModel, TrainConfig};
use rvae::nn::{Activation, Layer, Mlp};
use rvae::oracles::{finite_diff_jacobian, AnalyticImmersion};
use rvae::rbf::RbfNetwork;

const ACTIVATIONS: [Activation; 5] =
    [Activation::Elu, Activation::Softplus, Activation::Linear, Activation::Relu, Activation::Tanh];

/// Random network of 1 to 4 layers with widths up to 6.
fn random_net(seed: u64) -> (Mlp, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=4);
    let input = rng.random_range(1..=4);
    let mut width = input;
    let mut layers = Vec::new();
    for _ in 0..depth {
        let units = rng.random_range(1..=6);
        let data = (0..units * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        layers.push(Layer {
            weights: DenseMatrix::from_vec(units, width, data).unwrap(),
            bias: (0..units).map(|_| rng.random_range(-0.5..0.5)).collect(),
            activation: ACTIVATIONS[rng.random_range(0..ACTIVATIONS.len())],
        });
        width = units;
    }
    (Mlp::new(layers).unwrap(), input)
}

/// True when a kinked activation sees a pre-activation within 1e-3 of 0.
fn near_kink(net: &Mlp, z: &[f64]) -> bool {
    let trace = net.forward_trace(z).unwrap();
    net.layers().iter().zip(&trace.pre_activations).any(|(l, pre)| {
        matches!(l.activation, Activation::Elu | Activation::Relu) && pre.iter().any(|a| a.abs() < 1e-3)
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn input_jacobian_matches_finite_differences(seed in any::<u64>(), zs in prop::collection::vec(-2.0f64..2.0, 4)) {
        let (net, d) = random_net(seed);
        let z = &zs[..d];
        prop_assume!(!near_kink(&net, z));
        let analytic = net.input_jacobian(z).unwrap();
        let numeric = finite_diff_jacobian(|p| net.forward(p).unwrap(), z, 1e-5);
        prop_assert!(rel_err(analytic.data(), numeric.data()) < 1e-5);
        // same weights and input, same bits
        prop_assert_eq!(net.forward(z).unwrap(), net.clone().forward(z).unwrap());
    }

    #[test]
    fn parameter_gradients_match_directional_differences(seed in any::<u64>(), zs in prop::collection::vec(-2.0f64..2.0, 4)) {
        let (net, d) = random_net(seed);
        let z = &zs[..d];
        prop_assume!(!near_kink(&net, z));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let upstream: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &Mlp| m.forward(z).unwrap().iter().zip(&upstream).map(|(y, u)| y * u).sum::<f64>();
        let grads = net.param_gradients(z, &upstream).unwrap();
        let direction: Vec<Vec<f64>> = grads.slices().iter().map(|g| g.iter().map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let analytic: f64 = grads.slices().iter().zip(&direction).map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()).sum();
        let shifted = |h: f64| {
            let mut m = net.clone();
            for (p, v) in m.param_slices_mut().into_iter().zip(&direction) {
                p.iter_mut().zip(v).for_each(|(x, dv)| *x += h * dv);
            }
            loss(&m)
        };
        let h = 1e-5;
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        prop_assume!(!shifted(h).is_nan());
        prop_assert!((analytic - numeric).abs() <= 1e-5 * analytic.abs().max(1e-3), "{} vs {}", analytic, numeric);
    }

    #[test]
    fn precision_never_drops_below_the_floor(
        seed in any::<u64>(),
        z in prop::collection::vec(-50.0f64..50.0, 2),
        floor in 1e-4f64..1.0,
        bandwidth in 1e-3f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..8);
        let centers = DenseMatrix::from_vec(k, 2, (0..2 * k).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let lw = DenseMatrix::from_vec(3, k, (0..3 * k).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let net = RbfNetwork::new(centers, bandwidth, lw, vec![floor; 3]).unwrap();
        for b in net.precision(&z).unwrap() {
            prop_assert!(b >= floor);
        }
    }

    #[test]
    fn metric_transforms_under_linear_reparameterization(entries in prop::collection::vec(-1.5f64..1.5, 4), z in prop::collection::vec(-1.0f64..1.0, 2)) {
        let r = DenseMatrix::from_vec(2, 2, entries).unwrap();
        let det = r.get(0, 0) * r.get(1, 1) - r.get(0, 1) * r.get(1, 0);
        prop_assume!(det.abs() > 0.1);
        let base = AnalyticImmersion::Saddle;
        let moved = Reparameterized::new(&base, r.clone()).unwrap();
        let g = base.metric_matrix(&r.matvec(&z).unwrap()).unwrap();
        let expected = r.transpose().matmul(&g).unwrap().matmul(&r).unwrap();
        let got = moved.metric_matrix(&z).unwrap();
        prop_assert!(rel_err(expected.data(), got.data()) < 1e-12);
    }

    #[test]
    fn spline_endpoints_are_exact(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3), coeffs in prop::collection::vec(-2.0f64..2.0, 12)) {
        let mut s = GeodesicSpline::new(&a, &b, 4).unwrap();
        s.coefficients_mut().data_mut().copy_from_slice(&coeffs);
        prop_assert_eq!(s.point(0.0).unwrap(), a);
        prop_assert_eq!(s.point(1.0).unwrap(), b);
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(any::<f64>(), 0..40), rows in 1usize..5) {
        let mut ck = Checkpoint::new();
        ck.push("a/b", vec![values.len() as u64], values.clone()).unwrap();
        let cols = values.len() / rows;
        ck.push("m", vec![rows as u64, cols as u64], values[..rows * cols].to_vec()).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.get("a/b").unwrap().data), bits(&values));
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn idx_round_trip_keeps_pixels_in_unit_range(pixels in prop::collection::vec(any::<u8>(), 12), labels in prop::collection::vec(0usize..10, 3)) {
        let features = DenseMatrix::from_vec(3, 4, pixels.iter().map(|&p| p as f64 / 255.0).collect()).unwrap();
        let ds = Dataset::new(features, labels.clone(), "prop").unwrap();
        let (img, lbl) = encode_idx(&ds, 2, 2).unwrap();
        let back = parse_idx_pair(&img, &lbl, "prop").unwrap();
        prop_assert_eq!(&back.labels, &labels);
        prop_assert!(back.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(back.features, ds.features);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn geodesic_lengths_agree_across_reparameterization(entries in prop::collection::vec(-1.5f64..1.5, 4)) {
        let r = DenseMatrix::from_vec(2, 2, entries).unwrap();
        let det = r.get(0, 0) * r.get(1, 1) - r.get(0, 1) * r.get(1, 0);
        prop_assume!(det.abs() > 0.3);
        let inv = DenseMatrix::from_rows(&[&[r.get(1, 1) / det, -r.get(0, 1) / det], &[-r.get(1, 0) / det, r.get(0, 0) / det]]);
        let base = AnalyticImmersion::Saddle;
        let moved = Reparameterized::new(&base, r).unwrap();
        let (a, b) = ([-0.8, 0.2], [0.7, 0.9]);
        let opts = GeodesicOptions::default();
        let direct = fit_geodesic(&base, &a, &b, &opts).unwrap().length;
        let pulled = fit_geodesic(&moved, &inv.matvec(&a).unwrap(), &inv.matvec(&b).unwrap(), &opts).unwrap().length;
        prop_assert!((direct - pulled).abs() / direct < 0.01, "{} vs {}", direct, pulled);
    }
}

/// Small Riemannian model trained once at the desk bandwidth.
fn trained() -> &'static (RvaeModel, Vec<Vec<f64>>) {
    static MODEL: OnceLock<(RvaeModel, Vec<Vec<f64>>)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = make_toy_manifold(120, 11).unwrap();
        let mut model = RvaeModel::new(Mode::Riemannian, data.dim(), 2, &[16, 32], 2).unwrap();
        let cfg = TrainConfig {
            stage1_epochs: 30,
            stage2_epochs: 2,
            batch_size: 40,
            geodesic: GeodesicOptions { n_basis: 3, n_segments: 8, max_iters: 10, ..Default::default() },
            rbf_bandwidth: 100.0,
            rbf_warmup_steps: 200,
            ..Default::default()
        };
        train(&mut model, &data, &cfg).unwrap();
        let codes = (0..data.len()).map(|i| model.encode_full(data.features.row(i)).unwrap().mean).collect();
        (model, codes)
    })
}

#[test]
fn trained_metric_is_positive_definite_everywhere() {
    let (model, codes) = trained();
    let imm = model.immersion().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in codes {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    for _ in 0..1000 {
        let z: Vec<f64> = (0..2)
            .map(|k| {
                let pad = hi[k] - lo[k];
                rng.random_range(lo[k] - pad..hi[k] + pad)
            })
            .collect();
        let metric = pullback_metric(&imm, &z).unwrap();
        let mut g = metric.matrix().clone();
        for k in 0..2 {
            g.add_at(k, k, metric.jitter_used());
        }
        let eig = symmetric_eigenvalues(&g).unwrap();
        assert!(eig.iter().all(|&e| e > 0.0), "eigenvalues {eig:?} at {z:?}");
    }
}

#[test]
fn variance_grows_far_from_the_codes() {
    let (model, codes) = trained();
    let net = model.precision_network().unwrap();
    let n = codes.len() as f64;
    let mean: Vec<f64> = (0..2).map(|k| codes.iter().map(|c| c[k]).sum::<f64>() / n).collect();
    let radius = codes
        .iter()
        .map(|c| ((c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let mean_sigma = |z: &[f64]| {
        let s = net.sigma(z).unwrap();
        s.iter().sum::<f64>() / s.len() as f64
    };
    let mut at_codes: Vec<f64> = codes.iter().map(|c| mean_sigma(c)).collect();
    at_codes.sort_by(|a, b| a.total_cmp(b));
    let median = at_codes[at_codes.len() / 2];
    for k in 0..64 {
        let angle = k as f64 * std::f64::consts::TAU / 64.0;
        let z = [mean[0] + 5.0 * radius * angle.cos(), mean[1] + 5.0 * radius * angle.sin()];
        assert!(mean_sigma(&z) >= 3.0 * median, "ring σ {} vs median {median}", mean_sigma(&z));
    }
}

#[test]
fn kl_of_a_kernel_with_itself_is_zero_on_a_trained_model() {
    let (model, _) = trained();
    let imm = model.immersion().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = GeodesicOptions { n_basis: 3, n_segments: 8, max_iters: 20, ..Default::default() };
    assert_eq!(kl_mc(&model.prior, &model.prior, &imm, 4, &opts, &mut rng).unwrap(), 0.0);
}

#[test]
fn straight_line_is_never_shorter_than_the_geodesic() {
    let (model, codes) = trained();
    let imm = model.immersion().unwrap();
    let opts = GeodesicOptions { n_basis: 4, n_segments: 16, max_iters: 200, ..Default::default() };
    for pair in codes.chunks(2).take(10) {
        let g = fit_geodesic(&imm, &pair[0], &pair[1], &opts).unwrap();
        let line = GeodesicSpline::new(&pair[0], &pair[1], 0).unwrap();
        let straight = curve_length(&imm, &line, opts.n_segments).unwrap();
        let curved = curve_length(&imm, &g, opts.n_segments).unwrap();
        assert!(curved <= straight * (1.0 + 1e-9), "{curved} > {straight}");
    }
}
