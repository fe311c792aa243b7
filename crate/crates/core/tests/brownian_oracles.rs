use rvae::brownian::{brownian_walk, sample_prior_paths, HeatKernel};
use rvae::linalg::DenseMatrix;
use rvae::oracles::AnalyticImmersion;
use rvae::parallel::stream_rng;

const N: usize = 10_000;

fn moments(points: &[Vec<f64>]) -> (Vec<f64>, DenseMatrix) {
    let n = points.len() as f64;
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let mut cov = DenseMatrix::zeros(d, d);
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov.add_at(i, j, (p[i] - mean[i]) * (p[j] - mean[j]) / (n - 1.0));
            }
        }
    }
    (mean, cov)
}

fn assert_cov_close(got: &DenseMatrix, want: &DenseMatrix) {
    let scale = (0..want.rows()).map(|i| want.get(i, i)).fold(0.0, f64::max);
    for i in 0..want.rows() {
        for j in 0..want.cols() {
            // off-diagonals near zero are compared against the diagonal scale
            let tol = 0.05 * want.get(i, j).abs().max(0.2 * scale);
            assert!((got.get(i, j) - want.get(i, j)).abs() < tol, "({i},{j}): {} vs {}", got.get(i, j), want.get(i, j));
        }
    }
}

#[test]
fn constant_metric_endpoints_follow_the_closed_form() {
    let a = DenseMatrix::from_rows(&[&[2.0, 0.5], &[0.0, 1.0], &[0.3, -0.4]]);
    let imm = AnalyticImmersion::Linear(a.clone());
    let hk = HeatKernel::new(vec![0.5, -1.0], 0.8).unwrap();
    let paths = sample_prior_paths(&hk, &imm, 10, N, 3).unwrap();
    let ends: Vec<Vec<f64>> = paths.iter().map(|p| p.endpoint().to_vec()).collect();
    let (mean, cov) = moments(&ends);

    let g = a.transpose().matmul(&a).unwrap();
    let det = g.get(0, 0) * g.get(1, 1) - g.get(0, 1) * g.get(1, 0);
    let t = hk.time();
    let want = DenseMatrix::from_rows(&[
        &[t * g.get(1, 1) / det, -t * g.get(0, 1) / det],
        &[-t * g.get(1, 0) / det, t * g.get(0, 0) / det],
    ]);
    for k in 0..2 {
        let se = (want.get(k, k) / N as f64).sqrt();
        assert!((mean[k] - hk.center()[k]).abs() < 3.0 * se, "mean {k}: {} vs {}", mean[k], hk.center()[k]);
    }
    assert_cov_close(&cov, &want);
}

#[test]
fn many_small_steps_match_one_large_step() {
    let imm = AnalyticImmersion::identity_pad(2, 4);
    let (start, total) = ([0.0, 0.0], 1.5);
    let run = |steps: usize, stream_base: u64| -> Vec<Vec<f64>> {
        (0..N as u64)
            .map(|k| {
                let mut rng = stream_rng(11, stream_base + k);
                brownian_walk(&imm, &start, total, steps, &mut rng).unwrap().pop().unwrap()
            })
            .collect()
    };
    let (_, one) = moments(&run(1, 0));
    let (_, many) = moments(&run(25, N as u64));
    assert_cov_close(&many, &one);
    assert_cov_close(&one, &DenseMatrix::from_rows(&[&[total, 0.0], &[0.0, total]]));
}
