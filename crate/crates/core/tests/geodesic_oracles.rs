use rvae::geometry::{fit_geodesic, fit_geodesic_from, GeodesicOptions, GeodesicSpline, NaturalCubicBasis};
use rvae::oracles::{grid_geodesic, AnalyticImmersion};

const BOUNDS: [(f64, f64); 2] = [(-2.0, 2.0), (-2.0, 2.0)];
const PAIRS: [([f64; 2], [f64; 2]); 3] = [([-1.0, 0.3], [1.0, 0.6]), ([-1.2, -1.0], [0.5, 1.3]), ([0.2, -1.5], [0.3, 1.5])];

#[test]
fn saddle_spline_length_matches_grid_search() {
    let imm = AnalyticImmersion::Saddle;
    for (a, b) in PAIRS {
        let g = fit_geodesic(&imm, &a, &b, &GeodesicOptions::default()).unwrap();
        let grid = grid_geodesic(&imm, BOUNDS, 200, &a, &b).unwrap();
        let rel = (g.length - grid).abs() / grid;
        assert!(g.converged, "{a:?} -> {b:?} did not converge");
        assert!(rel < 0.03, "{a:?} -> {b:?}: spline {} grid {grid}", g.length);
    }
}

#[test]
fn converged_geodesics_have_constant_speed() {
    let imm = AnalyticImmersion::Saddle;
    for (a, b) in PAIRS {
        let g = fit_geodesic(&imm, &a, &b, &GeodesicOptions::default()).unwrap();
        let half_sq = 0.5 * g.length * g.length;
        assert!((g.energy - half_sq).abs() / half_sq < 0.01, "E {} vs L²/2 {half_sq}", g.energy);
    }
}

#[test]
fn grid_refinement_approaches_the_spline_from_above() {
    let imm = AnalyticImmersion::Saddle;
    let (a, b) = PAIRS[1];
    let spline = fit_geodesic(&imm, &a, &b, &GeodesicOptions::default()).unwrap().length;
    let d: Vec<f64> = [50, 100, 200].iter().map(|&r| grid_geodesic(&imm, BOUNDS, r, &a, &b).unwrap()).collect();
    assert!(d[0] >= d[1] && d[1] >= d[2], "{d:?}");
    assert!((d[2] - spline).abs() < (d[0] - spline).abs() + 1e-12, "{d:?} vs {spline}");
}

#[test]
fn energy_trace_never_rises_after_warm_up() {
    let imm = AnalyticImmersion::Saddle;
    for (a, b) in PAIRS {
        let init = GeodesicSpline::with_basis(&a, &b, NaturalCubicBasis::snapped(8, 32)).unwrap();
        let (_, trace) = fit_geodesic_from(&imm, init, &GeodesicOptions::default()).unwrap();
        assert!(trace.len() > 20);
        for (i, w) in trace.windows(2).enumerate().skip(20) {
            assert!(w[1] <= w[0], "energy rose at iteration {}: {} -> {}", i + 1, w[0], w[1]);
        }
    }
}

#[test]
fn flat_metric_geodesics_are_straight() {
    let imm = AnalyticImmersion::identity_pad(2, 5);
    for (a, b) in PAIRS {
        let g = fit_geodesic(&imm, &a, &b, &GeodesicOptions::default()).unwrap();
        let norm = g.coefficients().data().iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!(norm < 1e-4, "coefficients {norm}");
        let straight = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!((g.length - straight).abs() < 1e-9 * straight.max(1.0));
    }
}
