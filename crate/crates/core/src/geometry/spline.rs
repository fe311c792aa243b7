use crate::error::{check_len, Result, RvaeError};
use crate::linalg::{DenseMatrix, DenseVector};

/// Cardinal natural cubic splines on `[0, 1]`: basis function `i` is the
/// natural cubic spline equal to 1 at interior knot `i`, 0 at every other
/// knot and 0 at both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalCubicBasis {
    /// Knots including the two ends.
    knots: Vec<f64>,
    /// Second derivatives at every knot, one row per basis function.
    moments: Vec<DenseVector>,
}

impl NaturalCubicBasis {
    pub fn new(interior_knots: &[f64]) -> Result<Self> {
        let mut knots = Vec::with_capacity(interior_knots.len() + 2);
        knots.push(0.0);
        knots.extend_from_slice(interior_knots);
        knots.push(1.0);
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RvaeError::contract("spline knots must increase strictly inside (0, 1)"));
        }
        let moments = (0..interior_knots.len())
            .map(|i| {
                let mut y = vec![0.0; knots.len()];
                y[i + 1] = 1.0;
                natural_moments(&knots, &y)
            })
            .collect();
        Ok(NaturalCubicBasis { knots, moments })
    }

    pub fn uniform(n_basis: usize) -> Self {
        let knots: Vec<f64> = (1..=n_basis).map(|i| i as f64 / (n_basis + 1) as f64).collect();
        Self::new(&knots).expect("uniform knots are increasing")
    }

    /// Roughly uniform knots moved onto the grid `k / grid`, so that the
    /// trapezoid rule on that grid integrates each basis derivative exactly.
    /// Falls back to uniform knots when the grid is too coarse.
    pub fn snapped(n_basis: usize, grid: usize) -> Self {
        if grid < n_basis + 1 {
            return Self::uniform(n_basis);
        }
        let knots: Vec<f64> = (1..=n_basis)
            .map(|i| {
                let k = (grid as f64 * i as f64 / (n_basis + 1) as f64).round();
                k / grid as f64
            })
            .collect();
        Self::new(&knots).unwrap_or_else(|_| Self::uniform(n_basis))
    }

    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[1..self.knots.len() - 1]
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.knots.len() - 1;
        match self.knots.iter().position(|&k| k > s) {
            Some(0) => 0,
            Some(p) => (p - 1).min(n - 1),
            None => n - 1,
        }
    }

    /// Values and first derivatives of every basis function at `s`.
    pub fn eval(&self, s: f64) -> (DenseVector, DenseVector) {
        let j = self.segment(s);
        let (x0, x1) = (self.knots[j], self.knots[j + 1]);
        let h = x1 - x0;
        let (l, r) = (x1 - s, s - x0);
        let mut val = vec![0.0; self.len()];
        let mut der = vec![0.0; self.len()];
        for (i, m) in self.moments.iter().enumerate() {
            let y0 = if j == i + 1 { 1.0 } else { 0.0 };
            let y1 = if j + 1 == i + 1 { 1.0 } else { 0.0 };
            let (m0, m1) = (m[j], m[j + 1]);
            val[i] = m0 * l * l * l / (6.0 * h)
                + m1 * r * r * r / (6.0 * h)
                + (y0 - m0 * h * h / 6.0) * l / h
                + (y1 - m1 * h * h / 6.0) * r / h;
            der[i] = -m0 * l * l / (2.0 * h) + m1 * r * r / (2.0 * h) + (y1 - y0) / h - (m1 - m0) * h / 6.0;
        }
        (val, der)
    }
}

/// Second derivatives of the natural cubic interpolant (zero at both ends),
/// by the tridiagonal (Thomas) solve.
fn natural_moments(x: &[f64], y: &[f64]) -> DenseVector {
    let n = x.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let inner = n - 2;
    let mut diag = vec![0.0; inner];
    let mut upper = vec![0.0; inner];
    let mut rhs = vec![0.0; inner];
    for k in 0..inner {
        let j = k + 1;
        let h0 = x[j] - x[j - 1];
        let h1 = x[j + 1] - x[j];
        diag[k] = 2.0 * (h0 + h1);
        upper[k] = h1;
        rhs[k] = 6.0 * ((y[j + 1] - y[j]) / h1 - (y[j] - y[j - 1]) / h0);
    }
    // forward sweep; the sub-diagonal entry of row k is h_{k}
    for k in 1..inner {
        let lower = x[k + 1] - x[k];
        let w = lower / diag[k - 1];
        diag[k] -= w * upper[k - 1];
        rhs[k] -= w * rhs[k - 1];
    }
    for k in (0..inner).rev() {
        let next = if k + 1 < inner { m[k + 2] } else { 0.0 };
        m[k + 1] = (rhs[k] - upper[k] * next) / diag[k];
    }
    m
}

/// A latent curve `γ(s) = a + s(b − a) + Σ_i φ_i(s) c_i` whose deviation from
/// the straight line vanishes at both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicSpline {
    a: DenseVector,
    b: DenseVector,
    basis: NaturalCubicBasis,
    /// `n_basis × d`
    coefficients: DenseMatrix,
    pub energy: f64,
    pub length: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl GeodesicSpline {
    pub fn new(a: &[f64], b: &[f64], n_basis: usize) -> Result<Self> {
        Self::with_basis(a, b, NaturalCubicBasis::uniform(n_basis))
    }

    pub fn with_basis(a: &[f64], b: &[f64], basis: NaturalCubicBasis) -> Result<Self> {
        check_len("spline endpoints", a.len(), b.len())?;
        if a.iter().chain(b).any(|v| !v.is_finite()) {
            return Err(RvaeError::contract("spline endpoints must be finite"));
        }
        Ok(GeodesicSpline {
            coefficients: DenseMatrix::zeros(basis.len(), a.len()),
            a: a.to_vec(),
            b: b.to_vec(),
            basis,
            energy: 0.0,
            length: 0.0,
            converged: false,
            iterations: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn start(&self) -> &[f64] {
        &self.a
    }

    pub fn end(&self) -> &[f64] {
        &self.b
    }

    pub fn basis(&self) -> &NaturalCubicBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &DenseMatrix {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut DenseMatrix {
        &mut self.coefficients
    }

    /// Moves the endpoints, keeping the deviation coefficients (warm start).
    pub fn set_endpoints(&mut self, a: &[f64], b: &[f64]) -> Result<()> {
        check_len("spline start", self.dim(), a.len())?;
        check_len("spline end", self.dim(), b.len())?;
        self.a.copy_from_slice(a);
        self.b.copy_from_slice(b);
        Ok(())
    }

    fn check_param(s: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&s) {
            return Err(RvaeError::contract(format!("spline parameter {s} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn point(&self, s: f64) -> Result<DenseVector> {
        Self::check_param(s)?;
        let (val, _) = self.basis.eval(s);
        Ok(self.point_from(s, &val))
    }

    pub fn velocity(&self, s: f64) -> Result<DenseVector> {
        Self::check_param(s)?;
        let (_, der) = self.basis.eval(s);
        Ok(self.velocity_from(&der))
    }

    pub(crate) fn point_from(&self, s: f64, phi: &[f64]) -> DenseVector {
        // blended form so both ends are reproduced bit for bit
        let mut z: DenseVector = self.a.iter().zip(&self.b).map(|(a, b)| (1.0 - s) * a + s * b).collect();
        for (i, &p) in phi.iter().enumerate() {
            if p != 0.0 {
                z.iter_mut().zip(self.coefficients.row(i)).for_each(|(zi, c)| *zi += p * c);
            }
        }
        z
    }

    pub(crate) fn velocity_from(&self, dphi: &[f64]) -> DenseVector {
        let mut v: DenseVector = self.a.iter().zip(&self.b).map(|(a, b)| b - a).collect();
        for (i, &p) in dphi.iter().enumerate() {
            if p != 0.0 {
                v.iter_mut().zip(self.coefficients.row(i)).for_each(|(vi, c)| *vi += p * c);
            }
        }
        v
    }
}
