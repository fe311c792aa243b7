use crate::error::{check_len, Result, RvaeError};

/// Adam moment buffers for a fixed list of parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Default hyperparameters (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) for groups of
    /// the given lengths.
    pub fn new(group_lens: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: group_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: group_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_slices(groups: &[&[f64]]) -> Self {
        let lens: Vec<usize> = groups.iter().map(|g| g.len()).collect();
        Self::new(&lens)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        check_len("adam parameter groups", self.first.len(), params.len())?;
        check_len("adam gradient groups", self.first.len(), grads.len())?;
        for (g, (p, m)) in grads.iter().zip(params.iter().zip(&self.first)) {
            check_len("adam group length", m.len(), p.len())?;
            check_len("adam group length", m.len(), g.len())?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(RvaeError::numerical(format!(
                    "non-finite gradient at Adam step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
