//! Inhibitory forgetting gate.
//!
//! Each excitatory unit `h_i` gets one inhibitory weight `w_i`. The gate is
//!
//! ```text
//! σ     = sigmoid(ρ · h ⊙ w)
//! h_out = h + h ⊙ σ      (shortcut)
//! h_out = h ⊙ σ          (no shortcut)
//! ```
//!
//! With `w = 0` every gate sits at 0.5. The running mean of σ over a
//! measurement pass is the unit's importance Ω.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct GateOutput {
    pub h_out: Matrix,
    pub sigma: Matrix,
}

#[derive(Debug, Clone)]
pub struct GateGrads {
    /// Gradient w.r.t. the gate input `h`.
    pub grad_h: Matrix,
    /// Per-sample gradient w.r.t. the inhibitory weights; row sums over
    /// the batch give the batch gradient.
    pub grad_w_per_sample: Matrix,
}

impl GateGrads {
    pub fn grad_w(&self) -> Vec<f64> {
        self.grad_w_per_sample.col_sums()
    }
}

/// Gate forward pass over a batch `h` (batch × N).
pub fn gate_forward(h: &Matrix, weights: &[f64], rho: f64, shortcut: bool) -> GateOutput {
    assert_eq!(h.cols(), weights.len());
    let n = weights.len();
    let mut sigma = Matrix::zeros(h.rows(), n);
    let mut h_out = Matrix::zeros(h.rows(), n);
    for r in 0..h.rows() {
        let hr = h.row(r);
        let sr = sigma.row_mut(r);
        for i in 0..n {
            sr[i] = sigmoid(rho * hr[i] * weights[i]);
        }
        let sr = sigma.row(r);
        let or = h_out.row_mut(r);
        for i in 0..n {
            let gated = hr[i] * sr[i];
            or[i] = if shortcut { hr[i] + gated } else { gated };
        }
    }
    GateOutput { h_out, sigma }
}

/// Chain rule through the gate.
///
/// `upstream` is dL/dh_out. `sigma_grad`, when given, is an additional
/// direct dL/dσ (from regularizers on the gate values).
pub fn gate_backward(
    upstream: &Matrix,
    h: &Matrix,
    sigma: &Matrix,
    weights: &[f64],
    rho: f64,
    shortcut: bool,
    sigma_grad: Option<&Matrix>,
) -> GateGrads {
    let (b, n) = h.shape();
    assert_eq!(upstream.shape(), (b, n));
    assert_eq!(sigma.shape(), (b, n));
    let identity = if shortcut { 1.0 } else { 0.0 };
    let mut grad_h = Matrix::zeros(b, n);
    let mut grad_w = Matrix::zeros(b, n);
    for r in 0..b {
        let (ur, hr, sr) = (upstream.row(r), h.row(r), sigma.row(r));
        let extra = sigma_grad.map(|g| g.row(r));
        let gh = grad_h.row_mut(r);
        let mut gw_row = vec![0.0; n];
        for i in 0..n {
            // dL/dσ through h_out = .. + h·σ, plus any direct term
            let mut g_sigma = ur[i] * hr[i];
            if let Some(e) = extra {
                g_sigma += e[i];
            }
            // dσ/dz with z = ρ·h·w
            let dz = g_sigma * sr[i] * (1.0 - sr[i]) * rho;
            gh[i] = ur[i] * (identity + sr[i]) + dz * weights[i];
            gw_row[i] = dz * hr[i];
        }
        grad_w.row_mut(r).copy_from_slice(&gw_row);
    }
    GateGrads {
        grad_h,
        grad_w_per_sample: grad_w,
    }
}

/// Inhibitory weights, cached gate values and accumulated importance of one
/// forgetting layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingLayerState {
    weights: Vec<f64>,
    rho: f64,
    shortcut: bool,
    #[serde(skip)]
    sigma_cache: Option<Matrix>,
    omega: Vec<f64>,
    omega_sum: Vec<f64>,
    omega_count: usize,
}

impl ForgettingLayerState {
    /// A gate over `n` units with all inhibitory weights at zero.
    pub fn new(n: usize, rho: f64, shortcut: bool) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be > 0, got {rho}")));
        }
        Ok(Self {
            weights: vec![0.0; n],
            rho,
            shortcut,
            sigma_cache: None,
            omega: vec![0.0; n],
            omega_sum: vec![0.0; n],
            omega_count: 0,
        })
    }

    pub fn with_weights(weights: Vec<f64>, rho: f64, shortcut: bool) -> Result<Self> {
        let mut s = Self::new(weights.len(), rho, shortcut)?;
        s.weights = weights;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn shortcut(&self) -> bool {
        self.shortcut
    }

    pub fn sigma_cache(&self) -> Option<&Matrix> {
        self.sigma_cache.as_ref()
    }

    /// Neuron importance Ω: mean gate value over all accumulated samples.
    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn omega_count(&self) -> usize {
        self.omega_count
    }

    /// Gate a batch and keep σ for a later [`backward`](Self::backward).
    pub fn forward(&mut self, h: &Matrix) -> Result<Matrix> {
        self.check_width(h)?;
        let out = gate_forward(h, &self.weights, self.rho, self.shortcut);
        self.sigma_cache = Some(out.sigma);
        Ok(out.h_out)
    }

    /// Gradients w.r.t. `h` and the inhibitory weights (summed over the batch).
    pub fn backward(&self, upstream: &Matrix, h: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let sigma = self.sigma_cache.as_ref().ok_or(Error::MissingCache)?;
        self.check_width(h)?;
        if upstream.shape() != h.shape() || sigma.shape() != h.shape() {
            return Err(Error::Shape {
                layer: 0,
                expected: format!("{:?}", sigma.shape()),
                actual: format!("{:?}/{:?}", upstream.shape(), h.shape()),
            });
        }
        let g = gate_backward(upstream, h, sigma, &self.weights, self.rho, self.shortcut, None);
        let gw = g.grad_w();
        Ok((g.grad_h, gw))
    }

    /// Fold a batch of gate values into the running importance.
    pub fn accumulate_importance(&mut self, sigma_batch: &Matrix) {
        assert_eq!(sigma_batch.cols(), self.len());
        for row in sigma_batch.row_iter() {
            for (s, x) in self.omega_sum.iter_mut().zip(row) {
                *s += x;
            }
        }
        self.omega_count += sigma_batch.rows();
        if self.omega_count > 0 {
            let c = self.omega_count as f64;
            for (o, s) in self.omega.iter_mut().zip(&self.omega_sum) {
                *o = (s / c).clamp(0.0, 1.0);
            }
        }
    }

    pub fn reset_importance(&mut self) {
        self.omega.iter_mut().for_each(|x| *x = 0.0);
        self.omega_sum.iter_mut().for_each(|x| *x = 0.0);
        self.omega_count = 0;
    }

    fn check_width(&self, h: &Matrix) -> Result<()> {
        if h.cols() != self.len() {
            return Err(Error::Shape {
                layer: 0,
                expected: format!("{} columns", self.len()),
                actual: format!("{} columns", h.cols()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(lo, hi))
    }

    #[test]
    fn zero_weights_half_gate() {
        let mut rng = Rng::new(1);
        let h = random(4, 6, 0.0, 3.0, &mut rng);
        let out = gate_forward(&h, &[0.0; 6], 10.0, true);
        assert!(out.sigma.data().iter().all(|&s| s == 0.5));
        for (o, x) in out.h_out.data().iter().zip(h.data()) {
            assert_eq!(*o, 1.5 * x);
        }
    }

    #[test]
    fn zero_input_half_gate_zero_output() {
        let h = Matrix::zeros(2, 3);
        let out = gate_forward(&h, &[5.0, -2.0, 0.3], 10.0, true);
        assert!(out.sigma.data().iter().all(|&s| s == 0.5));
        assert!(out.h_out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn saturation_limits() {
        let h = Matrix::row_vector(&[2.0, 2.0]);
        let w = [1e3, -1e3];
        let on = gate_forward(&h, &w, 10.0, true);
        assert!((on.h_out.get(0, 0) - 4.0).abs() < 1e-12);
        assert!((on.h_out.get(0, 1) - 2.0).abs() < 1e-12);
        let off = gate_forward(&h, &w, 10.0, false);
        assert!((off.h_out.get(0, 0) - 2.0).abs() < 1e-12);
        assert!(off.h_out.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn backward_at_zero_weights() {
        let mut rng = Rng::new(2);
        let h = random(3, 4, 0.1, 2.0, &mut rng);
        let mut st = ForgettingLayerState::new(4, 10.0, true).unwrap();
        st.forward(&h).unwrap();
        let up = Matrix::filled(3, 4, 1.0);
        let (gh, _) = st.backward(&up, &h).unwrap();
        assert!(gh.data().iter().all(|&g| g == 1.5));
    }

    #[test]
    fn zero_input_zero_weight_grad() {
        let h = Matrix::zeros(3, 2);
        let st = {
            let mut s = ForgettingLayerState::with_weights(vec![0.7, -0.4], 5.0, true).unwrap();
            s.forward(&h).unwrap();
            s
        };
        let (_, gw) = st.backward(&Matrix::filled(3, 2, 0.9), &h).unwrap();
        assert_eq!(gw, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_without_forward_errors() {
        let st = ForgettingLayerState::new(2, 1.0, true).unwrap();
        let h = Matrix::zeros(1, 2);
        assert!(matches!(st.backward(&h, &h), Err(Error::MissingCache)));
    }

    #[test]
    fn rejects_nonpositive_rho() {
        assert!(ForgettingLayerState::new(3, 0.0, true).is_err());
        assert!(ForgettingLayerState::new(3, -1.0, true).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        // scalar objective: sum(c ⊙ h_out) for a fixed random c
        let mut rng = Rng::new(3);
        for &shortcut in &[true, false] {
            let h = random(5, 6, -1.0, 2.0, &mut rng);
            let c = random(5, 6, -1.0, 1.0, &mut rng);
            let w: Vec<f64> = (0..6).map(|_| rng.uniform(-0.5, 0.5)).collect();
            let rho = 3.0;
            let obj = |h: &Matrix, w: &[f64]| -> f64 {
                let o = gate_forward(h, w, rho, shortcut);
                o.h_out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
            };
            let out = gate_forward(&h, &w, rho, shortcut);
            let g = gate_backward(&c, &h, &out.sigma, &w, rho, shortcut, None);
            let eps = 1e-6;
            for k in 0..h.data().len() {
                let mut hp = h.clone();
                hp.data_mut()[k] += eps;
                let mut hm = h.clone();
                hm.data_mut()[k] -= eps;
                let fd = (obj(&hp, &w) - obj(&hm, &w)) / (2.0 * eps);
                let an = g.grad_h.data()[k];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "h[{k}] {an} vs {fd}");
            }
            let gw = g.grad_w();
            for i in 0..6 {
                let mut wp = w.clone();
                wp[i] += eps;
                let mut wm = w.clone();
                wm[i] -= eps;
                let fd = (obj(&h, &wp) - obj(&h, &wm)) / (2.0 * eps);
                assert!((fd - gw[i]).abs() <= 1e-6 * gw[i].abs().max(1e-3), "w[{i}] {} vs {fd}", gw[i]);
            }
        }
    }

    #[test]
    fn importance_constant_batch() {
        let mut st = ForgettingLayerState::new(3, 1.0, true).unwrap();
        st.accumulate_importance(&Matrix::filled(4, 3, 0.7));
        for &o in st.omega() {
            assert!((o - 0.7).abs() < 1e-15);
        }
        assert_eq!(st.omega_count(), 4);
    }

    #[test]
    fn importance_two_batches() {
        let mut st = ForgettingLayerState::new(2, 1.0, true).unwrap();
        st.accumulate_importance(&Matrix::filled(5, 2, 0.2));
        st.accumulate_importance(&Matrix::filled(5, 2, 0.8));
        for &o in st.omega() {
            assert!((o - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn streaming_equals_one_shot_mean() {
        let mut rng = Rng::new(9);
        let mut st = ForgettingLayerState::new(5, 1.0, true).unwrap();
        let mut all = Vec::new();
        for size in [3, 7, 1, 12] {
            let b = random(size, 5, 0.0, 1.0, &mut rng);
            for r in b.row_iter() {
                all.push(r.to_vec());
            }
            st.accumulate_importance(&b);
        }
        for i in 0..5 {
            let mean = all.iter().map(|r| r[i]).sum::<f64>() / all.len() as f64;
            assert!((st.omega()[i] - mean).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn sigma_strictly_inside_unit_interval(h in -3.0f64..3.0, w in -1.0f64..1.0, rho in 0.1f64..10.0) {
            let s = sigmoid(rho * h * w);
            prop_assert!(s > 0.0 && s < 1.0);
        }

        #[test]
        fn sigma_monotone_in_weight(h in 0.01f64..3.0, w in -1.0f64..1.0, dw in 0.001f64..1.0, rho in 0.1f64..5.0) {
            prop_assert!(sigmoid(rho * h * (w + dw)) > sigmoid(rho * h * w));
        }

        #[test]
        fn identity_path_lower_bound(h in -3.0f64..3.0, u in -2.0f64..2.0, w in -1.0f64..1.0) {
            // with the σ-sensitivity path removed (w = 0 contribution only via σ),
            // shortcut gradient is u·(1 + σ) so |grad| ≥ |u|
            let hm = Matrix::row_vector(&[h]);
            let out = gate_forward(&hm, &[w], 2.0, true);
            let g = gate_backward(&Matrix::row_vector(&[u]), &hm, &out.sigma, &[0.0], 2.0, true, None);
            prop_assert!(g.grad_h.get(0, 0).abs() >= u.abs());
        }
    }

    #[test]
    fn shortcut_degrades_to_identity() {
        let h = Matrix::row_vector(&[1.5, -0.5, 3.0]);
        // w → -∞·sign(h)
        let w = [-1e6, 1e6, -1e6];
        let out = gate_forward(&h, &w, 1.0, true);
        for (o, x) in out.h_out.data().iter().zip(h.data()) {
            assert!((o - x).abs() < 1e-12);
        }
    }
}
