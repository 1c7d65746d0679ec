//! Gate-population regularizers.
//!
//! All functions here act on a single sample: one slice per gated layer.
//! Batch losses are the mean of the per-sample values.
//!
//! * inhibition: `Σ(1-σ)σ / (Σ(1-σ) + ε)` summed over every gated layer
//! * lateral (basic): `Σ_{i≠j} h_i h_j = (Σh)² - Σh²` per layer
//! * lateral (weighted): `Σ_{i≠j} h_i h_j (1-σ_i) σ_j = ΣaΣb - Σab`
//!   with `a = h(1-σ)`, `b = hσ`

use serde::{Deserialize, Serialize};

/// Guard on the inhibition-loss denominator (all gates fully open).
pub const INHIBITION_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LateralKind {
    /// Unweighted pairwise products of activations.
    Basic,
    /// Pairwise products weighted by `(1-σ_i) σ_j`.
    #[default]
    Weighted,
}

/// Regularizer values and their gradients for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RegTerms {
    pub loss_inhibition: f64,
    pub loss_lateral: f64,
    /// dLoss/dσ per gated layer, already weighted by λ and β.
    pub grad_sigma: Vec<Vec<f64>>,
    /// dLoss/dh per gated layer, already weighted by β.
    pub grad_h: Vec<Vec<f64>>,
}

/// Inhibition loss and its gradient w.r.t. every σ.
pub fn inhibition_loss(sigma_layers: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    let mut num = 0.0;
    let mut den = 0.0;
    for layer in sigma_layers {
        for &s in *layer {
            num += (1.0 - s) * s;
            den += 1.0 - s;
        }
    }
    let d = den + INHIBITION_EPS;
    let loss = num / d;
    // quotient rule: d(num)/dσ = 1 - 2σ, d(den)/dσ = -1
    let grad = sigma_layers
        .iter()
        .map(|layer| layer.iter().map(|&s| (1.0 - 2.0 * s) / d + num / (d * d)).collect())
        .collect();
    (loss, grad)
}

/// Unweighted lateral inhibition and its gradient w.r.t. every h.
pub fn lateral_inhibition_basic(h_layers: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(h_layers.len());
    for layer in h_layers {
        let sum: f64 = layer.iter().sum();
        let sq: f64 = layer.iter().map(|x| x * x).sum();
        loss += sum * sum - sq;
        grads.push(layer.iter().map(|&x| 2.0 * (sum - x)).collect());
    }
    (loss, grads)
}

/// Importance-weighted lateral inhibition.
///
/// Returns the loss, dL/dh and dL/dσ.
pub fn lateral_inhibition_weighted(
    h_layers: &[&[f64]],
    sigma_layers: &[&[f64]],
) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    assert_eq!(h_layers.len(), sigma_layers.len());
    let mut loss = 0.0;
    let mut grad_h = Vec::with_capacity(h_layers.len());
    let mut grad_s = Vec::with_capacity(h_layers.len());
    for (h, s) in h_layers.iter().zip(sigma_layers) {
        assert_eq!(h.len(), s.len());
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        let mut sum_ab = 0.0;
        for (&hi, &si) in h.iter().zip(*s) {
            let a = hi * (1.0 - si);
            let b = hi * si;
            sum_a += a;
            sum_b += b;
            sum_ab += a * b;
        }
        loss += sum_a * sum_b - sum_ab;
        let mut gh = Vec::with_capacity(h.len());
        let mut gs = Vec::with_capacity(h.len());
        for (&hi, &si) in h.iter().zip(*s) {
            let da = sum_b - hi * si; // dL/da_i
            let db = sum_a - hi * (1.0 - si); // dL/db_i
            gh.push(da * (1.0 - si) + db * si);
            gs.push((db - da) * hi);
        }
        grad_h.push(gh);
        grad_s.push(gs);
    }
    (loss, grad_h, grad_s)
}

/// All regularizer terms of one sample, gradients pre-multiplied by λ and β.
pub fn reg_terms(
    h_layers: &[&[f64]],
    sigma_layers: &[&[f64]],
    lambda: f64,
    beta: f64,
    lateral: LateralKind,
) -> RegTerms {
    let (loss_inhibition, g_inh) = inhibition_loss(sigma_layers);
    let mut grad_sigma: Vec<Vec<f64>> = g_inh
        .into_iter()
        .map(|g| g.into_iter().map(|x| lambda * x).collect())
        .collect();
    let (loss_lateral, grad_h) = match lateral {
        LateralKind::Basic => {
            let (l, gh) = lateral_inhibition_basic(h_layers);
            (l, gh)
        }
        LateralKind::Weighted => {
            let (l, gh, gs) = lateral_inhibition_weighted(h_layers, sigma_layers);
            for (acc, g) in grad_sigma.iter_mut().zip(gs) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += beta * x;
                }
            }
            (l, gh)
        }
    };
    let grad_h = grad_h
        .into_iter()
        .map(|g| g.into_iter().map(|x| beta * x).collect())
        .collect();
    RegTerms {
        loss_inhibition,
        loss_lateral,
        grad_sigma,
        grad_h,
    }
}

/// `task + λ·inhibition + β·lateral`
pub fn total_loss(task_loss: f64, reg: &RegTerms, lambda: f64, beta: f64) -> f64 {
    task_loss + lambda * reg.loss_inhibition + beta * reg.loss_lateral
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn brute_weighted(h: &[f64], s: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..h.len() {
            for j in 0..h.len() {
                if i != j {
                    acc += h[i] * h[j] * (1.0 - s[i]) * s[j];
                }
            }
        }
        acc
    }

    fn brute_inhibition(s: &[f64]) -> f64 {
        let num: f64 = s.iter().map(|x| (1.0 - x) * x).sum();
        let den: f64 = s.iter().map(|x| 1.0 - x).sum();
        num / (den + INHIBITION_EPS)
    }

    #[test]
    fn inhibition_half_gates() {
        for n in [1usize, 3, 17] {
            let a = vec![0.5; n];
            let b = vec![0.5; 2 * n + 1];
            let (l, _) = inhibition_loss(&[&a, &b]);
            assert!((l - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn inhibition_closed_gates() {
        let (l, _) = inhibition_loss(&[&[0.0, 0.0, 0.0]]);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn inhibition_hand_value() {
        let s = [0.2, 0.8];
        let (l, _) = inhibition_loss(&[&s]);
        assert!((l - brute_inhibition(&s)).abs() < 1e-15);
        assert!((l - 0.32).abs() < 1e-7);
    }

    #[test]
    fn inhibition_all_open_is_finite() {
        let (l, g) = inhibition_loss(&[&[1.0, 1.0]]);
        assert!(l.is_finite());
        assert!(g[0].iter().all(|x| x.is_finite()));
    }

    #[test]
    fn lateral_basic_values() {
        assert_eq!(lateral_inhibition_basic(&[&[1.0, 1.0]]).0, 2.0);
        assert_eq!(lateral_inhibition_basic(&[&[3.7]]).0, 0.0);
    }

    #[test]
    fn lateral_weighted_values() {
        let (l, _, _) = lateral_inhibition_weighted(&[&[1.0, 1.0]], &[&[0.0, 1.0]]);
        assert_eq!(l, 1.0);
        let h = [0.3, 1.2, 2.0];
        assert_eq!(lateral_inhibition_weighted(&[&h], &[&[0.0; 3]]).0, 0.0);
        assert_eq!(lateral_inhibition_weighted(&[&h], &[&[1.0; 3]]).0, 0.0);
    }

    #[test]
    fn weighted_matches_brute_force_and_fd() {
        let mut rng = Rng::new(21);
        let n = 9;
        let h: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 2.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.uniform(0.01, 0.99)).collect();
        let (l, gh, gs) = lateral_inhibition_weighted(&[&h], &[&s]);
        let b = brute_weighted(&h, &s);
        assert!((l - b).abs() <= 1e-12 * b.abs());
        let eps = 1e-6;
        for i in 0..n {
            let mut hp = h.clone();
            hp[i] += eps;
            let mut hm = h.clone();
            hm[i] -= eps;
            let fd = (brute_weighted(&hp, &s) - brute_weighted(&hm, &s)) / (2.0 * eps);
            assert!((fd - gh[0][i]).abs() <= 1e-6 * fd.abs().max(1e-3));
            let mut sp = s.clone();
            sp[i] += eps;
            let mut sm = s.clone();
            sm[i] -= eps;
            let fd = (brute_weighted(&h, &sp) - brute_weighted(&h, &sm)) / (2.0 * eps);
            assert!((fd - gs[0][i]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn inhibition_gradient_fd() {
        let mut rng = Rng::new(4);
        let a: Vec<f64> = (0..5).map(|_| rng.uniform(0.05, 0.95)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.uniform(0.05, 0.95)).collect();
        let (_, g) = inhibition_loss(&[&a, &b]);
        let f = |a: &[f64], b: &[f64]| {
            let all: Vec<f64> = a.iter().chain(b).copied().collect();
            brute_inhibition(&all)
        };
        let eps = 1e-6;
        for i in 0..5 {
            let mut p = a.clone();
            p[i] += eps;
            let mut m = a.clone();
            m[i] -= eps;
            let fd = (f(&p, &b) - f(&m, &b)) / (2.0 * eps);
            assert!((fd - g[0][i]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
        for i in 0..3 {
            let mut p = b.clone();
            p[i] += eps;
            let mut m = b.clone();
            m[i] -= eps;
            let fd = (f(&a, &p) - f(&a, &m)) / (2.0 * eps);
            assert!((fd - g[1][i]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn total_loss_combination() {
        let reg = RegTerms {
            loss_inhibition: 0.5,
            loss_lateral: 2.0,
            grad_sigma: vec![],
            grad_h: vec![],
        };
        assert!((total_loss(1.0, &reg, 0.1, 0.01) - 1.07).abs() < 1e-15);
        assert_eq!(total_loss(1.25, &reg, 0.0, 0.0), 1.25);
    }

    proptest! {
        #[test]
        fn inhibition_in_unit_interval(s in proptest::collection::vec(0.0f64..0.999, 1..40)) {
            let (l, _) = inhibition_loss(&[&s]);
            prop_assert!((0.0..1.0).contains(&l));
        }

        #[test]
        fn basic_matches_double_loop(h in proptest::collection::vec(-2.0f64..2.0, 1..64)) {
            let (l, _) = lateral_inhibition_basic(&[&h]);
            let mut b = 0.0;
            for i in 0..h.len() { for j in 0..h.len() { if i != j { b += h[i] * h[j]; } } }
            prop_assert!((l - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
