//! Central finite-difference check of the analytic gradient.
//!
//! Every scalar parameter is nudged by ±ε and the objective re-evaluated with
//! [`MlpModel::loss`], which shares only the forward pass with backprop.

use serde::Serialize;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::nn::MlpModel;
use crate::rng::Rng;

pub const FD_EPS: f64 = 1e-6;
pub const FD_RTOL: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale of
/// `FD_RTOL * FD_FLOOR`, below the reach of central differences in f64.
pub const FD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Compare backprop against central differences on every parameter.
pub fn check_model(model: &MlpModel, x: &Matrix, labels: &[usize]) -> Result<GradCheckReport> {
    let trace = model.forward(x)?;
    let (grads, _) = model.backward(&trace, labels)?;
    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    let refs = grads.refs();
    for &r in &refs {
        let theta = model.param(r);
        probe.set_param(r, theta + FD_EPS);
        let up = probe.loss(x, labels)?.total;
        probe.set_param(r, theta - FD_EPS);
        let down = probe.loss(x, labels)?.total;
        probe.set_param(r, theta);
        let numeric = (up - down) / (2.0 * FD_EPS);
        let err = relative_error(grads.get(r), numeric);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, r.to_string());
        }
    }
    Ok(GradCheckReport {
        checked: refs.len(),
        max_rel_error: worst.0,
        worst_param: worst.1,
        passed: worst.0 < FD_RTOL,
    })
}

/// Give a freshly initialised model nonzero biases and inhibitory weights so
/// that every gradient path is exercised.
pub fn randomize_for_check(model: &mut MlpModel, rng: &mut Rng) {
    let mut p = model.params();
    for lp in &mut p.layers {
        for b in &mut lp.bias {
            *b = rng.uniform(-0.3, 0.3);
        }
        if let Some(g) = &mut lp.gate {
            for w in g.iter_mut() {
                *w = rng.uniform(-1.0, 1.0);
            }
        }
    }
    model.set_params(&p).expect("same layout");
}

/// Random inputs and labels for a check batch.
pub fn random_batch(model: &MlpModel, rows: usize, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let x = Matrix::from_fn(rows, model.input_dim(), |_, _| rng.uniform(-1.0, 1.0));
    let y = (0..rows).map(|_| rng.below(model.num_classes())).collect();
    (x, y)
}
