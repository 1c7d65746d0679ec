//! Activation sparsity, per-unit activation statistics and histograms.

use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{MlpModel, EVAL_BATCH};

/// How the `(1 - 1/N)` factor enters the sparsity formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SparsityNorm {
    /// `{1 - (Σr/N)² / (Σr²/N)} · (1 - 1/N)`
    #[default]
    Multiplier,
    /// Same bracket divided by `(1 - 1/N)` (Treves-Rolls normalisation).
    Divisor,
}

/// Fraction of samples on which each unit's activation exceeds `threshold`.
pub fn activation_frequency<'a>(batches: impl IntoIterator<Item = &'a Matrix>, threshold: f64) -> Result<Vec<f64>> {
    let mut counts: Vec<usize> = Vec::new();
    let mut n = 0usize;
    for b in batches {
        if counts.is_empty() {
            counts = vec![0; b.cols()];
        }
        for row in b.row_iter() {
            for (c, &x) in counts.iter_mut().zip(row) {
                if x > threshold {
                    *c += 1;
                }
            }
        }
        n += b.rows();
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// Population sparsity of an activation-frequency profile `r`.
///
/// An all-zero profile returns 0.
pub fn sparsity(r: &[f64], norm: SparsityNorm) -> f64 {
    let n = r.len() as f64;
    if r.is_empty() {
        return 0.0;
    }
    let mean = r.iter().map(|x| x / n).sum::<f64>();
    let mean_sq = r.iter().map(|x| x * x / n).sum::<f64>();
    if mean_sq == 0.0 {
        return 0.0;
    }
    let bracket = 1.0 - mean * mean / mean_sq;
    let factor = 1.0 - 1.0 / n;
    match norm {
        SparsityNorm::Multiplier => bracket * factor,
        SparsityNorm::Divisor => {
            if factor == 0.0 {
                0.0
            } else {
                bracket / factor
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub n: usize,
    pub r: Vec<f64>,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    pub per_layer: Vec<LayerSparsity>,
}

/// Per-unit `(mean, population std)` of activations.
pub fn activation_stats(batches: &[Matrix]) -> Result<Vec<(f64, f64)>> {
    let n: usize = batches.iter().map(Matrix::rows).sum();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let width = batches[0].cols();
    let mut mean = vec![0.0; width];
    for b in batches {
        for row in b.row_iter() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    for b in batches {
        for row in b.row_iter() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    Ok(mean
        .into_iter()
        .zip(var)
        .map(|(m, v)| (m, (v / n as f64).sqrt()))
        .collect())
}

/// Counts over `bins` equal-width bins on `[lo, hi]`. Bins are half-open
/// except the last, which is closed on the right; out-of-range values are
/// dropped.
pub fn histogram(values: &[f64], bins: usize, (lo, hi): (f64, f64)) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let mut counts = vec![0; bins];
    let width = hi - lo;
    for &v in values {
        if !(v >= lo && v <= hi) {
            continue;
        }
        let k = if width == 0.0 {
            0
        } else {
            (((v - lo) / width * bins as f64) as usize).min(bins - 1)
        };
        counts[k] += 1;
    }
    Ok(counts)
}

/// Lower and upper edge of every bin.
pub fn bin_edges(bins: usize, (lo, hi): (f64, f64)) -> Vec<(f64, f64)> {
    let w = (hi - lo) / bins as f64;
    (0..bins)
        .map(|k| (lo + w * k as f64, if k + 1 == bins { hi } else { lo + w * (k + 1) as f64 }))
        .collect()
}

/// Output of hidden layer `layer` (after its gate) over the whole dataset,
/// in evaluation-sized chunks.
pub fn layer_outputs(model: &MlpModel, data: &dyn Samples, layer: usize) -> Result<Vec<Matrix>> {
    if layer >= model.num_hidden() {
        return Err(Error::InvalidArgument(format!(
            "hidden layer {layer} out of range (model has {})",
            model.num_hidden()
        )));
    }
    let n = data.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, _) = data.gather(&idx);
        let mut t = model.forward(&x)?;
        out.push(std::mem::replace(&mut t.inputs[layer + 1], Matrix::zeros(0, 0)));
        start = end;
    }
    Ok(out)
}

/// Sparsity of every hidden layer of `model` over `data`.
pub fn sparsity_report(model: &MlpModel, data: &dyn Samples, threshold: f64, norm: SparsityNorm) -> Result<SparsityReport> {
    let mut per_layer = Vec::new();
    for layer in 0..model.num_hidden() {
        let outs = layer_outputs(model, data, layer)?;
        let r = activation_frequency(&outs, threshold)?;
        let s = sparsity(&r, norm);
        per_layer.push(LayerSparsity {
            layer,
            n: r.len(),
            r,
            s,
        });
    }
    Ok(SparsityReport { per_layer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn frequency_counts() {
        let mut rows = vec![vec![0.0, 1.0, 0.0]; 10];
        for r in rows.iter_mut().take(3) {
            r[2] = 0.5;
        }
        let m = Matrix::from_rows(&rows).unwrap();
        let r = activation_frequency([&m], 0.0).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 0.3]);
    }

    #[test]
    fn frequency_of_empty_stream_is_error() {
        let none: Vec<Matrix> = vec![];
        assert!(activation_frequency(&none, 0.0).is_err());
    }

    #[test]
    fn uniform_profile_is_dense() {
        for n in [2, 5, 64] {
            assert!(sparsity(&vec![0.37; n], SparsityNorm::Multiplier).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_profile() {
        let s = sparsity(&[0.0, 0.9, 0.0, 0.0], SparsityNorm::Multiplier);
        assert!((s - 0.5625).abs() < 1e-15);
        let d = sparsity(&[0.0, 0.9, 0.0, 0.0], SparsityNorm::Divisor);
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_profile() {
        // r = (1, 0.5, 0, 0): Σr/N = 0.375, Σr²/N = 0.3125
        // s = (1 - 0.140625/0.3125) * 0.75 = 0.55 * 0.75
        let s = sparsity(&[1.0, 0.5, 0.0, 0.0], SparsityNorm::Multiplier);
        assert!((s - 0.4125).abs() < 1e-15);
    }

    #[test]
    fn dead_layer_convention() {
        assert_eq!(sparsity(&[0.0; 8], SparsityNorm::Multiplier), 0.0);
    }

    #[test]
    fn stats_two_samples() {
        let m = Matrix::from_rows(&[vec![0.0, 3.0], vec![2.0, 3.0]]).unwrap();
        let s = activation_stats(&[m]).unwrap();
        assert_eq!(s, vec![(1.0, 1.0), (3.0, 0.0)]);
    }

    #[test]
    fn stats_chunked_equals_one_shot() {
        let mut rng = Rng::new(8);
        let full = Matrix::from_fn(30, 4, |_, _| rng.uniform(0.0, 5.0));
        let parts: Vec<Matrix> = [0..7, 7..8, 8..30]
            .into_iter()
            .map(|r| full.select_rows(&r.collect::<Vec<_>>()))
            .collect();
        let a = activation_stats(&parts).unwrap();
        let b = activation_stats(std::slice::from_ref(&full)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.0 - y.0).abs() < 1e-12 && (x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram(&[0.0, 1.0], 2, (0.0, 1.0)).unwrap(), vec![1, 1]);
        assert_eq!(histogram(&[0.4; 5], 4, (0.0, 1.0)).unwrap(), vec![0, 5, 0, 0]);
        assert_eq!(histogram(&[2.0, 2.0], 3, (2.0, 2.0)).unwrap(), vec![2, 0, 0]);
        assert!(histogram(&[0.1], 2, (1.0, 0.0)).is_err());
        assert!(histogram(&[0.1], 0, (0.0, 1.0)).is_err());
    }

    #[test]
    fn histogram_matches_sort_and_count() {
        let mut rng = Rng::new(31);
        let v: Vec<f64> = (0..500).map(|_| rng.uniform(-0.2, 1.2)).collect();
        let bins = 7;
        let h = histogram(&v, bins, (0.0, 1.0)).unwrap();
        let mut sorted: Vec<f64> = v.iter().copied().filter(|x| (0.0..=1.0).contains(x)).collect();
        sorted.sort_by(f64::total_cmp);
        let edges = bin_edges(bins, (0.0, 1.0));
        let mut expect = vec![0; bins];
        let mut k = 0;
        for x in sorted {
            while k + 1 < bins && x >= edges[k].1 {
                k += 1;
            }
            expect[k] += 1;
        }
        assert_eq!(h, expect);
        assert_eq!(h.iter().sum::<usize>(), v.iter().filter(|x| (0.0..=1.0).contains(*x)).count());
    }

    proptest! {
        #[test]
        fn scale_invariant(r in proptest::collection::vec(0.0f64..1.0, 2..40), c in 0.01f64..100.0) {
            let a = sparsity(&r, SparsityNorm::Multiplier);
            let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
            prop_assert!((a - sparsity(&scaled, SparsityNorm::Multiplier)).abs() < 1e-12);
        }

        #[test]
        fn permutation_invariant(r in proptest::collection::vec(0.0f64..1.0, 2..40), seed in any::<u64>()) {
            let mut p = r.clone();
            Rng::new(seed).shuffle(&mut p);
            prop_assert!((sparsity(&r, SparsityNorm::Multiplier) - sparsity(&p, SparsityNorm::Multiplier)).abs() < 1e-12);
        }

        #[test]
        fn within_bounds(r in proptest::collection::vec(0.0f64..1.0, 2..40)) {
            let n = r.len() as f64;
            let s = sparsity(&r, SparsityNorm::Multiplier);
            prop_assert!(s >= -1e-15 && s <= (1.0 - 1.0 / n).powi(2) + 1e-15);
        }
    }
}
