//! Reconstruction objectives: patch-normalised MSE, normalised
//! cross-correlation, and their combination `mse + λ·(1 − ncc)`.
//!
//! `validity` arguments are row-major `V × T̄` point masks; invalid points
//! (zero padding, padded variates) never contribute to a loss or gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;

pub const DEFAULT_NCC_LAMBDA: f64 = 0.1;
/// Lower clamp on `σ_x·σ_x̂`.
pub const NCC_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub ncc: f64,
    pub total: f64,
    pub lambda: f64,
}

fn check_shapes(target: &Matrix, pred: &Matrix, validity: &[bool]) -> Result<()> {
    if target.shape() != pred.shape() {
        return Err(Error::Shape(format!("target {:?} vs prediction {:?}", target.shape(), pred.shape())));
    }
    if validity.len() != target.len() {
        return Err(Error::Shape(format!("validity mask has {} entries for {} values", validity.len(), target.len())));
    }
    Ok(())
}

/// Mean over valid patches of the squared L2 error of each patch. A patch
/// is valid if it holds at least one valid point; padded points inside it
/// are skipped.
pub fn mse_with_grad(target: &Matrix, pred: &Matrix, validity: &[bool], patch_size: usize) -> Result<(f64, Matrix)> {
    check_shapes(target, pred, validity)?;
    if patch_size == 0 || target.cols() % patch_size != 0 {
        return Err(Error::Shape(format!("length {} is not a multiple of patch size {patch_size}", target.cols())));
    }
    let valid_patches = validity.chunks(patch_size).filter(|c| c.iter().any(|v| *v)).count();
    if valid_patches == 0 {
        return Err(Error::NoValidTokens("reconstruction target has no valid patch".into()));
    }
    let denom = valid_patches as f64;
    let mut sum = 0.0;
    let mut grad = Matrix::zeros(target.rows(), target.cols());
    for (i, ((x, y), ok)) in target.as_slice().iter().zip(pred.as_slice()).zip(validity).enumerate() {
        if *ok {
            let d = y - x;
            sum += d * d;
            grad.as_mut_slice()[i] = 2.0 * d / denom;
        }
    }
    Ok((sum / denom, grad))
}

pub fn mse_loss(target: &Matrix, pred: &Matrix, validity: &[bool], patch_size: usize) -> Result<f64> {
    mse_with_grad(target, pred, validity, patch_size).map(|(v, _)| v)
}

/// Mean over variates of the per-variate Pearson correlation between target
/// and prediction, computed on valid points with population statistics.
/// Variates with fewer than two valid points are skipped; if none remain the
/// value is 1 (no penalty).
pub fn ncc_with_grad(target: &Matrix, pred: &Matrix, validity: &[bool]) -> Result<(f64, Matrix)> {
    check_shapes(target, pred, validity)?;
    let (rows, cols) = target.shape();
    let mut grad = Matrix::zeros(rows, cols);
    let mut per_variate = Vec::with_capacity(rows);
    let mut idx = Vec::with_capacity(cols);
    for v in 0..rows {
        idx.clear();
        idx.extend((0..cols).filter(|&t| validity[v * cols + t]));
        if idx.len() < 2 {
            continue;
        }
        let n = idx.len() as f64;
        let x = target.row(v);
        let y = pred.row(v);
        let mx = idx.iter().map(|&t| x[t]).sum::<f64>() / n;
        let my = idx.iter().map(|&t| y[t]).sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for &t in &idx {
            let dx = x[t] - mx;
            let dy = y[t] - my;
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        let sx = (sxx / n).sqrt();
        let sy = (syy / n).sqrt();
        let cov = sxy / n;
        let denom = sx * sy;
        let g = grad.row_mut(v);
        if denom > NCC_EPS {
            let r = cov / denom;
            for &t in &idx {
                g[t] = (x[t] - mx) / (n * denom) - r * (y[t] - my) / (n * sy * sy);
            }
            per_variate.push(r);
        } else {
            for &t in &idx {
                g[t] = (x[t] - mx) / (n * NCC_EPS);
            }
            per_variate.push(cov / NCC_EPS);
        }
    }
    if per_variate.is_empty() {
        return Ok((1.0, grad));
    }
    let k = per_variate.len() as f64;
    for v in grad.as_mut_slice() {
        *v /= k;
    }
    Ok((per_variate.iter().sum::<f64>() / k, grad))
}

pub fn ncc(target: &Matrix, pred: &Matrix, validity: &[bool]) -> Result<f64> {
    ncc_with_grad(target, pred, validity).map(|(v, _)| v)
}

pub fn total_loss(
    target: &Matrix,
    pred: &Matrix,
    validity: &[bool],
    patch_size: usize,
    lambda: f64,
) -> Result<LossReport> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("NCC weight {lambda} must be non-negative")));
    }
    let mse = mse_loss(target, pred, validity, patch_size)?;
    let ncc = ncc(target, pred, validity)?;
    Ok(LossReport { mse, ncc, total: mse + lambda * (1.0 - ncc), lambda })
}

/// Adds `mse + λ·(1 − ncc)` of the `V × T̄` prediction node to the graph.
pub fn total_loss_graph(
    g: &mut Graph,
    pred: Var,
    target: &Matrix,
    validity: &[bool],
    patch_size: usize,
    lambda: f64,
) -> Result<(Var, LossReport)> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("NCC weight {lambda} must be non-negative")));
    }
    let (mse, mse_grad) = mse_with_grad(target, g.value(pred), validity, patch_size)?;
    let (ncc, ncc_grad) = ncc_with_grad(target, g.value(pred), validity)?;
    let mut grad = mse_grad;
    for (a, b) in grad.as_mut_slice().iter_mut().zip(ncc_grad.as_slice()) {
        *a -= lambda * b;
    }
    let total = mse + lambda * (1.0 - ncc);
    let node = g.objective(pred, total, grad);
    Ok((node, LossReport { mse, ncc, total, lambda }))
}

/// Cross-entropy of a `1 × C` logit row against `class`, with label
/// smoothing `ε` (target `(1−ε)·onehot + ε/C`).
pub fn cross_entropy_with_grad(logits: &Matrix, class: usize, smoothing: f64) -> Result<(f64, Matrix)> {
    let c = logits.cols();
    if logits.rows() != 1 || class >= c {
        return Err(Error::Shape(format!("class {class} for logits {:?}", logits.shape())));
    }
    let z = logits.row(0);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(1, c);
    for j in 0..c {
        let q = smoothing / c as f64 + if j == class { 1.0 - smoothing } else { 0.0 };
        let logp = z[j] - lse;
        loss -= q * logp;
        grad.set(0, j, logp.exp() - q);
    }
    Ok((loss, grad))
}

/// Mean squared error over target dimensions.
pub fn regression_mse_with_grad(pred: &Matrix, target: &[f64]) -> Result<(f64, Matrix)> {
    if pred.len() != target.len() || target.is_empty() {
        return Err(Error::Shape(format!("prediction has {} outputs, target has {}", pred.len(), target.len())));
    }
    let n = target.len() as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut sum = 0.0;
    for (i, (p, t)) in pred.as_slice().iter().zip(target).enumerate() {
        let d = p - t;
        sum += d * d;
        grad.as_mut_slice()[i] = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Mean squared error per point over masked, valid positions. `visible` is
/// the variate-major token mask, each token covering `patch_size` points.
pub fn masked_region_mse(
    target: &Matrix,
    pred: &Matrix,
    validity: &[bool],
    visible: &[bool],
    patch_size: usize,
) -> Result<f64> {
    check_shapes(target, pred, validity)?;
    let t = target.cols();
    if patch_size == 0 || t % patch_size != 0 || visible.len() != target.rows() * (t / patch_size) {
        return Err(Error::Shape(format!("{} mask cells for a {:?} target", visible.len(), target.shape())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..target.len() {
        let (r, c) = (i / t, i % t);
        if validity[i] && !visible[r * (t / patch_size) + c / patch_size] {
            let d = pred.as_slice()[i] - target.as_slice()[i];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidTokens("no masked valid points".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn masked_region_mse_counts_only_masked_points() {
        let target = Matrix::zeros(1, 4);
        let pred = Matrix::from_vec(1, 4, vec![1.0, 1.0, 3.0, 3.0]);
        let v = masked_region_mse(&target, &pred, &[true; 4], &[true, false], 2).unwrap();
        assert_eq!(v, 9.0);
        assert!(masked_region_mse(&target, &pred, &[true; 4], &[true, true], 2).is_err());
    }

    fn all(m: &Matrix) -> Vec<bool> {
        vec![true; m.len()]
    }

    /// Textbook sample-independent Pearson r.
    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn mse_examples() {
        let x = Matrix::from_fn(2, 8, |r, c| (r * 8 + c) as f64 * 0.1);
        assert_eq!(mse_loss(&x, &x, &all(&x), 4).unwrap(), 0.0);

        let p = 6;
        let zeros = Matrix::zeros(1, p);
        let ones = Matrix::filled(1, p, 1.0);
        assert_eq!(mse_loss(&zeros, &ones, &all(&zeros), p).unwrap(), p as f64);

        let y = x.map(|v| v + 0.3);
        let y2 = x.map(|v| v + 0.6);
        let a = mse_loss(&x, &y, &all(&x), 4).unwrap();
        let b = mse_loss(&x, &y2, &all(&x), 4).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-12);
    }

    #[test]
    fn mse_without_valid_patch_errors() {
        let x = Matrix::zeros(1, 4);
        assert!(matches!(mse_loss(&x, &x, &[false; 4], 2), Err(Error::NoValidTokens(_))));
    }

    #[test]
    fn ncc_examples() {
        let x = Matrix::from_vec(1, 4, vec![1., 2., 3., 4.]);
        assert!((ncc(&x, &x, &all(&x)).unwrap() - 1.0).abs() < 1e-12);
        let neg = x.scaled(-1.0);
        assert!((ncc(&x, &neg, &all(&x)).unwrap() + 1.0).abs() < 1e-12);
        let y = Matrix::from_vec(1, 4, vec![1., 2., 3., 5.]);
        let r = ncc(&x, &y, &all(&x)).unwrap();
        assert!((r - pearson(x.row(0), y.row(0))).abs() < 1e-10);
    }

    #[test]
    fn flat_signal_contributes_zero() {
        let x = Matrix::filled(1, 5, 2.0);
        let y = Matrix::from_vec(1, 5, vec![1., 3., 0., 2., 5.]);
        assert_eq!(ncc(&x, &y, &all(&x)).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let x = Matrix::from_vec(1, 4, vec![1., -2., 3., 0.5]);
        let r = total_loss(&x, &x, &all(&x), 2, 0.1).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!((r.ncc - 1.0).abs() < 1e-12);
        assert!(r.total.abs() < 1e-12);

        let y = Matrix::from_vec(1, 4, vec![0., 1., 1., 0.]);
        let r0 = total_loss(&x, &y, &all(&x), 2, 0.0).unwrap();
        assert_eq!(r0.total, r0.mse);

        // λ=0.1, mse=0.5, ncc=0.2 -> 0.5 + 0.1·0.8
        let composed: f64 = 0.5 + 0.1 * (1.0 - 0.2);
        assert!((composed - 0.58).abs() < 1e-15);
        assert!(total_loss(&x, &y, &all(&x), 2, -1.0).is_err());
    }

    #[test]
    fn invalid_positions_are_ignored() {
        let x = Matrix::from_vec(1, 6, vec![1., 2., 0.5, -1., 7., 9.]);
        let y = Matrix::from_vec(1, 6, vec![0.5, 2.5, 0.0, -2., 3., 3.]);
        let mut valid = vec![true; 6];
        valid[4] = false;
        valid[5] = false;
        let r = total_loss(&x, &y, &valid, 2, 0.1).unwrap();
        let mut y2 = y.clone();
        y2.set(0, 4, -100.0);
        let mut x2 = x.clone();
        x2.set(0, 5, 55.0);
        let r2 = total_loss(&x2, &y2, &valid, 2, 0.1).unwrap();
        assert_eq!(r, r2);
        assert!((r.mse - ((0.25 + 0.25 + 0.25 + 1.0) / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_definition() {
        let z = Matrix::from_vec(1, 3, vec![0.2, -1.0, 2.0]);
        let (l, g) = cross_entropy_with_grad(&z, 2, 0.0).unwrap();
        let lse = (0.2f64.exp() + (-1.0f64).exp() + 2.0f64.exp()).ln();
        assert!((l - (lse - 2.0)).abs() < 1e-12);
        assert!((g.as_slice().iter().sum::<f64>()).abs() < 1e-12);
        let (ls, _) = cross_entropy_with_grad(&Matrix::zeros(1, 4), 1, 0.1).unwrap();
        assert!((ls - 4f64.ln()).abs() < 1e-12);
    }

    fn finite_diff_check(target: &Matrix, pred: &Matrix, validity: &[bool]) {
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let (node, _) = total_loss_graph(&mut g, p, target, validity, 4, 0.1).unwrap();
        let (_, grad) = {
            let (m, mg) = mse_with_grad(target, pred, validity, 4).unwrap();
            let (_, ng) = ncc_with_grad(target, pred, validity).unwrap();
            let mut gr = mg;
            for (a, b) in gr.as_mut_slice().iter_mut().zip(ng.as_slice()) {
                *a -= 0.1 * b;
            }
            (m, gr)
        };
        assert!(g.scalar(node).is_finite());
        let h = 1e-5;
        let mut num = Vec::with_capacity(pred.len());
        for k in 0..pred.len() {
            let mut a = pred.clone();
            a.as_mut_slice()[k] += h;
            let mut b = pred.clone();
            b.as_mut_slice()[k] -= h;
            let fa = total_loss(target, &a, validity, 4, 0.1).unwrap().total;
            let fb = total_loss(target, &b, validity, 4, 0.1).unwrap().total;
            num.push((fa - fb) / (2.0 * h));
        }
        for (k, n) in num.iter().enumerate() {
            let a = grad.as_slice()[k];
            assert!((a - n).abs() <= 1e-4 * n.abs().max(a.abs()) + 1e-9, "[{k}] {a} vs {n}");
        }
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(vals in proptest::collection::vec(-3.0f64..3.0, 32)) {
            let target = Matrix::from_vec(2, 8, vals[..16].to_vec());
            let pred = Matrix::from_vec(2, 8, vals[16..].to_vec());
            finite_diff_check(&target, &pred, &all(&target));
        }

        #[test]
        fn ncc_bounded_and_affine_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 24),
            a in 0.1f64..10.0, b in -5.0f64..5.0
        ) {
            let x = Matrix::from_vec(2, 6, vals[..12].to_vec());
            let y = Matrix::from_vec(2, 6, vals[12..].to_vec());
            let v = all(&x);
            let r = ncc(&x, &y, &v).unwrap();
            prop_assume!(x.as_slice().iter().any(|q| (q - x.get(0, 0)).abs() > 1e-3));
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&r));
            let ya = y.map(|q| a * q + b);
            let yn = y.map(|q| -a * q + b);
            prop_assert!((ncc(&x, &ya, &v).unwrap() - r).abs() < 1e-6);
            prop_assert!((ncc(&x, &yn, &v).unwrap() + r).abs() < 1e-6);
            let t = total_loss(&x, &y, &v, 3, 0.1).unwrap();
            prop_assert!(t.total >= -1e-12);
        }
    }
}
