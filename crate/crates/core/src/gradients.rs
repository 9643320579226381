//! Analytic gradients of the smoothed objective under the frozen-S
//! alternation, plus a generic central finite-difference checker.
//!
//! No gradient flows through the similarity weights or the kNN membership;
//! the graph is held fixed while T, U, b, W take their steps. By default
//! grad_t differentiates the objective exactly, which for the asymmetric S
//! means both the outgoing S[i][i'] and incoming S[i'][i] halves of the
//! smoothness term contribute; the one-sided variant that keeps only the
//! outgoing half is selectable via `HyperParams::paper_gradient`.

use ndarray::{Array1, Array2};

use crate::conv::{filter_gradient, FilterBank, PatchMatrix, ConvRepr};
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::objective::{check_prediction_shapes, HyperParams, Predictor, TagState};

/// Gradient of the objective with respect to the completed tag matrix T.
pub fn grad_t(
    state: &TagState,
    y: &Array2<f64>,
    pred: &Predictor,
    graph: &SimilarityGraph,
    hp: &HyperParams,
) -> Result<Array2<f64>> {
    check_prediction_shapes(state, y, pred)?;
    if graph.len() != state.n_images() {
        return Err(Error::ShapeMismatch(format!(
            "graph over {} images, state has {}",
            graph.len(),
            state.n_images()
        )));
    }
    let (m, n) = state.t.dim();
    let eps = hp.epsilon_l1;
    let mut grad = Array2::zeros((m, n));

    for i in 0..n {
        let p = pred.predict(y.column(i));
        for j in 0..m {
            let t = state.t[[j, i]];
            let mut g = 2.0 * state.phi[[j, i]] * (t - state.t_hat[[j, i]]);
            g += 2.0 * hp.lambda1 * (t - p[j]);
            g += hp.lambda3 * t / (t * t + eps * eps).sqrt();
            grad[[j, i]] = g;
        }
    }

    // smoothness: outgoing edges, and incoming unless the one-sided variant
    // was requested
    for (i, (ns, ws)) in graph.neighbors.iter().zip(&graph.weights).enumerate() {
        for (&ip, &w) in ns.iter().zip(ws) {
            for j in 0..m {
                let diff = state.t[[j, i]] - state.t[[j, ip]];
                grad[[j, i]] += 2.0 * hp.lambda2 * w * diff;
                if !hp.paper_gradient {
                    grad[[j, ip]] -= 2.0 * hp.lambda2 * w * diff;
                }
            }
        }
    }
    Ok(grad)
}

/// Gradient with respect to the predictor weights U.
pub fn grad_u(
    state: &TagState,
    y: &Array2<f64>,
    pred: &Predictor,
    hp: &HyperParams,
) -> Result<Array2<f64>> {
    check_prediction_shapes(state, y, pred)?;
    let (m, r) = pred.u.dim();
    let mut grad = Array2::zeros((m, r));
    if hp.lambda1 == 0.0 {
        return Ok(grad);
    }
    for i in 0..state.n_images() {
        let p = pred.predict(y.column(i));
        for j in 0..m {
            let resid = state.t[[j, i]] - p[j];
            for l in 0..r {
                grad[[j, l]] -= 2.0 * hp.lambda1 * resid * y[[l, i]];
            }
        }
    }
    Ok(grad)
}

/// Gradient with respect to the predictor offset b.
pub fn grad_b(
    state: &TagState,
    y: &Array2<f64>,
    pred: &Predictor,
    hp: &HyperParams,
) -> Result<Array1<f64>> {
    check_prediction_shapes(state, y, pred)?;
    let m = state.n_tags();
    let mut grad = Array1::zeros(m);
    if hp.lambda1 == 0.0 {
        return Ok(grad);
    }
    for i in 0..state.n_images() {
        let p = pred.predict(y.column(i));
        for j in 0..m {
            grad[j] += 2.0 * hp.lambda1 * (state.t[[j, i]] - p[j]);
        }
    }
    Ok(grad)
}

/// Gradient with respect to the filter bank W, accumulated over all images.
///
/// The per-image upstream is the objective gradient at y_i,
/// -2 lambda1 U^T (t_i - (U y_i - b)), chained through the pooled
/// representation via `filter_gradient`.
pub fn grad_w(
    patches: &[PatchMatrix],
    bank: &FilterBank,
    reprs: &[ConvRepr],
    state: &TagState,
    pred: &Predictor,
    hp: &HyperParams,
) -> Result<Array2<f64>> {
    let n = state.n_images();
    if patches.len() != n || reprs.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} patch sets / {} reprs for {n} images",
            patches.len(),
            reprs.len()
        )));
    }
    let mut grad = Array2::zeros(bank.weights.dim());
    if hp.lambda1 == 0.0 {
        return Ok(grad);
    }
    for i in 0..n {
        let resid = {
            let p = pred.predict(reprs[i].y.view());
            let mut r = Array1::zeros(state.n_tags());
            for j in 0..state.n_tags() {
                r[j] = state.t[[j, i]] - p[j];
            }
            r
        };
        let upstream = pred.u.t().dot(&resid).mapv(|v| -2.0 * hp.lambda1 * v);
        grad += &filter_gradient(&patches[i], bank, &reprs[i], &upstream)?;
    }
    Ok(grad)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare an analytic gradient against central finite differences of `f`.
///
/// Relative error per coordinate is |analytic - fd| / max(|analytic|, |fd|, 1e-8).
pub fn finite_difference_check<F>(
    mut f: F,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
    }
    if x0.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "x0 has {} coordinates, analytic has {}",
            x0.len(),
            analytic.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut max_rel_err = 0.0f64;
    for j in 0..x.len() {
        x[j] = x0[j] + h;
        let fp = f(&x);
        x[j] = x0[j] - h;
        let fm = f(&x);
        x[j] = x0[j];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite objective value near coordinate {j}"
            )));
        }
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[j];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(FdReport {
        max_rel_err,
        pass: max_rel_err <= tol,
    })
}
