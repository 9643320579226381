//! The four-term completion objective evaluated over the current state.
//!
//! total = consistency + lambda1 * prediction + lambda2 * smoothness
//!       + lambda3 * sparsity
//!
//! The sparsity term uses the smoothed L1 sum sqrt(t^2 + eps^2) - eps so the
//! whole objective is differentiable and finite-difference checkable; as
//! eps -> 0 it recovers the plain L1 penalty.

use ndarray::{Array1, Array2};

use crate::conv::Nonlinearity;
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

/// Completed tag matrix T together with the observed matrix and its mask.
///
/// `t_hat` and `phi` are 0/1 valued; entries of `t_hat` where `phi` is 0 are
/// stored as 0 and ignored by every computation.
#[derive(Debug, Clone)]
pub struct TagState {
    pub t: Array2<f64>,
    pub t_hat: Array2<f64>,
    pub phi: Array2<f64>,
}

impl TagState {
    pub fn new(t: Array2<f64>, t_hat: Array2<f64>, phi: Array2<f64>) -> Result<Self> {
        if t.dim() != t_hat.dim() || t.dim() != phi.dim() {
            return Err(Error::ShapeMismatch(format!(
                "T {:?}, T_hat {:?}, Phi {:?}",
                t.dim(),
                t_hat.dim(),
                phi.dim()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("T contains non-finite entries".into()));
        }
        for m in [&t_hat, &phi] {
            if m.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::InvalidArgument(
                    "T_hat and Phi must be 0/1 valued".into(),
                ));
            }
        }
        Ok(Self { t, t_hat, phi })
    }

    pub fn n_tags(&self) -> usize {
        self.t.nrows()
    }

    pub fn n_images(&self) -> usize {
        self.t.ncols()
    }
}

/// Affine tag predictor t = U y - b.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

impl Predictor {
    pub fn new(u: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        if u.nrows() != b.len() {
            return Err(Error::ShapeMismatch(format!(
                "U has {} rows but b has length {}",
                u.nrows(),
                b.len()
            )));
        }
        if u.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "predictor contains non-finite entries".into(),
            ));
        }
        Ok(Self { u, b })
    }

    /// Predicted tag vector for one representation column.
    pub fn predict(&self, y: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
        self.u.dot(&y) - &self.b
    }
}

/// Kernel bandwidth: fixed, or the median heuristic computed at build time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaSpec {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma: GammaSpec,
    pub k: usize,
    pub eta: f64,
    pub epsilon_l1: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol: f64,
    pub nonlinearity: Nonlinearity,
    pub window: usize,
    pub stride: usize,
    /// When set, grad_T uses the one-sided smoothness gradient as printed in
    /// the source derivation instead of the exact gradient of the objective.
    pub paper_gradient: bool,
    pub n_filters: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.01,
            gamma: GammaSpec::Median,
            k: 5,
            eta: 1e-2,
            epsilon_l1: 1e-6,
            max_outer: 200,
            max_inner: 5,
            tol: 1e-5,
            nonlinearity: Nonlinearity::Tanh,
            window: 8,
            stride: 4,
            paper_gradient: false,
            n_filters: 16,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if let GammaSpec::Fixed(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "gamma must be positive, got {g}"
                )));
            }
        }
        for (name, v) in [("eta", self.eta), ("epsilon_l1", self.epsilon_l1), ("tol", self.tol)] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("k", self.k),
            ("window", self.window),
            ("stride", self.stride),
            ("n_filters", self.n_filters),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Per-term values of the objective, kept for trace logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    pub consistency: f64,
    pub prediction: f64,
    pub smoothness: f64,
    pub sparsity: f64,
}

/// Sum over observed entries of (t - t_hat)^2.
pub fn consistency_term(state: &TagState) -> Result<f64> {
    let mut total = 0.0;
    for ((t, th), phi) in state.t.iter().zip(state.t_hat.iter()).zip(state.phi.iter()) {
        total += phi * (t - th) * (t - th);
    }
    Ok(total)
}

/// Sum over images of the squared residual ||t_i - (U y_i - b)||^2.
pub fn prediction_term(state: &TagState, y: &Array2<f64>, pred: &Predictor) -> Result<f64> {
    check_prediction_shapes(state, y, pred)?;
    let mut total = 0.0;
    for i in 0..state.n_images() {
        let p = pred.predict(y.column(i));
        for j in 0..state.n_tags() {
            let r = state.t[[j, i]] - p[j];
            total += r * r;
        }
    }
    Ok(total)
}

pub(crate) fn check_prediction_shapes(
    state: &TagState,
    y: &Array2<f64>,
    pred: &Predictor,
) -> Result<()> {
    if y.ncols() != state.n_images() {
        return Err(Error::ShapeMismatch(format!(
            "Y has {} columns for {} images",
            y.ncols(),
            state.n_images()
        )));
    }
    if pred.u.ncols() != y.nrows() || pred.u.nrows() != state.n_tags() {
        return Err(Error::ShapeMismatch(format!(
            "U is {:?} but expected {}x{}",
            pred.u.dim(),
            state.n_tags(),
            y.nrows()
        )));
    }
    Ok(())
}

/// Sum over stored neighbor pairs of S[i][i'] ||t_i - t_i'||^2.
pub fn smoothness_term(state: &TagState, graph: &SimilarityGraph) -> Result<f64> {
    if graph.len() != state.n_images() {
        return Err(Error::ShapeMismatch(format!(
            "graph over {} images, state has {}",
            graph.len(),
            state.n_images()
        )));
    }
    let mut total = 0.0;
    for (i, (ns, ws)) in graph.neighbors.iter().zip(&graph.weights).enumerate() {
        for (&ip, &w) in ns.iter().zip(ws) {
            let mut d2 = 0.0;
            for j in 0..state.n_tags() {
                let diff = state.t[[j, i]] - state.t[[j, ip]];
                d2 += diff * diff;
            }
            total += w * d2;
        }
    }
    Ok(total)
}

/// Smoothed L1 penalty: sum of sqrt(t^2 + eps^2) - eps over all entries.
pub fn sparsity_term(state: &TagState, epsilon_l1: f64) -> Result<f64> {
    if epsilon_l1 <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon_l1 must be positive, got {epsilon_l1}"
        )));
    }
    Ok(state
        .t
        .iter()
        .map(|t| (t * t + epsilon_l1 * epsilon_l1).sqrt() - epsilon_l1)
        .sum())
}

/// Full objective with its per-term breakdown.
pub fn objective_total(
    state: &TagState,
    y: &Array2<f64>,
    pred: &Predictor,
    graph: &SimilarityGraph,
    hp: &HyperParams,
) -> Result<(f64, Breakdown)> {
    let breakdown = Breakdown {
        consistency: consistency_term(state)?,
        prediction: prediction_term(state, y, pred)?,
        smoothness: smoothness_term(state, graph)?,
        sparsity: sparsity_term(state, hp.epsilon_l1)?,
    };
    let total = breakdown.consistency
        + hp.lambda1 * breakdown.prediction
        + hp.lambda2 * breakdown.smoothness
        + hp.lambda3 * breakdown.sparsity;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_similarity, knn_neighbors};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, m: usize, n: usize) -> TagState {
        let t = Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0));
        let t_hat = Array2::from_shape_fn((m, n), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let phi = Array2::from_shape_fn((m, n), |_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
        let t_hat = &t_hat * &phi;
        TagState::new(t, t_hat, phi).unwrap()
    }

    #[test]
    fn consistency_zero_on_agreement() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let state = TagState::new(t.clone(), t, Array2::ones((2, 2))).unwrap();
        assert_eq!(consistency_term(&state).unwrap(), 0.0);
    }

    #[test]
    fn consistency_zero_when_fully_masked() {
        let state = TagState::new(
            array![[3.0, -2.0], [1.5, 0.5]],
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)),
        )
        .unwrap();
        assert_eq!(consistency_term(&state).unwrap(), 0.0);
    }

    #[test]
    fn consistency_hand_computed_case() {
        let state = TagState::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[0.0, 0.0], [0.0, 1.0]],
            array![[1.0, 0.0], [1.0, 1.0]],
        )
        .unwrap();
        assert_eq!(consistency_term(&state).unwrap(), 1.0);
    }

    #[test]
    fn consistency_ignores_masked_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = random_state(&mut rng, 3, 4);
        let base = consistency_term(&state).unwrap();
        let mut perturbed = state.clone();
        for j in 0..3 {
            for i in 0..4 {
                if perturbed.phi[[j, i]] == 0.0 {
                    perturbed.t[[j, i]] += 5.0;
                }
            }
        }
        assert_eq!(consistency_term(&perturbed).unwrap(), base);
    }

    #[test]
    fn prediction_zero_for_perfect_predictor() {
        let y = array![[0.5, -0.5], [1.0, 2.0]];
        let u = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let b = array![0.1, -0.2, 0.0];
        let pred = Predictor::new(u.clone(), b.clone()).unwrap();
        let mut t = u.dot(&y);
        for i in 0..2 {
            for j in 0..3 {
                t[[j, i]] -= b[j];
            }
        }
        let state = TagState::new(t, Array2::zeros((3, 2)), Array2::zeros((3, 2))).unwrap();
        assert!(prediction_term(&state, &y, &pred).unwrap() < 1e-28);
    }

    #[test]
    fn prediction_zero_predictor_gives_frobenius_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = random_state(&mut rng, 3, 4);
        let y = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
        let pred = Predictor::new(Array2::zeros((3, 2)), Array1::zeros(3)).unwrap();
        let expected: f64 = state.t.iter().map(|v| v * v).sum();
        assert!((prediction_term(&state, &y, &pred).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn prediction_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = random_state(&mut rng, 3, 4);
        let y = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
        let u = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let pred = Predictor::new(u.clone(), b.clone()).unwrap();
        let mut expected = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                let mut p = -b[j];
                for l in 0..2 {
                    p += u[[j, l]] * y[[l, i]];
                }
                let r = state.t[[j, i]] - p;
                expected += r * r;
            }
        }
        assert!((prediction_term(&state, &y, &pred).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn smoothness_zero_for_constant_t() {
        let t = Array2::from_elem((3, 4), 0.7);
        let state = TagState::new(t, Array2::zeros((3, 4)), Array2::zeros((3, 4))).unwrap();
        let y = array![[0.0, 1.0, 2.0, 4.0]];
        let ns = knn_neighbors(y.view(), 2).unwrap();
        let graph = build_similarity(y.view(), &ns, 1.0).unwrap();
        assert_eq!(smoothness_term(&state, &graph).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_linear_in_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = random_state(&mut rng, 3, 4);
        let y = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
        let ns = knn_neighbors(y.view(), 2).unwrap();
        let graph = build_similarity(y.view(), &ns, 1.0).unwrap();
        let base = smoothness_term(&state, &graph).unwrap();
        let mut doubled = graph.clone();
        for row in &mut doubled.weights {
            for w in row {
                *w *= 2.0;
            }
        }
        assert!((smoothness_term(&state, &doubled).unwrap() - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn smoothness_hand_computed_chain() {
        // 3 images, k=1 chain 0->1, 1->2, 2->1 with hand-set weights
        let graph = SimilarityGraph {
            neighbors: vec![vec![1], vec![2], vec![1]],
            weights: vec![vec![1.0], vec![1.0], vec![1.0]],
            gamma: 1.0,
            k: 1,
        };
        let t = array![[1.0, 2.0, 4.0]];
        let state = TagState::new(t, Array2::zeros((1, 3)), Array2::zeros((1, 3))).unwrap();
        // (1-2)^2 + (2-4)^2 + (4-2)^2 = 1 + 4 + 4
        assert_eq!(smoothness_term(&state, &graph).unwrap(), 9.0);
    }

    #[test]
    fn smoothness_invariant_to_column_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = random_state(&mut rng, 3, 5);
        let y = Array2::from_shape_fn((2, 5), |_| rng.gen_range(-1.0..1.0));
        let ns = knn_neighbors(y.view(), 2).unwrap();
        let graph = build_similarity(y.view(), &ns, 1.0).unwrap();
        let base = smoothness_term(&state, &graph).unwrap();
        let mut shifted = state.clone();
        for i in 0..5 {
            for j in 0..3 {
                shifted.t[[j, i]] += [0.3, -1.1, 0.9][j];
            }
        }
        assert!((smoothness_term(&shifted, &graph).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn sparsity_zero_at_zero() {
        let state = TagState::new(
            Array2::zeros((2, 3)),
            Array2::zeros((2, 3)),
            Array2::zeros((2, 3)),
        )
        .unwrap();
        assert_eq!(sparsity_term(&state, 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn sparsity_tiny_epsilon_approaches_l1() {
        let state = TagState::new(
            array![[3.0]],
            Array2::zeros((1, 1)),
            Array2::zeros((1, 1)),
        )
        .unwrap();
        assert!((sparsity_term(&state, 1e-8).unwrap() - 3.0).abs() < 1e-7);
    }

    #[test]
    fn sparsity_within_epsilon_bound_of_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = random_state(&mut rng, 4, 5);
        let eps = 1e-3;
        let smoothed = sparsity_term(&state, eps).unwrap();
        let exact: f64 = state.t.iter().map(|v| v.abs()).sum();
        assert!((smoothed - exact).abs() <= eps * 20.0);
        assert!(smoothed <= exact);
    }

    #[test]
    fn total_zero_at_trivial_minimum() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let state = TagState::new(t.clone(), t, Array2::ones((2, 2))).unwrap();
        let y = array![[0.0, 1.0]];
        let ns = knn_neighbors(y.view(), 1).unwrap();
        let graph = build_similarity(y.view(), &ns, 1.0).unwrap();
        let pred = Predictor::new(Array2::zeros((2, 1)), Array1::zeros(2)).unwrap();
        let hp = HyperParams {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..HyperParams::default()
        };
        let (total, _) = objective_total(&state, &y, &pred, &graph, &hp).unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn total_is_weighted_sum_and_linear_in_lambdas() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = random_state(&mut rng, 3, 5);
        let y = Array2::from_shape_fn((2, 5), |_| rng.gen_range(-1.0..1.0));
        let u = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let pred = Predictor::new(u, b).unwrap();
        let ns = knn_neighbors(y.view(), 2).unwrap();
        let graph = build_similarity(y.view(), &ns, 1.0).unwrap();
        let hp = HyperParams {
            lambda1: 0.3,
            lambda2: 1.7,
            lambda3: 0.05,
            ..HyperParams::default()
        };
        let (total, bd) = objective_total(&state, &y, &pred, &graph, &hp).unwrap();
        assert!(bd.consistency >= 0.0 && bd.prediction >= 0.0);
        assert!(bd.smoothness >= 0.0 && bd.sparsity >= 0.0);
        let expected = bd.consistency
            + hp.lambda1 * bd.prediction
            + hp.lambda2 * bd.smoothness
            + hp.lambda3 * bd.sparsity;
        assert!((total - expected).abs() < 1e-12);

        // linear in each lambda
        let hp2 = HyperParams {
            lambda2: 2.0 * hp.lambda2,
            ..hp.clone()
        };
        let (total2, _) = objective_total(&state, &y, &pred, &graph, &hp2).unwrap();
        assert!((total2 - total - hp.lambda2 * bd.smoothness).abs() < 1e-12);
    }
}
