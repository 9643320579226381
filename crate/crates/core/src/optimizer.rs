//! Alternating gradient descent: refresh the representations and the
//! similarity graph, then take backtracked gradient steps on T, U, b, W with
//! the graph held fixed.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv_forward, ConvRepr, FilterBank, PatchMatrix};
use crate::error::{Error, Result};
use crate::gradients::{grad_b, grad_t, grad_u, grad_w};
use crate::graph::{build_similarity, knn_neighbors, median_gamma, SimilarityGraph};
use crate::objective::{
    objective_total, Breakdown, GammaSpec, HyperParams, Predictor, TagState,
};

/// Patch matrices for every image plus the observed tag matrix and its mask.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub patches: Vec<PatchMatrix>,
    pub t_hat: Array2<f64>,
    pub phi: Array2<f64>,
}

impl Dataset {
    pub fn new(patches: Vec<PatchMatrix>, t_hat: Array2<f64>, phi: Array2<f64>) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if t_hat.ncols() != patches.len() || phi.dim() != t_hat.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} images but tag matrix is {:?} and mask {:?}",
                patches.len(),
                t_hat.dim(),
                phi.dim()
            )));
        }
        let d = patches[0].dim();
        if patches.iter().any(|p| p.dim() != d) {
            return Err(Error::ShapeMismatch(
                "patch matrices disagree on feature dimension".into(),
            ));
        }
        Ok(Self { patches, t_hat, phi })
    }

    pub fn n_images(&self) -> usize {
        self.patches.len()
    }

    pub fn n_tags(&self) -> usize {
        self.t_hat.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches[0].dim()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TracePoint {
    pub iteration: usize,
    pub total: f64,
    pub breakdown: Breakdown,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub state: TagState,
    pub pred: Predictor,
    pub bank: FilterBank,
    pub y: Array2<f64>,
    pub reprs: Vec<ConvRepr>,
    pub graph: SimilarityGraph,
    pub trace: Vec<TracePoint>,
    /// Frozen-S objective values through each outer step's inner phase
    /// (start value, then after every accepted variable update).
    pub inner_history: Vec<Vec<f64>>,
}

fn compute_representations(
    patches: &[PatchMatrix],
    bank: &FilterBank,
) -> Result<(Vec<ConvRepr>, Array2<f64>)> {
    let r = bank.n_filters();
    let mut y = Array2::zeros((r, patches.len()));
    let mut reprs = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        let repr = conv_forward(p, bank)?;
        y.column_mut(i).assign(&repr.y);
        reprs.push(repr);
    }
    Ok((reprs, y))
}

fn build_graph(y: &Array2<f64>, hp: &HyperParams) -> Result<SimilarityGraph> {
    let neighbors = knn_neighbors(y.view(), hp.k)?;
    let gamma = match hp.gamma {
        GammaSpec::Fixed(g) => g,
        GammaSpec::Median => median_gamma(y.view(), &neighbors),
    };
    build_similarity(y.view(), &neighbors, gamma)
}

/// Solve A x = rhs for a small symmetric positive definite A by Gaussian
/// elimination with partial pivoting. Used only for the ridge warm start.
fn solve_dense(mut a: Array2<f64>, mut rhs: Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[[row, col]].abs() > a[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if a[[pivot, col]].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap([col, j], [pivot, j]);
            }
            for j in 0..rhs.ncols() {
                rhs.swap([col, j], [pivot, j]);
            }
        }
        for row in (col + 1)..n {
            let f = a[[row, col]] / a[[col, col]];
            for j in col..n {
                a[[row, j]] -= f * a[[col, j]];
            }
            for j in 0..rhs.ncols() {
                rhs[[row, j]] -= f * rhs[[col, j]];
            }
        }
    }
    let mut x = Array2::zeros(rhs.dim());
    for col in (0..n).rev() {
        for j in 0..rhs.ncols() {
            let mut v = rhs[[col, j]];
            for l in (col + 1)..n {
                v -= a[[col, l]] * x[[l, j]];
            }
            x[[col, j]] = v / a[[col, col]];
        }
    }
    Some(x)
}

/// Ridge-regress the initial tag columns on the initial representations to
/// warm-start (U, b); zero predictor when the system is too small.
fn ridge_warm_start(t: &Array2<f64>, y: &Array2<f64>, ridge: f64) -> (Array2<f64>, Array1<f64>) {
    let (m, n) = t.dim();
    let r = y.nrows();
    if n < 2 {
        return (Array2::zeros((m, r)), Array1::zeros(m));
    }
    // augmented design: rows of A are [y_i; -1] so theta = [U | b]
    let mut a = Array2::zeros((r + 1, n));
    for i in 0..n {
        for l in 0..r {
            a[[l, i]] = y[[l, i]];
        }
        a[[r, i]] = -1.0;
    }
    let mut gram = a.dot(&a.t());
    for l in 0..=r {
        gram[[l, l]] += ridge;
    }
    let rhs = a.dot(&t.t());
    match solve_dense(gram, rhs) {
        Some(theta) => {
            // theta is (r+1) x m
            let mut u = Array2::zeros((m, r));
            let mut b = Array1::zeros(m);
            for j in 0..m {
                for l in 0..r {
                    u[[j, l]] = theta[[l, j]];
                }
                b[j] = theta[[r, j]];
            }
            (u, b)
        }
        None => (Array2::zeros((m, r)), Array1::zeros(m)),
    }
}

/// Seeded initialization: Gaussian filters, frequency-filled tag matrix,
/// ridge-regressed predictor, and a fresh representation/graph pair.
pub fn initialize(dataset: &Dataset, hp: &HyperParams, seed: u64) -> Result<TrainState> {
    hp.validate()?;
    let n = dataset.n_images();
    let m = dataset.n_tags();
    let d = dataset.patch_dim();
    if dataset.phi.iter().all(|v| *v == 0.0) {
        return Err(Error::NothingObserved);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (1.0 / d as f64).sqrt();
    let w = Array2::from_shape_fn((d, hp.n_filters), |_| sample_normal(&mut rng) * std);
    let bank = FilterBank::new(w, hp.nonlinearity)?;

    // masked entries start at the per-tag observed frequency
    let mut t = dataset.t_hat.clone();
    for j in 0..m {
        let mut count = 0.0;
        let mut sum = 0.0;
        for i in 0..n {
            if dataset.phi[[j, i]] == 1.0 {
                count += 1.0;
                sum += dataset.t_hat[[j, i]];
            }
        }
        let freq = if count > 0.0 { sum / count } else { 0.0 };
        for i in 0..n {
            if dataset.phi[[j, i]] == 0.0 {
                t[[j, i]] = freq;
            }
        }
    }

    let (reprs, y) = compute_representations(&dataset.patches, &bank)?;
    let graph = build_graph(&y, hp)?;
    let (u, b) = ridge_warm_start(&t, &y, 1e-3);
    let pred = Predictor::new(u, b)?;
    let state = TagState::new(t, dataset.t_hat.clone(), dataset.phi.clone())?;

    let (total, breakdown) = objective_total(&state, &y, &pred, &graph, hp)?;
    Ok(TrainState {
        state,
        pred,
        bank,
        y,
        reprs,
        graph,
        trace: vec![TracePoint {
            iteration: 0,
            total,
            breakdown,
        }],
        inner_history: Vec::new(),
    })
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms; keeps the dependency surface small
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const MAX_HALVINGS: usize = 20;

/// Backtracked step on a flat parameter block. Tries eta, halving up to 20
/// times, and keeps the best candidate; falls back to no move when every
/// candidate increases the frozen-S objective.
fn backtrack_step<F>(
    current: &[f64],
    gradient: &[f64],
    current_obj: f64,
    eta: f64,
    mut eval: F,
    block: &'static str,
) -> Result<(Vec<f64>, f64, bool)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut step = eta;
    for _ in 0..=MAX_HALVINGS {
        let candidate: Vec<f64> = current
            .iter()
            .zip(gradient)
            .map(|(x, g)| x - step * g)
            .collect();
        if candidate.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { block });
        }
        let obj = eval(&candidate)?;
        if !obj.is_finite() {
            return Err(Error::Diverged { block });
        }
        match &best {
            Some((_, b)) if obj >= *b => {
                // objective is unimodal along the halving schedule; once a
                // non-increasing step stops improving, smaller steps only
                // move back toward the current point
                break;
            }
            _ => {
                if obj <= current_obj {
                    best = Some((candidate, obj));
                }
            }
        }
        step *= 0.5;
    }
    match best {
        Some((x, obj)) => Ok((x, obj, true)),
        None => Ok((current.to_vec(), current_obj, false)),
    }
}

/// One outer iteration: rebuild the graph from the current filters, then run
/// the frozen-S inner rounds in the order T, U, b, W.
pub fn outer_step(ts: &mut TrainState, dataset: &Dataset, hp: &HyperParams) -> Result<()> {
    // phase 1: refresh representations and similarity graph
    let (reprs, y) = compute_representations(&dataset.patches, &ts.bank)?;
    ts.reprs = reprs;
    ts.y = y;
    ts.graph = build_graph(&ts.y, hp)?;

    let (mut obj, _) = objective_total(&ts.state, &ts.y, &ts.pred, &ts.graph, hp)?;
    if !obj.is_finite() {
        return Err(Error::Diverged { block: "objective" });
    }
    let mut inner = vec![obj];

    // phase 2: frozen-S gradient rounds
    for _ in 0..hp.max_inner {
        // T
        let g = grad_t(&ts.state, &ts.y, &ts.pred, &ts.graph, hp)?;
        let cur: Vec<f64> = ts.state.t.iter().copied().collect();
        let gv: Vec<f64> = g.iter().copied().collect();
        let shape = ts.state.t.dim();
        let (next, new_obj, _) = backtrack_step(&cur, &gv, obj, hp.eta, |x| {
            let t = Array2::from_shape_vec(shape, x.to_vec()).unwrap();
            let s = TagState::new(t, ts.state.t_hat.clone(), ts.state.phi.clone())?;
            Ok(objective_total(&s, &ts.y, &ts.pred, &ts.graph, hp)?.0)
        }, "T")?;
        ts.state.t = Array2::from_shape_vec(shape, next).unwrap();
        obj = new_obj;
        inner.push(obj);

        // U
        let g = grad_u(&ts.state, &ts.y, &ts.pred, hp)?;
        let cur: Vec<f64> = ts.pred.u.iter().copied().collect();
        let gv: Vec<f64> = g.iter().copied().collect();
        let shape = ts.pred.u.dim();
        let (next, new_obj, _) = backtrack_step(&cur, &gv, obj, hp.eta, |x| {
            let u = Array2::from_shape_vec(shape, x.to_vec()).unwrap();
            let p = Predictor::new(u, ts.pred.b.clone())?;
            Ok(objective_total(&ts.state, &ts.y, &p, &ts.graph, hp)?.0)
        }, "U")?;
        ts.pred.u = Array2::from_shape_vec(shape, next).unwrap();
        obj = new_obj;
        inner.push(obj);

        // b
        let g = grad_b(&ts.state, &ts.y, &ts.pred, hp)?;
        let cur: Vec<f64> = ts.pred.b.iter().copied().collect();
        let gv: Vec<f64> = g.iter().copied().collect();
        let (next, new_obj, _) = backtrack_step(&cur, &gv, obj, hp.eta, |x| {
            let p = Predictor::new(ts.pred.u.clone(), Array1::from_vec(x.to_vec()))?;
            Ok(objective_total(&ts.state, &ts.y, &p, &ts.graph, hp)?.0)
        }, "b")?;
        ts.pred.b = Array1::from_vec(next);
        obj = new_obj;
        inner.push(obj);

        // W (representations recomputed per candidate; S stays frozen)
        let g = grad_w(&dataset.patches, &ts.bank, &ts.reprs, &ts.state, &ts.pred, hp)?;
        let cur: Vec<f64> = ts.bank.weights.iter().copied().collect();
        let gv: Vec<f64> = g.iter().copied().collect();
        let shape = ts.bank.weights.dim();
        let (next, new_obj, moved) = backtrack_step(&cur, &gv, obj, hp.eta, |x| {
            let w = Array2::from_shape_vec(shape, x.to_vec()).unwrap();
            let bank = FilterBank::new(w, hp.nonlinearity)?;
            let (_, y) = compute_representations(&dataset.patches, &bank)?;
            Ok(objective_total(&ts.state, &y, &ts.pred, &ts.graph, hp)?.0)
        }, "W")?;
        if moved {
            ts.bank.weights = Array2::from_shape_vec(shape, next).unwrap();
            let (reprs, y) = compute_representations(&dataset.patches, &ts.bank)?;
            ts.reprs = reprs;
            ts.y = y;
        }
        obj = new_obj;
        inner.push(obj);
    }
    ts.inner_history.push(inner);

    let (total, breakdown) = objective_total(&ts.state, &ts.y, &ts.pred, &ts.graph, hp)?;
    let iteration = ts.trace.last().map_or(0, |p| p.iteration) + 1;
    ts.trace.push(TracePoint {
        iteration,
        total,
        breakdown,
    });
    Ok(())
}

/// Full solve: initialize, then run outer steps until `max_outer` is reached
/// or the relative objective change stays below `tol` for 3 consecutive
/// steps (an infinite tol stops after the first step).
pub fn run(dataset: &Dataset, hp: &HyperParams, seed: u64) -> Result<TrainState> {
    let mut ts = initialize(dataset, hp, seed)?;
    let mut streak = 0;
    for _ in 0..hp.max_outer {
        let prev = ts.trace.last().unwrap().total;
        outer_step(&mut ts, dataset, hp)?;
        let cur = ts.trace.last().unwrap().total;
        let rel = (cur - prev).abs() / prev.abs().max(1e-12);
        if hp.tol.is_infinite() {
            break;
        }
        if rel < hp.tol {
            streak += 1;
            if streak >= 3 {
                break;
            }
        } else {
            streak = 0;
        }
    }
    Ok(ts)
}

/// Flatten the trace: (iteration, total, consistency, prediction, smoothness,
/// sparsity) per row, in iteration order.
pub fn export_trace(ts: &TrainState) -> Vec<(usize, f64, f64, f64, f64, f64)> {
    ts.trace
        .iter()
        .map(|p| {
            (
                p.iteration,
                p.total,
                p.breakdown.consistency,
                p.breakdown.prediction,
                p.breakdown.smoothness,
                p.breakdown.sparsity,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_dataset(seed: u64, n: usize, m: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches: Vec<PatchMatrix> = (0..n)
            .map(|i| {
                PatchMatrix::new(
                    Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)),
                    format!("img{i}"),
                )
                .unwrap()
            })
            .collect();
        let t_hat = Array2::from_shape_fn((m, n), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let phi = Array2::from_shape_fn((m, n), |_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 });
        let t_hat = &t_hat * &phi;
        Dataset::new(patches, t_hat, phi).unwrap()
    }

    fn tiny_hp() -> HyperParams {
        HyperParams {
            n_filters: 3,
            k: 2,
            max_inner: 2,
            ..HyperParams::default()
        }
    }

    #[test]
    fn initialize_fills_masked_with_row_frequency() {
        let mut ds = tiny_dataset(1, 5, 3);
        // tag 0 observed positive everywhere it is observed, one entry masked
        for i in 0..5 {
            ds.phi[[0, i]] = 1.0;
            ds.t_hat[[0, i]] = 1.0;
        }
        ds.phi[[0, 2]] = 0.0;
        ds.t_hat[[0, 2]] = 0.0;
        let ts = initialize(&ds, &tiny_hp(), 9).unwrap();
        assert_eq!(ts.state.t[[0, 2]], 1.0);
    }

    #[test]
    fn initialize_keeps_observed_entries() {
        let mut ds = tiny_dataset(2, 4, 3);
        ds.phi.fill(1.0);
        let ts = initialize(&ds, &tiny_hp(), 3).unwrap();
        assert_eq!(ts.state.t, ds.t_hat);
    }

    #[test]
    fn initialize_rejects_all_masked() {
        let mut ds = tiny_dataset(3, 4, 3);
        ds.phi.fill(0.0);
        ds.t_hat.fill(0.0);
        assert!(matches!(
            initialize(&ds, &tiny_hp(), 0),
            Err(Error::NothingObserved)
        ));
    }

    #[test]
    fn initialize_is_deterministic() {
        let ds = tiny_dataset(4, 5, 3);
        let hp = tiny_hp();
        let a = initialize(&ds, &hp, 77).unwrap();
        let b = initialize(&ds, &hp, 77).unwrap();
        assert_eq!(a.bank.weights, b.bank.weights);
        assert_eq!(a.state.t, b.state.t);
        assert_eq!(a.pred.u, b.pred.u);
        assert_eq!(a.pred.b, b.pred.b);
        assert_eq!(a.trace[0].total, b.trace[0].total);
    }

    #[test]
    fn outer_step_no_op_at_global_minimum() {
        let mut ds = tiny_dataset(5, 4, 3);
        ds.phi.fill(1.0);
        let hp = HyperParams {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..tiny_hp()
        };
        let mut ts = initialize(&ds, &hp, 5).unwrap();
        assert_eq!(ts.trace[0].total, 0.0);
        let t_before = ts.state.t.clone();
        outer_step(&mut ts, &ds, &hp).unwrap();
        assert_eq!(ts.trace[1].total, 0.0);
        assert_eq!(ts.state.t, t_before);
    }

    #[test]
    fn inner_phase_objective_never_increases() {
        let ds = tiny_dataset(6, 6, 4);
        let hp = tiny_hp();
        let mut ts = initialize(&ds, &hp, 11).unwrap();
        for _ in 0..5 {
            outer_step(&mut ts, &ds, &hp).unwrap();
        }
        for phase in &ts.inner_history {
            for pair in phase.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "inner objective rose: {pair:?}");
            }
        }
    }

    #[test]
    fn run_respects_zero_max_outer() {
        let ds = tiny_dataset(7, 4, 3);
        let hp = HyperParams {
            max_outer: 0,
            ..tiny_hp()
        };
        let ts = run(&ds, &hp, 1).unwrap();
        assert_eq!(ts.trace.len(), 1);
    }

    #[test]
    fn run_infinite_tol_stops_after_one_step() {
        let ds = tiny_dataset(8, 4, 3);
        let hp = HyperParams {
            tol: f64::INFINITY,
            ..tiny_hp()
        };
        let ts = run(&ds, &hp, 1).unwrap();
        assert_eq!(ts.trace.len(), 2);
    }

    #[test]
    fn run_is_deterministic() {
        let ds = tiny_dataset(9, 6, 4);
        let hp = HyperParams {
            max_outer: 4,
            tol: 1e-300,
            ..tiny_hp()
        };
        let a = run(&ds, &hp, 123).unwrap();
        let b = run(&ds, &hp, 123).unwrap();
        assert_eq!(a.trace.len(), b.trace.len());
        for (pa, pb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(pa.total, pb.total);
        }
        assert_eq!(a.state.t, b.state.t);
    }

    #[test]
    fn trace_has_max_outer_plus_one_rows_when_tol_tiny() {
        let ds = tiny_dataset(10, 4, 3);
        let hp = HyperParams {
            max_outer: 5,
            tol: 1e-300,
            ..tiny_hp()
        };
        let ts = run(&ds, &hp, 2).unwrap();
        assert_eq!(export_trace(&ts).len(), 6);
    }

    #[test]
    fn exported_totals_match_recomputation() {
        let ds = tiny_dataset(11, 5, 3);
        let hp = HyperParams {
            max_outer: 3,
            tol: 1e-300,
            ..tiny_hp()
        };
        let ts = run(&ds, &hp, 4).unwrap();
        // final row must equal the objective recomputed on the final state
        let (total, bd) = objective_total(&ts.state, &ts.y, &ts.pred, &ts.graph, &hp).unwrap();
        let last = ts.trace.last().unwrap();
        assert!((last.total - total).abs() < 1e-12);
        assert!((last.breakdown.consistency - bd.consistency).abs() < 1e-12);
    }

    #[test]
    fn t_subproblem_converges_to_closed_form() {
        // lambda2 = lambda3 = 0 with U, b, W frozen: gradient descent on T
        // alone must land on t = (phi * t_hat + lambda1 * p) / (phi + lambda1)
        let ds = tiny_dataset(12, 5, 3);
        let hp = HyperParams {
            lambda1: 0.8,
            lambda2: 0.0,
            lambda3: 0.0,
            eta: 0.2,
            ..tiny_hp()
        };
        let ts = initialize(&ds, &hp, 6).unwrap();
        let mut t = ts.state.t.clone();
        for _ in 0..2000 {
            let state = TagState::new(t.clone(), ds.t_hat.clone(), ds.phi.clone()).unwrap();
            let g = grad_t(&state, &ts.y, &ts.pred, &ts.graph, &hp).unwrap();
            t = &t - &g.mapv(|v| hp.eta * v);
        }
        for i in 0..5 {
            let p = ts.pred.predict(ts.y.column(i));
            for j in 0..3 {
                let phi = ds.phi[[j, i]];
                let closed = (phi * ds.t_hat[[j, i]] + hp.lambda1 * p[j]) / (phi + hp.lambda1);
                assert!(
                    (t[[j, i]] - closed).abs() < 1e-6,
                    "({j},{i}): {} vs {}",
                    t[[j, i]],
                    closed
                );
            }
        }
    }
}
