//! Evaluation protocols: tag masking, annotation ranking with Precision@K,
//! tag-based retrieval with Pos@Top, cross-validation, and the synthetic
//! cluster block-model dataset used for desk-scale verification.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::PatchMatrix;
use crate::error::{Error, Result};
use crate::objective::HyperParams;
use crate::optimizer::{run, Dataset};

/// Per-fold metric values and their mean.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metric: String,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub k: usize,
    pub rho: f64,
    pub seed: u64,
}

impl EvalReport {
    fn new(metric: impl Into<String>, per_fold: Vec<f64>, k: usize, rho: f64, seed: u64) -> Self {
        let mean = if per_fold.is_empty() {
            0.0
        } else {
            per_fold.iter().sum::<f64>() / per_fold.len() as f64
        };
        Self {
            metric: metric.into(),
            per_fold,
            mean,
            k,
            rho,
            seed,
        }
    }
}

/// Remove a rho fraction of the observed positive entries, uniformly at
/// random. Negative entries stay observed; only removed positives become
/// missing.
pub fn mask_generate(
    t_full: &Array2<f64>,
    rho: f64,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in (0,1), got {rho}"
        )));
    }
    if t_full.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidArgument("T_full must be 0/1 valued".into()));
    }
    let positives: Vec<(usize, usize)> = t_full
        .indexed_iter()
        .filter(|(_, v)| **v == 1.0)
        .map(|((j, i), _)| (j, i))
        .collect();
    let n_remove = (rho * positives.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = positives;
    order.shuffle(&mut rng);
    let mut t_hat = t_full.clone();
    let mut phi = Array2::ones(t_full.dim());
    for &(j, i) in &order[..n_remove] {
        t_hat[[j, i]] = 0.0;
        phi[[j, i]] = 0.0;
    }
    Ok((t_hat, phi))
}

/// Indices of the K largest scores, descending; ties toward the smaller index.
pub fn annotate_topk(scores: &Array1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Fraction of the top-K predictions that appear in the truth set.
pub fn precision_at_k(predicted: &[usize], truth: &std::collections::HashSet<usize>, k: usize) -> f64 {
    let hits = predicted.iter().take(k).filter(|i| truth.contains(i)).count();
    hits as f64 / k as f64
}

/// Rank all image indices by score, descending; ties toward the smaller index.
pub fn retrieve(scores: &Array1<f64>) -> Vec<usize> {
    annotate_topk(scores, scores.len())
}

/// Fraction of relevant images ranked strictly above the first non-relevant
/// one. Returns None (query undefined) when nothing is relevant; 1.0 when
/// nothing is non-relevant.
pub fn pos_at_top(
    ranking: &[usize],
    relevant: &std::collections::HashSet<usize>,
) -> Result<Option<f64>> {
    if ranking.is_empty() {
        return Err(Error::InvalidArgument("empty ranking".into()));
    }
    if relevant.is_empty() {
        return Ok(None);
    }
    let mut above = 0usize;
    let mut saw_negative = false;
    for idx in ranking {
        if relevant.contains(idx) {
            if !saw_negative {
                above += 1;
            }
        } else {
            saw_negative = true;
        }
    }
    if !saw_negative {
        return Ok(Some(1.0));
    }
    Ok(Some(above as f64 / relevant.len() as f64))
}

/// Seeded partition of 0..n into `folds` near-equal parts.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!(
            "folds must lie in [2, {n}], got {folds}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut parts = vec![Vec::new(); folds];
    for (pos, img) in order.into_iter().enumerate() {
        parts[pos % folds].push(img);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Per-fold results from one cross-validation sweep.
#[derive(Debug, Clone)]
pub struct CrossValReport {
    pub precision: EvalReport,
    pub pos_top: EvalReport,
}

/// Cross-validated evaluation: each fold's images are fully masked (the
/// annotation setting), the remaining images keep a rho-masked view, and the
/// solver completes the matrix. Precision@K is averaged over test images;
/// Pos@Top over all defined tag queries.
pub fn cross_validate(
    patches: &[PatchMatrix],
    t_full: &Array2<f64>,
    folds: usize,
    rho: f64,
    hp: &HyperParams,
    k: usize,
    seed: u64,
) -> Result<CrossValReport> {
    let n = patches.len();
    if t_full.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "tag matrix has {} columns for {n} images",
            t_full.ncols()
        )));
    }
    let parts = fold_partition(n, folds, seed)?;
    let mut precision_folds = Vec::with_capacity(folds);
    let mut postop_folds = Vec::with_capacity(folds);

    for (fold_idx, test_images) in parts.iter().enumerate() {
        let (mut t_hat, mut phi) = mask_generate(t_full, rho, seed.wrapping_add(fold_idx as u64))?;
        for &i in test_images {
            for j in 0..t_full.nrows() {
                t_hat[[j, i]] = 0.0;
                phi[[j, i]] = 0.0;
            }
        }
        let ds = Dataset::new(patches.to_vec(), t_hat, phi)?;
        let ts = run(&ds, hp, seed.wrapping_add(1000 + fold_idx as u64))?;

        // annotation: Precision@K over test images
        let mut p_sum = 0.0;
        let mut p_count = 0usize;
        for &i in test_images {
            let truth: std::collections::HashSet<usize> = (0..t_full.nrows())
                .filter(|&j| t_full[[j, i]] == 1.0)
                .collect();
            if truth.is_empty() {
                continue;
            }
            let scores = ts.state.t.column(i).to_owned();
            let predicted = annotate_topk(&scores, k);
            p_sum += precision_at_k(&predicted, &truth, k);
            p_count += 1;
        }
        precision_folds.push(if p_count > 0 { p_sum / p_count as f64 } else { 0.0 });

        // retrieval: Pos@Top over all tags as queries
        let mut pt_sum = 0.0;
        let mut pt_count = 0usize;
        for j in 0..t_full.nrows() {
            let relevant: std::collections::HashSet<usize> = (0..n)
                .filter(|&i| t_full[[j, i]] == 1.0)
                .collect();
            let scores = ts.state.t.row(j).to_owned();
            let ranking = retrieve(&scores);
            if let Some(v) = pos_at_top(&ranking, &relevant)? {
                pt_sum += v;
                pt_count += 1;
            }
        }
        postop_folds.push(if pt_count > 0 { pt_sum / pt_count as f64 } else { 0.0 });
    }

    Ok(CrossValReport {
        precision: EvalReport::new(format!("precision@{k}"), precision_folds, k, rho, seed),
        pos_top: EvalReport::new("pos@top", postop_folds, k, rho, seed),
    })
}

/// Cluster block-model generator. Each image belongs to one latent cluster;
/// its patches are the cluster center plus Gaussian noise, and its tag column
/// is the cluster's block of tags, so tags are predictable from the pooled
/// representation.
pub struct SynthDataset {
    pub patches: Vec<PatchMatrix>,
    pub t_full: Array2<f64>,
    pub cluster_of: Vec<usize>,
    pub centers: Array2<f64>,
}

/// Contiguous tag block implied by one cluster. Blocks overlap when the tag
/// budget is short so every cluster still carries several tags.
pub fn cluster_tag_block(cluster: usize, clusters: usize, m_tags: usize) -> std::ops::Range<usize> {
    let block = (2 * m_tags / (clusters + 1)).clamp(1, m_tags);
    let span = m_tags - block;
    let offset = if clusters > 1 {
        cluster * span / (clusters - 1)
    } else {
        0
    };
    offset..offset + block
}

pub fn synth_dataset(
    n_images: usize,
    m_tags: usize,
    d: usize,
    patches_per_image: usize,
    clusters: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SynthDataset> {
    if n_images == 0 || m_tags == 0 || d == 0 || patches_per_image == 0 || clusters == 0 {
        return Err(Error::InvalidArgument(
            "synth dimensions must all be positive".into(),
        ));
    }
    if noise_sigma < 0.0 {
        return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // well separated centers: random sign patterns, redrawn on collision so
    // distinct clusters sit at squared distance >= 4
    let mut centers = Array2::zeros((d, clusters));
    let mut drawn: Vec<Vec<i8>> = Vec::with_capacity(clusters);
    for c in 0..clusters {
        let mut attempts = 0;
        loop {
            let pattern: Vec<i8> =
                (0..d).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
            if !drawn.contains(&pattern) {
                for (row, s) in pattern.iter().enumerate() {
                    centers[[row, c]] = *s as f64;
                }
                drawn.push(pattern);
                break;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {clusters} distinct cluster centers in dimension {d}"
                )));
            }
        }
    }
    let mut patches = Vec::with_capacity(n_images);
    let mut t_full = Array2::zeros((m_tags, n_images));
    let mut cluster_of = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let c = i % clusters;
        cluster_of.push(c);
        let data = Array2::from_shape_fn((d, patches_per_image), |(row, _)| {
            centers[[row, c]] + noise_sigma * gauss(&mut rng)
        });
        patches.push(PatchMatrix::new(data, format!("synth_{i:04}"))?);
        for j in cluster_tag_block(c, clusters, m_tags) {
            t_full[[j, i]] = 1.0;
        }
    }
    Ok(SynthDataset {
        patches,
        t_full,
        cluster_of,
        centers,
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
