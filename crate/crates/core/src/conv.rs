//! Patch extraction and the convolutional max-pool representation.
//!
//! An image is cut into overlapping square patches by a sliding window;
//! each patch is flattened into a column of a `PatchMatrix`. A `FilterBank`
//! maps the patch matrix to an `r`-vector by applying every filter to every
//! patch, passing the responses through a pointwise nonlinearity, and taking
//! the per-filter maximum over patches. The argmax patch index is kept for
//! the filter gradient.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Pointwise nonlinearity applied to filter responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Relu,
    Identity,
}

impl Nonlinearity {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => z.tanh(),
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::Identity => z,
        }
    }

    /// Derivative at `z`; relu takes sub-derivative 0 at 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Nonlinearity::Tanh),
            "relu" => Ok(Nonlinearity::Relu),
            "identity" => Ok(Nonlinearity::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown nonlinearity '{other}' (expected tanh|relu|identity)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Relu => "relu",
            Nonlinearity::Identity => "identity",
        }
    }
}

/// Per-image matrix of flattened patches, one column per patch (d x n_I).
#[derive(Debug, Clone)]
pub struct PatchMatrix {
    pub data: Array2<f64>,
    pub image_id: String,
}

impl PatchMatrix {
    pub fn new(data: Array2<f64>, image_id: impl Into<String>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "patch matrix must be non-empty".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "patch matrix contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            data,
            image_id: image_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_patches(&self) -> usize {
        self.data.ncols()
    }
}

/// Bank of `r` filters, one per column of `weights` (d x r).
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub weights: Array2<f64>,
    pub nonlinearity: Nonlinearity,
}

impl FilterBank {
    pub fn new(weights: Array2<f64>, nonlinearity: Nonlinearity) -> Result<Self> {
        if weights.ncols() == 0 {
            return Err(Error::InvalidArgument("filter bank needs r >= 1".into()));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "filter bank contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            weights,
            nonlinearity,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_filters(&self) -> usize {
        self.weights.ncols()
    }
}

/// Pooled representation of one image plus argmax bookkeeping.
#[derive(Debug, Clone)]
pub struct ConvRepr {
    pub y: Array1<f64>,
    /// argmax_patch[k] is the patch index attaining the maximum for filter k.
    pub argmax_patch: Vec<usize>,
}

/// Cut a grayscale raster into flattened overlapping patches.
///
/// Windows are scanned row-major over the image; each column of the result is
/// one window's pixels flattened row-major, so d = window^2.
pub fn extract_patches(
    image: ArrayView2<'_, f64>,
    window: usize,
    stride: usize,
) -> Result<PatchMatrix> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "window and stride must be positive".into(),
        ));
    }
    if window > h || window > w {
        return Err(Error::WindowExceedsImage);
    }
    let rows = (h - window) / stride + 1;
    let cols = (w - window) / stride + 1;
    let d = window * window;
    let mut data = Array2::zeros((d, rows * cols));
    let mut patch = 0;
    for pr in 0..rows {
        for pc in 0..cols {
            let r0 = pr * stride;
            let c0 = pc * stride;
            let mut idx = 0;
            for dr in 0..window {
                for dc in 0..window {
                    data[[idx, patch]] = image[[r0 + dr, c0 + dc]];
                    idx += 1;
                }
            }
            patch += 1;
        }
    }
    PatchMatrix::new(data, "")
}

/// Forward pass: y[k] = max_j g(w_k . x_j), recording the argmax patch.
/// Ties break toward the smaller patch index.
pub fn conv_forward(patches: &PatchMatrix, bank: &FilterBank) -> Result<ConvRepr> {
    if patches.dim() != bank.dim() {
        return Err(Error::ShapeMismatch(format!(
            "patch dim {} != filter dim {}",
            patches.dim(),
            bank.dim()
        )));
    }
    let r = bank.n_filters();
    let n = patches.n_patches();
    // per-column dot products keep y[k] bit-identical to g(w_k . x_j*)
    let response = |k: usize, j: usize| bank.weights.column(k).dot(&patches.data.column(j));
    let mut y = Array1::zeros(r);
    let mut argmax_patch = vec![0usize; r];
    for k in 0..r {
        let mut best = bank.nonlinearity.apply(response(k, 0));
        let mut best_j = 0;
        for j in 1..n {
            let v = bank.nonlinearity.apply(response(k, j));
            if v > best {
                best = v;
                best_j = j;
            }
        }
        y[k] = best;
        argmax_patch[k] = best_j;
    }
    Ok(ConvRepr { y, argmax_patch })
}

/// Backward pass through pooling and the nonlinearity.
///
/// Column k of the result is upstream[k] * g'(w_k . x_{j*}) * x_{j*} with
/// j* the recorded argmax patch; only the argmax patch receives gradient.
pub fn filter_gradient(
    patches: &PatchMatrix,
    bank: &FilterBank,
    repr: &ConvRepr,
    upstream: &Array1<f64>,
) -> Result<Array2<f64>> {
    let d = bank.dim();
    let r = bank.n_filters();
    if patches.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "patch dim {} != filter dim {d}",
            patches.dim()
        )));
    }
    if repr.argmax_patch.len() != r || upstream.len() != r {
        return Err(Error::ShapeMismatch(format!(
            "expected {r} filters, got repr {} / upstream {}",
            repr.argmax_patch.len(),
            upstream.len()
        )));
    }
    let mut grad = Array2::zeros((d, r));
    for k in 0..r {
        if upstream[k] == 0.0 {
            continue;
        }
        let j = repr.argmax_patch[k];
        let x = patches.data.column(j);
        let z = bank.weights.column(k).dot(&x);
        let scale = upstream[k] * bank.nonlinearity.derivative(z);
        for i in 0..d {
            grad[[i, k]] += scale * x[i];
        }
    }
    Ok(grad)
}
