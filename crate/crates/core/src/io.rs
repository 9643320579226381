//! Text file formats: dense matrices, sparse observed-tag files, model
//! checkpoints, dataset manifests, trace CSVs, and the `key value` config.
//!
//! All formats are plain text with 0-based indices; lines starting with `#`
//! are comments and skipped by every reader. Floats are written with Rust's
//! shortest round-trip formatting, so write/read pairs are lossless and
//! reruns produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::conv::{FilterBank, Nonlinearity};
use crate::error::{Error, Result};
use crate::objective::{GammaSpec, HyperParams, Predictor};
use crate::optimizer::TrainState;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Content lines with their 1-based line numbers, comments and blanks removed.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(path: &Path, line: usize, token: &str) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| parse_err(path, line, format!("non-numeric token '{token}'")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite token '{token}'")));
    }
    Ok(v)
}

fn parse_usize(path: &Path, line: usize, token: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid integer '{token}'")))
}

/// Read a dense matrix: header `rows cols`, then `rows` lines of `cols`
/// space-separated floats.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = read_to_string(path)?;
    let result = parse_matrix_block(path, &mut content_lines(&text));
    result
}

fn parse_matrix_block<'a>(
    path: &Path,
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
) -> Result<Array2<f64>> {
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 0, "missing matrix header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(path, hline, "header must be 'rows cols'"));
    }
    let rows = parse_usize(path, hline, dims[0])?;
    let cols = parse_usize(path, hline, dims[1])?;
    if rows == 0 || cols == 0 {
        return Err(parse_err(path, hline, "matrix dimensions must be positive"));
    }
    let mut data = Array2::zeros((rows, cols));
    for row in 0..rows {
        let (lno, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, hline, format!("expected {rows} rows, got {row}")))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != cols {
            return Err(parse_err(
                path,
                lno,
                format!("expected {cols} values, got {}", tokens.len()),
            ));
        }
        for (col, tok) in tokens.iter().enumerate() {
            data[[row, col]] = parse_f64(path, lno, tok)?;
        }
    }
    Ok(data)
}

fn format_matrix(m: &Array2<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_string(path, &format_matrix(m))
}

/// Read observed tags: header `m n`, then `j i v` lines declaring observed
/// entries (0-based, v in {0,1}). Undeclared entries are missing.
pub fn read_tags(path: &Path) -> Result<(Array2<f64>, Array2<f64>)> {
    let text = read_to_string(path)?;
    let mut lines = content_lines(&text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 0, "missing tag header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(path, hline, "header must be 'm n'"));
    }
    let m = parse_usize(path, hline, dims[0])?;
    let n = parse_usize(path, hline, dims[1])?;
    if m == 0 || n == 0 {
        return Err(parse_err(path, hline, "tag dimensions must be positive"));
    }
    let mut t_hat = Array2::zeros((m, n));
    let mut phi = Array2::zeros((m, n));
    for (lno, line) in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_err(path, lno, "entry must be 'j i v'"));
        }
        let j = parse_usize(path, lno, tokens[0])?;
        let i = parse_usize(path, lno, tokens[1])?;
        if j >= m || i >= n {
            return Err(parse_err(
                path,
                lno,
                format!("index ({j},{i}) out of range for {m}x{n}"),
            ));
        }
        let v = parse_f64(path, lno, tokens[2])?;
        if v != 0.0 && v != 1.0 {
            return Err(parse_err(path, lno, format!("value must be 0 or 1, got {v}")));
        }
        if phi[[j, i]] == 1.0 {
            return Err(parse_err(path, lno, format!("duplicate entry ({j},{i})")));
        }
        phi[[j, i]] = 1.0;
        t_hat[[j, i]] = v;
    }
    Ok((t_hat, phi))
}

/// Write the observed entries of (T_hat, Phi) in read_tags format.
pub fn write_tags(path: &Path, t_hat: &Array2<f64>, phi: &Array2<f64>) -> Result<()> {
    if t_hat.dim() != phi.dim() {
        return Err(Error::ShapeMismatch(format!(
            "T_hat {:?} vs Phi {:?}",
            t_hat.dim(),
            phi.dim()
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "# observed tag entries: 'j i v', 0-based");
    let _ = writeln!(out, "{} {}", t_hat.nrows(), t_hat.ncols());
    for ((j, i), p) in phi.indexed_iter() {
        if *p == 1.0 {
            let _ = writeln!(out, "{j} {i} {}", t_hat[[j, i]] as u8);
        }
    }
    write_string(path, &out)
}

fn format_hyper(hp: &HyperParams) -> String {
    let gamma = match hp.gamma {
        GammaSpec::Median => "median".to_string(),
        GammaSpec::Fixed(g) => format!("{g}"),
    };
    let mut out = String::new();
    let _ = writeln!(out, "lambda1 {}", hp.lambda1);
    let _ = writeln!(out, "lambda2 {}", hp.lambda2);
    let _ = writeln!(out, "lambda3 {}", hp.lambda3);
    let _ = writeln!(out, "gamma {gamma}");
    let _ = writeln!(out, "k {}", hp.k);
    let _ = writeln!(out, "eta {}", hp.eta);
    let _ = writeln!(out, "epsilon_l1 {}", hp.epsilon_l1);
    let _ = writeln!(out, "max_outer {}", hp.max_outer);
    let _ = writeln!(out, "max_inner {}", hp.max_inner);
    let _ = writeln!(out, "tol {}", hp.tol);
    let _ = writeln!(out, "nonlinearity {}", hp.nonlinearity.name());
    let _ = writeln!(out, "window {}", hp.window);
    let _ = writeln!(out, "stride {}", hp.stride);
    let _ = writeln!(out, "paper_gradient {}", hp.paper_gradient);
    let _ = writeln!(out, "n_filters {}", hp.n_filters);
    out
}

/// Apply one `key value` config line onto the params.
fn apply_config_line(hp: &mut HyperParams, path: &Path, lno: usize, line: &str) -> Result<()> {
    let (key, value) = line
        .split_once(char::is_whitespace)
        .ok_or_else(|| parse_err(path, lno, "expected 'key value'"))?;
    let value = value.trim();
    match key {
        "lambda1" => hp.lambda1 = parse_f64(path, lno, value)?,
        "lambda2" => hp.lambda2 = parse_f64(path, lno, value)?,
        "lambda3" => hp.lambda3 = parse_f64(path, lno, value)?,
        "gamma" => {
            hp.gamma = if value == "median" {
                GammaSpec::Median
            } else {
                GammaSpec::Fixed(parse_f64(path, lno, value)?)
            }
        }
        "k" => hp.k = parse_usize(path, lno, value)?,
        "eta" => hp.eta = parse_f64(path, lno, value)?,
        "epsilon_l1" => hp.epsilon_l1 = parse_f64(path, lno, value)?,
        "max_outer" => hp.max_outer = parse_usize(path, lno, value)?,
        "max_inner" => hp.max_inner = parse_usize(path, lno, value)?,
        "tol" => hp.tol = parse_f64(path, lno, value)?,
        "nonlinearity" => hp.nonlinearity = Nonlinearity::parse(value)?,
        "window" => hp.window = parse_usize(path, lno, value)?,
        "stride" => hp.stride = parse_usize(path, lno, value)?,
        "paper_gradient" => {
            hp.paper_gradient = value
                .parse()
                .map_err(|_| parse_err(path, lno, format!("invalid bool '{value}'")))?
        }
        "n_filters" => hp.n_filters = parse_usize(path, lno, value)?,
        other => {
            return Err(parse_err(path, lno, format!("unknown config key '{other}'")));
        }
    }
    Ok(())
}

/// Read a hyperparameter config: `key value` lines over the defaults.
pub fn read_config(path: &Path) -> Result<HyperParams> {
    let text = read_to_string(path)?;
    let mut hp = HyperParams::default();
    for (lno, line) in content_lines(&text) {
        apply_config_line(&mut hp, path, lno, line)?;
    }
    hp.validate()?;
    Ok(hp)
}

/// Save the model as named blocks [W], [U], [b], [hyper].
pub fn save_model(path: &Path, bank: &FilterBank, pred: &Predictor, hp: &HyperParams) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# model checkpoint; matrices in 'rows cols' format");
    let _ = writeln!(out, "[W]");
    out.push_str(&format_matrix(&bank.weights));
    let _ = writeln!(out, "[U]");
    out.push_str(&format_matrix(&pred.u));
    let _ = writeln!(out, "[b]");
    let b = pred
        .b
        .view()
        .insert_axis(ndarray::Axis(1))
        .to_owned();
    out.push_str(&format_matrix(&b));
    let _ = writeln!(out, "[hyper]");
    out.push_str(&format_hyper(hp));
    write_string(path, &out)
}

/// Load a model checkpoint, validating that U and W agree on r.
pub fn load_model(path: &Path) -> Result<(FilterBank, Predictor, HyperParams)> {
    let text = read_to_string(path)?;
    let mut sections: std::collections::HashMap<&str, Vec<(usize, &str)>> =
        std::collections::HashMap::new();
    let mut current: Option<&str> = None;
    for (lno, line) in content_lines(&text) {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name);
            sections.entry(name).or_default();
        } else if let Some(name) = current {
            sections.get_mut(name).unwrap().push((lno, line));
        } else {
            return Err(parse_err(path, lno, "content before first block header"));
        }
    }
    let block = |name: &'static str| -> Result<Vec<(usize, &str)>> {
        sections
            .get(name)
            .cloned()
            .ok_or(Error::MissingBlock(name))
    };
    let w = parse_matrix_block(path, &mut block("W")?.into_iter())?;
    let u = parse_matrix_block(path, &mut block("U")?.into_iter())?;
    let b = parse_matrix_block(path, &mut block("b")?.into_iter())?;
    if b.ncols() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "[b] must be a column vector, got {:?}",
            b.dim()
        )));
    }
    let mut hp = HyperParams::default();
    for (lno, line) in block("hyper")? {
        apply_config_line(&mut hp, path, lno, line)?;
    }
    hp.validate()?;
    if u.ncols() != w.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "U has {} columns but W has {} filters",
            u.ncols(),
            w.ncols()
        )));
    }
    let bank = FilterBank::new(w, hp.nonlinearity)?;
    let pred = Predictor::new(u, Array1::from_iter(b.column(0).iter().copied()))?;
    Ok((bank, pred, hp))
}

/// Dataset manifest: image ids paired with patch-file paths plus the tag
/// file, all relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub images: Vec<(String, PathBuf)>,
    pub tag_file: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tag_file = None;
    let mut images = Vec::new();
    for (lno, line) in content_lines(&text) {
        let (key, value) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| parse_err(path, lno, "expected 'tags PATH' or 'ID PATH'"))?;
        let value = value.trim();
        if key == "tags" {
            if tag_file.is_some() {
                return Err(parse_err(path, lno, "duplicate tags line"));
            }
            tag_file = Some(base.join(value));
        } else {
            images.push((key.to_string(), base.join(value)));
        }
    }
    let tag_file =
        tag_file.ok_or_else(|| parse_err(path, 0, "manifest missing 'tags PATH' line"))?;
    if images.is_empty() {
        return Err(parse_err(path, 0, "manifest lists no images"));
    }
    Ok(DatasetManifest { images, tag_file })
}

pub fn write_manifest(path: &Path, images: &[(String, String)], tag_file: &str) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# dataset manifest: 'tags PATH' then 'IMAGE_ID PATCH_PATH'");
    let _ = writeln!(out, "tags {tag_file}");
    for (id, p) in images {
        let _ = writeln!(out, "{id} {p}");
    }
    write_string(path, &out)
}

/// Load the patch matrices and tags referenced by a manifest into a dataset.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<crate::optimizer::Dataset> {
    let (t_hat, phi) = read_tags(&manifest.tag_file)?;
    if phi.ncols() != manifest.images.len() {
        return Err(Error::ShapeMismatch(format!(
            "tag file covers {} images, manifest lists {}",
            phi.ncols(),
            manifest.images.len()
        )));
    }
    let mut patches = Vec::with_capacity(manifest.images.len());
    for (id, p) in &manifest.images {
        let data = read_matrix(p)?;
        patches.push(crate::conv::PatchMatrix::new(data, id.clone())?);
    }
    crate::optimizer::Dataset::new(patches, t_hat, phi)
}

/// Convergence trace as CSV: iter,total,consistency,prediction,smoothness,sparsity.
pub fn write_trace_csv(path: &Path, ts: &TrainState) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# objective logged against the similarity graph current at each iteration"
    );
    let _ = writeln!(out, "iter,total,consistency,prediction,smoothness,sparsity");
    for (iter, total, c, p, s, l1) in crate::optimizer::export_trace(ts) {
        let _ = writeln!(out, "{iter},{total},{c},{p},{s},{l1}");
    }
    write_string(path, &out)
}
