//! Command-line surface: dataset synthesis, matrix completion, evaluation,
//! and the gradient check suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Diagnostics go
//! to stderr; results to stdout.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::io;
use crate::objective::HyperParams;
use crate::optimizer;
use crate::tasks;

#[derive(Parser)]
#[command(name = "tagcomplete", version, about = "Image tag completion via joint convolutional representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cluster block-model dataset
    Synth {
        #[arg(long)]
        images: usize,
        #[arg(long)]
        tags: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        clusters: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        patches: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete a partially observed tag matrix
    Complete {
        #[arg(long)]
        manifest: PathBuf,
        /// Tag file overriding the one named in the manifest
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "completed.txt")]
        out: PathBuf,
        #[arg(long, default_value = "trace.csv")]
        trace: PathBuf,
        #[arg(long, default_value = "model.txt")]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-validated annotation / retrieval evaluation
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fulltags: PathBuf,
        /// precision@K (e.g. precision@5) or pos@top
        #[arg(long)]
        metric: String,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long, default_value_t = 0.3)]
        rho: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference verification of all four analytic gradients
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// small = 5 instances, full = 20
        #[arg(long, default_value = "full")]
        size: String,
    },
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{err}");
                return 0;
            }
            eprint!("{err}");
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn load_hp(config: &Option<PathBuf>) -> Result<HyperParams> {
    match config {
        Some(path) => io::read_config(path),
        None => Ok(HyperParams::default()),
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Synth {
            images,
            tags,
            dim,
            clusters,
            noise,
            seed,
            patches,
            out,
        } => cmd_synth(images, tags, dim, clusters, noise, seed, patches, &out),
        Command::Complete {
            manifest,
            tags,
            config,
            out,
            trace,
            model,
            seed,
        } => cmd_complete(&manifest, tags.as_deref(), &config, &out, &trace, &model, seed),
        Command::Eval {
            manifest,
            fulltags,
            metric,
            folds,
            rho,
            config,
            seed,
        } => cmd_eval(&manifest, &fulltags, &metric, folds, rho, &config, seed),
        Command::Gradcheck { seed, size } => cmd_gradcheck(seed, &size),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    images: usize,
    tags: usize,
    dim: usize,
    clusters: usize,
    noise: f64,
    seed: u64,
    patches: usize,
    out: &Path,
) -> Result<i32> {
    let synth = tasks::synth_dataset(images, tags, dim, patches, clusters, noise, seed)?;
    let patches_dir = out.join("patches");
    fs::create_dir_all(&patches_dir).map_err(|source| Error::Io {
        path: patches_dir.clone(),
        source,
    })?;
    let mut entries = Vec::with_capacity(images);
    for p in &synth.patches {
        let rel = format!("patches/{}.txt", p.image_id);
        io::write_matrix(&out.join(&rel), &p.data)?;
        entries.push((p.image_id.clone(), rel));
    }
    let ones = ndarray::Array2::ones(synth.t_full.dim());
    io::write_tags(&out.join("tags_full.txt"), &synth.t_full, &ones)?;
    io::write_manifest(&out.join("manifest.txt"), &entries, "tags_full.txt")?;
    println!(
        "wrote {images} images ({tags} tags, {clusters} clusters) to {}",
        out.display()
    );
    Ok(0)
}

fn cmd_complete(
    manifest: &Path,
    tags: Option<&Path>,
    config: &Option<PathBuf>,
    out: &Path,
    trace: &Path,
    model: &Path,
    seed: u64,
) -> Result<i32> {
    let mut m = io::read_manifest(manifest)?;
    if let Some(t) = tags {
        m.tag_file = t.to_path_buf();
    }
    let hp = load_hp(config)?;
    let dataset = io::load_dataset(&m)?;
    let ts = optimizer::run(&dataset, &hp, seed)?;
    io::write_matrix(out, &ts.state.t)?;
    io::write_trace_csv(trace, &ts)?;
    io::save_model(model, &ts.bank, &ts.pred, &hp)?;
    let last = ts.trace.last().unwrap();
    println!(
        "completed {} tags x {} images in {} outer iterations (objective {})",
        dataset.n_tags(),
        dataset.n_images(),
        last.iteration,
        last.total
    );
    Ok(0)
}

fn parse_metric(metric: &str) -> Result<(bool, usize)> {
    if metric == "pos@top" {
        return Ok((false, 5));
    }
    if let Some(k) = metric.strip_prefix("precision@") {
        let k: usize = k
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad metric '{metric}'")))?;
        if k == 0 {
            return Err(Error::InvalidArgument("precision@K needs K >= 1".into()));
        }
        return Ok((true, k));
    }
    Err(Error::InvalidArgument(format!(
        "unknown metric '{metric}' (expected precision@K or pos@top)"
    )))
}

fn cmd_eval(
    manifest: &Path,
    fulltags: &Path,
    metric: &str,
    folds: usize,
    rho: f64,
    config: &Option<PathBuf>,
    seed: u64,
) -> Result<i32> {
    let (want_precision, k) = parse_metric(metric)?;
    let m = io::read_manifest(manifest)?;
    let (t_full, phi) = io::read_tags(fulltags)?;
    if phi.iter().any(|v| *v == 0.0) {
        return Err(Error::InvalidArgument(
            "ground-truth tag file must declare every entry".into(),
        ));
    }
    let hp = load_hp(config)?;
    let mut patches = Vec::with_capacity(m.images.len());
    for (id, p) in &m.images {
        patches.push(crate::conv::PatchMatrix::new(io::read_matrix(p)?, id.clone())?);
    }
    let report = tasks::cross_validate(&patches, &t_full, folds, rho, &hp, k, seed)?;
    let chosen = if want_precision {
        &report.precision
    } else {
        &report.pos_top
    };
    for (i, v) in chosen.per_fold.iter().enumerate() {
        println!("fold {i}: {v}");
    }
    println!("mean {}: {}", chosen.metric, chosen.mean);
    Ok(0)
}

fn cmd_gradcheck(seed: u64, size: &str) -> Result<i32> {
    let instances = match size {
        "small" => 5,
        "full" => 20,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown size '{other}' (expected small|full)"
            )))
        }
    };
    let rows = crate::gradcheck::run_suite(seed, instances)?;
    println!("{:<10}{:<10}{:<16}{}", "instance", "variable", "max_rel_err", "status");
    let mut all_pass = true;
    for row in &rows {
        all_pass &= row.pass;
        println!(
            "{:<10}{:<10}{:<16.3e}{}",
            row.instance,
            row.variable,
            row.max_rel_err,
            if row.pass { "pass" } else { "FAIL" }
        );
    }
    if all_pass {
        println!("all gradients within tolerance {}", crate::gradcheck::FD_TOL);
        Ok(0)
    } else {
        eprintln!("gradient check failed");
        Ok(1)
    }
}
