use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symot::config::ConfigDoc;
use symot::data::{self, DatasetKind, DatasetSpec};
use symot::eval::{self, MetricsRow};
use symot::experiment::{self, sha256_hex, ExperimentConfig, RunManifest};
use symot::flow::FlowModel;
use symot::kernels::DEFAULT_SCALES;
use symot::{Error, Result, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Largest roundtrip error `roundtrip` accepts.
const ROUNDTRIP_TOLERANCE: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "symot", version, about = "Symmetric MMD + OT regularized flows on 2-D toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a toy dataset to CSV.
    Generate {
        #[arg(long)]
        kind: DatasetKind,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Noise standard deviation [default: per kind]
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mean override for gauss_pair_* as `x,y`.
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        mean: Option<[f64; 2]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config (or a run manifest) and evaluate on its test sets.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value`; bare keys such as `beta=0` refer to `train.*`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on source/target test sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Config or manifest supplying metric labels and kernel scales.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        correspondence: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Train one model per beta and tabulate forward OT cost and MMD.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated, e.g. `1e-5,1e-4,1e-3,1e-2,1e-1,1,10`.
        #[arg(long, value_parser = parse_betas)]
        betas: Betas,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the full per-beta metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Check T^-1(T(x)) = x on random points in [-4, 4]^d.
    Roundtrip {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [a, b] => Ok([a, b]),
        _ => Err(format!("expected `x,y`, got `{s}`")),
    }
}

#[derive(Clone, Debug)]
struct Betas(Vec<f64>);

fn parse_betas(s: &str) -> std::result::Result<Betas, String> {
    let v: Vec<f64> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.is_empty() {
        return Err("beta list is empty".into());
    }
    if let Some(b) = v.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(format!("beta must be a finite number >= 0, got {b}"));
    }
    Ok(Betas(v))
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else if e.is_io() || matches!(e, Error::Dimension(_) | Error::UnsupportedDimension(_)) {
        EXIT_IO
    } else if matches!(
        e,
        Error::Config { .. } | Error::InvalidParameter(_) | Error::UnknownKind(_) | Error::EmptyInput
    ) {
        EXIT_USAGE
    } else {
        EXIT_NUMERIC
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn print_metrics(m: &eval::MetricsReport) {
    println!("ot_fwd  {:.16e}", m.ot_fwd);
    println!("ot_bwd  {:.16e}", m.ot_bwd);
    println!("mmd_fwd {:.16e}", m.mmd_fwd);
    println!("mmd_bwd {:.16e}", m.mmd_bwd);
}

fn metrics_row(cfg: &ExperimentConfig, report: eval::MetricsReport) -> MetricsRow {
    MetricsRow {
        dataset: cfg.name.clone(),
        method: cfg.method().into(),
        beta: Some(cfg.train.beta),
        seed: Some(cfg.seed),
        report,
    }
}

fn cmd_generate(
    kind: DatasetKind,
    n: usize,
    noise: Option<f64>,
    seed: u64,
    mean: Option<[f64; 2]>,
    out: &Path,
) -> Result<()> {
    let mut spec = DatasetSpec::new(kind, n, noise.unwrap_or(kind.default_noise()), seed);
    spec.mean = mean;
    data::save(out, &data::generate(&spec)?)?;
    println!("{}  {}", file_hash(out)?, out.display());
    Ok(())
}

fn cmd_train(config: &Path, overrides: &[String], out: &Path) -> Result<()> {
    let started = Instant::now();
    let cfg = ExperimentConfig::load(config, overrides)?;
    let recorded = RunManifest::parse(&std::fs::read_to_string(config)?)
        .map(|m| m.dataset_hashes)
        .unwrap_or_default();
    let sets = cfg.datasets()?;
    let hashes = sets.hashes();
    for (name, want) in &recorded {
        if let Some((_, got)) = hashes.iter().find(|(k, _)| k == name) {
            if got != want {
                return Err(Error::Malformed(format!(
                    "dataset {name} hashes to {got}, but the manifest records {want}"
                )));
            }
        }
    }

    std::fs::create_dir_all(out)?;
    let mut outputs: Vec<String> = Vec::new();
    for (name, t) in [
        ("source_train", &sets.x_train),
        ("target_train", &sets.z_train),
        ("source_test", &sets.x_test),
        ("target_test", &sets.z_test),
    ] {
        let file = format!("{name}.csv");
        data::save(out.join(&file), t)?;
        outputs.push(file);
    }

    let every = cfg.checkpoint_every;
    let result = experiment::run_on(&cfg, &sets, |epoch, model| {
        if every > 0 && epoch % every == 0 {
            let file = format!("checkpoints/epoch_{epoch:05}.ckpt");
            std::fs::create_dir_all(out.join("checkpoints"))?;
            model.save(out.join(&file))?;
            outputs.push(file);
        }
        Ok(())
    })?;

    result.model.save(out.join("model.ckpt"))?;
    write_file(&out.join("trace.csv"), |w| eval::write_trace_csv(w, &result.trace))?;
    write_file(&out.join("metrics.csv"), |w| {
        eval::write_metrics_csv(w, &[metrics_row(&cfg, result.metrics.clone())])
    })?;
    outputs.extend(["model.ckpt", "trace.csv", "metrics.csv"].map(String::from));

    let outputs = outputs
        .into_iter()
        .map(|f| Ok((file_hash(&out.join(&f))?, f)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        config: cfg,
        dataset_hashes: hashes.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        outputs: outputs.iter().map(|(h, f)| (f.clone(), h.clone())).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    std::fs::write(out.join("manifest.cfg"), manifest.render())?;

    print_metrics(&result.metrics);
    for (h, f) in &outputs {
        println!("{h}  {}", out.join(f).display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    source: &Path,
    target: &Path,
    config: Option<&Path>,
    metrics: Option<&Path>,
    correspondence: Option<&Path>,
    svg: Option<&Path>,
) -> Result<()> {
    let model = FlowModel::load(checkpoint)?;
    let x = data::load(source)?;
    let z = data::load(target)?;
    let cfg = config.map(|p| ConfigDoc::load(p).and_then(|d| ExperimentConfig::from_doc(&d))).transpose()?;
    let scales = cfg.as_ref().map_or(DEFAULT_SCALES.to_vec(), |c| c.train.kernel_scales.clone());
    let bank = eval::eval_bank(&x, &z, &scales)?;
    let mut report = eval::evaluate(&model, &bank, &x, &z)?;
    if let Some(c) = &cfg {
        report.config_hash = c.hash();
    }
    print_metrics(&report);
    if let Some(path) = metrics {
        let row = match &cfg {
            Some(c) => metrics_row(c, report.clone()),
            None => MetricsRow { dataset: String::new(), method: String::new(), beta: None, seed: None, report },
        };
        write_file(path, |w| eval::write_metrics_csv(w, &[row]))?;
        println!("{}  {}", file_hash(path)?, path.display());
    }
    if let Some(path) = correspondence {
        eval::export_correspondence(&model, &x, &z, path)?;
        println!("{}  {}", file_hash(path)?, path.display());
    }
    if let Some(path) = svg {
        eval::write_svg(&model, &x, path)?;
        println!("{}  {}", file_hash(path)?, path.display());
    }
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    betas: &[f64],
    overrides: &[String],
    out: &Path,
    metrics: Option<&Path>,
) -> Result<bool> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let threads = experiment::sweep_threads(betas.len());
    let outcome = experiment::sweep_beta(&cfg, betas, threads)?;
    write_file(out, |w| experiment::write_sweep_csv(w, &outcome.table()))?;
    if let Some(path) = metrics {
        let rows: Vec<MetricsRow> = outcome
            .points
            .iter()
            .filter_map(|p| p.result.as_ref().ok().map(|m| metrics_row(&cfg.with_beta(p.beta), m.clone())))
            .collect();
        write_file(path, |w| eval::write_metrics_csv(w, &rows))?;
    }
    // Fig.-3 style: one row of betas, one of OT, one of MMD.
    let table = outcome.table();
    let row = |label: &str, f: &dyn Fn(&(f64, f64, f64)) -> String| {
        let cells: Vec<String> = table.iter().map(f).collect();
        println!("{label:<8} {}", cells.join(" "));
    };
    row("beta", &|r| format!("{:>9.0e}", r.0));
    row("ot", &|r| format!("{:>9.3e}", r.1));
    row("mmd", &|r| format!("{:>9.3e}", r.2));
    let mut ok = true;
    for (beta, e) in outcome.failures() {
        eprintln!("beta {beta}: {e}");
        ok = false;
    }
    println!("{}  {}", file_hash(out)?, out.display());
    Ok(ok)
}

fn cmd_roundtrip(checkpoint: &Path, n: usize, seed: u64) -> Result<bool> {
    let model = FlowModel::load(checkpoint)?;
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<f64> = (0..n * d).map(|_| rng.random_range(-4.0..=4.0)).collect();
    let err = model.roundtrip_error(&Tensor::matrix(n, d, pts)?)?;
    println!("max roundtrip error {err:.3e} over {n} points");
    Ok(err < ROUNDTRIP_TOLERANCE)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Generate { kind, n, noise, seed, mean, out } => {
            cmd_generate(*kind, *n, *noise, *seed, *mean, out).map(|_| true)
        }
        Command::Train { config, overrides, out } => cmd_train(config, overrides, out).map(|_| true),
        Command::Eval { checkpoint, source, target, config, metrics, correspondence, svg } => cmd_eval(
            checkpoint,
            source,
            target,
            config.as_deref(),
            metrics.as_deref(),
            correspondence.as_deref(),
            svg.as_deref(),
        )
        .map(|_| true),
        Command::Sweep { config, betas, overrides, out, metrics } => {
            cmd_sweep(config, &betas.0, overrides, out, metrics.as_deref())
        }
        Command::Roundtrip { checkpoint, n, seed } => cmd_roundtrip(checkpoint, *n, *seed),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERIC),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
