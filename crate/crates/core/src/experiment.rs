//! Experiment configs, the train-then-evaluate runner, run manifests and
//! the beta sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::config::ConfigDoc;
use crate::data::{self, DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::eval::{eval_bank, evaluate, MetricsReport};
use crate::flow::FlowModel;
use crate::kernels::KernelBank;
use crate::loss::LossBreakdown;
use crate::tensor::Tensor;
use crate::train::{derive_seed, train_with_observer, TrainConfig};

/// One side (source or target) of a dataset pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Side {
    pub kind: DatasetKind,
    pub noise: f64,
    pub mean: Option<[f64; 2]>,
    /// Read these files instead of generating.
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
}

impl Side {
    pub fn new(kind: DatasetKind) -> Self {
        Self { kind, noise: kind.default_noise(), mean: None, train_file: None, test_file: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub source: Side,
    pub target: Side,
    pub n_train: usize,
    pub n_test: usize,
    /// `train.seed` always equals `seed`.
    pub train: TrainConfig,
    /// Save a checkpoint every this many epochs; 0 keeps only the final model.
    pub checkpoint_every: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "name",
    "seed",
    "data.source",
    "data.target",
    "data.source_noise",
    "data.target_noise",
    "data.source_mean",
    "data.target_mean",
    "data.source_train_file",
    "data.target_train_file",
    "data.source_test_file",
    "data.target_test_file",
    "data.n_train",
    "data.n_test",
    "train.beta",
    "train.symmetric",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.blocks",
    "train.subnet_width",
    "train.gamma",
    "train.kernel_scales",
    "train.grad_clip",
    "output.checkpoint_every",
];

/// Keys under this prefix are written by runs and ignored when read back.
pub const MANIFEST_PREFIX: &str = "manifest.";

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Default experiment for a dataset pair.
    pub fn new(name: &str, source: DatasetKind, target: DatasetKind, seed: u64) -> Self {
        Self {
            name: name.into(),
            seed,
            source: Side::new(source),
            target: Side::new(target),
            n_train: 2000,
            n_test: 2000,
            train: TrainConfig { seed, ..TrainConfig::default() },
            checkpoint_every: 0,
        }
    }

    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        doc.check_known(KNOWN_KEYS, MANIFEST_PREFIX)?;
        let seed: u64 = doc.parse_or("seed", 0)?;
        let side = |which: &str| -> Result<Side> {
            let kind_key = format!("data.{which}");
            let kind: DatasetKind = doc.require::<String>(&kind_key)?.parse().map_err(|_| {
                doc.error(&kind_key, format!("unknown dataset kind `{}`", doc.get(&kind_key).unwrap().value))
            })?;
            let mean_key = format!("data.{which}_mean");
            let mean = match doc.float_list(&mean_key)? {
                None => None,
                Some(v) if v.len() == 2 => Some([v[0], v[1]]),
                Some(_) => return Err(doc.error(&mean_key, "mean needs exactly 2 numbers")),
            };
            Ok(Side {
                kind,
                noise: doc.parse_or(&format!("data.{which}_noise"), kind.default_noise())?,
                mean,
                train_file: doc.parse_opt(&format!("data.{which}_train_file"))?,
                test_file: doc.parse_opt(&format!("data.{which}_test_file"))?,
            })
        };
        let d = TrainConfig::default();
        let grad_clip = match doc.get("train.grad_clip").map(|e| e.value.as_str()) {
            None | Some("none") => None,
            Some(_) => Some(doc.require::<f64>("train.grad_clip")?),
        };
        let cfg = ExperimentConfig {
            name: doc.parse_or("name", "experiment".to_string())?,
            seed,
            source: side("source")?,
            target: side("target")?,
            n_train: doc.parse_or("data.n_train", 2000)?,
            n_test: doc.parse_or("data.n_test", 2000)?,
            train: TrainConfig {
                beta: doc.parse_or("train.beta", d.beta)?,
                symmetric: doc.parse_or("train.symmetric", d.symmetric)?,
                epochs: doc.parse_or("train.epochs", d.epochs)?,
                batch_size: doc.parse_or("train.batch_size", d.batch_size)?,
                lr: doc.parse_or("train.lr", d.lr)?,
                weight_decay: doc.parse_or("train.weight_decay", d.weight_decay)?,
                seed,
                blocks: doc.parse_or("train.blocks", d.blocks)?,
                subnet_width: doc.parse_or("train.subnet_width", d.subnet_width)?,
                gamma: doc.parse_or("train.gamma", d.gamma)?,
                kernel_scales: doc.float_list("train.kernel_scales")?.unwrap_or(d.kernel_scales),
                grad_clip,
            },
            checkpoint_every: doc.parse_or("output.checkpoint_every", 0)?,
        };
        for (key, ok) in [
            ("data.source_noise", cfg.source.noise >= 0.0 && cfg.source.noise.is_finite()),
            ("data.target_noise", cfg.target.noise >= 0.0 && cfg.target.noise.is_finite()),
            ("data.n_train", cfg.n_train > 0),
            ("data.n_test", cfg.n_test > 0),
            ("train.beta", cfg.train.beta >= 0.0 && cfg.train.beta.is_finite()),
            ("train.epochs", cfg.train.epochs > 0),
            ("train.batch_size", cfg.train.batch_size > 0),
            ("train.lr", cfg.train.lr >= 0.0 && cfg.train.lr.is_finite()),
            ("train.blocks", cfg.train.blocks > 0),
            ("train.subnet_width", cfg.train.subnet_width > 0),
            ("train.gamma", cfg.train.gamma > 0.0 && cfg.train.gamma.is_finite()),
        ] {
            if !ok {
                return Err(doc.error(key, "value out of range"));
            }
        }
        Ok(cfg)
    }

    /// Parses a config (or manifest) file, then applies `key=value`
    /// overrides. Override keys without a dot refer to `train.*`, so
    /// `beta=0` means `train.beta=0`; `seed` and `name` stay top-level.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = ConfigDoc::load(path)?;
        for o in overrides {
            let o = o.trim();
            let key = o.split('=').next().unwrap_or("").trim();
            if !key.contains('.') && key != "seed" && key != "name" {
                doc.apply_override(&format!("train.{o}"))?;
            } else {
                doc.apply_override(o)?;
            }
        }
        Self::from_doc(&doc)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_doc(&ConfigDoc::parse(text)?)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("seed", self.seed.to_string());
        for (which, side) in [("source", &self.source), ("target", &self.target)] {
            kv(&format!("data.{which}"), side.kind.to_string());
            kv(&format!("data.{which}_noise"), side.noise.to_string());
            if let Some(m) = side.mean {
                kv(&format!("data.{which}_mean"), fmt_list(&m));
            }
            if let Some(p) = &side.train_file {
                kv(&format!("data.{which}_train_file"), p.display().to_string());
            }
            if let Some(p) = &side.test_file {
                kv(&format!("data.{which}_test_file"), p.display().to_string());
            }
        }
        kv("data.n_train", self.n_train.to_string());
        kv("data.n_test", self.n_test.to_string());
        let t = &self.train;
        kv("train.beta", t.beta.to_string());
        kv("train.symmetric", t.symmetric.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.blocks", t.blocks.to_string());
        kv("train.subnet_width", t.subnet_width.to_string());
        kv("train.gamma", t.gamma.to_string());
        kv("train.kernel_scales", fmt_list(&t.kernel_scales));
        kv("train.grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string()));
        kv("output.checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// First 16 hex digits of the SHA-256 of [`render`](Self::render).
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.render().as_bytes()))[..16].to_string()
    }

    /// `symot`, `single_mmd` (beta = 0) or `one_direction`.
    pub fn method(&self) -> &'static str {
        match (self.train.beta == 0.0, self.train.symmetric) {
            (false, true) => "symot",
            (true, true) => "single_mmd",
            (false, false) => "one_direction",
            (true, false) => "single_mmd_one_direction",
        }
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        let mut c = self.clone();
        c.train.beta = beta;
        c
    }

    fn side_data(&self, side: &Side, which: &str, split: &str, n: usize) -> Result<Tensor> {
        let file = if split == "train" { &side.train_file } else { &side.test_file };
        if let Some(path) = file {
            return data::load(path);
        }
        let mut spec = DatasetSpec::new(side.kind, n, side.noise, derive_seed(self.seed, &format!("data.{which}.{split}")));
        spec.mean = side.mean;
        data::generate(&spec)
    }

    /// Train and test sets of both sides, generated from disjoint derived
    /// seeds unless read from files.
    pub fn datasets(&self) -> Result<Datasets> {
        Ok(Datasets {
            x_train: self.side_data(&self.source, "source", "train", self.n_train)?,
            z_train: self.side_data(&self.target, "target", "train", self.n_train)?,
            x_test: self.side_data(&self.source, "source", "test", self.n_test)?,
            z_test: self.side_data(&self.target, "target", "test", self.n_test)?,
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub x_train: Tensor,
    pub z_train: Tensor,
    pub x_test: Tensor,
    pub z_test: Tensor,
}

impl Datasets {
    /// SHA-256 of each set's CSV encoding, keyed like the manifest entries.
    pub fn hashes(&self) -> Vec<(&'static str, String)> {
        [
            ("source_train", &self.x_train),
            ("target_train", &self.z_train),
            ("source_test", &self.x_test),
            ("target_test", &self.z_test),
        ]
        .into_iter()
        .map(|(k, t)| {
            let mut buf = Vec::new();
            data::write_csv(&mut buf, t).expect("writing to memory");
            (k, sha256_hex(&buf))
        })
        .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub model: FlowModel,
    pub trace: Vec<LossBreakdown>,
    pub train_bank: KernelBank,
    pub eval_bank: KernelBank,
    pub metrics: MetricsReport,
}

/// Trains on the training sets and evaluates on the test sets.
/// `on_epoch(epoch, model)` runs after each epoch, e.g. for checkpointing.
pub fn run_on(
    cfg: &ExperimentConfig,
    sets: &Datasets,
    mut on_epoch: impl FnMut(usize, &FlowModel) -> Result<()>,
) -> Result<ExperimentResult> {
    let out = train_with_observer(&sets.x_train, &sets.z_train, &cfg.train, |e, m, _| on_epoch(e, m))?;
    let bank = eval_bank(&sets.x_test, &sets.z_test, &cfg.train.kernel_scales)?;
    let mut metrics = evaluate(&out.model, &bank, &sets.x_test, &sets.z_test)?;
    metrics.config_hash = cfg.hash();
    Ok(ExperimentResult { model: out.model, trace: out.trace, train_bank: out.bank, eval_bank: bank, metrics })
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_on(cfg, &cfg.datasets()?, |_, _| Ok(()))
}

/// Everything needed to rerun an experiment: the config itself plus
/// `manifest.*` records of what the run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub dataset_hashes: Vec<(String, String)>,
    /// Output files relative to the run directory, with their SHA-256.
    pub outputs: Vec<(String, String)>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = String::from("# run manifest; rerun with `symot train --config <this file>`\n");
        s.push_str(&self.config.render());
        let _ = writeln!(s, "manifest.version = {}", self.version);
        let _ = writeln!(s, "manifest.config_hash = {}", self.config.hash());
        let _ = writeln!(s, "manifest.wall_clock_seconds = {:.3}", self.wall_clock_seconds);
        for (k, h) in &self.dataset_hashes {
            let _ = writeln!(s, "manifest.data.{k}.sha256 = {h}");
        }
        for (i, (path, h)) in self.outputs.iter().enumerate() {
            let _ = writeln!(s, "manifest.output.{i}.path = {path}");
            let _ = writeln!(s, "manifest.output.{i}.sha256 = {h}");
        }
        s
    }

    /// Reads a manifest back, keeping the recorded hashes.
    pub fn parse(text: &str) -> Result<Self> {
        let doc = ConfigDoc::parse(text)?;
        let config = ExperimentConfig::from_doc(&doc)?;
        let mut dataset_hashes = Vec::new();
        let mut outputs: Vec<(String, String)> = Vec::new();
        for e in doc.entries() {
            let Some(rest) = e.key.strip_prefix("manifest.") else { continue };
            if let Some(name) = rest.strip_prefix("data.").and_then(|r| r.strip_suffix(".sha256")) {
                dataset_hashes.push((name.to_string(), e.value.clone()));
            } else if let Some(r) = rest.strip_prefix("output.") {
                let (idx, field) = r.split_once('.').ok_or_else(|| doc.error(&e.key, "bad output key"))?;
                let idx: usize = idx.parse().map_err(|_| doc.error(&e.key, "bad output index"))?;
                if outputs.len() <= idx {
                    outputs.resize(idx + 1, Default::default());
                }
                match field {
                    "path" => outputs[idx].0 = e.value.clone(),
                    "sha256" => outputs[idx].1 = e.value.clone(),
                    _ => return Err(doc.error(&e.key, "bad output field")),
                }
            }
        }
        Ok(RunManifest {
            config,
            dataset_hashes,
            outputs,
            wall_clock_seconds: doc.parse_or("manifest.wall_clock_seconds", 0.0)?,
            version: doc.parse_or("manifest.version", String::new())?,
        })
    }
}

/// Worker count for sweeps: `SYMOT_THREADS` if set, else the available
/// parallelism, never more than `jobs`.
pub fn sweep_threads(jobs: usize) -> usize {
    let cap = std::env::var("SYMOT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

#[derive(Debug)]
pub struct SweepPoint {
    pub beta: f64,
    pub result: Result<MetricsReport>,
}

/// Outcome of a sweep, in the order the betas were given.
#[derive(Debug)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
}

impl SweepOutcome {
    /// `(beta, ot_fwd, mmd_fwd)` for the successful points.
    pub fn table(&self) -> Vec<(f64, f64, f64)> {
        self.points
            .iter()
            .filter_map(|p| p.result.as_ref().ok().map(|m| (p.beta, m.ot_fwd, m.mmd_fwd)))
            .collect()
    }

    pub fn failures(&self) -> impl Iterator<Item = (f64, &Error)> {
        self.points.iter().filter_map(|p| p.result.as_ref().err().map(|e| (p.beta, e)))
    }

    /// All reports, or the first failure annotated with its beta.
    pub fn into_result(self) -> Result<Vec<(f64, MetricsReport)>> {
        self.points
            .into_iter()
            .map(|p| match p.result {
                Ok(m) => Ok((p.beta, m)),
                Err(e) => Err(Error::Sweep { beta: p.beta, source: Box::new(e) }),
            })
            .collect()
    }
}

/// Trains and evaluates one model per beta on the same data and seeds.
/// Points run on up to `threads` workers; each run is single-threaded, so
/// results do not depend on scheduling.
pub fn sweep_beta(base: &ExperimentConfig, betas: &[f64], threads: usize) -> Result<SweepOutcome> {
    if betas.is_empty() {
        return Err(Error::InvalidParameter("beta list is empty".into()));
    }
    let sets = base.datasets()?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<MetricsReport>>>> = Mutex::new((0..betas.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, betas.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= betas.len() {
                    break;
                }
                let r = run_on(&base.with_beta(betas[i]), &sets, |_, _| Ok(())).map(|r| r.metrics);
                slots.lock().expect("sweep slot lock")[i] = Some(r);
            });
        }
    });
    let points = slots
        .into_inner()
        .expect("sweep slot lock")
        .into_iter()
        .zip(betas)
        .map(|(r, &beta)| SweepPoint { beta, result: r.expect("every point ran") })
        .collect();
    Ok(SweepOutcome { points })
}

pub const SWEEP_HEADER: &str = "beta,ot,mmd";

pub fn write_sweep_csv(w: &mut impl std::io::Write, table: &[(f64, f64, f64)]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for (b, ot, mmd) in table {
        writeln!(w, "{b:e},{ot:.16e},{mmd:.16e}")?;
    }
    Ok(())
}
