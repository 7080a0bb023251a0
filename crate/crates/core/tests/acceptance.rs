//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line (written straight to stdout so it shows
//! up even when the harness captures output) and then asserts.
//!
//! Criteria 5-7 and 9 train full-size models from the bundled configs and
//! take minutes each on a single core; runs shared between criteria are
//! computed once.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use symot::data::{generate, DatasetKind, DatasetSpec};
use symot::eval::MetricsReport;
use symot::experiment::{run, sweep_beta, sweep_threads, ExperimentConfig, ExperimentResult};
use symot::flow::FlowModel;
use symot::graph::Graph;
use symot::kernels::{mmd2_biased, mmd2_paper_form, mmd_distance, KernelBank, DEFAULT_SCALES};
use symot::loss::symot_loss;
use symot::Tensor;

const SWEEP_BETAS: [f64; 7] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];
const TOY_PAIRS: [&str; 4] = ["moons2circles", "gauss2gauss", "eightgauss", "lineargauss"];

fn report(id: &str, pass: bool, detail: String) {
    let line = format!("criterion {id}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.cfg"))
}

fn config(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(config_path(name), &o).unwrap()
}

struct Timed<T> {
    value: T,
    elapsed: Duration,
}

fn timed<T>(f: impl FnOnce() -> T) -> Timed<T> {
    let t = Instant::now();
    let value = f();
    Timed { value, elapsed: t.elapsed() }
}

/// Bundled symmetric runs, keyed by pair name.
fn symmetric_run(name: &'static str) -> &'static Timed<ExperimentResult> {
    static CELLS: [OnceLock<Timed<ExperimentResult>>; 4] = [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let i = TOY_PAIRS.iter().position(|n| *n == name).unwrap();
    CELLS[i].get_or_init(|| timed(|| run(&config(name, &[])).unwrap()))
}

fn gauss_sweep() -> &'static Timed<Vec<(f64, MetricsReport)>> {
    static CELL: OnceLock<Timed<Vec<(f64, MetricsReport)>>> = OnceLock::new();
    CELL.get_or_init(|| {
        timed(|| {
            let base = config("gauss2gauss", &[]);
            let threads = sweep_threads(SWEEP_BETAS.len());
            sweep_beta(&base, &SWEEP_BETAS, threads).unwrap().into_result().unwrap()
        })
    })
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut end = k;
            while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[k]] {
                end += 1;
            }
            let avg = (k + end) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=end] {
                r[i] = avg;
            }
            k = end + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn criterion_1_loss_gradient_matches_finite_differences() {
    let t = Instant::now();
    let mut r = rng(2024);
    let x = uniform(8, 2, -2.0, 2.0, &mut r);
    let z = uniform(8, 2, -1.5, 2.5, &mut r);
    let bank = KernelBank::from_samples(&x, &z, &DEFAULT_SCALES, 0).unwrap();
    let beta = 0.5;
    let mut model = FlowModel::init(2, 2, 16, 2.0, 7).unwrap();
    randomize(&mut model, 8, 0.3);

    let mut g = Graph::new();
    let flow = model.bind(&mut g, true);
    let (root, _) = symot_loss(&mut g, &flow, &bank, &x, &z, beta, true).unwrap();
    g.backward(root).unwrap();
    let numeric = fd_param_grads(&model, 1e-5, |m| loss_oracle(m, &bank, &x, &z, beta, true));
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (v, num) in flow.vars().iter().zip(&numeric) {
        let analytic = g.grad(*v).unwrap().data();
        worst = worst.max(worst_relative_error(analytic, num, 1e-3, 1e-7));
        count += num.len();
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        "1",
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e} over {count} parameters (< 1e-4), {secs:.2}s (< 10s)"),
    );
}

#[test]
fn criterion_2_roundtrip_over_ten_seeds() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut model = FlowModel::init(2, 8, 128, 2.0, seed).unwrap();
        // Generic parameters, including the zero-initialized output layers,
        // so the blocks actually scale and shift.
        randomize(&mut model, seed + 100, 0.1);
        let mut r = rng(seed + 200);
        let x = uniform(1000, 2, -4.0, 4.0, &mut r);
        worst = worst.max(model.roundtrip_error(&x).unwrap());
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        "2",
        worst < 1e-8 && secs < 5.0,
        format!("max |T^-1(T(x)) - x| = {worst:.2e} (< 1e-8), {secs:.2}s (< 5s)"),
    );
}

#[test]
fn criterion_3_mmd_matches_double_loop_oracle() {
    let naive = |bank: &KernelBank, x: &Tensor, z: &Tensor| {
        let k = |a: &[f64], b: &[f64]| {
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            bank.bandwidths().iter().zip(bank.weights()).map(|(s, w)| w * (-d2 / (2.0 * s)).exp()).sum::<f64>()
        };
        let mean = |a: &Tensor, b: &Tensor| {
            let mut s = 0.0;
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    s += k(a.row(i), b.row(j));
                }
            }
            s / (a.rows() * b.rows()) as f64
        };
        mean(x, x) + mean(z, z) - 2.0 * mean(x, z)
    };
    let graph = |bank: &KernelBank, x: &Tensor, z: &Tensor, paper: bool| {
        let mut g = Graph::new();
        let (xv, zv) = (g.constant(x.clone()), g.constant(z.clone()));
        let m = if paper { mmd2_paper_form(&mut g, bank, xv, zv) } else { mmd2_biased(&mut g, bank, xv, zv) };
        g.value(m.unwrap()).item().unwrap()
    };
    let mut r = rng(3);
    let (mut worst_oracle, mut worst_paper): (f64, f64) = (0.0, 0.0);
    for trial in 0..100 {
        use rand::Rng;
        let n = r.random_range(1..=16);
        let m = r.random_range(1..=16);
        let d = r.random_range(1..=4);
        let x = uniform(n, d, -3.0, 3.0, &mut r);
        let z = uniform(m, d, -3.0, 3.0, &mut r);
        let z_eq = uniform(n, d, -3.0, 3.0, &mut r);
        let bank = KernelBank::scaled(0.1 + trial as f64 * 0.05, &DEFAULT_SCALES).unwrap();
        worst_oracle = worst_oracle.max((graph(&bank, &x, &z, false) - naive(&bank, &x, &z)).abs());
        worst_paper = worst_paper.max((graph(&bank, &x, &z_eq, true) - graph(&bank, &x, &z_eq, false)).abs());
    }
    report(
        "3",
        worst_oracle < 1e-12 && worst_paper < 1e-12,
        format!("100 trials: |vectorized - double loop| <= {worst_oracle:.1e}, |equal-size form - biased| <= {worst_paper:.1e} (< 1e-12)"),
    );
}

#[test]
fn criterion_4_mmd_separates_distributions() {
    let gauss = |mean: [f64; 2], seed| {
        let mut spec = DatasetSpec::new(DatasetKind::GaussPairA, 500, 1.0, seed);
        spec.mean = Some(mean);
        generate(&spec).unwrap()
    };
    let a = gauss([0.0, 0.0], 41);
    let b = gauss([0.0, 0.0], 42);
    let far = gauss([3.0, 3.0], 43);
    let bank = KernelBank::from_samples(&a, &far, &DEFAULT_SCALES, 0).unwrap();
    let same = mmd_distance(&bank, &a, &b).unwrap();
    let diff = mmd_distance(&bank, &a, &far).unwrap();
    report(
        "4",
        diff >= 10.0 * same,
        format!("different {diff:.3e} vs same {same:.3e}: ratio {:.1} (>= 10)", diff / same),
    );
}

#[test]
fn criterion_5_moons_circles_structure() {
    let sym = symmetric_run("moons2circles");
    let single = timed(|| run(&config("moons2circles_single_mmd", &[])).unwrap());
    let (s, b) = (&sym.value.metrics, &single.value.metrics);
    let mmd_ok = s.mmd_fwd < 1e-2 && s.mmd_bwd < 1e-2;
    let ot_ok = b.ot_fwd >= 2.0 * s.ot_fwd;
    let mins = (sym.elapsed + single.elapsed).as_secs_f64() / 60.0;
    report(
        "5",
        mmd_ok && ot_ok && mins < 10.0,
        format!(
            "(a) mmd fwd/bwd {:.3e}/{:.3e} (< 1e-2): {}; (b) ot_fwd single-MMD {:.4} vs SyMOT {:.4}, ratio {:.2} (>= 2): {}; \
             SyMOT ot fwd/bwd {:.4}/{:.4}; {mins:.1} min (< 10)",
            s.mmd_fwd,
            s.mmd_bwd,
            if mmd_ok { "ok" } else { "no" },
            b.ot_fwd,
            s.ot_fwd,
            b.ot_fwd / s.ot_fwd,
            if ot_ok { "ok" } else { "no" },
            s.ot_fwd,
            s.ot_bwd,
        ),
    );
}

#[test]
fn criterion_6_beta_sweep_trend() {
    let sweep = gauss_sweep();
    let betas: Vec<f64> = sweep.value.iter().map(|(b, _)| *b).collect();
    let ot: Vec<f64> = sweep.value.iter().map(|(_, m)| m.ot_fwd).collect();
    let rho = spearman(&betas, &ot);
    let ratio = ot[ot.len() - 1] / ot[0];
    let mins = sweep.elapsed.as_secs_f64() / 60.0;
    let table: Vec<String> = sweep.value.iter().map(|(b, m)| format!("{b:.0e}:{:.4}", m.ot_fwd)).collect();
    report(
        "6",
        rho <= -0.8 && ratio < 0.01 && mins < 30.0,
        format!(
            "spearman(beta, ot_fwd) {rho:.3} (<= -0.8); ot(10)/ot(1e-5) {ratio:.3e} (< 1e-2); {mins:.1} min (< 30); ot_fwd [{}]",
            table.join(" ")
        ),
    );
}

#[test]
fn criterion_7_symmetric_beats_one_direction_backward() {
    let mut wins = 0;
    let mut cells = Vec::new();
    for name in TOY_PAIRS {
        let sym = &symmetric_run(name).value.metrics;
        let one = run(&config(name, &["symmetric=false"])).unwrap().metrics;
        if sym.mmd_bwd < one.mmd_bwd {
            wins += 1;
        }
        cells.push(format!("{name} {:.3e} vs {:.3e}", sym.mmd_bwd, one.mmd_bwd));
    }
    report(
        "7",
        wins >= 3,
        format!("symmetric backward MMD smaller on {wins}/4 pairs (>= 3): {}", cells.join("; ")),
    );
}

#[test]
fn criterion_8_manifest_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let bin = env!("CARGO_BIN_EXE_symot");
    let cfg = config_path("eightgauss");
    let train = |config: &Path, out: &str| {
        let o = Command::new(bin)
            .args(["train", "--config"])
            .arg(config)
            .args(["--override", "epochs=6", "--override", "output.checkpoint_every=3", "--out", out])
            .current_dir(p)
            .output()
            .unwrap();
        assert!(o.status.success(), "{o:?}");
    };
    train(&cfg, "first");
    train(&p.join("first/manifest.cfg"), "second");
    let files = ["model.ckpt", "checkpoints/epoch_00003.ckpt", "checkpoints/epoch_00006.ckpt", "metrics.csv", "trace.csv"];
    let same: Vec<bool> = files
        .iter()
        .map(|f| std::fs::read(p.join("first").join(f)).unwrap() == std::fs::read(p.join("second").join(f)).unwrap())
        .collect();
    // The library path agrees with the binary's metrics.
    let from_manifest = ExperimentConfig::load(p.join("first/manifest.cfg"), &[]).unwrap();
    let lib = run(&from_manifest).unwrap();
    let lib_ckpt = lib.model.to_checkpoint_bytes() == std::fs::read(p.join("first/model.ckpt")).unwrap();
    let ok = same.iter().all(|s| *s) && lib_ckpt;
    report(
        "8",
        ok,
        format!("rerun from manifest: {} of {} outputs byte-identical; library rerun checkpoint identical: {lib_ckpt}", same.iter().filter(|s| **s).count(), files.len()),
    );
}

#[test]
fn criterion_9_mmd_tightens_as_beta_decreases() {
    let sweep = gauss_sweep();
    // Walk the grid from the largest beta down.
    let mut by_desc: Vec<(f64, f64)> = sweep.value.iter().map(|(b, m)| (*b, m.mmd_fwd)).collect();
    by_desc.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let inversions = by_desc.windows(2).filter(|w| w[1].1 > w[0].1).count();
    let table: Vec<String> = by_desc.iter().map(|(b, m)| format!("{b:.0e}:{m:.3e}")).collect();
    report(
        "9",
        inversions <= 1,
        format!("{inversions} inversion(s) of mmd_fwd along decreasing beta (<= 1): [{}]", table.join(" ")),
    );
}
