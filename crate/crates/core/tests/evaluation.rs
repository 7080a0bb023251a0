//! Metrics against componentwise recomputation; export formats.

mod common;

use common::*;
use symot::data::{generate, DatasetKind, DatasetSpec};
use symot::eval::{correspondences, eval_bank, evaluate, export_correspondence, read_correspondence_csv, scatter_svg, Direction};
use symot::experiment::{run, sweep_beta, ExperimentConfig};
use symot::flow::FlowModel;
use symot::kernels::{mmd2_value, DEFAULT_SCALES};
use symot::loss::{d_mmd, ot_cost_value};

fn trained_like() -> FlowModel {
    let mut m = FlowModel::init(2, 4, 16, 2.0, 11).unwrap();
    randomize(&mut m, 12, 0.3);
    m
}

fn sets() -> (symot::Tensor, symot::Tensor) {
    (
        generate(&DatasetSpec::with_defaults(DatasetKind::EightGaussA, 300, 1)).unwrap(),
        generate(&DatasetSpec::with_defaults(DatasetKind::EightGaussB, 250, 2)).unwrap(),
    )
}

#[test]
fn metrics_match_componentwise_recomputation() {
    let model = trained_like();
    let (x, z) = sets();
    let bank = eval_bank(&x, &z, &DEFAULT_SCALES).unwrap();
    let m = evaluate(&model, &bank, &x, &z).unwrap();
    let tx = model.forward(&x).unwrap();
    let iz = model.inverse(&z).unwrap();
    assert!((m.ot_fwd - ot_cost_value(&x, &tx).unwrap()).abs() < 1e-12);
    assert!((m.ot_bwd - ot_cost_value(&iz, &z).unwrap()).abs() < 1e-12);
    assert!((m.mmd_fwd - mmd2_value(&bank, &tx, &z).unwrap().max(0.0).sqrt()).abs() < 1e-12);
    assert!((m.mmd_bwd - mmd2_value(&bank, &x, &iz).unwrap().max(0.0).sqrt()).abs() < 1e-12);
    assert!((d_mmd(&model, &bank, &x, &z).unwrap() - (m.mmd_fwd + m.mmd_bwd)).abs() < 1e-12);
    assert_eq!(m.n_test, 250);
    assert!(m.ot_asymmetry().is_finite());
    // pure function of its inputs
    assert_eq!(evaluate(&model, &bank, &x, &z).unwrap(), m);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let model = FlowModel::init(3, 2, 4, 2.0, 1).unwrap();
    let (x, z) = sets();
    let bank = eval_bank(&x, &z, &DEFAULT_SCALES).unwrap();
    assert!(evaluate(&model, &bank, &x, &z).is_err());
}

#[test]
fn correspondence_file_reverifies_against_the_model() {
    let model = trained_like();
    let (x, z) = sets();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corr.csv");
    export_correspondence(&model, &x, &z, &path).unwrap();
    let rows = read_correspondence_csv(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(rows.len(), x.rows() + z.rows());
    assert_eq!(rows, correspondences(&model, &x, &z).unwrap());
    let fwd: Vec<_> = rows.iter().filter(|r| r.direction == Direction::Forward).collect();
    assert_eq!(fwd.len(), x.rows());
    for r in &rows {
        let img = model.forward(&symot::Tensor::from_rows(&[r.src])).unwrap();
        assert!((img.get(0, 0) - r.dst[0]).abs() < 1e-12 && (img.get(0, 1) - r.dst[1]).abs() < 1e-12);
    }
}

#[test]
fn svg_is_well_formed() {
    let svg = scatter_svg(&[([0.0, 0.0], [1.0, 2.0]), ([-1.0, 0.5], [0.0, 0.0])], 300);
    assert!(xml_well_formed(&svg));
    assert_eq!(svg.matches("<line").count(), 2);
    assert_eq!(svg.matches("<circle").count(), 4);
}

#[test]
fn sweep_is_reproducible_and_matches_single_runs() {
    let mut base = ExperimentConfig::new("g", DatasetKind::GaussPairA, DatasetKind::GaussPairB, 3);
    base.n_train = 100;
    base.n_test = 100;
    base.train.epochs = 2;
    base.train.batch_size = 50;
    base.train.blocks = 2;
    base.train.subnet_width = 8;
    let betas = [1e-3, 1.0, 10.0];
    let a = sweep_beta(&base, &betas, 2).unwrap().into_result().unwrap();
    let b = sweep_beta(&base, &betas, 1).unwrap().into_result().unwrap();
    assert_eq!(a, b);
    for (beta, report) in &a {
        assert_eq!(run(&base.with_beta(*beta)).unwrap().metrics, *report);
    }
}
