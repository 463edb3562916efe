//! Metrics, the leave-one-domain-out harness and the diagnostics exports.

mod common;

use common::moons_benchmark;
use etta::data::{generate_synthetic_domains, SyntheticFamily};
use etta::episodes::MixRatioSchedule;
use etta::eval::*;
use etta::metatrain::{EpisodeLog, TrainConfig};
use etta::model::{Backbone, ModelParams};

#[test]
fn metric_examples() {
    assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(accuracy(&[1, 0, 1, 0], &[1, 0, 1, 1]).unwrap(), 0.75);
    assert!(accuracy(&[], &[]).is_err());

    let mask = |on: &[usize]| (0..10).map(|i| on.contains(&i)).collect::<Vec<bool>>();
    assert_eq!(
        dice(&mask(&[0, 1, 2, 3]), &mask(&[1, 2, 3, 4, 5, 6])).unwrap(),
        0.6
    );
    assert_eq!(dice(&mask(&[]), &mask(&[])).unwrap(), 1.0);
    assert_eq!(dice(&mask(&[1, 2]), &mask(&[1, 2])).unwrap(), 1.0);
    assert_eq!(dice(&mask(&[1]), &mask(&[2])).unwrap(), 0.0);
    assert!(dice(&[true], &[true, false]).is_err());
}

fn log(i: usize, seen: f64, unseen: f64) -> EpisodeLog {
    EpisodeLog {
        iteration: i,
        loss_task_tr: 0.0,
        loss_sa: None,
        loss_pa: None,
        loss_meta: None,
        loss_task_metatest: Some(seen),
        loss_task_unseen: Some(unseen),
        r_ho: None,
        ratios: Vec::new(),
    }
}

#[test]
fn gap_area_properties() {
    let same: Vec<_> = (0..50)
        .map(|i| log(i, 0.3 * i as f64, 0.3 * i as f64))
        .collect();
    assert_eq!(overfit_gap_area(&same, 0, None).unwrap(), 0.0);
    let gap: Vec<_> = (0..=100).map(|i| log(i, 0.5, 1.5)).collect();
    assert!((overfit_gap_area(&gap, 0, None).unwrap() - 100.0).abs() < 1e-12);
    assert!((overfit_gap_area(&gap, 50, None).unwrap() - 50.0).abs() < 1e-12);
    let shifted: Vec<_> = (0..=100).map(|i| log(i, 7.5, 8.5)).collect();
    assert_eq!(
        overfit_gap_area(&gap, 0, Some(5)).unwrap(),
        overfit_gap_area(&shifted, 0, Some(5)).unwrap()
    );
    let mut missing = gap.clone();
    missing[3].loss_task_unseen = None;
    assert!(overfit_gap_area(&missing, 0, None).is_err());
    assert!(overfit_gap_area(&gap, 101, None).is_err());
}

#[test]
fn episodes_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("episodes.csv");
    let mut logs: Vec<_> = (0..5)
        .map(|i| log(i, 0.1 / 3.0 * i as f64, 1.0 / 7.0))
        .collect();
    logs[2].loss_task_unseen = None;
    logs[4].r_ho = Some(0.123456789);
    write_episodes_csv(&logs, &path).unwrap();
    assert_eq!(read_episodes_csv(&path).unwrap(), logs);
}

#[test]
fn embeddings_export_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_domains(SyntheticFamily::ShiftedGaussians, 2, 12, &[0.0, 1.0], 3)
        .unwrap();
    let params = ModelParams::init(Backbone::Identity { dim: 2 }, 2, 0).unwrap();
    let path = dir.path().join("z.csv");
    assert_eq!(export_embeddings(&params, &ds, &path).unwrap(), 24);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("z0,z1,label,domain_id"));
    let first: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let s = &ds[0].samples()[0];
    assert_eq!(
        first,
        vec![s.features[0], s.features[1], s.label as f64, 0.0]
    );
}

fn quick_methods() -> Vec<MethodSpec> {
    let train = TrainConfig {
        alpha: 0.01,
        beta: 3e-3,
        iterations: 15,
        batch_per_domain: 8,
        n_te: 8,
        ..TrainConfig::default()
    };
    vec![
        MethodSpec {
            name: "DeepAll".into(),
            kind: MethodKind::DeepAll,
            train: train.clone(),
            schedule: MixRatioSchedule::default(),
        },
        MethodSpec {
            name: "ETTA-SE".into(),
            kind: MethodKind::Episodic,
            train,
            schedule: MixRatioSchedule::default(),
        },
    ]
}

fn options(seeds: Vec<u64>) -> LodoOptions {
    LodoOptions {
        backbone: Backbone::Mlp {
            d_in: 2,
            hidden: 8,
            d_z: 4,
        },
        seeds,
        jobs: 2,
        config_hash: "h".into(),
    }
}

#[test]
fn lodo_structure_and_audit() {
    let domains = moons_benchmark();
    let report = leave_one_domain_out(&domains, &quick_methods(), &options(vec![0, 1])).unwrap();
    // 4 settings + Average, for 2 methods and 2 metrics.
    assert_eq!(report.results.len(), 5 * 2 * 2);
    assert_eq!(report.cells.len(), 4 * 2 * 2);
    for cell in &report.cells {
        let target = domains[cell.held_out].train.domain_id;
        assert!(!cell.trained_on.contains(&target));
        assert_eq!(cell.trained_on.len(), 3);
    }
    let table = format_table(&report.results, METRIC_HELDOUT);
    assert_eq!(table.lines().filter(|l| l.starts_with("->")).count(), 4);
    assert!(table.contains(AVERAGE_ROW));
    for r in report.results.iter().filter(|r| r.held_out == AVERAGE_ROW) {
        let settings: Vec<f64> = report
            .results
            .iter()
            .filter(|x| x.method == r.method && x.metric == r.metric && x.held_out != AVERAGE_ROW)
            .map(|x| x.mean)
            .collect();
        assert!((r.mean - settings.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }
    let again = leave_one_domain_out(&domains, &quick_methods(), &options(vec![0, 1])).unwrap();
    assert_eq!(report.results, again.results);
}

#[test]
fn lodo_needs_three_domains() {
    let domains = moons_benchmark();
    assert!(leave_one_domain_out(&domains[..2], &quick_methods(), &options(vec![0])).is_err());
}
