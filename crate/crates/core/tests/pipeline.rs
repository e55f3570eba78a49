use gpm_core::checkpoint::{load_checkpoint, save_checkpoint};
use gpm_core::data::{load_cohort, save_cohort, LoadMode};
use gpm_core::metrics::{evaluate, records};
use gpm_core::model::predict_cohort;
use gpm_core::repro::{run_profile, Overrides};
use gpm_core::sweep::SweepValue;
use gpm_core::synthetic::{generate_cohort, split_biased, GeneratorSpec};
use gpm_core::trainer::{train, TrainConfig};
use gpm_core::{Fusion, ModelConfig};

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        seed: 5,
        model: ModelConfig {
            d: 4,
            tab_widths: vec![16, 16],
            img_widths: vec![16, 16],
            condition_width: 8,
            decoder_width: 8,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn generate_train_save_load_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_cohort(&GeneratorSpec {
        n: 300,
        seed: 3,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let (train_set, test_set) = split_biased(&cohort, 2, 3).unwrap();
    save_cohort(&train_set, dir.path().join("train.jsonl")).unwrap();
    let blind = load_cohort(dir.path().join("train.jsonl"), LoadMode::Blind).unwrap();
    assert!(!blind.has_oracle());

    let cfg = small_config(15);
    let ck = train(&blind, &cfg).unwrap();
    assert_eq!(ck.history.len(), 15);
    let first = ck.history[0].loss;
    let last = ck.history.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");

    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let a = predict_cohort(&test_set, &ck.params, &cfg.model).unwrap();
    let b = predict_cohort(&test_set, &back.params, &back.train_config.model).unwrap();
    assert_eq!(a, b);

    let report = evaluate(&records(&test_set, &a)).unwrap();
    assert_eq!(report.n, test_set.len());
    assert!(report.pehe.is_some());
    assert!((0.0..=1.0).contains(&report.r_pol));
    let blind_report = evaluate(&records(&test_set.blind(), &a)).unwrap();
    assert!(blind_report.pehe.is_none());
    assert_eq!(blind_report.r_pol, report.r_pol);
}

#[test]
fn oracle_fields_do_not_influence_training() {
    let cohort = generate_cohort(&GeneratorSpec {
        n: 120,
        seed: 9,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let cfg = small_config(3);
    let full = train(&cohort, &cfg).unwrap();
    let blind = train(&cohort.blind(), &cfg).unwrap();
    assert_eq!(full, blind);
}

#[test]
fn profiles_produce_their_table_shapes() {
    let quick = Overrides {
        epochs: Some(2),
        n: Some(160),
        seeds: Some(vec![1]),
    };
    let b = run_profile("fig2a-analog", &quick).unwrap();
    assert_eq!(b.label, "synthetic analog");
    assert_eq!(b.results.iter().map(|r| r.degree).collect::<Vec<_>>(), [1, 2, 3, 4]);
    for r in &b.results {
        assert_eq!(r.n_train + r.n_test, 160);
        let agg = r.table.aggregate();
        let values: Vec<_> = agg.iter().map(|a| a.value).collect();
        assert_eq!(
            values,
            [SweepValue::Fusion(Fusion::Poe), SweepValue::Fusion(Fusion::Concat)]
        );
    }
    let names: Vec<String> = b.tables().into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"summary.csv".to_owned()));
    assert!(names.contains(&"degree4_runs.csv".to_owned()));

    let t1 = run_profile("table1-analog", &quick).unwrap();
    assert_eq!(t1.results.len(), 1);
    let rows = t1.aggregate(3).unwrap();
    assert_eq!(rows.len(), 1);
    for m in ["r_pol", "auc0", "auc1", "acc0", "acc1"] {
        assert!(rows[0].get(m).is_some(), "{m} missing");
    }

    let fig2b = run_profile("fig2b-analog", &quick).unwrap();
    assert_eq!(fig2b.aggregate(3).unwrap().len(), 3);
}

#[test]
fn profiles_are_deterministic() {
    let quick = Overrides {
        epochs: Some(2),
        n: Some(120),
        seeds: Some(vec![4]),
    };
    let strip = |b: gpm_core::repro::ReportBundle| {
        b.results
            .into_iter()
            .flat_map(|r| r.table.rows)
            .map(|row| (row.report, row.final_kl, row.final_loss))
            .collect::<Vec<_>>()
    };
    let a = strip(run_profile("fig2d-analog", &quick).unwrap());
    let b = strip(run_profile("fig2d-analog", &quick).unwrap());
    assert_eq!(a, b);
}
