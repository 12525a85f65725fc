use oodkit::formats::{
    self, read_predictions, read_report, write_predictions, write_report, Prediction, ScoreFile, ScoreMeta,
    ThresholdFile,
};
use oodkit::Error;
use oodkit_core::report::{build_report, ClassificationRow, ExitRow, MetricsReport, OodRow};
use oodkit_core::scoring::{Method, Origin, ScoreRecord};
use proptest::prelude::*;

fn meta(method: Method) -> ScoreMeta {
    ScoreMeta {
        method: method.name().into(),
        model_fingerprint: "abc".into(),
        temperature: 0.001,
        thresholds_fingerprint: None,
    }
}

#[test]
fn scores_round_trip_with_and_without_exits() {
    let dir = tempfile::tempdir().unwrap();
    let energy = ScoreFile {
        meta: meta(Method::Energy),
        records: vec![
            ScoreRecord {
                sample_id: "a,b.png".into(),
                method: Method::Energy,
                exit_scores: Some([0.1, -2.5e-7, 1e300]),
                combined: -0.30000000000000004,
                origin: Origin::Id,
            },
            ScoreRecord {
                sample_id: "c.png".into(),
                method: Method::Energy,
                exit_scores: Some([1.0, 2.0, 3.0]),
                combined: 3.0,
                origin: Origin::Ood,
            },
        ],
    };
    let p = dir.path().join("e.csv");
    energy.write(&p).unwrap();
    assert_eq!(ScoreFile::read(&p).unwrap(), energy);
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("sample_id,method,exit1,exit2,exit3,combined,origin\n"));
    assert!(!text.contains('\r'));

    let soft = ScoreFile {
        meta: meta(Method::Softmax),
        records: vec![ScoreRecord {
            sample_id: "x".into(),
            method: Method::Softmax,
            exit_scores: None,
            combined: 0.9,
            origin: Origin::Id,
        }],
    };
    let p = dir.path().join("s.csv");
    soft.write(&p).unwrap();
    assert_eq!(ScoreFile::read(&p).unwrap(), soft);
    assert!(std::fs::read_to_string(&p).unwrap().contains("x,softmax,,,,0.9,ID\n"));
}

#[test]
fn scores_without_sidecar_or_with_foreign_method_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    std::fs::write(
        &p,
        "sample_id,method,exit1,exit2,exit3,combined,origin\nx,energy,1,2,3,3,ID\n",
    )
    .unwrap();
    assert!(matches!(ScoreFile::read(&p), Err(Error::Read { .. })));
    std::fs::write(formats::meta_path(&p), toml::to_string(&meta(Method::Softmax)).unwrap()).unwrap();
    assert!(matches!(ScoreFile::read(&p), Err(Error::Row { row: 1, .. })));
}

fn thresholds() -> ThresholdFile {
    ThresholdFile {
        method: "energy".into(),
        model_fingerprint: "abc".into(),
        temperature: 0.001,
        quantile: 0.95,
        thresholds: vec![1.0, 2.0, 3.0],
        scores_fingerprint: "ff".into(),
    }
}

#[test]
fn thresholds_round_trip_and_refuse_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.toml");
    let t = thresholds();
    t.write(&p).unwrap();
    assert_eq!(ThresholdFile::read(&p).unwrap(), t);
    t.check(Method::Energy, "abc", 0.001).unwrap();
    for (m, fp, temp) in [
        (Method::Softmax, "abc", 0.001),
        (Method::Energy, "abd", 0.001),
        (Method::Energy, "abc", 1.0),
    ] {
        let err = t.check(m, fp, temp).unwrap_err();
        assert!(matches!(err, Error::Fingerprint(_)));
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn predictions_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    let preds = vec![
        Prediction {
            sample_id: "a".into(),
            method: Method::Ensemble,
            label: Some(2),
            malignant_score: 0.6,
            cancer: Some(true),
        },
        Prediction {
            sample_id: "b".into(),
            method: Method::Ensemble,
            label: None,
            malignant_score: 0.1,
            cancer: None,
        },
    ];
    write_predictions(&p, &preds).unwrap();
    assert_eq!(read_predictions(&p).unwrap(), preds);
}

#[test]
fn perfectly_separated_scores_give_full_auc() {
    let id: Vec<f64> = (10..40).map(f64::from).collect();
    let ood: Vec<f64> = (0..10).map(f64::from).collect();
    let (report, curves) = build_report(&[oodkit_core::report::MethodInput {
        method: Method::Softmax,
        id: oodkit_core::report::ScoreColumn {
            combined: id,
            exits: None,
        },
        ood: vec![(
            "far".into(),
            oodkit_core::report::ScoreColumn {
                combined: ood,
                exits: None,
            },
        )],
        classification: None,
    }])
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &report, &curves).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text, "method,ood_set,auc_pct,fpr95_pct\nsoftmax,far,100.0,0.0\n");
    let roc = std::fs::read_to_string(dir.path().join("roc_softmax_far.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr\n0.0,0.0\n"));
    assert!(roc.ends_with("1.0,1.0\n"));
}

fn pct() -> impl Strategy<Value = f64> {
    prop_oneof![0.0..=100.0f64, Just(0.0), Just(100.0), Just(100.0 / 3.0)]
}

fn method() -> impl Strategy<Value = Method> {
    prop::sample::select(Method::ALL.to_vec())
}

fn report() -> impl Strategy<Value = MetricsReport> {
    let ood = prop::collection::vec((method(), "[a-z ,\"]{1,8}", pct(), pct()), 0..6).prop_map(|v| {
        v.into_iter()
            .map(|(method, ood_set, auc_pct, fpr95_pct)| OodRow {
                method,
                ood_set,
                auc_pct,
                fpr95_pct,
            })
            .collect()
    });
    let exits = prop::collection::vec((method(), "[a-z]{1,5}", 1usize..=3, pct(), pct()), 0..6).prop_map(|v| {
        v.into_iter()
            .map(|(method, ood_set, exit, auc_pct, fpr95_pct)| ExitRow {
                method,
                ood_set,
                exit,
                auc_pct,
                fpr95_pct,
            })
            .collect()
    });
    let cls = prop::collection::vec((method(), pct(), pct()), 0..4).prop_map(|v| {
        v.into_iter()
            .map(|(method, auc_pct, auc_fnr5_pct)| ClassificationRow {
                method,
                auc_pct,
                auc_fnr5_pct,
            })
            .collect()
    });
    (ood, exits, cls).prop_map(|(ood, exits, classification)| MetricsReport {
        ood,
        exits,
        classification,
    })
}

proptest! {
    #[test]
    fn report_csv_round_trip(r in report()) {
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &r, &[]).unwrap();
        prop_assert_eq!(read_report(dir.path()).unwrap(), r);
    }
}
