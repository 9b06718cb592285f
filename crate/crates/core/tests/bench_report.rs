use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use steerlab::bench::{recompute_report, Metric, MetricReport, RunConfig, RunKind, RunRow, BASELINE};
use steerlab::editing::EditConfig;
use steerlab::guidance::GuidanceConfig;
use steerlab::steer::SteerConfig;
use steerlab::train::PersonalizationMode;

fn arb_row() -> impl Strategy<Value = RunRow> {
    (
        prop::sample::select(vec![BASELINE, "steered", "no_ms"]),
        prop::sample::select(vec!["a", "b", "c"]),
        prop::sample::select(PersonalizationMode::ALL.to_vec()),
        0u64..3,
        prop::option::weighted(0.1, Just("failed".to_string())),
        0.05f64..1.0,
        0.0f64..1.0,
    )
        .prop_map(|(label, task, mode, seed, failure, ms, cs)| RunRow {
            run_id: format!("{label}-{task}-{}-s{seed}", mode.as_str()),
            label: label.into(),
            task: task.into(),
            mode,
            seed,
            metrics: if failure.is_some() {
                BTreeMap::new()
            } else {
                [(Metric::MsSsim, ms), (Metric::ConceptScore, cs), (Metric::Ssim, ms * 0.9)].into_iter().collect()
            },
            failure,
        })
}

fn dedup(rows: Vec<RunRow>) -> Vec<RunRow> {
    let mut seen = BTreeMap::new();
    for r in rows {
        seen.insert(r.run_id.clone(), r);
    }
    seen.into_values().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn report_equals_recomputation_from_persisted_runs(rows in prop::collection::vec(arb_row(), 0..30)) {
        let rows = dedup(rows);
        let dir = tempfile::tempdir().unwrap();
        for r in &rows {
            let d = dir.path().join("runs").join(&r.run_id);
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join("metrics.json"), serde_json::to_vec(r).unwrap()).unwrap();
        }
        let report = MetricReport::from_rows(rows);
        report.save(dir.path()).unwrap();
        prop_assert_eq!(&recompute_report(dir.path()).unwrap(), &report);
        prop_assert_eq!(&MetricReport::load(dir.path()).unwrap(), &report);
        for d in &report.deltas {
            prop_assert!((d.relative - (d.new - d.old) / d.old).abs() <= 1e-9);
            let base = report.aggregate(BASELINE, d.mode).unwrap();
            prop_assert_eq!(base.means[&d.metric], d.old);
        }
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        prop_assert_eq!(csv.lines().count(), report.rows.len() + 1);
    }

    #[test]
    fn aggregates_are_plain_means_of_successful_rows(rows in prop::collection::vec(arb_row(), 1..30)) {
        let report = MetricReport::from_rows(dedup(rows));
        for a in &report.aggregates {
            let ok: Vec<&RunRow> = report.rows.iter().filter(|r| r.label == a.label && r.mode == a.mode && r.failure.is_none()).collect();
            prop_assert_eq!(a.n_ok, ok.len());
            if let Some(m) = a.means.get(&Metric::MsSsim) {
                let want = ok.iter().map(|r| r.metrics[&Metric::MsSsim]).sum::<f64>() / ok.len() as f64;
                prop_assert!((m - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn csv_columns_follow_the_table_layout() {
    let report = MetricReport::from_rows(vec![]);
    assert_eq!(report.to_csv().trim(), "run_id,label,task,mode,seed,status,concept_score,ssim,ms_ssim");
}

#[test]
fn run_config_survives_its_snapshot_format() {
    let cfg = RunConfig {
        label: "steered".into(),
        kind: RunKind::Edit,
        task: "box-dots".into(),
        mode: PersonalizationMode::CaKvOnly,
        steer: Some(SteerConfig::default()),
        guidance: GuidanceConfig::default(),
        edit: EditConfig::default(),
        metrics: Metric::ALL.to_vec(),
        output_dir: PathBuf::from("out"),
        seed: 2,
    };
    let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(cfg.run_id(), "steered-box-dots-ca_kv_only-s2");
    assert_eq!(cfg.run_dir(), PathBuf::from("out/runs/steered-box-dots-ca_kv_only-s2"));
}
