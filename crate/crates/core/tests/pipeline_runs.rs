use std::path::{Path, PathBuf};

use qc_reliability::bayes::PaEstimator;
use qc_reliability::pipeline::{
    emit_oc, evaluate, load_scenario, parse_scenario, run, ChannelMode, RunOptions, Scenario,
};
use qc_reliability::plans::{AcceptancePlan, ExecutionLimit, OcCurve, QualityAxis};
use qc_reliability::Error;

fn shipped_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/masonry_wall.scenario")
}

/// The shipped scenario with small sampler and simulation budgets.
fn quick() -> Scenario {
    let mut sc = load_scenario(&shipped_path()).unwrap();
    sc.mcmc.n_samples = 4_000;
    sc.mcmc.burn_in = 1_000;
    sc.mcmc.pa_estimator = PaEstimator::GridInterpolation {
        n_mu: 16,
        n_logq: 16,
        n_sim: 300,
    };
    sc.oc.n_sim = 500;
    sc
}

#[test]
fn shipped_scenario_has_the_case_study_layout() {
    let sc = load_scenario(&shipped_path()).unwrap();
    let names: Vec<&str> = sc.channels.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["Masonry Unit", "Mortar", "Execution", "Model"]);
    assert_eq!(sc.subsets.len(), 6);
    assert!(sc.wall.is_some());
    assert!(sc.channels[..3]
        .iter()
        .all(|c| c.plans.len() == 2 && c.mode == ChannelMode::Mcmc));
    assert_eq!(sc.channels[3].mode, ChannelMode::FixedV);
}

#[test]
fn always_accept_plans_leave_gamma_at_base() {
    let mut sc = quick();
    let always = AcceptancePlan::ExecutionLimit(ExecutionLimit {
        n: 10,
        limit: f64::MAX,
    });
    for c in sc
        .channels
        .iter_mut()
        .filter(|c| c.mode == ChannelMode::Mcmc)
    {
        c.plans = vec![always, always];
        c.ar = None;
    }
    sc.mcmc.n_samples = 21_000;
    let out = evaluate(
        &sc,
        RunOptions {
            skip_oc: true,
            ..Default::default()
        },
    )
    .unwrap();
    for s in &out.report.expected.stages {
        assert!((s.r - 1.0).abs() < 0.01, "{s:?}");
        assert!((s.gamma - sc.calib.gamma_base).abs() < 0.015, "{s:?}");
    }
}

#[test]
fn mcmc_and_fixed_v_share_the_calibration_path() {
    let sc = quick();
    let opts = RunOptions {
        skip_oc: true,
        ..Default::default()
    };
    let mcmc = evaluate(&sc, opts).unwrap();
    let pinned = sc.pinned_to(&mcmc.report).unwrap();
    let fixed = evaluate(&pinned, opts).unwrap();
    assert_eq!(mcmc.report.expected, fixed.report.expected);
    assert_eq!(mcmc.report.upper, fixed.report.upper);
    assert_eq!(
        mcmc.files["scenario_table.csv"],
        fixed.files["scenario_table.csv"]
    );
    assert_eq!(
        mcmc.files["calibration.csv"],
        fixed.files["calibration.csv"]
    );
}

#[test]
fn same_seed_same_bytes_and_seed_override_changes_them() {
    let sc = quick();
    let a = evaluate(&sc, RunOptions::default()).unwrap();
    let b = evaluate(&sc, RunOptions::default()).unwrap();
    assert_eq!(a.files, b.files);
    let c = evaluate(
        &sc,
        RunOptions {
            seed: Some(sc.seed + 1),
            ..Default::default()
        },
    )
    .unwrap();
    assert_ne!(a.files["v_trajectory.csv"], c.files["v_trajectory.csv"]);
    assert_ne!(
        a.report.provenance.config_hash,
        c.report.provenance.config_hash
    );
}

#[test]
fn run_writes_reports_and_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let report = run(&quick(), dir.path(), RunOptions::default()).unwrap();
    for name in [
        "report.txt",
        "report.json",
        "scenario_table.csv",
        "scenario_table.txt",
        "calibration.csv",
        "v_trajectory.csv",
        "chain_masonry_unit_stage1.csv",
        "chain_execution_stage2.csv",
        "predictive_mortar_incoming.csv",
        "predictive_mortar_stage2.csv",
        "oc_masonry_unit_independent.csv",
        "oc_masonry_unit_ar2.csv",
    ] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: qc_reliability::pipeline::RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    let chain = std::fs::read_to_string(dir.path().join("chain_masonry_unit_stage1.csv")).unwrap();
    assert!(chain.starts_with("chain,iter,mu,q\n"));
    let dens = std::fs::read_to_string(dir.path().join("predictive_mortar_stage1.csv")).unwrap();
    assert!(dens.starts_with("x,density\n"));
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.contains("Q_R"));
}

#[test]
fn emitted_oc_pair_shares_the_grid_and_round_trips() {
    let sc = quick();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = emit_oc(&sc, "Mortar", dir.path(), 5).unwrap();
    let ta = std::fs::read_to_string(a).unwrap();
    let tb = std::fs::read_to_string(b).unwrap();
    let ca = OcCurve::from_csv(&ta, QualityAxis::DefectRate).unwrap();
    let cb = OcCurve::from_csv(&tb, QualityAxis::DefectRate).unwrap();
    let qa: Vec<f64> = ca.points.iter().map(|p| p.quality).collect();
    let qb: Vec<f64> = cb.points.iter().map(|p| p.quality).collect();
    assert_eq!(qa, qb);
    assert_eq!(ca.to_csv(), ta);
    assert!(matches!(
        emit_oc(&sc, "Model", dir.path(), 5),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        emit_oc(&sc, "Nope", dir.path(), 5),
        Err(Error::UnknownChannel(_))
    ));
}

#[test]
fn channel_errors_carry_context() {
    let mut sc = quick();
    // A plan no batch can pass: P_a is zero on the whole grid.
    sc.channels[1].plans = vec![
        AcceptancePlan::ExecutionLimit(ExecutionLimit {
            n: 10,
            limit: 1e-300
        });
        2
    ];
    let err = evaluate(
        &sc,
        RunOptions {
            skip_oc: true,
            ..Default::default()
        },
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("Mortar"), "{msg}");
    assert!(!err.is_validation());
}

#[test]
fn strict_schema_errors_name_the_key() {
    let text = std::fs::read_to_string(shipped_path()).unwrap();
    let bad = text.replacen("n_chains = 4", "n_chain = 4", 1);
    match parse_scenario(&bad) {
        Err(Error::Scenario { path, message }) => {
            assert!(path.starts_with("mcmc"), "{path}");
            assert!(message.contains("n_chain"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    let bad = text.replacen("limit = 0.05", "limit = -0.05", 1);
    match parse_scenario(&bad) {
        Err(Error::Scenario { path, .. }) => assert_eq!(path, "channels[2].plans[0]"),
        other => panic!("{other:?}"),
    }
    let bad = text.replacen("stage = 2", "stage = 3", 1);
    assert!(matches!(parse_scenario(&bad), Err(Error::Scenario { .. })));
}
