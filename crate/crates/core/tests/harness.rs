use std::path::Path;

use lapg::policy::Activation;
use lapg::harness::metrics::{read_aggregate_csv, read_run_csv, AGGREGATE_HEADER, RUN_HEADER};
use lapg::harness::{
    compare, preset, run_experiment, EnvConfig, ExperimentConfig, PolicyConfig, TransportKind, PRESETS,
};
use lapg::lapg::{Mode, VarianceMode};
use lapg::Error;

fn small(name: &str) -> ExperimentConfig {
    let mut cfg = preset("tabular-hetero").unwrap();
    cfg.name = name.into();
    cfg.algo.iterations = 15;
    cfg.seeds.runs = 3;
    cfg
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for mode in ["pg", "lapg"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(mode))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        for n in names {
            out.push((format!("{mode}/{n}"), std::fs::read(dir.join(mode).join(&n)).unwrap()));
        }
    }
    out
}

#[test]
fn every_preset_round_trips_through_toml() {
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg, "{name}");
        assert_eq!(back.to_toml().unwrap(), text);
        cfg.instantiate().unwrap();
    }
    assert!(preset("nope").is_err());
    assert!(ExperimentConfig::load("preset:tabular-oracle").is_ok());
}

#[test]
fn coopnav_preset_matches_reported_setting() {
    let cfg = preset("coopnav-m2-hetero").unwrap();
    let EnvConfig::CoopNav(env) = &cfg.env else { panic!("coop-nav expected") };
    assert_eq!(env.agents, 2);
    assert!(env.reward_scales.iter().all(|w| (1.0..=10.0).contains(w)));
    assert_eq!(
        cfg.policy,
        PolicyConfig::Mlp {
            hidden: [30, 10],
            activation: Activation::Relu
        }
    );
    assert_eq!((cfg.algo.alpha, cfg.algo.momentum), (0.01, 0.6));
    assert_eq!((cfg.algo.gamma, cfg.algo.horizon, cfg.algo.batch_size), (0.99, 20, 10));
    assert_eq!(cfg.seeds.runs, 10);

    let m5 = preset("coopnav-m5-softplus").unwrap();
    assert_eq!(
        m5.policy,
        PolicyConfig::Mlp {
            hidden: [50, 20],
            activation: Activation::Softplus
        }
    );
    assert_eq!((m5.algo.batch_size, m5.seeds.runs), (8, 5));
}

#[test]
fn invalid_fields_are_named() {
    let mut text = preset("tabular-oracle").unwrap().to_toml().unwrap();
    text = text.replace("momentum = 0.0", "momentum = 1.5");
    match ExperimentConfig::parse(&text) {
        Err(Error::Config(msg)) => assert!(msg.starts_with("algo.momentum"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut cfg = preset("tabular-oracle").unwrap();
    cfg.algo.trigger.xi = vec![0.2, 0.2];
    match cfg.validate() {
        Err(Error::Config(msg)) => assert!(msg.starts_with("algo.trigger"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(ExperimentConfig::parse("name = 3"), Err(Error::Config(_))));
}

#[test]
fn zero_iterations_write_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("empty");
    cfg.algo.iterations = 0;
    let out = run_experiment(&cfg, dir.path()).unwrap();
    assert!(out.failures.is_empty());
    for mode in ["pg", "lapg"] {
        let run = std::fs::read_to_string(dir.path().join(mode).join("run_000.csv")).unwrap();
        assert_eq!(run, format!("{RUN_HEADER}\n"));
        let agg = std::fs::read_to_string(dir.path().join(mode).join("aggregate.csv")).unwrap();
        assert_eq!(agg, format!("{AGGREGATE_HEADER}\n"));
    }
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small("repeat");
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

#[test]
fn aggregate_rows_are_run_means() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("means");
    let out = run_experiment(&cfg, dir.path()).unwrap();
    for (mode, runs) in &out.runs {
        let mode_dir = dir.path().join(lapg::harness::mode_dir_name(*mode));
        let agg = read_aggregate_csv(&mode_dir.join("aggregate.csv")).unwrap();
        assert_eq!(agg.len(), cfg.algo.iterations);
        for (r, rows) in runs.iter().enumerate() {
            assert_eq!(&read_run_csv(&mode_dir.join(format!("run_{r:03}.csv"))).unwrap(), rows);
        }
        for (k, row) in agg.iter().enumerate() {
            let n = runs.len() as f64;
            let reward: f64 = runs.iter().map(|r| r[k].avg_reward).sum::<f64>() / n;
            let uploads: f64 = runs.iter().map(|r| r[k].cumulative_uploads as f64).sum::<f64>() / n;
            assert!((row.avg_reward_mean - reward).abs() < 1e-12);
            assert!((row.cumulative_uploads_mean - uploads).abs() < 1e-12);
            assert_eq!(row.iteration, k + 1);
        }
        for rows in runs {
            for w in rows.windows(2) {
                assert_eq!(w[1].iteration, w[0].iteration + 1);
                assert!(w[1].cumulative_uploads >= w[0].cumulative_uploads);
                assert!(w[1].cumulative_broadcasts > w[0].cumulative_broadcasts);
            }
        }
    }
}

#[test]
fn comparing_a_run_with_itself_is_neutral() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("self");
    cfg.algo.modes = vec![Mode::Pg];
    run_experiment(&cfg, dir.path()).unwrap();
    let pg = dir.path().join("pg");
    let c = compare(&pg, &pg, None).unwrap();
    assert_eq!(c.upload_ratio, 1.0);
    assert_eq!(c.final_reward_gap, 0.0);
    assert!(c.within_half_std);
    // dense reference: M uploads per iteration
    assert_eq!(c.final_uploads_a, (2 * cfg.algo.iterations) as f64);
}

#[test]
fn compare_rejects_mismatched_lengths() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = small("short");
    cfg.algo.modes = vec![Mode::Pg];
    run_experiment(&cfg, a.path()).unwrap();
    cfg.algo.iterations = 5;
    run_experiment(&cfg, b.path()).unwrap();
    assert!(compare(&a.path().join("pg"), &b.path().join("pg"), None).is_err());
}

#[test]
fn socket_and_in_process_runs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = small("wire");
    cfg.algo.trigger.variance_mode = VarianceMode::EmpiricalProxy;
    run_experiment(&cfg, a.path()).unwrap();
    cfg.transport = TransportKind::Socket;
    run_experiment(&cfg, b.path()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

#[test]
fn oversized_stepsize_is_reported() {
    let mut cfg = small("warn");
    let instance = cfg.instantiate().unwrap();
    cfg.algo.alpha = 1e-6;
    assert!(cfg.warnings(&instance).is_empty());
    cfg.algo.alpha = 100.0;
    let w = cfg.warnings(&instance);
    assert_eq!(w.len(), 1);
    assert!(w[0].starts_with("algo.alpha"));
}
