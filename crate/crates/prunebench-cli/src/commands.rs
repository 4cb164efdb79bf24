//! The four subcommands: run, report, calibrate, attack-one.

use std::path::{Path, PathBuf};

use prunebench::attacks::{
    bb_l0, cw_l2, pgd_linf, sample_starting_point, NetworkOracle, PgdConfig,
};
use prunebench::data::{load_idx, split, synthetic_glyphs, Dataset};
use prunebench::harness::{
    calibrate_epsilons, derive_seed, evaluation_subset, margin_table, run_experiment, AttackKind,
    ExperimentData, MarginTable, ReportRow, RobustnessReport,
};
use prunebench::model::{build_cnn5, MaskedNetwork};
use prunebench::training::train_to_convergence;
use prunebench::{Error, Result};

use crate::config::{parse_config, FileConfig, ResolvedConfig};
use crate::manifest::{fnv1a_hex, ArtifactPaths, RunManifest};

/// Flag overrides shared by the subcommands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<usize>,
    pub subset: Option<usize>,
    pub jobs: Option<usize>,
}

pub const SEED_ENV: &str = "PRUNEBENCH_SEED";
pub const MNIST_ENV: &str = "PRUNEBENCH_MNIST_DIR";

fn apply_overrides(cfg: &mut ResolvedConfig, ov: &Overrides) -> Result<()> {
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let base: u64 = seed
            .parse()
            .map_err(|_| Error::Contract(format!("{} must be an integer, got '{}'", SEED_ENV, seed)))?;
        cfg.seed_base = base;
    }
    if let Some(n) = ov.seeds {
        if n == 0 {
            return Err(Error::Contract("--seeds must be >= 1".into()));
        }
        cfg.experiment.seeds = (0..n as u64).collect();
    }
    cfg.experiment.seeds = (0..cfg.experiment.seeds.len() as u64)
        .map(|i| cfg.seed_base.wrapping_add(i))
        .collect();
    if let Some(n) = ov.subset {
        if n == 0 {
            return Err(Error::Contract("--subset must be >= 1".into()));
        }
        cfg.experiment.subset = n;
    }
    if let Some(jobs) = ov.jobs {
        // a global pool can only be installed once per process; later calls
        // with the same intent are harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    Ok(())
}

/// Training/validation/test data per the config: IDX files when a dataset
/// directory is configured (config key or environment), otherwise the
/// deterministic synthetic glyph set.
pub fn load_datasets(cfg: &ResolvedConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let dir = std::env::var(MNIST_ENV).ok().or_else(|| cfg.mnist_dir.clone());
    let (full_train, test) = match dir {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            (train.take(cfg.train_size), test.take(cfg.test_size))
        }
        None => (
            synthetic_glyphs(cfg.train_size, 1_000),
            synthetic_glyphs(cfg.test_size, 2_000),
        ),
    };
    let (train, val) = split(&full_train, cfg.val_fraction, 42)?;
    Ok((train, val, test))
}

/// Run the full experiment; returns the process exit code (0 on full
/// success, 1 when any cell failed).
pub fn cmd_run(
    config_path: Option<&Path>,
    out_dir: &Path,
    ov: &Overrides,
    resume: bool,
) -> Result<i32> {
    let file_cfg = match config_path {
        None => FileConfig::default(),
        Some(p) => FileConfig::load(p)?,
    };
    let mut cfg = file_cfg.resolve()?;
    apply_overrides(&mut cfg, ov)?;

    std::fs::create_dir_all(out_dir)?;
    let canonical = file_cfg.canonical()?;
    std::fs::write(out_dir.join("config.toml"), &canonical)?;

    let (train, val, test) = load_datasets(&cfg)?;
    let data = ExperimentData {
        train: &train,
        val: &val,
        test: &test,
    };
    let report = run_experiment(&cfg.experiment, &data, Some(out_dir), resume)?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: fnv1a_hex(&canonical),
        seeds: cfg.experiment.seeds.clone(),
        artifacts: ArtifactPaths {
            config: "config.toml".into(),
            report: "report.csv".into(),
            cells_dir: "cells".into(),
            checkpoints_dir: "checkpoints".into(),
        },
        failures: report.failures.clone(),
    };
    manifest.save(out_dir)?;

    let cells = report.rows.len();
    if report.failures.is_empty() {
        println!("run complete: {} report rows, no failures", cells);
        Ok(0)
    } else {
        eprintln!(
            "run finished with {} failed cells ({} rows written):",
            report.failures.len(),
            cells
        );
        for f in &report.failures {
            eprintln!("  {}", f);
        }
        Ok(1)
    }
}

fn fmt_eps(eps: f64) -> String {
    let s = format!("{:.6}", eps);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Mean rows when several seeds were run, else the single seed's rows.
fn summary_rows(report: &RobustnessReport) -> Vec<&ReportRow> {
    let means: Vec<&ReportRow> = report.rows.iter().filter(|r| r.seed.is_none()).collect();
    if !means.is_empty() {
        return means;
    }
    report.rows.iter().collect()
}

/// Assemble the margin table (values in accuracy percentage points) from a
/// report: one "benign" row plus one row per (attack, epsilon).
pub fn report_margin_table(report: &RobustnessReport) -> Result<MarginTable> {
    let rows = summary_rows(report);
    let mut rates: Vec<usize> = rows.iter().map(|r| r.rate).collect();
    rates.sort_unstable();
    rates.dedup();

    let value_at = |attack: &str, eps: Option<f64>, metric: &str, rate: usize| -> Option<f64> {
        rows.iter()
            .find(|r| {
                r.rate == rate
                    && r.metric == metric
                    && r.attack == attack
                    && eps.map_or(true, |e| r.epsilon == e)
            })
            .map(|r| r.value * 100.0)
    };

    let mut labels: Vec<(String, String, Option<f64>, String)> =
        vec![("benign".into(), "none".into(), None, "clean_acc".into())];
    let mut seen = std::collections::BTreeSet::new();
    for r in &rows {
        if r.metric == "robust_acc" && seen.insert((r.attack.clone(), r.epsilon.to_bits())) {
            labels.push((
                format!("{}_eps{}", r.attack, fmt_eps(r.epsilon)),
                r.attack.clone(),
                Some(r.epsilon),
                "robust_acc".into(),
            ));
        }
    }

    let mut table_rows = Vec::new();
    for (label, attack, eps, metric) in labels {
        let values: Option<Vec<f64>> = rates
            .iter()
            .map(|&rate| value_at(&attack, eps, &metric, rate))
            .collect();
        if let Some(values) = values {
            table_rows.push((label, values));
        }
    }
    margin_table(&rates, &table_rows)
}

/// Emit the clean-accuracy table, the margin table, and per-(attack,
/// epsilon) curve files from a finished run directory.
pub fn cmd_report(out_dir: &Path) -> Result<()> {
    let manifest = RunManifest::load(out_dir)?;
    let report_path = out_dir.join(&manifest.artifacts.report);
    let report = RobustnessReport::from_csv(&std::fs::read_to_string(&report_path)?)?;
    let rows = summary_rows(&report);

    // clean-accuracy table: methods x rates
    let mut rates: Vec<usize> = rows.iter().map(|r| r.rate).collect();
    rates.sort_unstable();
    rates.dedup();
    let mut methods: Vec<String> = rows.iter().map(|r| r.method.label()).collect();
    methods.sort();
    methods.dedup();
    let mut clean = String::from("method");
    for r in &rates {
        clean.push_str(&format!(",rate{}", r));
    }
    clean.push('\n');
    for m in &methods {
        clean.push_str(m);
        for &rate in &rates {
            let v = rows
                .iter()
                .find(|r| r.metric == "clean_acc" && r.method.label() == *m && r.rate == rate)
                .map(|r| format!("{:.2}", r.value * 100.0))
                .unwrap_or_default();
            clean.push(',');
            clean.push_str(&v);
        }
        clean.push('\n');
    }
    std::fs::write(out_dir.join("clean_table.csv"), clean)?;

    let table = report_margin_table(&report)?;
    std::fs::write(out_dir.join("margin_table.csv"), table.to_csv())?;

    // curve files: rate vs accuracy per method, one file per attack strength
    let curves_dir = out_dir.join("curves");
    std::fs::create_dir_all(&curves_dir)?;
    let mut cells: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r.metric == "robust_acc")
        .map(|r| (r.attack.clone(), r.epsilon))
        .collect();
    cells.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    cells.dedup();
    for (attack, eps) in cells {
        let mut text = String::from("method,rate,accuracy\n");
        for m in &methods {
            for &rate in &rates {
                if let Some(r) = rows.iter().find(|r| {
                    r.metric == "robust_acc"
                        && r.attack == attack
                        && r.epsilon == eps
                        && r.method.label() == *m
                        && r.rate == rate
                }) {
                    text.push_str(&format!("{},{},{:.6}\n", m, rate, r.value));
                }
            }
        }
        std::fs::write(
            curves_dir.join(format!("curve_{}_eps{}.csv", attack, fmt_eps(eps))),
            text,
        )?;
    }
    println!("report written to {}", out_dir.display());
    Ok(())
}

/// Train the dense model and print calibrated epsilon grids as a TOML
/// fragment ready to paste into a config file.
pub fn cmd_calibrate(config_path: Option<&Path>, ov: &Overrides) -> Result<()> {
    let mut cfg = parse_config(config_path)?;
    apply_overrides(&mut cfg, ov)?;
    let (train, val, test) = load_datasets(&cfg)?;
    let subset = evaluation_subset(&test, cfg.experiment.subset.min(test.len()))?;

    let (h, w, c) = train.sample_shape();
    let seed = cfg.experiment.seeds[0];
    let mut net = build_cnn5((h, w, c), train.class_count, derive_seed(seed, 0))?;
    train_to_convergence(&mut net, &train, &val, &cfg.experiment.train, derive_seed(seed, 1))?;
    let oracle = NetworkOracle::new(&net);

    println!("[epsilons]");
    for grid in &cfg.experiment.grids {
        let calibrated =
            calibrate_epsilons(&oracle, grid.kind, &cfg.experiment.attacks, &subset, seed)?;
        let values: Vec<String> = calibrated.values.iter().map(|v| format!("{}", v)).collect();
        println!("{} = [{}]", calibrated.kind.name(), values.join(", "));
    }
    Ok(())
}

/// Attack a single evaluation image and print the outcome; for debugging
/// attack behavior against a trained or checkpointed model.
pub fn cmd_attack_one(
    config_path: Option<&Path>,
    checkpoint: Option<&Path>,
    attack: &str,
    index: usize,
    eps: Option<f64>,
    ov: &Overrides,
) -> Result<()> {
    let kind = AttackKind::from_name(attack)?;
    let mut cfg = parse_config(config_path)?;
    apply_overrides(&mut cfg, ov)?;
    let (train, val, test) = load_datasets(&cfg)?;
    let subset = evaluation_subset(&test, cfg.experiment.subset.min(test.len()))?;
    if index >= subset.len() {
        return Err(Error::Index(format!(
            "--index {} out of range for subset of {}",
            index,
            subset.len()
        )));
    }

    let seed = cfg.experiment.seeds[0];
    let net = match checkpoint {
        Some(path) => MaskedNetwork::load_checkpoint(path)?,
        None => {
            let (h, w, c) = train.sample_shape();
            let mut net = build_cnn5((h, w, c), train.class_count, derive_seed(seed, 0))?;
            train_to_convergence(&mut net, &train, &val, &cfg.experiment.train, derive_seed(seed, 1))?;
            net
        }
    };
    let oracle = NetworkOracle::new(&net);
    let x = subset.image(index);
    let y = subset.labels[index];
    let record = match kind {
        AttackKind::Linf => {
            let eps = eps.ok_or_else(|| Error::Contract("--eps is required for linf".into()))?;
            let pgd = PgdConfig {
                eps,
                ..cfg.experiment.attacks.pgd.clone()
            };
            pgd_linf(&oracle, &x, y, &pgd, derive_seed(seed, index as u64))?
        }
        AttackKind::L2 => cw_l2(
            &oracle,
            &x,
            y,
            &cfg.experiment.attacks.cw,
            derive_seed(seed, index as u64),
        )?,
        AttackKind::L0 => {
            let start =
                sample_starting_point(&subset, y, derive_seed(seed, index as u64), &oracle)?;
            bb_l0(
                &oracle,
                &x,
                y,
                &start,
                &cfg.experiment.attacks.bb,
                derive_seed(seed, index as u64),
            )?
        }
    };
    println!(
        "image {} label {}: success={} l0={} l2={:.6} linf={:.6} iterations={}",
        index, y, record.success, record.l0, record.l2, record.linf, record.iterations
    );
    Ok(())
}
