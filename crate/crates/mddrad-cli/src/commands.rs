//! Subcommand implementations. Every command is deterministic given its
//! flags and writes a `config-echo.json` into its output directory.

use std::path::{Path, PathBuf};

use mddrad_core::mdd::{bound_gap, estimate_mdd, ideal_combined_margin_loss};
use mddrad_core::model::save_checkpoint;
use mddrad_core::synthdata::{make_domain_pair, save_dataset};
use mddrad_core::train::{
    accuracy_matrix, evaluate, train_mdd, train_source_only, MatrixResult,
};
use mddrad_core::verify::run_suites;
use mddrad_core::{DomainPair, MddError, MddNetwork, Metrics, Result, Variant};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{
    data_root, resolve_pair, resolve_radar_config, RunConfigFile, DATASET_FILES,
};

fn write_echo<T: Serialize>(out: &Path, echo: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(echo)
        .map_err(|e| MddError::Format(format!("config echo: {e}")))?;
    std::fs::write(out.join("config-echo.json"), text + "\n")?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct GenerateEcho {
    command: &'static str,
    config_s: String,
    config_t: String,
    n_train: usize,
    n_test: usize,
    k: usize,
    seed: u64,
    height: usize,
    width: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_generate(
    config_s: &str,
    config_t: &str,
    n_train: usize,
    n_test: usize,
    k: usize,
    seed: u64,
    height: usize,
    width: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg_s = resolve_radar_config(config_s)?;
    let cfg_t = resolve_radar_config(config_t)?;
    let pair = make_domain_pair(&cfg_s, &cfg_t, n_train, n_test, k, seed, height, width)?;
    let out = out.unwrap_or_else(data_root);
    std::fs::create_dir_all(&out)?;

    let splits = [
        (&pair.s_train, DATASET_FILES[0]),
        (&pair.t_train, DATASET_FILES[1]),
        (&pair.s_test, DATASET_FILES[2]),
        (&pair.t_test, DATASET_FILES[3]),
    ];
    for (ds, name) in splits {
        let path = out.join(name);
        save_dataset(ds, &path)?;
        let bytes = std::fs::read(&path)?;
        println!("{}  {}", sha256_hex(&bytes), path.display());
    }
    write_echo(
        &out,
        &GenerateEcho {
            command: "generate",
            config_s: config_s.to_string(),
            config_t: config_t.to_string(),
            n_train,
            n_test,
            k,
            seed,
            height,
            width,
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    SourceOnly,
    Mdd,
}

impl TrainMode {
    fn as_str(self) -> &'static str {
        match self {
            TrainMode::SourceOnly => "source-only",
            TrainMode::Mdd => "mdd",
        }
    }
}

/// Final report for a training run: accuracies plus the generalization-
/// bound components (source margin error, discrepancy estimate, ideal
/// joint error). The gap is reported, never asserted: the discrepancy
/// estimator is a lower bound and the ideal-loss estimator an upper one.
#[derive(Serialize)]
struct Summary {
    mode: String,
    variant: Variant,
    rho: f64,
    gamma: f64,
    seed: u64,
    source_config: String,
    target_config: String,
    source_accuracy: f64,
    source_err01: f64,
    err_rho_source: f64,
    target_accuracy: f64,
    target_err01: f64,
    final_classification_loss: f64,
    final_transfer_loss: Option<f64>,
    estimate_mdd: f64,
    lambda_upper: f64,
    bound_rhs: f64,
    bound_gap: f64,
    bound_gap_sign: String,
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    command: &'static str,
    mode: &'static str,
    run_config: &'a RunConfigFile,
}

fn run_training(
    cfg: &RunConfigFile,
    mode: TrainMode,
    pair: &DomainPair,
) -> Result<(MddNetwork, Metrics)> {
    let model = cfg.model_config();
    match mode {
        TrainMode::SourceOnly => train_source_only(
            &pair.s_train,
            &model,
            &cfg.training,
            Some(&pair.s_test),
            Some(&pair.t_test),
        ),
        TrainMode::Mdd => train_mdd(
            &pair.s_train,
            &pair.t_train,
            &model,
            &cfg.training,
            Some(&pair.s_test),
            Some(&pair.t_test),
        ),
    }
}

pub fn cmd_train(run_config: &Path, mode: TrainMode, out: &Path) -> Result<()> {
    let cfg = RunConfigFile::load(run_config)?;
    let model = cfg.model_config();
    let pair = resolve_pair(&cfg, &model)?;
    std::fs::create_dir_all(out)?;

    let (net, metrics) = run_training(&cfg, mode, &pair)?;
    let rho = cfg.training.report_margin();
    let s_rep = evaluate(&net, &pair.s_test, rho)?;
    let t_rep = evaluate(&net, &pair.t_test, rho)?;

    let disc = estimate_mdd(
        &pair.s_test,
        &pair.t_test,
        &net,
        rho,
        cfg.estimate.adversary_steps,
        cfg.training.seed,
    )?;
    let lambda = ideal_combined_margin_loss(
        &pair.s_test,
        &pair.t_test,
        &model,
        rho,
        cfg.estimate.lambda_steps,
        cfg.training.seed,
    )?;
    let rhs = s_rep.err_rho + disc + lambda;
    let gap = bound_gap(t_rep.err01, s_rep.err_rho, disc, lambda);

    let last = metrics.rows.last();
    let summary = Summary {
        mode: mode.as_str().to_string(),
        variant: cfg.training.variant,
        rho: cfg.training.rho,
        gamma: cfg.training.gamma,
        seed: cfg.training.seed,
        source_config: pair.s_train.config.name.clone(),
        target_config: pair.t_train.config.name.clone(),
        source_accuracy: s_rep.accuracy,
        source_err01: s_rep.err01,
        err_rho_source: s_rep.err_rho,
        target_accuracy: t_rep.accuracy,
        target_err01: t_rep.err01,
        final_classification_loss: last.map(|r| r.classification_loss).unwrap_or(f64::NAN),
        final_transfer_loss: last.and_then(|r| r.transfer_loss),
        estimate_mdd: disc,
        lambda_upper: lambda,
        bound_rhs: rhs,
        bound_gap: gap,
        bound_gap_sign: if gap >= 0.0 { "nonnegative" } else { "negative" }.to_string(),
    };

    save_checkpoint(&net, &out.join("checkpoint.bin"))?;
    std::fs::write(out.join("metrics.csv"), metrics.to_csv())?;
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| MddError::Format(format!("summary: {e}")))?;
    std::fs::write(out.join("summary.json"), text + "\n")?;
    write_echo(
        out,
        &TrainEcho {
            command: "train",
            mode: mode.as_str(),
            run_config: &cfg,
        },
    )?;

    println!(
        "{}: source acc {:.4}, target acc {:.4}, err_rho_s {:.4}, mdd {:.4}, lambda {:.4}, bound gap {:+.4} ({})",
        mode.as_str(),
        s_rep.accuracy,
        t_rep.accuracy,
        s_rep.err_rho,
        disc,
        lambda,
        gap,
        summary.bound_gap_sign,
    );
    Ok(())
}

#[derive(Serialize)]
struct MatrixEcho<'a> {
    command: &'static str,
    configs: &'a [String],
    jobs: usize,
    run_config: &'a RunConfigFile,
}

/// Wide layout: rows are source configurations, columns targets, the
/// diagonal stays blank. `value` picks the reported cell.
fn matrix_csv(names: &[String], result: &MatrixResult, value: impl Fn(f64, f64) -> f64) -> String {
    let cell = |s: &str, t: &str| {
        result
            .cells
            .iter()
            .find(|c| c.source == s && c.target == t)
            .map(|c| format!("{:.4}", value(c.baseline_accuracy, c.mdd_accuracy)))
            .unwrap_or_default()
    };
    let mut out = String::from("source\\target");
    for t in names {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for s in names {
        out.push_str(s);
        for t in names {
            out.push(',');
            if s != t {
                out.push_str(&cell(s, t));
            }
        }
        out.push('\n');
    }
    out
}

pub fn cmd_matrix(configs: &str, run_config: &Path, out: &Path, jobs: usize) -> Result<()> {
    let names: Vec<String> = configs
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let specs = names
        .iter()
        .map(|n| resolve_radar_config(n))
        .collect::<Result<Vec<_>>>()?;
    let cfg = RunConfigFile::load(run_config)?;
    let model = cfg.model_config();
    std::fs::create_dir_all(out)?;

    let result = accuracy_matrix(
        &specs,
        &model,
        &cfg.training,
        cfg.data.n_train,
        cfg.data.n_test,
        jobs,
    )?;

    std::fs::write(
        out.join("matrix.csv"),
        matrix_csv(&names, &result, |_base, mdd| mdd),
    )?;
    std::fs::write(
        out.join("matrix_baseline.csv"),
        matrix_csv(&names, &result, |base, _mdd| base),
    )?;
    // long form with the per-cell source-only baseline next to the MDD cell
    let mut cells = String::from("source,target,baseline_accuracy,mdd_accuracy\n");
    for c in &result.cells {
        cells.push_str(&format!(
            "{},{},{:.4},{:.4}\n",
            c.source, c.target, c.baseline_accuracy, c.mdd_accuracy
        ));
    }
    std::fs::write(out.join("cells.csv"), &cells)?;
    write_echo(
        out,
        &MatrixEcho {
            command: "matrix",
            configs: &names,
            jobs,
            run_config: &cfg,
        },
    )?;
    print!("{}", matrix_csv(&names, &result, |_b, m| m));
    Ok(())
}

/// Runs the requested property suites; returns whether all passed.
pub fn cmd_verify(suite: &str, seed: u64, trials: usize) -> Result<bool> {
    let reports = run_suites(suite, seed, trials)?;
    let mut all_ok = true;
    for report in &reports {
        if report.passed() {
            println!("suite {}: {} trials, PASS", report.name, report.trials);
        } else {
            all_ok = false;
            println!(
                "suite {}: {} trials, FAIL ({} violations)",
                report.name,
                report.trials,
                report.failures.len()
            );
            for f in report.failures.iter().take(5) {
                println!("  counterexample: {f}");
            }
        }
    }
    Ok(all_ok)
}
