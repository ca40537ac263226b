//! One function per subcommand. Seeds run in parallel; each seed writes only
//! inside its own `seed-<s>` directory.

use std::path::{Path, PathBuf};

use featlab::harness::{
    check_learning_order, factor_verdict, random_recursion_specs, ratio_verdict, recursion_verdict, run_gap_experiment,
    verify_gap, Verdict,
};
use featlab::io::{encode_checkpoint, encode_dataset, encode_trace_csv, read_checkpoint, write_atomic, CheckpointFile};
use featlab::optim::{train, TrainOptions, TrainTrace};
use featlab::spectral::{dense_hessian, model_spectrum, LanczosOptions, SpectrumReport};
use featlab::synthgen::{generate, Dataset};
use featlab::useful::{run_useful, SeparatingMode};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{CheckName, ExperimentConfig, Format};
use crate::error::CliError;

/// Largest parameter count for which the dense Hessian oracle is assembled.
pub const DENSE_ORACLE_LIMIT: usize = 2048;
/// Relative agreement required between Lanczos and the dense oracle.
pub const DENSE_AGREEMENT: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    /// Human-readable remarks, e.g. the detected separating iteration.
    pub notes: Vec<String>,
    /// One entry per failed check.
    pub failures: Vec<String>,
}

impl Report {
    fn merge(parts: Vec<Report>) -> Report {
        let mut out = Report::default();
        for p in parts {
            out.files.extend(p.files);
            out.notes.extend(p.notes);
            out.failures.extend(p.failures);
        }
        out
    }
}

fn fan_out<F>(cfg: &ExperimentConfig, f: F) -> Result<Report, CliError>
where
    F: Fn(u64) -> Result<Report, CliError> + Sync,
{
    let dir = &cfg.outputs.dir;
    if !dir.is_dir() {
        return Err(CliError::Config(format!(
            "output directory {} does not exist; create it or pass --out",
            dir.display()
        )));
    }
    let results: Vec<Result<Report, CliError>> = cfg.seeds.par_iter().map(|&s| f(s)).collect();
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Report::merge(reports))
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf, CliError> {
    let dir = cfg.seed_dir(seed);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::runtime(format!("creating {}", dir.display()), featlab::Error::Io(e)))?;
    Ok(dir)
}

fn put(report: &mut Report, path: PathBuf, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(&path, bytes).map_err(|e| CliError::runtime(format!("writing {}", path.display()), e))?;
    report.files.push(path);
    Ok(())
}

fn put_json<T: Serialize>(report: &mut Report, path: PathBuf, value: &T) -> Result<(), CliError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| CliError::runtime("serializing JSON", featlab::Error::Json(e)))?;
    bytes.push(b'\n');
    put(report, path, &bytes)
}

fn put_trace(
    report: &mut Report,
    cfg: &ExperimentConfig,
    dir: &Path,
    stem: &str,
    trace: &TrainTrace,
) -> Result<(), CliError> {
    if cfg.wants(Format::Csv) {
        let csv = encode_trace_csv(&trace.rows).map_err(|e| CliError::runtime("encoding trace", e))?;
        put(report, dir.join(format!("{stem}.csv")), &csv)?;
    }
    if cfg.wants(Format::Json) {
        put_json(report, dir.join(format!("{stem}.json")), trace)?;
    }
    Ok(())
}

fn checkpoint(cfg: &ExperimentConfig, seed: u64, iteration: usize, weights: &featlab::model::WeightMatrix) -> Vec<u8> {
    encode_checkpoint(&CheckpointFile {
        weights: weights.clone(),
        sigma_0: cfg.sigma_0(),
        seed,
        iteration: iteration as u64,
    })
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    fan_out(cfg, |seed| {
        let dir = seed_dir(cfg, seed)?;
        let mut report = Report::default();
        let ds = cfg.train_set(seed)?;
        let bytes = encode_dataset(&ds).map_err(|e| CliError::runtime("encoding dataset", e))?;
        put(&mut report, dir.join("dataset-train.flds"), &bytes)?;
        if let Some(test) = cfg.test_set(seed)? {
            let bytes = encode_dataset(&test).map_err(|e| CliError::runtime("encoding dataset", e))?;
            put(&mut report, dir.join("dataset-test.flds"), &bytes)?;
        }
        Ok(report)
    })
}

fn train_options<'a>(cfg: &ExperimentConfig, test: Option<&'a Dataset>) -> TrainOptions<'a> {
    TrainOptions {
        test_set: test,
        test_every: cfg.outputs.test_every,
        checkpoint_every: cfg.outputs.checkpoint_every,
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    fan_out(cfg, |seed| {
        let dir = seed_dir(cfg, seed)?;
        let mut report = Report::default();
        let ds = cfg.train_set(seed)?;
        let test = cfg.test_set(seed)?;
        let w0 = cfg.initial_weights(seed, ds.basis())?;
        let trace = train(&w0, &ds, &cfg.optimizer, &train_options(cfg, test.as_ref()), &mut [])
            .map_err(|e| CliError::runtime(format!("seed {seed}: training"), e))?;
        put_trace(&mut report, cfg, &dir, "trace", &trace)?;
        put(
            &mut report,
            dir.join("weights-init.flwt"),
            &checkpoint(cfg, seed, 0, &w0),
        )?;
        put(
            &mut report,
            dir.join("weights-final.flwt"),
            &checkpoint(cfg, seed, cfg.optimizer.iterations, &trace.final_weights),
        )?;
        if cfg.outputs.checkpoint_every.is_some() {
            for ck in &trace.checkpoints {
                let name = format!("checkpoint-{:06}.flwt", ck.iteration);
                put(
                    &mut report,
                    dir.join(name),
                    &checkpoint(cfg, seed, ck.iteration, &ck.weights),
                )?;
            }
        }
        if !trace.skipped_perturbations.is_empty() {
            report.notes.push(format!(
                "seed {seed}: SAM perturbation skipped at {} iteration(s) with a vanishing gradient",
                trace.skipped_perturbations.len()
            ));
        }
        Ok(report)
    })
}

pub fn cmd_useful(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let useful = cfg
        .useful
        .as_ref()
        .ok_or_else(|| CliError::Config("the useful command needs a [useful] section".into()))?;
    fan_out(cfg, |seed| {
        let dir = seed_dir(cfg, seed)?;
        let mut report = Report::default();
        let ds = cfg.train_set(seed)?;
        let test = cfg.test_set(seed)?;
        let w0 = cfg.initial_weights(seed, ds.basis())?;
        let out = run_useful(&ds, &w0, &cfg.optimizer, useful, &train_options(cfg, test.as_ref()))
            .map_err(|e| CliError::runtime(format!("seed {seed}: upsampling pipeline"), e))?;
        let mode = match useful.separating {
            SeparatingMode::Auto { .. } => "auto",
            SeparatingMode::Fixed { .. } => "fixed",
        };
        report.notes.push(format!(
            "seed {seed}: separating iteration {} ({mode}), {} of {} examples upsampled x{}",
            out.separating_iteration(),
            out.plan.slow_indices.len(),
            ds.len(),
            out.plan.upsample_factor
        ));
        put_json(&mut report, dir.join("useful-plan.json"), &out.plan)?;
        put_trace(&mut report, cfg, &dir, "useful-baseline", &out.baseline)?;
        put_trace(&mut report, cfg, &dir, "useful-retrained", &out.retrained)?;
        Ok(report)
    })
}

fn record(report: &mut Report, dir: &Path, seed: u64, verdict: &Verdict) -> Result<(), CliError> {
    if !verdict.pass {
        report.failures.push(format!(
            "seed {seed}: check {} failed (worst slack {:e})",
            verdict.check, verdict.worst_slack
        ));
    }
    put_json(report, dir.join(format!("verdict-{}.json", verdict.check)), verdict)
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    if cfg.checks.is_empty() {
        return Err(CliError::Config(
            "no checks listed; valid names are gap, order, factor, ratio, recursion".into(),
        ));
    }
    let wants = |c: CheckName| cfg.checks.contains(&c);
    fan_out(cfg, |seed| {
        let dir = seed_dir(cfg, seed)?;
        let mut report = Report::default();
        let ctx = |what: &str| format!("seed {seed}: {what}");

        if wants(CheckName::Gap) || wants(CheckName::Order) {
            let ds = cfg.train_set(seed)?;
            let w0 = cfg.initial_weights(seed, ds.basis())?;
            let opts = TrainOptions {
                checkpoint_every: None,
                ..TrainOptions::default()
            };
            let o = &cfg.optimizer;
            let (runs, gap) = run_gap_experiment(&w0, &ds, o.eta, o.rho, o.iterations, cfg.verify.threshold, &opts)
                .map_err(|e| CliError::runtime(ctx("paired runs"), e))?;
            if wants(CheckName::Gap) {
                let v = verify_gap(&gap).map_err(|e| CliError::runtime(ctx("gap check"), e))?;
                record(&mut report, &dir, seed, &v)?;
                if cfg.wants(Format::Json) {
                    put_json(&mut report, dir.join("gap-trace.json"), &gap)?;
                }
            }
            if wants(CheckName::Order) {
                let r = check_learning_order(&runs, cfg.sigma_0(), cfg.dataset.beta_e, cfg.verify.slow_multiple)
                    .map_err(|e| CliError::runtime(ctx("order check"), e))?;
                record(&mut report, &dir, seed, &r.verdict())?;
            }
        }

        if wants(CheckName::Factor) || wants(CheckName::Ratio) {
            let mut spec = cfg.distribution(cfg.dataset.n_train.min(cfg.verify.factor_examples), seed);
            spec.sigma_p = 0.0;
            let clean = generate(&spec, &cfg.basis()?).map_err(|e| CliError::runtime(ctx("zero-noise data"), e))?;
            let v = &cfg.verify;
            if wants(CheckName::Factor) {
                let (verdict, _) = factor_verdict(&clean, v.factor_filters, v.factor_instances, seed)
                    .map_err(|e| CliError::runtime(ctx("factor check"), e))?;
                record(&mut report, &dir, seed, &verdict)?;
            }
            if wants(CheckName::Ratio) {
                let verdict = ratio_verdict(&clean, v.factor_filters, v.factor_instances, seed)
                    .map_err(|e| CliError::runtime(ctx("ratio check"), e))?;
                record(&mut report, &dir, seed, &verdict)?;
            }
        }

        if wants(CheckName::Recursion) {
            let specs = random_recursion_specs(seed, cfg.verify.recursion_instances);
            let v = recursion_verdict(&specs).map_err(|e| CliError::runtime(ctx("recursion check"), e))?;
            record(&mut report, &dir, seed, &v)?;
        }
        Ok(report)
    })
}

#[derive(Debug, Serialize)]
pub struct DenseAgreement {
    pub parameter_count: usize,
    pub dense_top_k: Vec<f64>,
    pub lanczos_top_k: Vec<f64>,
    pub max_relative_error: f64,
    pub agrees: bool,
}

/// Top `k` eigenvalues (descending) of a dense symmetric matrix.
pub fn dense_top_k(h: &[f64], n: usize, k: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n, n, h);
    let sym = (&m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev.truncate(k);
    ev
}

pub fn relative_error(approx: &[f64], exact: &[f64]) -> f64 {
    let scale = exact.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    approx
        .iter()
        .zip(exact)
        .map(|(a, e)| (a - e).abs() / e.abs().max(1e-12 * scale))
        .fold(0.0, f64::max)
}

pub fn cmd_spectrum(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let sp = &cfg.spectrum;
    fan_out(cfg, |seed| {
        let dir = seed_dir(cfg, seed)?;
        let mut report = Report::default();
        let path = sp.checkpoint.clone().unwrap_or_else(|| dir.join("weights-final.flwt"));
        let ck = read_checkpoint(&path).map_err(|e| {
            CliError::runtime(
                format!(
                    "seed {seed}: loading checkpoint {} (run `featlab train` first or set spectrum.checkpoint)",
                    path.display()
                ),
                e,
            )
        })?;
        let ds = cfg.train_set(seed)?;
        if ck.weights.dim() != ds.dim() {
            return Err(CliError::Config(format!(
                "checkpoint {} has dimension {}, config has d = {}",
                path.display(),
                ck.weights.dim(),
                ds.dim()
            )));
        }
        let opts = LanczosOptions::new(sp.k, sp.steps, sp.lanczos_seed.unwrap_or(seed));
        let spectrum: SpectrumReport = model_spectrum(&ck.weights, &ds, &opts, sp.subsample)
            .map_err(|e| CliError::runtime(format!("seed {seed}: Lanczos"), e))?;
        put_json(&mut report, dir.join("spectrum.json"), &spectrum)?;

        if sp.dense_oracle {
            let n = ck.weights.as_slice().len();
            if n > DENSE_ORACLE_LIMIT {
                return Err(CliError::Config(format!(
                    "dense oracle needs at most {DENSE_ORACLE_LIMIT} parameters, model has {n}"
                )));
            }
            let h = dense_hessian(&ck.weights, &ds, sp.subsample)
                .map_err(|e| CliError::runtime(format!("seed {seed}: dense Hessian"), e))?;
            let dense = dense_top_k(&h, n, sp.k);
            let err = relative_error(&spectrum.eigenvalues, &dense);
            let agreement = DenseAgreement {
                parameter_count: n,
                lanczos_top_k: spectrum.eigenvalues.clone(),
                dense_top_k: dense,
                max_relative_error: err,
                agrees: err <= DENSE_AGREEMENT,
            };
            if !agreement.agrees {
                report
                    .notes
                    .push(format!("seed {seed}: Lanczos and dense oracle differ by {err:e}"));
            }
            put_json(&mut report, dir.join("spectrum-dense.json"), &agreement)?;
        }
        Ok(report)
    })
}
