//! Command-line front end: train, eval, ablation, export and selftest.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;

use crate::dataio::load_manifest;
use crate::par::{map_range, with_capped_pool, Exec};
use crate::selftest::{run_suite, SuiteOptions};
use crate::trainer::{
    evaluate, load_data, DatasetSpec, EvalOutcome, EvalReport, Method, TrainConfig, Trainer,
    CHECKPOINT_FILE, RELATION_FILE,
};
use crate::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Train,
    Eval,
    Ablation,
    Export,
    Selftest,
}

#[derive(Debug, Parser)]
#[command(name = "crckd", version, about = "Mean-teacher distillation with CCD and CRP losses")]
pub struct Args {
    /// What to run (may also be given with --mode).
    #[arg(value_enum)]
    pub command: Option<Mode>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Method, or comma-separated methods in ablation mode:
    /// b1, b2, b2_ccd, b2_crp, full.
    #[arg(long)]
    pub method: Option<String>,
    /// Number of seeds for ablation runs, counting up from the config seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// Stratified folds for ablation runs; every fold is trained and scored.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint to resume from (train) or to evaluate (eval, export).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Manifest CSV: training data for train, evaluation data for eval/export.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Override the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Random instances per gradient check in selftest.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::parse(&text, p.parent())
        }
        None => Ok(TrainConfig::default()),
    }
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',').map(str::parse).collect()
}

fn apply_overrides(mut cfg: TrainConfig, args: &Args) -> Result<TrainConfig> {
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        cfg.ramp_t = cfg.ramp_t.min(e);
    }
    if let (Some(data), DatasetSpec::Manifest { train, .. }) = (&args.data, &mut cfg.dataset) {
        *train = data.clone();
    } else if args.data.is_some() {
        return Err(Error::Config(
            "--data for training needs `dataset = manifest` and `features` in the config".into(),
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &EvalReport) {
    println!(
        "n={} ACC={:.4} AP={:.4} BMA={:.4} F1={:.4} R_d={:.4}",
        r.n, r.acc, r.ap, r.bma, r.f1, r.r_d
    );
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}

fn train(args: &Args) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => Some(read_config(Some(p))?),
        None => None,
    };
    let mut trainer = match &args.checkpoint {
        Some(ck) => {
            let cfg = cfg.map(|c| apply_overrides(c, args)).transpose()?;
            Trainer::resume(ck, cfg)?
        }
        None => {
            let mut cfg = apply_overrides(cfg.unwrap_or_default(), args)?;
            if let Some(m) = &args.method {
                cfg.method = m.parse()?;
            }
            Trainer::new(cfg)?
        }
    };
    let out = trainer.fit(Some(&args.out), None)?;
    println!(
        "trained {} ({} epochs, {} steps) -> {}",
        trainer.state.cfg.method,
        trainer.state.epoch,
        trainer.state.step,
        args.out.join(CHECKPOINT_FILE).display()
    );
    if let Some(ev) = &out.final_eval {
        print_report(&ev.report);
    }
    Ok(())
}

/// Evaluates the checkpoint's student on `--data` or on its configured split.
fn eval_checkpoint(args: &Args) -> Result<EvalOutcome> {
    let path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let trainer = Trainer::resume(path, None)?;
    let cfg = &trainer.state.cfg;
    let data = match &args.data {
        Some(manifest) => load_manifest(manifest, cfg.feature_kind(), cfg.classes)?,
        None => match load_data(cfg)?.1 {
            Some(e) => e,
            None => return Err(Error::Config("no evaluation data: pass --data".into())),
        },
    };
    evaluate(&trainer.state.model.student, &data, Exec::available())
}

fn write_relation(dir: &Path, ev: &EvalOutcome) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RELATION_FILE);
    fs::write(&path, ev.relation.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Per-run result of an ablation sweep.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub method: String,
    pub seed: u64,
    pub fold: Option<usize>,
    pub report: EvalReport,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `method,ACC,AP,BMA,F1,R_d`, each cell `mean±sd` over runs. The four
/// classification metrics are in percent.
pub fn summary_csv(methods: &[Method], runs: &[AblationRun]) -> String {
    let mut out = String::from("method,ACC,AP,BMA,F1,R_d\n");
    for m in methods {
        let rows: Vec<&EvalReport> = runs
            .iter()
            .filter(|r| r.method == m.key())
            .map(|r| &r.report)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let cell = |f: &dyn Fn(&EvalReport) -> f64, scale: f64, prec: usize| {
            let v: Vec<f64> = rows.iter().map(|r| f(r) * scale).collect();
            let (mean, sd) = mean_sd(&v);
            format!("{mean:.prec$}±{sd:.prec$}")
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.label(),
            cell(&|r| r.acc, 100.0, 2),
            cell(&|r| r.ap, 100.0, 2),
            cell(&|r| r.bma, 100.0, 2),
            cell(&|r| r.f1, 100.0, 2),
            cell(&|r| r.r_d, 1.0, 3),
        ));
    }
    out
}

/// Trains every `(method, seed, fold)` combination, writing each run's
/// outputs under `out/<method>/seed<s>[-fold<f>]`.
pub fn run_ablation(
    base: &TrainConfig,
    methods: &[Method],
    seeds: usize,
    folds: Option<usize>,
    out: Option<&Path>,
) -> Result<Vec<AblationRun>> {
    let fold_list: Vec<Option<usize>> = match folds {
        Some(f) if f > 1 => (0..f).map(Some).collect(),
        _ => vec![None],
    };
    let mut jobs = Vec::new();
    for &m in methods {
        for s in 0..seeds as u64 {
            for &fold in &fold_list {
                let mut cfg = base.clone();
                cfg.method = m;
                cfg.seed = base.seed + s;
                if let Some(f) = fold {
                    cfg.folds = folds.unwrap_or(0);
                    cfg.fold = f;
                }
                jobs.push((cfg, fold));
            }
        }
    }
    let results = with_capped_pool(|| {
        map_range(jobs.len(), Exec::available(), |j| -> Result<AblationRun> {
            let (cfg, fold) = &jobs[j];
            let dir = out.map(|o| {
                let leaf = match fold {
                    Some(f) => format!("seed{}-fold{f}", cfg.seed),
                    None => format!("seed{}", cfg.seed),
                };
                o.join(cfg.method.key()).join(leaf)
            });
            let mut trainer = Trainer::new(cfg.clone())?;
            let fit = trainer.fit(dir.as_deref(), None)?;
            let ev = fit
                .final_eval
                .ok_or_else(|| Error::Config("ablation runs need an evaluation split".into()))?;
            let run = AblationRun {
                method: cfg.method.key().to_string(),
                seed: cfg.seed,
                fold: *fold,
                report: ev.report,
            };
            if let Some(d) = &dir {
                let path = d.join("result.json");
                let json = serde_json::to_string_pretty(&run).expect("results serialize");
                fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            }
            Ok(run)
        })
    });
    results.into_iter().collect()
}

fn ablation(args: &Args) -> Result<()> {
    let cfg = apply_overrides(read_config(args.config.as_deref())?, args)?;
    let methods = match &args.method {
        Some(m) => parse_methods(m)?,
        None => Method::ALL.to_vec(),
    };
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let runs = run_ablation(&cfg, &methods, args.seeds, args.folds, Some(&args.out))?;
    let table = summary_csv(&methods, &runs);
    let path = args.out.join(SUMMARY_FILE);
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    Ok(())
}

fn selftest(args: &Args) -> bool {
    let opts = SuiteOptions {
        instances: args.instances,
        inject_fault: args.inject_fault.clone(),
        ..SuiteOptions::default()
    };
    let outcomes = run_suite(&opts);
    let mut ok = true;
    for o in &outcomes {
        println!("{} {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        ok &= o.passed;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    ok
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mode = match (args.command, args.mode) {
        (Some(a), Some(b)) if a != b => {
            eprintln!("error: mode given twice ({a:?} and {b:?})");
            return 2;
        }
        (Some(m), _) | (None, Some(m)) => m,
        (None, None) => {
            eprintln!("error: no mode given; use one of train, eval, ablation, export, selftest");
            return 2;
        }
    };
    let result = match mode {
        Mode::Selftest => return if selftest(&args) { 0 } else { 1 },
        Mode::Train => train(&args),
        Mode::Eval => eval_checkpoint(&args).map(|ev| print_report(&ev.report)),
        Mode::Export => eval_checkpoint(&args).and_then(|ev| {
            let path = write_relation(&args.out, &ev)?;
            println!("wrote {}", path.display());
            Ok(())
        }),
        Mode::Ablation => ablation(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(bma: f64) -> EvalReport {
        EvalReport {
            n: 10,
            acc: 0.5,
            ap: 0.5,
            bma,
            f1: 0.5,
            r_d: 2.0,
            r_d_intra: 0.5,
            r_d_inter: 0.25,
            warnings: vec![],
        }
    }

    #[test]
    fn summary_has_mean_and_sd() {
        let runs = vec![
            AblationRun {
                method: "b1".into(),
                seed: 0,
                fold: None,
                report: report(0.5),
            },
            AblationRun {
                method: "b1".into(),
                seed: 1,
                fold: None,
                report: report(0.7),
            },
        ];
        let csv = summary_csv(&[Method::B1, Method::Full], &runs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,ACC,AP,BMA,F1,R_d");
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("B1,50.00±0.00,50.00±0.00,60.00±14.14,"), "{}", lines[1]);
    }

    #[test]
    fn mode_is_required() {
        assert_eq!(run(["crckd"]), 2);
        assert_eq!(run(["crckd", "train", "--mode", "eval"]), 2);
    }

    #[test]
    fn method_lists_parse() {
        assert_eq!(parse_methods("b1,full").unwrap(), vec![Method::B1, Method::Full]);
        assert!(parse_methods("b1,nope").is_err());
    }
}
