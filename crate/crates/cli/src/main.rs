//! `poolrefine` command-line front-end.
//!
//! Every subcommand that writes artifacts puts them under `--out`, which
//! must be new or empty. Errors print one line to stderr; the exit status
//! is 1 for runtime and validation errors and 2 for usage errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use poolrefine::backend::{classifier_from_config, load_classifier, save_classifier, ClassifierBackend, TrainingMetadata};
use poolrefine::config::load_config;
use poolrefine::eval::{evaluate, load_dataset, retrain_task_model, Dataset, DatasetMeta, EvalReport};
use poolrefine::filter::{dedup_candidates, filter_candidates, train_filter_model, write_rejection_log, RejectionReason, RejectionRecord};
use poolrefine::generator::{
    finetune_generator, generate_candidates, generator_from_config, save_generator, DrawSeeds, GenerationRequest,
};
use poolrefine::indicators::{assign_indicators, choose_indicator, BiasIndicator};
use poolrefine::orchestrator::{run, RunReport};
use poolrefine::pool::{load_snapshot, read_jsonl, snapshot_pool, write_jsonl};
use poolrefine::rng::{rng_from_seed, SeedTree};
use poolrefine::scorer::{score_pool, train_shallow};
use poolrefine::testbed::{build_synthetic_testbed, pool_spurious_pmi, SyntheticBiasSpec};
use poolrefine::{init_pool, Error, RunConfig, SamplePool, TaskDescriptor};

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "poolrefine", version, about = "Iterative bias-aware dataset refinement")]
struct Cli {
    /// YAML run configuration; omitted fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed, overriding the one in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PoolArgs {
    /// Snapshot directory, run directory, or JSONL file of original samples.
    #[arg(long, value_name = "PATH")]
    pool: PathBuf,

    /// Comma-separated label set, used when reading a JSONL file.
    #[arg(long, default_value = "entailment,neutral,contradiction")]
    labels: String,

    /// Segments per sample, used when reading a JSONL file.
    #[arg(long, default_value_t = 2)]
    arity: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest original samples as the iteration-0 pool snapshot.
    InitPool {
        /// JSONL file of original samples.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, default_value = "entailment,neutral,contradiction")]
        labels: String,
        #[arg(long, default_value_t = 2)]
        arity: usize,
    },
    /// Run the full refinement loop.
    Run(PoolArgs),
    /// Train a shallow model and write the scored, grouped pool.
    Score(PoolArgs),
    /// Finetune the generator on a grouped pool and draw one batch.
    Generate {
        #[command(flatten)]
        pool: PoolArgs,
        /// Number of draws.
        #[arg(long)]
        n: usize,
        /// Fixed indicator; by default chosen per batch as in a run.
        #[arg(long)]
        indicator: Option<usize>,
    },
    /// Filter and deduplicate candidates against a pool.
    Filter {
        #[command(flatten)]
        pool: PoolArgs,
        /// JSONL file of candidate samples.
        #[arg(long, value_name = "FILE")]
        candidates: PathBuf,
    },
    /// Train a task model on a pool.
    Retrain(PoolArgs),
    /// Report accuracies of a task model on one or more datasets.
    Evaluate {
        /// Directory written by `retrain`.
        #[arg(long, value_name = "DIR", conflicts_with = "pool", required_unless_present = "pool")]
        model: Option<PathBuf>,
        /// Train a task model on this pool first (snapshot dir, run dir or JSONL).
        #[arg(long, value_name = "PATH")]
        pool: Option<PathBuf>,
        #[arg(long, default_value = "entailment,neutral,contradiction")]
        labels: String,
        #[arg(long, default_value_t = 2)]
        arity: usize,
        /// NAME=FILE, repeatable.
        #[arg(long = "dataset", value_name = "NAME=FILE", required = true)]
        datasets: Vec<String>,
        /// NAME=FILE metadata (label set, arity, collapse map), repeatable.
        #[arg(long = "meta", value_name = "NAME=FILE")]
        metas: Vec<String>,
    },
    /// Write a synthetic dataset with one injected spurious token.
    Testbed {
        /// Share of token carriers tied to the designated label.
        #[arg(long, default_value_t = 0.95)]
        rho: f64,
        /// Training samples.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// JSON file with further testbed fields.
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
    },
    /// Print a human-readable summary of a run.
    Report {
        /// Run directory.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::InitPool { input, labels, arity } => {
            let pool = init_pool(read_jsonl(&input)?, task_from(&labels, arity)?)?;
            let dir = fresh_out(out)?;
            snapshot_pool(&pool, &dir.join("snapshots"))?;
            println!("pool of {} samples -> {}", pool.len(), dir.join("snapshots").display());
        }
        Command::Run(p) => {
            let pool = load_pool(&p.pool, &p.labels, p.arity)?;
            let dir = require_out(out)?;
            let result = run(config, pool, Some(dir))?;
            print!("{}", result.report.render());
        }
        Command::Score(p) => cmd_score(&config, &p, out)?,
        Command::Generate { pool, n, indicator } => cmd_generate(&config, &pool, n, indicator, out)?,
        Command::Filter { pool, candidates } => cmd_filter(&config, &pool, &candidates, out)?,
        Command::Retrain(p) => {
            let pool = load_pool(&p.pool, &p.labels, p.arity)?;
            let dir = fresh_out(out)?;
            let template = classifier_from_config(&config.classifier, pool.task())?;
            let tm = retrain_task_model(template.as_ref(), &pool, &config, config.seed)?;
            save_task_model(&dir.join("model"), tm.model.as_ref(), &config, &pool)?;
            write_json(&dir.join("training.json"), &tm.info)?;
            println!(
                "trained on {} samples: best epoch {} of {}",
                pool.len(),
                tm.info.best_epoch,
                tm.info.epochs_run
            );
        }
        Command::Evaluate {
            model,
            pool,
            labels,
            arity,
            datasets,
            metas,
        } => {
            let datasets = read_datasets(&datasets, &metas)?;
            let (model, training) = match (model, pool) {
                (Some(dir), _) => (load_classifier(&dir)?.0, None),
                (None, Some(p)) => {
                    let pool = load_pool(&p, &labels, arity)?;
                    let template = classifier_from_config(&config.classifier, pool.task())?;
                    let tm = retrain_task_model(template.as_ref(), &pool, &config, config.seed)?;
                    (tm.model, Some(tm.info))
                }
                (None, None) => unreachable!("clap requires one of --model / --pool"),
            };
            let report = EvalReport {
                training,
                ..evaluate(model.as_ref(), &datasets)?
            };
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = out {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                let path = dir.join("eval_report.json");
                if path.exists() {
                    return Err(format!("{}: refusing to overwrite an existing report", path.display()).into());
                }
                fs::write(&path, &text).map_err(|e| io_err(&path, e))?;
            }
            println!("{text}");
        }
        Command::Testbed { rho, n, spec } => {
            let mut s: SyntheticBiasSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p).map_err(|e| io_err(&p, e))?)
                    .map_err(|e| format!("{}: {e}", p.display()))?,
                None => SyntheticBiasSpec::default(),
            };
            s.rho = rho;
            s.sample_count = n;
            let tb = build_synthetic_testbed(&s, &mut rng_from_seed(config.seed))?;
            let dir = fresh_out(out)?;
            snapshot_pool(&tb.train, &dir.join("snapshots"))?;
            write_jsonl(&dir.join("train.jsonl"), tb.train.samples())?;
            write_jsonl(&dir.join("unbiased_dev.jsonl"), &tb.unbiased_dev)?;
            write_jsonl(&dir.join("anti_biased.jsonl"), &tb.anti_biased_test)?;
            write_json(&dir.join("testbed.json"), &s)?;
            let pmi = pool_spurious_pmi(&tb.train, &s)?;
            println!(
                "testbed: {} train / {} dev / {} anti-biased, pmi({}, {}) = {:.3}",
                tb.train.len(),
                tb.unbiased_dev.len(),
                tb.anti_biased_test.len(),
                s.spurious_token,
                s.designated_label_name()?,
                pmi.pmi
            );
        }
        Command::Report { run } => {
            let report = RunReport::load(&run.join(RunReport::FILE))?;
            print!("{}", report.render());
            let eval = run.join("eval_report.json");
            if eval.exists() {
                let r: EvalReport = serde_json::from_str(&fs::read_to_string(&eval).map_err(|e| io_err(&eval, e))?)?;
                for (name, acc) in &r.accuracy {
                    println!("{name}: {:.2}% of {}", acc * 100.0, r.counts[name]);
                }
            }
        }
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> String {
    format!("{}: {e}", path.display())
}

fn task_from(labels: &str, arity: usize) -> poolrefine::Result<TaskDescriptor> {
    let names: Vec<&str> = labels.split(',').map(str::trim).collect();
    TaskDescriptor::new(&names, arity)
}

/// A snapshot directory, a directory holding `snapshots/`, or a JSONL file
/// of originals.
fn load_pool(path: &Path, labels: &str, arity: usize) -> poolrefine::Result<SamplePool> {
    if path.is_dir() {
        let nested = path.join("snapshots");
        let dir = if nested.is_dir() { nested } else { path.to_path_buf() };
        load_snapshot(&dir, None)
    } else {
        init_pool(read_jsonl(path)?, task_from(labels, arity)?)
    }
}

fn require_out(out: Option<&Path>) -> CliResult<&Path> {
    out.ok_or_else(|| "this subcommand needs --out DIR".into())
}

/// Creates `--out`, refusing one that already has content.
fn fresh_out(out: Option<&Path>) -> CliResult<PathBuf> {
    let dir = require_out(out)?;
    if dir.exists() && fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some() {
        return Err(format!("{}: output directory is not empty", dir.display()).into());
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir.to_path_buf())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn save_task_model(dir: &Path, model: &dyn ClassifierBackend, config: &RunConfig, pool: &SamplePool) -> CliResult<()> {
    let meta = TrainingMetadata {
        backend: model.name().to_string(),
        seed: config.seed,
        labels: pool.task().label_names(),
        epochs: config.task_epochs,
        lr: config.task_lr,
        subset_ids: Vec::new(),
    };
    save_classifier(dir, model, &meta)?;
    Ok(())
}

fn split_named(arg: &str) -> CliResult<(String, PathBuf)> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=FILE, found `{arg}`").into()),
    }
}

fn read_datasets(datasets: &[String], metas: &[String]) -> CliResult<Vec<Dataset>> {
    let metas: BTreeMap<String, PathBuf> = metas.iter().map(|m| split_named(m)).collect::<CliResult<_>>()?;
    for name in metas.keys() {
        if !datasets.iter().any(|d| d.starts_with(&format!("{name}="))) {
            return Err(format!("--meta {name} has no matching --dataset").into());
        }
    }
    datasets
        .iter()
        .map(|d| {
            let (name, path) = split_named(d)?;
            let ds = load_dataset(&name, &path, metas.get(&name).map(PathBuf::as_path))?;
            if let Some(m) = &ds.meta {
                check_meta(&name, m)?;
            }
            Ok(ds)
        })
        .collect()
}

fn check_meta(name: &str, meta: &DatasetMeta) -> poolrefine::Result<()> {
    if meta.labels.is_empty() {
        return Err(Error::Dataset {
            name: name.to_string(),
            reason: "metadata declares no labels".into(),
        });
    }
    Ok(())
}

fn cmd_score(config: &RunConfig, p: &PoolArgs, out: Option<&Path>) -> CliResult<()> {
    let pool = load_pool(&p.pool, &p.labels, p.arity)?;
    let dir = fresh_out(out)?;
    let template = classifier_from_config(&config.classifier, pool.task())?;
    let seeds = SeedTree::new(config.seed);
    let shallow = train_shallow(
        template.as_ref(),
        &pool,
        config.shallow_train_count.min(pool.len()),
        config.shallow_epochs,
        config.shallow_lr,
        seeds.seed("shallow", &[0]),
    )?;
    let grouped = assign_indicators(&score_pool(shallow.model.as_ref(), &pool)?, config.n_bi)?;
    write_jsonl(&dir.join("scored.jsonl"), grouped.samples())?;
    let meta = TrainingMetadata {
        backend: shallow.model.name().to_string(),
        seed: shallow.seed,
        labels: pool.task().label_names(),
        epochs: config.shallow_epochs,
        lr: config.shallow_lr,
        subset_ids: shallow.subset_ids.clone(),
    };
    save_classifier(&dir.join("shallow"), shallow.model.as_ref(), &meta)?;
    println!("scored {} samples into {} groups", grouped.len(), config.n_bi);
    Ok(())
}

fn cmd_generate(
    config: &RunConfig,
    p: &PoolArgs,
    n: usize,
    indicator: Option<usize>,
    out: Option<&Path>,
) -> CliResult<()> {
    let pool = load_pool(&p.pool, &p.labels, p.arity)?;
    let with_indicator = config.ablations.bias_indicator.on();
    let fixed = indicator.map(|b| BiasIndicator::new(b, config.n_bi)).transpose()?;
    let dir = fresh_out(out)?;
    let seeds = SeedTree::new(config.seed);
    let mut generator = generator_from_config(&config.generator, pool.task(), config.n_bi)?;
    let loss = finetune_generator(
        generator.as_mut(),
        &pool,
        config.gen_epochs_first,
        config.gen_lr,
        seeds.seed("generator", &[0]),
        with_indicator,
    )?;

    let mut indicator_rng = seeds.stream("indicator", &[0]);
    let (mut candidates, mut malformed) = (Vec::new(), Vec::new());
    let mut drawn = 0;
    while drawn < n {
        let batch_n = config.generation_batch.min(n - drawn);
        let b = match (with_indicator, fixed) {
            (false, _) => None,
            (true, Some(b)) => Some(b),
            (true, None) => Some(choose_indicator(config.ablations.indicator, config.n_bi, &mut indicator_rng)),
        };
        let batch = generate_candidates(
            generator.as_ref(),
            &GenerationRequest {
                indicator: b,
                n: batch_n,
                task: pool.task(),
                max_len: config.generator.max_len,
                created_iteration: pool.iteration() + 1,
                seeds: DrawSeeds {
                    tree: seeds,
                    iteration: pool.iteration() + 1,
                    first_draw: drawn as u64,
                },
            },
        )?;
        candidates.extend(batch.candidates);
        malformed.extend(batch.malformed);
        drawn += batch_n;
    }
    write_jsonl(&dir.join("candidates.jsonl"), &candidates)?;
    write_json(&dir.join("malformed.json"), &malformed)?;
    save_generator(&dir.join("generator"), generator.as_ref(), &config.hash())?;
    println!(
        "drew {n}: {} well-formed, {} malformed (finetune loss {loss:.1})",
        candidates.len(),
        malformed.len()
    );
    Ok(())
}

fn cmd_filter(config: &RunConfig, p: &PoolArgs, candidates: &Path, out: Option<&Path>) -> CliResult<()> {
    let pool = load_pool(&p.pool, &p.labels, p.arity)?;
    let candidates = read_jsonl(candidates)?;
    for c in &candidates {
        c.validate(pool.task())?;
    }
    let dir = fresh_out(out)?;
    let template = classifier_from_config(&config.classifier, pool.task())?;
    let seeds = SeedTree::new(config.seed);
    let shallow = match config.filter_model {
        poolrefine::config::FilterModelChoice::ReuseShallow => Some(train_shallow(
            template.as_ref(),
            &pool,
            config.shallow_train_count.min(pool.len()),
            config.shallow_epochs,
            config.shallow_lr,
            seeds.seed("shallow", &[0]),
        )?),
        poolrefine::config::FilterModelChoice::Dedicated => None,
    };
    let model = train_filter_model(
        template.as_ref(),
        &pool,
        config,
        shallow.as_ref().map(|s| s.model.as_ref()),
        seeds.seed("filter", &[]),
    )?;
    let filtered = filter_candidates(model.as_ref(), candidates, config.filter_threshold)?;
    let (kept, dups) = dedup_candidates(filtered.kept, &pool, config.dedup);
    let record = |reason| {
        move |s: &poolrefine::Sample| RejectionRecord {
            candidate_id: s.id.clone(),
            confidence: s.filter_confidence,
            reason,
            detail: None,
        }
    };
    let mut rejections: Vec<RejectionRecord> = filtered
        .rejected
        .iter()
        .map(record(RejectionReason::BelowThreshold))
        .chain(dups.iter().map(record(RejectionReason::Duplicate)))
        .collect();
    rejections.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
    write_jsonl(&dir.join("kept.jsonl"), &kept)?;
    write_rejection_log(&dir.join("rejections.jsonl"), &rejections)?;
    println!(
        "kept {}, below threshold {}, duplicates {}",
        kept.len(),
        filtered.rejected.len(),
        dups.len()
    );
    Ok(())
}
