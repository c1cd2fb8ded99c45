//! The iterative refinement loop.
//!
//! Each iteration scores the pool with the shallow model, regroups it into
//! bias indicators, finetunes the generator on the regrouped pool, draws
//! candidates from low-bias indicators, filters and deduplicates them, and
//! appends the survivors. The shallow model is optionally retrained on the
//! extended pool afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{classifier_from_config, ClassifierBackend};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::filter::{
    dedup_candidates, filter_candidates, train_filter_model, write_rejection_log, RejectionReason, RejectionRecord,
};
use crate::generator::{
    finetune_generator, generate_candidates, generator_from_config, DrawSeeds, GenerationRequest, GeneratorBackend,
};
use crate::indicators::{assign_indicators, choose_indicator, low_indicator_bound};
use crate::pool::{snapshot_file_name, snapshot_pool, SamplePool};
use crate::rng::SeedTree;
use crate::scorer::{refresh_shallow, score_pool, train_shallow, ShallowModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based; pseudo samples added here carry this `created_iteration`.
    pub iteration: u32,
    pub pool_size_before: usize,
    pub pool_size_after: usize,
    pub candidates_generated: usize,
    pub malformed: usize,
    pub rejected_by_threshold: usize,
    pub rejected_as_duplicate: usize,
    /// Draws per generation indicator; empty when the indicator is ablated.
    pub chosen_indicators: BTreeMap<usize, usize>,
    pub generator_epochs: usize,
    pub generator_loss: f64,
    pub shallow_refreshed: bool,
}

impl IterationRecord {
    pub fn kept(&self) -> usize {
        self.pool_size_after - self.pool_size_before
    }

    /// `after = before + generated - malformed - below threshold - duplicates`.
    pub fn ledger_holds(&self) -> bool {
        let removed = self.malformed + self.rejected_by_threshold + self.rejected_as_duplicate;
        self.candidates_generated >= removed
            && self.pool_size_after == self.pool_size_before + self.candidates_generated - removed
    }
}

/// Everything the loop carries from one iteration to the next.
#[derive(Debug)]
pub struct RunState {
    pub pool: SamplePool,
    pub shallow: ShallowModel,
    pub generator: Box<dyn GeneratorBackend>,
    /// `None` when the filter reuses the current shallow model.
    pub filter: Option<Box<dyn ClassifierBackend>>,
    pub template: Box<dyn ClassifierBackend>,
    pub config: RunConfig,
    pub seeds: SeedTree,
}

impl RunState {
    /// Trains the initial shallow model and the filter model.
    pub fn initialize(
        config: RunConfig,
        pool: SamplePool,
        template: Box<dyn ClassifierBackend>,
        generator: Box<dyn GeneratorBackend>,
    ) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(config.seed);
        let shallow = train_shallow(
            template.as_ref(),
            &pool,
            config.shallow_train_count,
            config.shallow_epochs,
            config.shallow_lr,
            seeds.seed("shallow", &[0]),
        )?;
        let filter = match config.filter_model {
            crate::config::FilterModelChoice::Dedicated => Some(train_filter_model(
                template.as_ref(),
                &pool,
                &config,
                None,
                seeds.seed("filter", &[]),
            )?),
            crate::config::FilterModelChoice::ReuseShallow => None,
        };
        Ok(Self {
            pool,
            shallow,
            generator,
            filter,
            template,
            config,
            seeds,
        })
    }

    /// Builds backends from the registry names in `config`.
    pub fn from_config(config: RunConfig, pool: SamplePool) -> Result<Self> {
        let template = classifier_from_config(&config.classifier, pool.task())?;
        let generator = generator_from_config(&config.generator, pool.task(), config.n_bi)?;
        Self::initialize(config, pool, template, generator)
    }

    /// Iterations the loop will run and the candidate budget of each.
    pub fn schedule(&self) -> (usize, usize) {
        if self.config.ablations.iterative.on() {
            (self.config.n_iter, self.config.per_iter_generation)
        } else {
            (1, self.config.per_iter_generation * self.config.n_iter)
        }
    }
}

/// One pass of score, group, finetune, generate, filter, dedup, extend and
/// (optionally) refresh. On error the pool is left untouched.
pub fn run_iteration(state: &mut RunState, budget: usize) -> Result<(IterationRecord, Vec<RejectionRecord>)> {
    let cfg = &state.config;
    let t = state.pool.iteration();
    let next = t + 1;
    let with_indicator = cfg.ablations.bias_indicator.on();

    let scored = score_pool(state.shallow.model.as_ref(), &state.pool)?;
    let grouped = assign_indicators(&scored, cfg.n_bi)?;

    let epochs = cfg.gen_epochs_for(t);
    let loss = finetune_generator(
        state.generator.as_mut(),
        &grouped,
        epochs,
        cfg.gen_lr,
        state.seeds.seed("generator", &[t as u64]),
        with_indicator,
    )?;

    let mut indicator_rng = state.seeds.stream("indicator", &[t as u64]);
    let mut histogram = BTreeMap::new();
    let mut candidates = Vec::new();
    let mut malformed = Vec::new();
    let mut drawn = 0usize;
    while drawn < budget {
        let n = cfg.generation_batch.min(budget - drawn);
        let indicator = if with_indicator {
            let b = choose_indicator(cfg.ablations.indicator, cfg.n_bi, &mut indicator_rng);
            *histogram.entry(b.index()).or_insert(0) += n;
            Some(b)
        } else {
            None
        };
        let batch = generate_candidates(
            state.generator.as_ref(),
            &GenerationRequest {
                indicator,
                n,
                task: grouped.task(),
                max_len: cfg.generator.max_len,
                created_iteration: next,
                seeds: DrawSeeds {
                    tree: state.seeds,
                    iteration: next,
                    first_draw: drawn as u64,
                },
            },
        )?;
        candidates.extend(batch.candidates);
        malformed.extend(batch.malformed);
        drawn += n;
    }

    let filter_model: &dyn ClassifierBackend = match &state.filter {
        Some(f) => f.as_ref(),
        None => state.shallow.model.as_ref(),
    };
    let filtered = filter_candidates(filter_model, candidates, cfg.filter_threshold)?;
    let (accepted, duplicates) = dedup_candidates(filtered.kept, &grouped, cfg.dedup);

    let mut rejections: Vec<RejectionRecord> = malformed
        .iter()
        .map(|m| RejectionRecord {
            candidate_id: m.draw_id.clone(),
            confidence: None,
            reason: RejectionReason::Malformed,
            detail: Some(m.reason.as_str().to_string()),
        })
        .collect();
    let scored_reject = |reason| {
        move |s: &crate::pool::Sample| RejectionRecord {
            candidate_id: s.id.clone(),
            confidence: s.filter_confidence,
            reason,
            detail: None,
        }
    };
    rejections.extend(filtered.rejected.iter().map(scored_reject(RejectionReason::BelowThreshold)));
    rejections.extend(duplicates.iter().map(scored_reject(RejectionReason::Duplicate)));
    rejections.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));

    let mut extended = grouped;
    extended.extend_pseudo(accepted, next)?;

    let refresh = cfg.ablations.refresh.on();
    let new_shallow = if refresh {
        Some(refresh_shallow(
            state.template.as_ref(),
            &extended,
            cfg,
            state.seeds.seed("refresh", &[t as u64]),
        )?)
    } else {
        None
    };

    let record = IterationRecord {
        iteration: next,
        pool_size_before: state.pool.len(),
        pool_size_after: extended.len(),
        candidates_generated: drawn,
        malformed: malformed.len(),
        rejected_by_threshold: filtered.rejected.len(),
        rejected_as_duplicate: duplicates.len(),
        chosen_indicators: histogram,
        generator_epochs: epochs,
        generator_loss: loss,
        shallow_refreshed: refresh,
    };
    debug_assert!(record.ledger_holds());
    debug_assert!(record.chosen_indicators.keys().all(|&b| b <= low_indicator_bound(cfg.n_bi)));

    state.pool = extended;
    if let Some(s) = new_shallow {
        state.shallow = s;
    }
    Ok((record, rejections))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub config_hash: String,
    pub iterations: Vec<IterationRecord>,
    /// Paths relative to the run directory.
    pub snapshots: Vec<String>,
    pub rejection_logs: Vec<String>,
    pub final_pool: String,
    pub final_pool_size: usize,
    pub original_count: usize,
}

impl RunReport {
    pub const FILE: &'static str = "run_report.json";

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Plain-text summary, one line per iteration.
    pub fn render(&self) -> String {
        let mut out = format!(
            "config {} | seed {} | n_bi {} | epsilon {} | filter {:?}\n",
            self.config_hash,
            self.config.seed,
            self.config.n_bi,
            self.config.filter_threshold,
            self.config.filter_model
        );
        out.push_str("iter  before   after  drawn  malformed  below_eps  dup  gen_loss  indicators\n");
        for r in &self.iterations {
            let hist: Vec<String> = r.chosen_indicators.iter().map(|(b, n)| format!("b{b}:{n}")).collect();
            out.push_str(&format!(
                "{:>4} {:>7} {:>7} {:>6} {:>10} {:>10} {:>4} {:>9.1}  {}\n",
                r.iteration,
                r.pool_size_before,
                r.pool_size_after,
                r.candidates_generated,
                r.malformed,
                r.rejected_by_threshold,
                r.rejected_as_duplicate,
                r.generator_loss,
                hist.join(" ")
            ));
        }
        out.push_str(&format!(
            "final pool: {} samples ({} original) -> {}\n",
            self.final_pool_size, self.original_count, self.final_pool
        ));
        out
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub pool: SamplePool,
    pub records: Vec<IterationRecord>,
    pub report: RunReport,
}

const SNAPSHOT_DIR: &str = "snapshots";
const REJECTION_DIR: &str = "rejections";
pub const CONFIG_ECHO: &str = "config_echo.yaml";

fn ensure_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "run directory is not empty"),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Full run from an initialized state. With `out_dir`, writes the config
/// echo, a snapshot after every iteration, per-iteration rejection logs and
/// the run report; the directory must be new or empty.
pub fn run_with_state(mut state: RunState, out_dir: Option<&Path>) -> Result<RunOutput> {
    let original_count = state.pool.originals().count();
    let snapshot_dir: Option<PathBuf> = out_dir.map(|d| d.join(SNAPSHOT_DIR));
    if let Some(dir) = out_dir {
        ensure_fresh_dir(dir)?;
        let echo = dir.join(CONFIG_ECHO);
        fs::write(&echo, state.config.to_yaml()?).map_err(|e| Error::io(&echo, e))?;
        fs::create_dir_all(dir.join(REJECTION_DIR)).map_err(|e| Error::io(dir, e))?;
        snapshot_pool(&state.pool, snapshot_dir.as_deref().expect("set with out_dir"))?;
    }
    let mut snapshots = vec![format!("{SNAPSHOT_DIR}/{}", snapshot_file_name(state.pool.iteration()))];
    let mut rejection_logs = Vec::new();

    let (iterations, budget) = state.schedule();
    let mut records = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (record, rejections) = run_iteration(&mut state, budget)?;
        log::info!(
            "iteration {}: {} -> {} samples ({} drawn)",
            record.iteration,
            record.pool_size_before,
            record.pool_size_after,
            record.candidates_generated
        );
        let snap = format!("{SNAPSHOT_DIR}/{}", snapshot_file_name(state.pool.iteration()));
        let rej = format!("{REJECTION_DIR}/iter_{}.jsonl", record.iteration);
        if let Some(dir) = out_dir {
            snapshot_pool(&state.pool, snapshot_dir.as_deref().expect("set with out_dir"))?;
            write_rejection_log(&dir.join(&rej), &rejections)?;
        }
        snapshots.push(snap);
        rejection_logs.push(rej);
        records.push(record);
    }

    let report = RunReport {
        config_hash: state.config.hash(),
        config: state.config.clone(),
        iterations: records.clone(),
        final_pool: snapshots.last().cloned().expect("initial snapshot"),
        snapshots,
        rejection_logs,
        final_pool_size: state.pool.len(),
        original_count,
    };
    if let Some(dir) = out_dir {
        let path = dir.join(RunReport::FILE);
        fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(RunOutput {
        pool: state.pool,
        records,
        report,
    })
}

/// Builds backends from `config` and runs the whole loop.
pub fn run(config: RunConfig, originals: SamplePool, out_dir: Option<&Path>) -> Result<RunOutput> {
    let state = RunState::from_config(config, originals)?;
    run_with_state(state, out_dir)
}
