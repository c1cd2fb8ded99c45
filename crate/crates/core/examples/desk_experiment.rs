//! Runs the full loop on the synthetic testbed and compares against the
//! originals-only baseline.
//!
//! ```bash
//! cargo run --release -p poolrefine-core --example desk_experiment -- 0 1 2
//! ```

use poolrefine::backend::classifier_from_config;
use poolrefine::eval::{evaluate, retrain_task_model, Dataset};
use poolrefine::orchestrator::run;
use poolrefine::rng::rng_from_seed;
use poolrefine::testbed::{build_synthetic_testbed, pool_spurious_pmi, SyntheticBiasSpec};
use poolrefine::RunConfig;

fn main() -> poolrefine::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    let spec = SyntheticBiasSpec::default();
    for seed in seeds {
        let tb = build_synthetic_testbed(&spec, &mut rng_from_seed(seed))?;
        let cfg = RunConfig {
            seed,
            ..RunConfig::desk()
        };
        let template = classifier_from_config(&cfg.classifier, &tb.task)?;
        let sets = [
            Dataset::new("dev", tb.unbiased_dev.clone()),
            Dataset::new("anti", tb.anti_biased_test.clone()),
        ];
        let base = retrain_task_model(template.as_ref(), &tb.train, &cfg, seed)?;
        let base_eval = evaluate(base.model.as_ref(), &sets)?;
        let base_pmi = pool_spurious_pmi(&tb.train, &spec)?;

        for (name, bias_indicator) in [("full", true), ("w/o indicator", false)] {
            let mut c = cfg.clone();
            c.ablations.bias_indicator.0 = bias_indicator;
            let out = run(c.clone(), tb.train.clone(), None)?;
            for r in &out.records {
                println!(
                    "  [{name}] it{} {}->{} drawn {} malformed {} below {} dup {} loss {:.0} {:?}",
                    r.iteration,
                    r.pool_size_before,
                    r.pool_size_after,
                    r.candidates_generated,
                    r.malformed,
                    r.rejected_by_threshold,
                    r.rejected_as_duplicate,
                    r.generator_loss,
                    r.chosen_indicators
                );
            }
            let pmi = pool_spurious_pmi(&out.pool, &spec)?;
            let task = retrain_task_model(template.as_ref(), &out.pool, &c, seed)?;
            let ev = evaluate(task.model.as_ref(), &sets)?;
            println!(
                "seed {seed} [{name}] pmi {:.3} -> {:.3} ({:.1}%) | anti {:.3} -> {:.3} | dev {:.3} -> {:.3}",
                base_pmi.pmi,
                pmi.pmi,
                100.0 * (1.0 - pmi.pmi / base_pmi.pmi),
                base_eval.accuracy["anti"],
                ev.accuracy["anti"],
                base_eval.accuracy["dev"],
                ev.accuracy["dev"],
            );
        }
    }
    Ok(())
}
