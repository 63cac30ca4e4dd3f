//! The prompting pipeline against offline mock clients: stratified fold
//! selection, the example pool, the four prompt settings and the grouped
//! report. Swap in `HttpClient::from_env` to query a real endpoint.

use hidac::prompting::{
    build_pool, render_prompt, run_prompt_eval, select_examples, stratified_subsets, Experiment, MockClient,
    PromptSpec, PromptTemplate, RunOptions,
};
use hidac::relsdata::{OrderingStrategy, UnifiedLabel};
use hidac::synthetic::{dev_like_set, pool_training_set};

fn main() -> hidac::error::Result<()> {
    let dev = dev_like_set(1000, 42);
    let folds = stratified_subsets(&dev, 27, 42)?;
    let chosen = folds.select(4)?;
    let subset = folds.subset(&dev, &chosen);
    println!("folds {chosen:?}: {} instances", subset.len());

    let pool = build_pool(&pool_training_set(327, 3, 1), 3, 42);
    println!("pool: {} examples over {} combinations", pool.len(), pool.combos());

    let opts = RunOptions::default();
    let mut weak = Vec::new();
    let specs = [
        PromptSpec::zero_shot(OrderingStrategy::Natural),
        PromptSpec::few_shot(Experiment::Exp1SameLanguage, OrderingStrategy::Natural),
        PromptSpec::few_shot(Experiment::Exp2English, OrderingStrategy::RelationDirected),
        PromptSpec::few_shot(Experiment::Exp3WeakLabels, OrderingStrategy::Natural),
    ];
    for spec in &specs {
        // Experiment 3 draws on the six labels the earlier runs scored worst.
        let opts = RunOptions {
            weak_labels: Some(weak.clone()),
            ..opts.clone()
        };
        let gold = run_prompt_eval(&MockClient::gold(&subset), &subset, spec, Some(&pool), &opts)?;
        let fixed = run_prompt_eval(&MockClient::Fixed(UnifiedLabel::Elaboration), &subset, spec, Some(&pool), &opts)?;
        println!(
            "{:<16} gold-echo {:.3}  always-elaboration {:.3}  macro-F1 {:.3}",
            spec.name(),
            gold.report.overall_accuracy,
            fixed.report.overall_accuracy,
            fixed.report.overall_macro_f1
        );
        if spec.experiment == Some(Experiment::Exp2English) {
            weak = fixed.report.lowest_f1_labels(6);
            println!("weak labels: {weak:?}");
        }
    }

    let spec = &specs[3];
    let examples = select_examples(&pool, &subset[0], spec, Some(weak.as_slice()), 42)?;
    println!("\n{}", render_prompt(&PromptTemplate::default(), &subset[0], &examples, spec.ordering));
    Ok(())
}
