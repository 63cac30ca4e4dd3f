//! LLM prompting pipeline: stratified dev subsets, a balanced few-shot pool,
//! example selection, prompt rendering, clients and the evaluation runner.

mod client;
mod runner;
mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

pub use client::{HttpClient, LlmClient, LlmRequest, MockClient};
pub use runner::{run_prompt_eval, AuditRecord, PromptEvalResult, RunOptions};
pub use template::{parse_response, render_prompt, PromptTemplate};

use crate::error::{Error, Result};
use crate::relsdata::{Framework, OrderingStrategy, RelationInstance, UnifiedLabel, NUM_LABELS};
use crate::tensor::{seeded_rng, sub_seed};

/// `k` label-stratified folds partitioning a dev set, as instance indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedFolds {
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Deals each label's shuffled instances round-robin over the folds,
/// continuing the rotation across labels so fold sizes stay level.
pub fn stratified_subsets(dev: &[RelationInstance], k: usize, seed: u64) -> Result<StratifiedFolds> {
    if k == 0 || k > dev.len() {
        return Err(Error::Config(format!("cannot split {} instances into {k} folds", dev.len())));
    }
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); NUM_LABELS];
    for (i, inst) in dev.iter().enumerate() {
        by_label[inst.label.index()].push(i);
    }
    let mut rng = seeded_rng(sub_seed(seed, "stratify"));
    let mut folds = vec![Vec::with_capacity(dev.len() / k + 1); k];
    let mut next = 0;
    for mut members in by_label {
        members.shuffle(&mut rng);
        for i in members {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(StratifiedFolds { folds, seed })
}

impl StratifiedFolds {
    /// `n` distinct fold indices drawn with the folds' seed, ascending.
    pub fn select(&self, n: usize) -> Result<Vec<usize>> {
        if n > self.folds.len() {
            return Err(Error::Config(format!("cannot pick {n} of {} folds", self.folds.len())));
        }
        let mut rng = seeded_rng(sub_seed(self.seed, "fold-select"));
        let mut picked = index::sample(&mut rng, self.folds.len(), n).into_vec();
        picked.sort_unstable();
        Ok(picked)
    }

    /// Instances of the chosen folds, in dev order.
    pub fn subset(&self, dev: &[RelationInstance], folds: &[usize]) -> Vec<RelationInstance> {
        let mut idx: Vec<usize> = folds.iter().flat_map(|&f| self.folds[f].iter().copied()).collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| dev[i].clone()).collect()
    }
}

pub type Combo = (Framework, String, UnifiedLabel);

/// Few-shot candidates keyed by (framework, language, label).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExamplePool {
    pub per_combo: usize,
    pub entries: BTreeMap<String, Vec<RelationInstance>>,
    /// Combinations that had fewer than `per_combo` instances.
    pub shortfalls: Vec<(String, usize)>,
}

fn combo_key(fw: Framework, lang: &str, label: UnifiedLabel) -> String {
    format!("{}|{lang}|{label}", fw.name())
}

/// Up to `per_combo` seeded picks for every observed combination in the
/// training split. Masked instances are skipped.
pub fn build_pool(train: &[RelationInstance], per_combo: usize, seed: u64) -> ExamplePool {
    let mut groups: BTreeMap<String, Vec<&RelationInstance>> = BTreeMap::new();
    for inst in train.iter().filter(|i| !i.masked) {
        groups
            .entry(combo_key(inst.framework, &inst.language, inst.label))
            .or_default()
            .push(inst);
    }
    let mut rng = seeded_rng(sub_seed(seed, "pool"));
    let mut pool = ExamplePool {
        per_combo,
        ..ExamplePool::default()
    };
    for (key, members) in groups {
        if members.len() < per_combo {
            log::warn!("pool combination {key} has only {} instances", members.len());
            pool.shortfalls.push((key.clone(), members.len()));
        }
        let picked: Vec<RelationInstance> = members
            .choose_multiple(&mut rng, per_combo.min(members.len()))
            .map(|i| (*i).clone())
            .collect();
        pool.entries.insert(key, picked);
    }
    pool
}

impl ExamplePool {
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn combos(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RelationInstance> {
        self.entries.values().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptMode {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Experiment {
    /// Examples in the query's language.
    Exp1SameLanguage,
    /// English examples.
    Exp2English,
    /// One English example per weak label plus random English ones.
    Exp3WeakLabels,
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "exp1" | "same-language" => Ok(Self::Exp1SameLanguage),
            "2" | "exp2" | "english" => Ok(Self::Exp2English),
            "3" | "exp3" | "weak-labels" => Ok(Self::Exp3WeakLabels),
            _ => Err(Error::Config(format!("unknown experiment {s:?}"))),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Exp1SameLanguage => "exp1",
            Experiment::Exp2English => "exp2",
            Experiment::Exp3WeakLabels => "exp3",
        })
    }
}

/// What to do when the query's language has too few pool entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPolicy {
    /// Top up with English entries.
    English,
    /// Fail the selection.
    Strict,
}

impl fmt::Display for FallbackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FallbackPolicy::English => "english",
            FallbackPolicy::Strict => "strict",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub ordering: OrderingStrategy,
    pub experiment: Option<Experiment>,
    pub n_examples: usize,
    pub fallback: FallbackPolicy,
}

pub const ENGLISH: &str = "eng";
pub const WEAK_LABEL_COUNT: usize = 6;

impl PromptSpec {
    pub fn zero_shot(ordering: OrderingStrategy) -> Self {
        Self {
            mode: PromptMode::ZeroShot,
            ordering,
            experiment: None,
            n_examples: 0,
            fallback: FallbackPolicy::English,
        }
    }

    pub fn few_shot(experiment: Experiment, ordering: OrderingStrategy) -> Self {
        Self {
            mode: PromptMode::FewShot,
            ordering,
            experiment: Some(experiment),
            n_examples: match experiment {
                Experiment::Exp3WeakLabels => 8,
                _ => 4,
            },
            fallback: FallbackPolicy::English,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PromptMode::ZeroShot if self.n_examples != 0 || self.experiment.is_some() => {
                Err(Error::Config("zero-shot prompts take no examples".into()))
            }
            PromptMode::FewShot if self.experiment.is_none() || self.n_examples == 0 => {
                Err(Error::Config("few-shot prompts need an experiment and examples".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self.experiment {
            None => "zero-shot".into(),
            Some(e) => format!("few-shot-{e}"),
        }
    }
}

/// Picks few-shot examples for `instance`. Draws depend only on `seed` and
/// the instance id, so concurrent runs select identically.
pub fn select_examples(
    pool: &ExamplePool,
    instance: &RelationInstance,
    spec: &PromptSpec,
    weak_labels: Option<&[UnifiedLabel]>,
    seed: u64,
) -> Result<Vec<RelationInstance>> {
    spec.validate()?;
    let Some(experiment) = spec.experiment else {
        return Ok(Vec::new());
    };
    let mut rng = seeded_rng(sub_seed(seed, &instance.id));
    let eligible = |lang: Option<&str>| -> Vec<&RelationInstance> {
        pool.iter()
            .filter(|e| e.id != instance.id && lang.map_or(true, |l| e.language == l))
            .collect()
    };
    let n = spec.n_examples;
    let picked: Vec<&RelationInstance> = match experiment {
        Experiment::Exp1SameLanguage => {
            let same = eligible(Some(&instance.language));
            if same.len() >= n {
                same.choose_multiple(&mut rng, n).copied().collect()
            } else if spec.fallback == FallbackPolicy::English && instance.language != ENGLISH {
                let mut out: Vec<&RelationInstance> = same.clone();
                let english = eligible(Some(ENGLISH));
                out.extend(english.choose_multiple(&mut rng, n - same.len()).copied());
                if out.len() < n {
                    return Err(shortage(&instance.language, out.len(), n, spec.fallback));
                }
                out
            } else {
                return Err(shortage(&instance.language, same.len(), n, spec.fallback));
            }
        }
        Experiment::Exp2English => {
            let english = eligible(Some(ENGLISH));
            if english.len() < n {
                return Err(shortage(ENGLISH, english.len(), n, spec.fallback));
            }
            english.choose_multiple(&mut rng, n).copied().collect()
        }
        Experiment::Exp3WeakLabels => {
            let weak = weak_labels.ok_or_else(|| Error::Selection("experiment 3 needs the weak label list".into()))?;
            let distinct: BTreeSet<&UnifiedLabel> = weak.iter().collect();
            if weak.len() != WEAK_LABEL_COUNT || distinct.len() != WEAK_LABEL_COUNT {
                return Err(Error::Selection(format!(
                    "experiment 3 needs {WEAK_LABEL_COUNT} distinct weak labels, got {weak:?}"
                )));
            }
            let english = eligible(Some(ENGLISH));
            let mut out: Vec<&RelationInstance> = Vec::with_capacity(n);
            for label in weak {
                let of_label: Vec<&RelationInstance> = english.iter().copied().filter(|e| e.label == *label).collect();
                let pick = of_label.choose(&mut rng).ok_or_else(|| {
                    Error::Selection(format!("no English pool entry labelled {label} (fallback policy: {})", spec.fallback))
                })?;
                out.push(pick);
            }
            let rest: Vec<&RelationInstance> = english
                .iter()
                .copied()
                .filter(|e| !out.iter().any(|o| o.id == e.id))
                .collect();
            let extra = n.saturating_sub(out.len());
            if rest.len() < extra {
                return Err(shortage(ENGLISH, out.len() + rest.len(), n, spec.fallback));
            }
            out.extend(rest.choose_multiple(&mut rng, extra).copied());
            out
        }
    };
    Ok(picked.into_iter().cloned().collect())
}

fn shortage(lang: &str, have: usize, need: usize, policy: FallbackPolicy) -> Error {
    Error::Selection(format!(
        "only {have} pool candidates for language {lang}, {need} needed (fallback policy: {policy})"
    ))
}
