//! Seeded synthetic corpora for tests, examples and toy runs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::relsdata::{Direction, Framework, RelationInstance, UnifiedLabel, DEV_PERCENT, NUM_LABELS};
use crate::tensor::seeded_rng;

const FILLER: &[&str] = &[
    "the", "report", "city", "river", "people", "morning", "market", "school", "garden", "window",
    "train", "letter", "doctor", "village", "music", "paper", "forest", "engine", "question", "table",
    "summer", "road", "family", "island", "story", "bridge", "picture", "winter", "kitchen", "harbor",
];

/// Languages used by the synthetic pool, English first.
pub const POOL_LANGUAGES: &[&str] = &["eng", "deu", "fra", "spa", "por", "zho", "rus", "tur"];

fn filler(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *FILLER.choose(rng).expect("filler non-empty")).collect::<Vec<_>>().join(" ")
}

fn direction(rng: &mut ChaCha8Rng) -> Direction {
    match rng.gen_range(0..3) {
        0 => Direction::Forward,
        1 => Direction::Backward,
        _ => Direction::None,
    }
}

#[allow(clippy::too_many_arguments)]
fn instance(
    id: String,
    corpus: &str,
    language: &str,
    framework: Framework,
    a: String,
    b: String,
    direction: Direction,
    label: UnifiedLabel,
) -> RelationInstance {
    RelationInstance {
        id,
        corpus_id: corpus.into(),
        language: language.into(),
        framework,
        arg1_text: a,
        arg2_text: b,
        direction,
        label,
        masked: false,
        extra: Default::default(),
    }
}

/// `n` instances over `labels`, round-robin. Each label owns three marker
/// words; every second argument carries two of them, so the label is
/// recoverable from the text alone.
pub fn separable_dataset(n: usize, labels: &[UnifiedLabel], seed: u64) -> Vec<RelationInstance> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|i| {
            let k = i % labels.len();
            let markers: Vec<String> = (0..3).map(|m| format!("cue{k}x{m}")).collect();
            let len = rng.gen_range(3..7);
            let a = filler(&mut rng, len);
            let picked: Vec<&String> = markers.choose_multiple(&mut rng, 2).collect();
            let b = format!("{} {} {}", picked[0], filler(&mut rng, 2), picked[1]);
            instance(
                format!("sep:{i}"),
                "eng.rst.synthetic",
                "eng",
                Framework::Rst,
                a,
                b,
                direction(&mut rng),
                labels[k],
            )
        })
        .collect()
}

/// Label counts summing to `total` whose shares follow `percent`, rounded by
/// largest remainder.
pub fn proportional_counts(percent: &[f64; NUM_LABELS], total: usize) -> [usize; NUM_LABELS] {
    let sum: f64 = percent.iter().sum();
    let exact: Vec<f64> = percent.iter().map(|p| p / sum * total as f64).collect();
    let mut counts = [0usize; NUM_LABELS];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..NUM_LABELS).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// A shuffled development-like set following the dev label shares, spread
/// over a few languages and frameworks.
pub fn dev_like_set(total: usize, seed: u64) -> Vec<RelationInstance> {
    let mut rng = seeded_rng(seed);
    let counts = proportional_counts(&DEV_PERCENT, total);
    let mut out = Vec::with_capacity(total);
    for (li, &c) in counts.iter().enumerate() {
        let label = UnifiedLabel::ALL[li];
        for _ in 0..c {
            let lang = POOL_LANGUAGES[rng.gen_range(0..4)];
            let fw = Framework::ALL[rng.gen_range(0..Framework::ALL.len())];
            let (a, b) = (filler(&mut rng, 5), filler(&mut rng, 4));
            out.push(instance(
                String::new(),
                &format!("{lang}.{}.synthetic", fw.name()),
                lang,
                fw,
                a,
                b,
                direction(&mut rng),
                label,
            ));
        }
    }
    out.shuffle(&mut rng);
    for (i, inst) in out.iter_mut().enumerate() {
        inst.id = format!("dev:{i}");
    }
    out
}

/// The first `n_combos` (language, framework, label) triples in enumeration
/// order: languages outermost, English first.
pub fn pool_combos(n_combos: usize) -> Vec<(Framework, String, UnifiedLabel)> {
    let mut out = Vec::with_capacity(n_combos);
    'outer: for lang in POOL_LANGUAGES {
        for fw in Framework::ALL {
            for label in UnifiedLabel::ALL {
                if out.len() == n_combos {
                    break 'outer;
                }
                out.push((fw, lang.to_string(), label));
            }
        }
    }
    out
}

/// Training instances with exactly `per_combo` members in each of the first
/// `n_combos` combinations.
pub fn pool_training_set(n_combos: usize, per_combo: usize, seed: u64) -> Vec<RelationInstance> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();
    for (c, (fw, lang, label)) in pool_combos(n_combos).into_iter().enumerate() {
        for j in 0..per_combo {
            let (a, b) = (filler(&mut rng, 4), filler(&mut rng, 4));
            out.push(instance(
                format!("train:{c}:{j}"),
                &format!("{lang}.{}.synthetic", fw.name()),
                &lang,
                fw,
                a,
                b,
                direction(&mut rng),
                label,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_sum_and_follow_shares() {
        let c = proportional_counts(&DEV_PERCENT, 28_000);
        assert_eq!(c.iter().sum::<usize>(), 28_000);
        let sum: f64 = DEV_PERCENT.iter().sum();
        for (n, p) in c.iter().zip(DEV_PERCENT) {
            assert!((*n as f64 - p / sum * 28_000.0).abs() <= 1.0);
        }
    }

    #[test]
    fn pool_enumeration_is_distinct() {
        let combos = pool_combos(327);
        assert_eq!(combos.len(), 327);
        let set: std::collections::HashSet<_> = combos.iter().cloned().collect();
        assert_eq!(set.len(), 327);
        assert_eq!(pool_training_set(327, 3, 1).len(), 981);
    }

    #[test]
    fn separable_is_deterministic() {
        let labels = [UnifiedLabel::Causal, UnifiedLabel::Contrast];
        assert_eq!(separable_dataset(8, &labels, 3), separable_dataset(8, &labels, 3));
        assert_eq!(separable_dataset(8, &labels, 3)[1].label, UnifiedLabel::Contrast);
    }
}
