//! Relation instances in the shared-task `.rels` format.
//!
//! A `.rels` file is UTF-8, tab separated, with one header row. Every data row
//! is one argument pair with its relation direction and unified label. Corpus
//! level metadata (language, framework, corpus id) either comes from dedicated
//! columns or from the release file name (`eng.rst.gum_train.rels`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! unified_labels {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// The closed 17-way relation label set.
        ///
        /// Declaration order is the canonical order used for logits,
        /// prototype rows and tie breaking.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum UnifiedLabel {
            $($variant),+
        }

        impl UnifiedLabel {
            pub const ALL: [UnifiedLabel; 17] = [$(UnifiedLabel::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(UnifiedLabel::$variant => $name),+
                }
            }
        }
    };
}

unified_labels! {
    Elaboration => "elaboration",
    Conjunction => "conjunction",
    Causal => "causal",
    Temporal => "temporal",
    Query => "query",
    Contrast => "contrast",
    Concession => "concession",
    Comment => "comment",
    Explanation => "explanation",
    Purpose => "purpose",
    Condition => "condition",
    Attribution => "attribution",
    Organization => "organization",
    Frame => "frame",
    Mode => "mode",
    Reformulation => "reformulation",
    Alternation => "alternation",
}

pub const NUM_LABELS: usize = 17;

/// Training-split label shares in percent, canonical order.
pub const TRAIN_PERCENT: [f64; NUM_LABELS] = [
    19.9, 17.5, 11.7, 9.4, 6.5, 5.2, 4.5, 4.0, 3.7, 3.1, 3.0, 3.0, 2.9, 2.3, 1.4, 1.2, 0.7,
];

/// Development-split label shares in percent, canonical order.
pub const DEV_PERCENT: [f64; NUM_LABELS] = [
    23.3, 16.5, 10.6, 8.1, 5.1, 4.6, 4.7, 3.3, 3.9, 3.7, 2.7, 3.2, 3.5, 2.9, 2.0, 1.4, 0.7,
];

impl UnifiedLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for UnifiedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UnifiedLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        validate_label(s)
    }
}

impl Serialize for UnifiedLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for UnifiedLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        validate_label(&raw).map_err(serde::de::Error::custom)
    }
}

/// Trims and lowercases `raw`, then matches it against the unified label set.
pub fn validate_label(raw: &str) -> Result<UnifiedLabel> {
    let canonical = raw.trim().to_lowercase();
    UnifiedLabel::ALL
        .iter()
        .copied()
        .find(|l| l.name() == canonical)
        .ok_or_else(|| Error::Label(format!("unknown relation label {raw:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Pdtb,
    Rst,
    Dep,
    Sdrt,
    Erst,
    Iso,
}

impl Framework {
    pub const ALL: [Framework; 6] = [
        Framework::Pdtb,
        Framework::Rst,
        Framework::Dep,
        Framework::Sdrt,
        Framework::Erst,
        Framework::Iso,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Framework::Pdtb => "pdtb",
            Framework::Rst => "rst",
            Framework::Dep => "dep",
            Framework::Sdrt => "sdrt",
            Framework::Erst => "erst",
            Framework::Iso => "iso",
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let canonical = s.trim().to_lowercase();
        Framework::ALL
            .iter()
            .copied()
            .find(|f| f.name() == canonical)
            .ok_or_else(|| Error::Format(format!("unknown framework {s:?}")))
    }
}

/// Annotated direction of the relation between the two arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// `1>2`
    Forward,
    /// `1<2`
    Backward,
    /// No direction annotated (`_`).
    None,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "1>2",
            Direction::Backward => "1<2",
            Direction::None => "_",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1>2" => Ok(Direction::Forward),
            "1<2" => Ok(Direction::Backward),
            "_" | "" | "none" | "NONE" => Ok(Direction::None),
            other => Err(Error::Format(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub id: String,
    pub corpus_id: String,
    pub language: String,
    pub framework: Framework,
    pub arg1_text: String,
    pub arg2_text: String,
    pub direction: Direction,
    pub label: UnifiedLabel,
    pub masked: bool,
    /// Columns outside the schema, kept verbatim.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

fn is_masked_text(text: &str) -> bool {
    !text.is_empty() && text.chars().all(|c| c == '_' || c.is_whitespace())
}

/// Corpus-level metadata for files that do not carry it per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusMeta {
    pub corpus_id: String,
    pub language: String,
    pub framework: Framework,
}

impl CorpusMeta {
    /// Reads `lang.framework.corpus[_split].rels`, e.g. `eng.rst.gum_dev.rels`.
    pub fn from_file_name(path: &Path) -> Option<Self> {
        let stem = path.file_stem()?.to_str()?;
        let mut parts = stem.splitn(3, '.');
        let language = parts.next()?.to_string();
        let framework = parts.next()?.parse().ok()?;
        let corpus = parts.next()?;
        let corpus = match corpus.rsplit_once('_') {
            Some((name, "train" | "dev" | "test")) => name,
            _ => corpus,
        };
        Some(CorpusMeta {
            corpus_id: format!("{language}.{framework}.{corpus}"),
            language,
            framework,
        })
    }
}

/// Column mapping for `.rels` files.
///
/// The defaults follow the shared-task release; the optional metadata columns
/// are used by the synthetic fixtures, which mix corpora in one file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelsSchema {
    pub arg1: String,
    pub arg2: String,
    pub direction: String,
    pub label: String,
    pub id: String,
    pub language: String,
    pub framework: String,
    pub corpus: String,
}

impl Default for RelsSchema {
    fn default() -> Self {
        Self {
            arg1: "unit1_txt".into(),
            arg2: "unit2_txt".into(),
            direction: "dir".into(),
            label: "label".into(),
            id: "id".into(),
            language: "lang".into(),
            framework: "framework".into(),
            corpus: "corpus".into(),
        }
    }
}

struct ColumnIndex {
    arg1: usize,
    arg2: usize,
    direction: usize,
    label: usize,
    id: Option<usize>,
    language: Option<usize>,
    framework: Option<usize>,
    corpus: Option<usize>,
    extra: Vec<(usize, String)>,
}

impl ColumnIndex {
    fn resolve(header: &[&str], schema: &RelsSchema) -> Result<Self> {
        let find = |name: &str| header.iter().position(|h| *h == name);
        let require = |name: &str| {
            find(name).ok_or_else(|| Error::Format(format!("missing required column {name:?}")))
        };
        let arg1 = require(&schema.arg1)?;
        let arg2 = require(&schema.arg2)?;
        let direction = require(&schema.direction)?;
        let label = require(&schema.label)?;
        let id = find(&schema.id);
        let language = find(&schema.language);
        let framework = find(&schema.framework);
        let corpus = find(&schema.corpus);
        let known: BTreeSet<usize> = [Some(arg1), Some(arg2), Some(direction), Some(label)]
            .into_iter()
            .chain([id, language, framework, corpus])
            .flatten()
            .collect();
        let extra = header
            .iter()
            .enumerate()
            .filter(|(i, _)| !known.contains(i))
            .map(|(i, h)| (i, h.to_string()))
            .collect();
        Ok(Self {
            arg1,
            arg2,
            direction,
            label,
            id,
            language,
            framework,
            corpus,
            extra,
        })
    }
}

/// Parses a `.rels` stream into instances, in file order.
///
/// `meta` supplies corpus, language and framework when the file has no
/// columns for them.
pub fn parse_rels<R: Read>(
    source: R,
    schema: &RelsSchema,
    meta: Option<&CorpusMeta>,
) -> Result<Vec<RelationInstance>> {
    let reader = BufReader::new(source);
    let mut lines = reader.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(Error::Format("empty .rels source (no header row)".into())),
        }
    };
    let header: Vec<&str> = header_line.trim_end_matches('\r').split('\t').collect();
    let cols = ColumnIndex::resolve(&header, schema)?;

    let mut out = Vec::new();
    for (line_no, line) in lines {
        let row = line_no;
        let line = line.map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::Format(format!(
                "row {row}: expected {} fields, found {}",
                header.len(),
                fields.len()
            )));
        }
        let label = validate_label(fields[cols.label])
            .map_err(|_| Error::Label(format!("row {row}: unknown label {:?}", fields[cols.label])))?;
        let direction: Direction = fields[cols.direction]
            .parse()
            .map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        let language = match (cols.language, meta) {
            (Some(i), _) => fields[i].to_string(),
            (None, Some(m)) => m.language.clone(),
            (None, None) => {
                return Err(Error::Format("missing required column \"lang\" (no corpus metadata)".into()))
            }
        };
        let framework = match (cols.framework, meta) {
            (Some(i), _) => fields[i]
                .parse()
                .map_err(|e| Error::Format(format!("row {row}: {e}")))?,
            (None, Some(m)) => m.framework,
            (None, None) => {
                return Err(Error::Format(
                    "missing required column \"framework\" (no corpus metadata)".into(),
                ))
            }
        };
        let corpus_id = match (cols.corpus, meta) {
            (Some(i), _) => fields[i].to_string(),
            (None, Some(m)) => m.corpus_id.clone(),
            (None, None) => format!("{language}.{framework}"),
        };
        let arg1_text = fields[cols.arg1].to_string();
        let arg2_text = fields[cols.arg2].to_string();
        if arg1_text.trim().is_empty() || arg2_text.trim().is_empty() {
            return Err(Error::Format(format!("row {row}: empty argument text")));
        }
        let masked = is_masked_text(&arg1_text) && is_masked_text(&arg2_text);
        let id = match cols.id {
            Some(i) => fields[i].to_string(),
            None => format!("{corpus_id}:{row}"),
        };
        let extra = cols
            .extra
            .iter()
            .map(|(i, name)| (name.clone(), fields[*i].to_string()))
            .collect();
        out.push(RelationInstance {
            id,
            corpus_id,
            language,
            framework,
            arg1_text,
            arg2_text,
            direction,
            label,
            masked,
            extra,
        });
    }
    Ok(out)
}

/// Writes instances with the default schema, including the metadata columns.
pub fn write_rels<W: Write>(mut out: W, instances: &[RelationInstance]) -> Result<()> {
    let schema = RelsSchema::default();
    let extra_cols: BTreeSet<&str> = instances
        .iter()
        .flat_map(|i| i.extra.keys().map(String::as_str))
        .collect();
    let mut header = vec![
        schema.id.as_str(),
        schema.corpus.as_str(),
        schema.language.as_str(),
        schema.framework.as_str(),
        schema.arg1.as_str(),
        schema.arg2.as_str(),
        schema.direction.as_str(),
        schema.label.as_str(),
    ];
    header.extend(extra_cols.iter().copied());
    let io = |e| Error::io("<rels writer>", e);
    writeln!(out, "{}", header.join("\t")).map_err(io)?;
    for inst in instances {
        for (name, text) in [
            ("id", &inst.id),
            ("corpus", &inst.corpus_id),
            ("lang", &inst.language),
            ("arg1", &inst.arg1_text),
            ("arg2", &inst.arg2_text),
        ] {
            if text.contains(['\t', '\n', '\r']) {
                return Err(Error::Format(format!(
                    "instance {}: {name} contains a tab or newline",
                    inst.id
                )));
            }
        }
        let mut row = vec![
            inst.id.as_str(),
            inst.corpus_id.as_str(),
            inst.language.as_str(),
            inst.framework.name(),
            inst.arg1_text.as_str(),
            inst.arg2_text.as_str(),
            inst.direction.as_str(),
            inst.label.name(),
        ];
        row.extend(
            extra_cols
                .iter()
                .map(|c| inst.extra.get(*c).map(String::as_str).unwrap_or("_")),
        );
        writeln!(out, "{}", row.join("\t")).map_err(io)?;
    }
    Ok(())
}

/// Loads one `.rels` file, or every `*.rels` file of a directory in name order.
pub fn load_rels_path(path: &Path, schema: &RelsSchema) -> Result<Vec<RelationInstance>> {
    let files = rels_files(path)?;
    let mut all = Vec::new();
    for file in files {
        let handle = std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
        let meta = CorpusMeta::from_file_name(&file);
        all.extend(parse_rels(handle, schema, meta.as_ref())?);
    }
    Ok(all)
}

pub fn rels_files(path: &Path) -> Result<Vec<PathBuf>> {
    let md = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if md.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "rels"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .rels files in directory"),
        ));
    }
    Ok(files)
}

/// Drops masked instances unless `include_masked` is set.
pub fn trainable_instances(
    instances: &[RelationInstance],
    include_masked: bool,
) -> Vec<RelationInstance> {
    instances
        .iter()
        .filter(|i| include_masked || !i.masked)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingStrategy {
    /// Arguments in text order.
    #[default]
    Natural,
    /// Arguments swapped when the relation points backwards.
    RelationDirected,
}

impl FromStr for OrderingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().replace('_', "-").as_str() {
            "natural" | "no" => Ok(OrderingStrategy::Natural),
            "relation-directed" | "ro" => Ok(OrderingStrategy::RelationDirected),
            other => Err(Error::Config(format!(
                "unknown ordering {other:?} (expected natural | relation-directed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderedPair {
    pub first: String,
    pub second: String,
    pub strategy: OrderingStrategy,
    pub swapped: bool,
}

/// Orders the two arguments of `instance`.
///
/// Only a backward (`1<2`) relation under relation-directed ordering swaps;
/// undirected rows are treated as forward.
pub fn apply_ordering(instance: &RelationInstance, strategy: OrderingStrategy) -> OrderedPair {
    let swapped =
        strategy == OrderingStrategy::RelationDirected && instance.direction == Direction::Backward;
    let (first, second) = if swapped {
        (&instance.arg2_text, &instance.arg1_text)
    } else {
        (&instance.arg1_text, &instance.arg2_text)
    };
    OrderedPair {
        first: first.clone(),
        second: second.clone(),
        strategy,
        swapped,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub total: usize,
    pub counts: BTreeMap<UnifiedLabel, usize>,
    pub proportions: BTreeMap<UnifiedLabel, f64>,
}

impl LabelDistribution {
    pub fn from_labels(labels: impl IntoIterator<Item = UnifiedLabel>) -> Self {
        let mut counts = BTreeMap::new();
        let mut total = 0usize;
        for label in labels {
            *counts.entry(label).or_insert(0usize) += 1;
            total += 1;
        }
        let proportions = counts
            .iter()
            .map(|(l, c)| (*l, *c as f64 / total as f64))
            .collect();
        Self {
            total,
            counts,
            proportions,
        }
    }

    /// Most frequent label; ties go to the lower canonical index.
    pub fn majority(&self) -> Option<UnifiedLabel> {
        self.counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(l, _)| *l)
    }
}

pub fn distribution(instances: &[RelationInstance]) -> LabelDistribution {
    LabelDistribution::from_labels(instances.iter().map(|i| i.label))
}

/// JSON stats document: overall distribution plus per-framework and
/// per-language breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub masked: usize,
    pub distribution: LabelDistribution,
    pub by_framework: BTreeMap<String, LabelDistribution>,
    pub by_language: BTreeMap<String, LabelDistribution>,
}

pub fn corpus_stats(instances: &[RelationInstance]) -> CorpusStats {
    let mut by_framework: BTreeMap<String, Vec<UnifiedLabel>> = BTreeMap::new();
    let mut by_language: BTreeMap<String, Vec<UnifiedLabel>> = BTreeMap::new();
    for inst in instances {
        by_framework
            .entry(inst.framework.to_string())
            .or_default()
            .push(inst.label);
        by_language
            .entry(inst.language.clone())
            .or_default()
            .push(inst.label);
    }
    let collapse = |m: BTreeMap<String, Vec<UnifiedLabel>>| {
        m.into_iter()
            .map(|(k, v)| (k, LabelDistribution::from_labels(v)))
            .collect()
    };
    CorpusStats {
        total: instances.len(),
        masked: instances.iter().filter(|i| i.masked).count(),
        distribution: distribution(instances),
        by_framework: collapse(by_framework),
        by_language: collapse(by_language),
    }
}
