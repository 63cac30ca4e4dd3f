use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{parse_response, render_prompt, select_examples, ExamplePool, LlmClient, LlmRequest, PromptSpec, PromptTemplate};
use crate::error::{Error, Result};
use crate::evaluation::{report_for, GroupedReport};
use crate::relsdata::{RelationInstance, UnifiedLabel};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub model: String,
    pub temperature: f64,
    pub max_attempts: usize,
    pub backoff: Duration,
    pub concurrency: usize,
    pub seed: u64,
    pub weak_labels: Option<Vec<UnifiedLabel>>,
    pub template: PromptTemplate,
    pub audit_path: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            model: "unspecified".into(),
            temperature: 0.0,
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            concurrency: 4,
            seed: 42,
            weak_labels: None,
            template: PromptTemplate::default(),
            audit_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub instance_id: String,
    pub prompt_sha256: String,
    pub response: Option<String>,
    pub parsed: Option<UnifiedLabel>,
    pub gold: UnifiedLabel,
    pub attempts: usize,
    pub error: Option<String>,
    pub latency_ms: f64,
}

pub struct PromptEvalResult {
    pub report: GroupedReport,
    pub records: Vec<AuditRecord>,
}

fn ask(client: &dyn LlmClient, req: &LlmRequest, opts: &RunOptions) -> (Result<String>, usize) {
    let mut last = Err(Error::Client("no attempt made".into()));
    for attempt in 1..=opts.max_attempts.max(1) {
        last = client.complete(req);
        if last.is_ok() {
            return (last, attempt);
        }
        if attempt < opts.max_attempts {
            std::thread::sleep(opts.backoff * 2u32.pow(attempt as u32 - 1));
        }
    }
    (last, opts.max_attempts.max(1))
}

/// One request per instance with bounded retries; results come back in
/// input order and failures are scored as wrong.
pub fn run_prompt_eval(
    client: &dyn LlmClient,
    subset: &[RelationInstance],
    spec: &PromptSpec,
    pool: Option<&ExamplePool>,
    opts: &RunOptions,
) -> Result<PromptEvalResult> {
    spec.validate()?;
    if subset.is_empty() {
        return Err(Error::Input("prompt evaluation over an empty subset".into()));
    }
    if spec.experiment.is_some() && pool.is_none() {
        return Err(Error::Config("few-shot prompting needs an example pool".into()));
    }
    let empty = ExamplePool::default();
    let pool = pool.unwrap_or(&empty);

    let mut prompts = Vec::with_capacity(subset.len());
    for inst in subset {
        let examples = select_examples(pool, inst, spec, opts.weak_labels.as_deref(), opts.seed)?;
        prompts.push(render_prompt(&opts.template, inst, &examples, spec.ordering));
    }

    let slots: Vec<Mutex<Option<AuditRecord>>> = subset.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..opts.concurrency.clamp(1, subset.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= subset.len() {
                    break;
                }
                let inst = &subset[i];
                let req = LlmRequest {
                    model: opts.model.clone(),
                    prompt: prompts[i].clone(),
                    temperature: opts.temperature,
                    instance_id: inst.id.clone(),
                };
                let start = Instant::now();
                let (result, attempts) = ask(client, &req, opts);
                let latency_ms = start.elapsed().as_secs_f64() * 1e3;
                let (response, error) = match result {
                    Ok(text) => (Some(text), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                let record = AuditRecord {
                    instance_id: inst.id.clone(),
                    prompt_sha256: hex::encode(Sha256::digest(req.prompt.as_bytes())),
                    parsed: response.as_deref().and_then(parse_response),
                    response,
                    gold: inst.label,
                    attempts,
                    error,
                    latency_ms,
                };
                *slots[i].lock().expect("result slot lock") = Some(record);
            });
        }
    });
    let records: Vec<AuditRecord> = slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot lock").expect("every slot filled"))
        .collect();

    if let Some(path) = &opts.audit_path {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }

    let preds: Vec<Option<UnifiedLabel>> = records.iter().map(|r| r.parsed).collect();
    Ok(PromptEvalResult {
        report: report_for(subset, &preds)?,
        records,
    })
}
