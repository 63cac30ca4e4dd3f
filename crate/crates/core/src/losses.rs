//! Training objectives: smoothed cross-entropy on the classifier output and
//! two contrastive losses on the intermediate representation.
//!
//! The label-centered loss contrasts a representation against one learnable
//! prototype per class:
//!
//! ```text
//! L = -log( exp(cos(h, e_y)/τ) / Σ_j exp(cos(h, e_j)/τ) )
//! ```
//!
//! The instance loss is InfoNCE between two views of the same input, with
//! negatives drawn from a FIFO queue filled by a momentum key encoder.

use std::collections::VecDeque;

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relsdata::{UnifiedLabel, NUM_LABELS};
use crate::tensor::{self, device};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_cl: f64,
    pub tau: f64,
    pub smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_cl: 0.3,
            tau: 0.1,
            smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ce >= 0.0 && self.lambda_cl >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("label smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `λ_ce · l_ce + λ_cl · l_lcl`.
pub fn total_loss(l_ce: f64, l_lcl: f64, w: &LossWeights) -> f64 {
    w.lambda_ce * l_ce + w.lambda_cl * l_lcl
}

pub fn total_loss_tensor(l_ce: &Tensor, l_lcl: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((l_ce * w.lambda_ce)? + (l_lcl * w.lambda_cl)?)?)
}

/// One learnable embedding per unified label, rows in canonical label order.
#[derive(Debug, Clone)]
pub struct LabelPrototypes {
    embeddings: Var,
}

impl LabelPrototypes {
    /// Seeded unit-norm rows.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("prototype dimension must be positive".into()));
        }
        let mut rng = tensor::seeded_rng(seed);
        let raw = tensor::normal_var(&mut rng, &[NUM_LABELS, dim], 1.0)?;
        let unit = normalize_rows(raw.as_tensor(), "prototype")?;
        Ok(Self {
            embeddings: Var::from_tensor(&unit)?,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, _) = t.dims2()?;
        if rows != NUM_LABELS {
            return Err(Error::Shape(format!("prototypes need {NUM_LABELS} rows, got {rows}")));
        }
        tensor::ensure_finite(t, "prototypes")?;
        Ok(Self {
            embeddings: Var::from_tensor(&t.to_dtype(tensor::DTYPE)?)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dims()[1]
    }

    pub fn var(&self) -> &Var {
        &self.embeddings
    }

    pub fn as_tensor(&self) -> &Tensor {
        self.embeddings.as_tensor()
    }
}

fn rows(t: &Tensor) -> Result<Tensor> {
    Ok(match t.rank() {
        1 => t.unsqueeze(0)?,
        2 => t.clone(),
        r => return Err(Error::Shape(format!("expected vector or matrix, got rank {r}"))),
    })
}

/// Row-wise L2 normalization; zero rows are a numeric error.
pub fn normalize_rows(x: &Tensor, what: &str) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let values = tensor::to_vec1(&norms)?;
    if let Some(i) = values.iter().position(|n| !(*n > 1e-12) || !n.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what} row {i} has norm {}; cosine similarity is undefined",
            values[i]
        )));
    }
    Ok(x.broadcast_div(&norms)?)
}

fn one_hot(targets: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; targets.len() * classes];
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Shape(format!("target {t} outside {classes} classes")));
        }
        data[i * classes + t] = 1.0;
    }
    Ok(Tensor::from_vec(data, (targets.len(), classes), &device())?)
}

/// Mean label-smoothed cross-entropy over rows of `logits`.
///
/// The target distribution is `(1 - ε)` on the gold class plus `ε / K` on
/// every class; `ε = 0` is plain cross-entropy.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], smoothing: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let logits = rows(logits)?;
    let (n, k) = logits.dims2()?;
    if n != targets.len() {
        return Err(Error::Shape(format!("{n} logit rows for {} targets", targets.len())));
    }
    tensor::ensure_finite(&logits, "logits")?;
    let log_p = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let q = ((one_hot(targets, k)? * (1.0 - smoothing))? + smoothing / k as f64)?;
    Ok((q.mul(&log_p)?.sum(1)?.mean(0)? * -1.0)?)
}

/// Label-centered supervised contrastive loss, averaged over rows of `h`.
pub fn label_centered_scl(
    h: &Tensor,
    prototypes: &LabelPrototypes,
    targets: &[UnifiedLabel],
    tau: f64,
) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let h = rows(h)?;
    let (n, d) = h.dims2()?;
    if d != prototypes.dim() {
        return Err(Error::Shape(format!(
            "representation width {d} differs from prototype width {}",
            prototypes.dim()
        )));
    }
    if n != targets.len() {
        return Err(Error::Shape(format!("{n} rows for {} targets", targets.len())));
    }
    let hn = normalize_rows(&h, "representation")?;
    let en = normalize_rows(prototypes.as_tensor(), "prototype")?;
    let sims = (hn.matmul(&en.t()?)? / tau)?;
    let idx: Vec<usize> = targets.iter().map(|l| l.index()).collect();
    cross_entropy(&sims, &idx, 0.0)
}

/// Fixed-capacity FIFO of detached key vectors.
#[derive(Debug, Clone)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    keys: VecDeque<Vec<f64>>,
    labels: VecDeque<Option<UnifiedLabel>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and width must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            keys: VecDeque::with_capacity(capacity),
            labels: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.keys.iter()
    }

    /// Appends a batch of keys, evicting the oldest entries past capacity.
    /// Values are copied out, so nothing in the queue carries gradient.
    pub fn push(&mut self, keys: &Tensor, labels: Option<&[UnifiedLabel]>) -> Result<()> {
        let keys = rows(keys)?;
        let (b, d) = keys.dims2()?;
        if d != self.dim {
            return Err(Error::Shape(format!("key width {d}, queue width {}", self.dim)));
        }
        if b > self.capacity {
            return Err(Error::State(format!(
                "contract violation: pushed {b} keys into a queue of capacity {}",
                self.capacity
            )));
        }
        if let Some(l) = labels {
            if l.len() != b {
                return Err(Error::Shape(format!("{b} keys with {} labels", l.len())));
            }
        }
        let data = keys.detach().to_vec2::<f64>()?;
        for (i, row) in data.into_iter().enumerate() {
            if self.keys.len() == self.capacity {
                self.keys.pop_front();
                self.labels.pop_front();
            }
            self.keys.push_back(row);
            self.labels.push_back(labels.map(|l| l[i]));
        }
        Ok(())
    }

    fn as_tensor(&self) -> Result<Tensor> {
        let flat: Vec<f64> = self.keys.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.keys.len(), self.dim), &device())?)
    }
}

/// InfoNCE of queries against their positive keys and the queued negatives.
///
/// With `query_labels`, negatives sharing the query's label are left out of
/// the denominator.
pub fn instance_scl(
    q: &Tensor,
    k_pos: &Tensor,
    queue: &NegativeQueue,
    tau: f64,
    query_labels: Option<&[UnifiedLabel]>,
) -> Result<Tensor> {
    if queue.is_empty() {
        return Err(Error::State("instance contrastive loss needs a non-empty queue".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let q = rows(q)?;
    let k_pos = rows(k_pos)?.detach();
    if q.dims() != k_pos.dims() || q.dims()[1] != queue.dim {
        return Err(Error::Shape(format!(
            "query {:?}, key {:?}, queue width {}",
            q.dims(),
            k_pos.dims(),
            queue.dim
        )));
    }
    let qn = normalize_rows(&q, "query")?;
    let kn = normalize_rows(&k_pos, "positive key")?;
    let negn = normalize_rows(&queue.as_tensor()?, "queued key")?;
    let pos = qn.mul(&kn)?.sum_keepdim(1)?;
    let neg = qn.matmul(&negn.t()?)?;
    let mut logits = (Tensor::cat(&[&pos, &neg], 1)? / tau)?;
    if let Some(labels) = query_labels {
        let n = labels.len();
        let k = queue.len();
        let mut mask = vec![0.0; n * (k + 1)];
        for (i, l) in labels.iter().enumerate() {
            for (j, ql) in queue.labels.iter().enumerate() {
                if ql.as_ref() == Some(l) {
                    mask[i * (k + 1) + j + 1] = -1e9;
                }
            }
        }
        logits = (logits + Tensor::from_vec(mask, (n, k + 1), &device())?)?;
    }
    let zeros = vec![0usize; q.dims()[0]];
    cross_entropy(&logits, &zeros, 0.0)
}

/// `key ← m·key + (1 − m)·query`, elementwise over aligned parameter lists.
pub fn momentum_update(key: &[Var], query: &[Var], m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    if key.len() != query.len() {
        return Err(Error::Shape(format!(
            "{} key parameters for {} query parameters",
            key.len(),
            query.len()
        )));
    }
    for (k, q) in key.iter().zip(query) {
        if k.dims() != q.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", k.dims(), q.dims())));
        }
        let next = ((k.as_tensor() * m)? + (q.as_tensor().detach() * (1.0 - m))?)?;
        k.set(&next)?;
    }
    Ok(())
}
