//! Encoder backbone: a post-LN transformer with per-layer `[CLS]` taps, an
//! absolute freeze policy, and hook points for adapters on its linear
//! sublayers.
//!
//! Two kinds share one implementation. `Toy` encoders are built from a seed
//! and are small enough for tests; `Pretrained` encoders read a checkpoint
//! directory (`config.json` + `model.safetensors`, RoBERTa tensor names).
//! Layers are numbered from 1 in the public API.

pub(crate) mod arch;
mod tokenizer;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{IndexOp, Tensor, Var, D};
use serde::{Deserialize, Serialize};

pub use arch::{ArchConfig, HookSite};
pub use tokenizer::{Encoded, HashTokenizer, CLS_ID, PAD_ID, SEP_ID};

use crate::error::{Error, Result};
use crate::tensor::{self, device, layer_norm, linear, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    Toy { seed: u64 },
    Pretrained { model_name: String, path: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub arch: ArchConfig,
}

impl EncoderSpec {
    pub fn toy(n_layers: usize, hidden: usize, seed: u64) -> Self {
        Self {
            kind: EncoderKind::Toy { seed },
            arch: ArchConfig::toy(n_layers, hidden),
        }
    }

    /// A released model by name. Dimensions are known; weights still need a
    /// checkpoint directory, see [`EncoderSpec::pretrained_dir`].
    pub fn pretrained(model_name: &str) -> Result<Self> {
        let arch = ArchConfig::known(model_name)
            .ok_or_else(|| Error::Load(format!("unknown pretrained model {model_name:?}")))?;
        Ok(Self {
            kind: EncoderKind::Pretrained {
                model_name: model_name.to_string(),
                path: None,
            },
            arch,
        })
    }

    /// A checkpoint directory; dimensions come from its `config.json`.
    pub fn pretrained_dir(dir: &Path) -> Result<Self> {
        let config = dir.join("config.json");
        if !config.is_file() {
            return Err(Error::Load(format!("{}: no config.json", dir.display())));
        }
        let arch = ArchConfig::from_hf_config(&config)?;
        let model_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "pretrained".into());
        Ok(Self {
            kind: EncoderKind::Pretrained {
                model_name,
                path: Some(dir.to_path_buf()),
            },
            arch,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.arch.n_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.arch.hidden
    }

    pub fn max_seq_len(&self) -> usize {
        self.arch.max_seq_len
    }
}

/// Token ids of a padded batch.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Tensor,
    /// 1.0 for real tokens, 0.0 for padding; shape `(batch, len)`.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    pub truncated: Vec<bool>,
}

impl TokenBatch {
    pub fn from_encoded(items: &[Encoded]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Input("empty token batch".into()));
        }
        let len = items.iter().map(|e| e.ids.len()).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(items.len() * len);
        let mut mask = Vec::with_capacity(items.len() * len);
        for e in items {
            ids.extend(e.ids.iter().copied());
            ids.extend(std::iter::repeat(PAD_ID).take(len - e.ids.len()));
            mask.extend(std::iter::repeat(1.0).take(e.ids.len()));
            mask.extend(std::iter::repeat(0.0).take(len - e.ids.len()));
        }
        let dev = device();
        Ok(Self {
            ids: Tensor::from_vec(ids, (items.len(), len), &dev)?,
            mask: Tensor::from_vec(mask, (items.len(), len), &dev)?,
            lengths: items.iter().map(|e| e.ids.len()).collect(),
            truncated: items.iter().map(|e| e.truncated).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }
}

/// Output of an adapter applied at one hook site.
pub struct HookOutput {
    pub output: Tensor,
    /// Per-token gate distribution, `(tokens, experts)`, for mixture adapters.
    pub gate: Option<Tensor>,
}

/// Something that rewrites the output of a hooked linear sublayer.
pub trait SiteHook {
    /// `x` is the sublayer input and `base_out` the frozen output, both
    /// flattened to `(tokens, width)`.
    fn adapt(&self, layer: usize, site: HookSite, x: &Tensor, base_out: &Tensor) -> Result<HookOutput>;
}

#[derive(Debug, Clone, Default)]
pub struct EncodeOptions {
    pub tap_layers: BTreeSet<usize>,
    /// Hidden states leaving this layer are detached before the next one.
    pub barrier_after: Option<usize>,
    /// Stop after this layer; `final_cls` is then absent.
    pub stop_after: Option<usize>,
}

impl EncodeOptions {
    pub fn taps(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            tap_layers: layers.into_iter().collect(),
            ..Self::default()
        }
    }
}

pub struct EncodeOutput {
    /// `(batch, hidden)` `[CLS]` states after each tapped layer.
    pub cls_by_layer: BTreeMap<usize, Tensor>,
    pub final_cls: Option<Tensor>,
    pub gates: Vec<(usize, HookSite, Tensor)>,
    /// `(batch * len)` real-token indicator matching the gate rows.
    pub token_mask: Tensor,
    pub truncated: Vec<bool>,
}

/// Plain-vector form of a single encode.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeResult {
    pub cls_by_layer: BTreeMap<usize, Vec<f64>>,
    pub final_cls: Vec<f64>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub trainable_layer_indices: Vec<usize>,
    pub frozen_layer_indices: Vec<usize>,
    pub embeddings_trainable: bool,
    pub trainable_param_count: usize,
    pub total_param_count: usize,
}

struct LayerParams {
    query: (Var, Var),
    key: (Var, Var),
    value: (Var, Var),
    attn_out: (Var, Var),
    attn_ln: (Var, Var),
    ffn_in: (Var, Var),
    ffn_out: (Var, Var),
    out_ln: (Var, Var),
}

pub struct Encoder {
    spec: EncoderSpec,
    tokenizer: HashTokenizer,
    params: Vec<(String, Var)>,
    layers: Vec<LayerParams>,
    embeddings_trainable: bool,
    layer_trainable: Vec<bool>,
}

/// Builds an encoder from its spec. Every base parameter starts trainable.
pub fn load_encoder(spec: &EncoderSpec) -> Result<Encoder> {
    spec.arch.validate()?;
    let shapes = spec.arch.base_param_shapes();
    let mut params = Vec::with_capacity(shapes.len());
    match &spec.kind {
        EncoderKind::Toy { seed } => {
            let mut rng = tensor::seeded_rng(*seed);
            for (name, shape) in shapes {
                let var = if name.ends_with("LayerNorm.weight") {
                    tensor::const_var(&shape, 1.0)?
                } else if name.ends_with(".bias") {
                    tensor::const_var(&shape, 0.0)?
                } else if name.starts_with("embeddings.") {
                    tensor::normal_var(&mut rng, &shape, 1.0)?
                } else {
                    let fan_in = shape[1] as f64;
                    tensor::normal_var(&mut rng, &shape, fan_in.powf(-0.5))?
                };
                params.push((name, var));
            }
        }
        EncoderKind::Pretrained { model_name, path } => {
            let dir = path.as_ref().ok_or_else(|| {
                Error::Load(format!("pretrained model {model_name:?} has no checkpoint directory"))
            })?;
            let file = dir.join("model.safetensors");
            if !file.is_file() {
                return Err(Error::Load(format!("{}: missing model.safetensors", dir.display())));
            }
            let raw = candle_core::safetensors::load(&file, &device())
                .map_err(|e| Error::Load(format!("{}: {e}", file.display())))?;
            let raw: HashMap<String, Tensor> = raw
                .into_iter()
                .map(|(k, v)| {
                    let k = k
                        .strip_prefix("roberta.")
                        .or_else(|| k.strip_prefix("bert."))
                        .unwrap_or(&k)
                        .to_string();
                    (k, v)
                })
                .collect();
            for (name, shape) in shapes {
                let t = raw
                    .get(&name)
                    .ok_or_else(|| Error::Load(format!("{}: missing tensor {name}", file.display())))?;
                if t.dims() != shape.as_slice() {
                    return Err(Error::Config(format!(
                        "tensor {name} has shape {:?}, config expects {shape:?}",
                        t.dims()
                    )));
                }
                params.push((name, Var::from_tensor(&t.to_dtype(tensor::DTYPE)?)?));
            }
        }
    }
    let lookup: HashMap<&str, &Var> = params.iter().map(|(n, v)| (n.as_str(), v)).collect();
    let pair = |prefix: &str, w: &str, b: &str| -> (Var, Var) {
        (
            lookup[format!("{prefix}.{w}").as_str()].clone(),
            lookup[format!("{prefix}.{b}").as_str()].clone(),
        )
    };
    let layers = (1..=spec.arch.n_layers)
        .map(|l| {
            let p = arch::layer_prefix(l);
            LayerParams {
                query: pair(&p, "attention.self.query.weight", "attention.self.query.bias"),
                key: pair(&p, "attention.self.key.weight", "attention.self.key.bias"),
                value: pair(&p, "attention.self.value.weight", "attention.self.value.bias"),
                attn_out: pair(&p, "attention.output.dense.weight", "attention.output.dense.bias"),
                attn_ln: pair(&p, "attention.output.LayerNorm.weight", "attention.output.LayerNorm.bias"),
                ffn_in: pair(&p, "intermediate.dense.weight", "intermediate.dense.bias"),
                ffn_out: pair(&p, "output.dense.weight", "output.dense.bias"),
                out_ln: pair(&p, "output.LayerNorm.weight", "output.LayerNorm.bias"),
            }
        })
        .collect();
    Ok(Encoder {
        tokenizer: HashTokenizer::new(spec.arch.vocab_size),
        spec: spec.clone(),
        params,
        layers,
        embeddings_trainable: true,
        layer_trainable: vec![true; spec.arch.n_layers],
    })
}

impl Encoder {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.spec.arch
    }

    pub fn n_layers(&self) -> usize {
        self.spec.arch.n_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.arch.hidden
    }

    pub fn tokenizer(&self) -> &HashTokenizer {
        &self.tokenizer
    }

    pub fn named_params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Digest of every base parameter value.
    pub fn base_checksum(&self) -> Result<String> {
        tensor::checksum(self.params.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
    }

    pub fn is_layer_trainable(&self, layer: usize) -> bool {
        self.layer_trainable.get(layer.wrapping_sub(1)).copied().unwrap_or(false)
    }

    pub fn embeddings_trainable(&self) -> bool {
        self.embeddings_trainable
    }

    fn param_layer(name: &str) -> Option<usize> {
        let rest = name.strip_prefix("encoder.layer.")?;
        let idx: usize = rest.split('.').next()?.parse().ok()?;
        Some(idx + 1)
    }

    fn is_param_trainable(&self, name: &str) -> bool {
        match Self::param_layer(name) {
            Some(l) => self.is_layer_trainable(l),
            None => self.embeddings_trainable,
        }
    }

    /// Base parameters currently allowed to receive gradients.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(n, _)| self.is_param_trainable(n))
            .cloned()
            .collect()
    }

    /// Makes the top `ceil(ratio * n_layers)` layers trainable and freezes the
    /// rest. Embeddings train only at `ratio == 1`. The policy is absolute.
    pub fn set_trainable(&mut self, ratio: f64) -> Result<FreezeReport> {
        if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
            return Err(Error::Config(format!("unfreeze ratio {ratio} outside [0, 1]")));
        }
        let n = self.n_layers();
        let n_train = ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
        for (i, flag) in self.layer_trainable.iter_mut().enumerate() {
            *flag = i + 1 > n - n_train;
        }
        self.embeddings_trainable = ratio >= 1.0;
        Ok(self.freeze_report())
    }

    pub fn freeze_report(&self) -> FreezeReport {
        let (trainable, frozen): (Vec<usize>, Vec<usize>) =
            (1..=self.n_layers()).partition(|l| self.is_layer_trainable(*l));
        FreezeReport {
            trainable_layer_indices: trainable,
            frozen_layer_indices: frozen,
            embeddings_trainable: self.embeddings_trainable,
            trainable_param_count: self
                .trainable_vars()
                .iter()
                .map(|(_, v)| v.elem_count())
                .sum(),
            total_param_count: self.param_count(),
        }
    }

    pub fn tokenize_single<S: AsRef<str>>(&self, texts: &[S]) -> Result<TokenBatch> {
        let max = self.spec.arch.max_seq_len;
        let enc: Vec<Encoded> = texts
            .iter()
            .map(|t| self.tokenizer.encode_single(t.as_ref(), max))
            .collect();
        TokenBatch::from_encoded(&enc)
    }

    pub fn tokenize_pairs<S: AsRef<str>>(&self, pairs: &[(S, S)]) -> Result<TokenBatch> {
        let max = self.spec.arch.max_seq_len;
        let enc: Vec<Encoded> = pairs
            .iter()
            .map(|(a, b)| self.tokenizer.encode_pair(a.as_ref(), b.as_ref(), max))
            .collect();
        TokenBatch::from_encoded(&enc)
    }

    fn weight(&self, var: &Var, trainable: bool) -> Tensor {
        if trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }

    fn param(&self, name: &str) -> Tensor {
        let var = &self
            .params
            .iter()
            .find(|(n, _)| n == name)
            .expect("embedding parameter present")
            .1;
        self.weight(var, self.embeddings_trainable)
    }

    /// Runs the encoder over a padded batch.
    pub fn forward(
        &self,
        batch: &TokenBatch,
        opts: &EncodeOptions,
        hooks: Option<&dyn SiteHook>,
        mode: Mode<'_>,
    ) -> Result<EncodeOutput> {
        let arch = &self.spec.arch;
        let n = self.n_layers();
        if let Some(bad) = opts.tap_layers.iter().find(|l| **l == 0 || **l > n) {
            return Err(Error::Config(format!("tap layer {bad} outside 1..={n}")));
        }
        let (b, t) = batch.ids.dims2()?;
        let d = arch.hidden;
        let heads = arch.n_heads;
        let dh = arch.head_dim();
        let p = arch.hidden_dropout;

        let word = self.param("embeddings.word_embeddings.weight");
        let pos = self.param("embeddings.position_embeddings.weight");
        let typ = self.param("embeddings.token_type_embeddings.weight");
        let ids = batch.ids.flatten_all()?;
        let mut x = word.index_select(&ids, 0)?.reshape((b, t, d))?;
        let pos_ids = Tensor::arange(
            arch.position_offset as u32,
            (arch.position_offset + t) as u32,
            &device(),
        )?;
        x = x.broadcast_add(&pos.index_select(&pos_ids, 0)?)?;
        x = x.broadcast_add(&typ.i(0)?)?;
        x = layer_norm(
            &x,
            &self.param("embeddings.LayerNorm.weight"),
            &self.param("embeddings.LayerNorm.bias"),
            arch.layer_norm_eps,
        )?;
        x = mode.dropout(&x, p)?;

        let key_bias = ((batch.mask.ones_like()? - &batch.mask)? * -1e9)?.reshape((b, 1, 1, t))?;
        let scale = (dh as f64).powf(-0.5);
        let mut cls_by_layer = BTreeMap::new();
        let mut gates = Vec::new();
        let mut final_cls = None;

        for (idx, lp) in self.layers.iter().enumerate() {
            let layer = idx + 1;
            let tr = self.is_layer_trainable(layer);
            let w = |pair: &(Var, Var)| (self.weight(&pair.0, tr), self.weight(&pair.1, tr));
            let mut site = |site: HookSite, input: &Tensor, pair: &(Var, Var)| -> Result<Tensor> {
                let (wt, bs) = w(pair);
                let base = linear(input, &wt, Some(&bs))?;
                match hooks {
                    Some(h) => {
                        let out = h.adapt(layer, site, input, &base)?;
                        if let Some(g) = out.gate {
                            gates.push((layer, site, g));
                        }
                        Ok(out.output)
                    }
                    None => Ok(base),
                }
            };

            let flat = x.reshape((b * t, d))?;
            let split = |y: Tensor| -> Result<Tensor> {
                Ok(y.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?)
            };
            let q = split(site(HookSite::Query, &flat, &lp.query)?)?;
            let k = split(site(HookSite::Key, &flat, &lp.key)?)?;
            let v = split(site(HookSite::Value, &flat, &lp.value)?)?;
            let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(&key_bias)?;
            let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
            let attn = mode.dropout(&attn, p)?;
            let ctx = attn
                .matmul(&v)?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b * t, d))?;
            let attn_out = mode.dropout(&site(HookSite::AttentionOutput, &ctx, &lp.attn_out)?, p)?;
            let (g1, b1) = w(&lp.attn_ln);
            let h1 = layer_norm(&(flat + attn_out)?, &g1, &b1, arch.layer_norm_eps)?;
            let (wi, bi) = w(&lp.ffn_in);
            let inter = linear(&h1, &wi, Some(&bi))?.gelu_erf()?;
            let ffn = mode.dropout(&site(HookSite::FfnOutput, &inter, &lp.ffn_out)?, p)?;
            let (g2, b2) = w(&lp.out_ln);
            let h2 = layer_norm(&(h1 + ffn)?, &g2, &b2, arch.layer_norm_eps)?;
            x = h2.reshape((b, t, d))?;

            if opts.tap_layers.contains(&layer) {
                cls_by_layer.insert(layer, x.i((.., 0, ..))?);
            }
            if opts.barrier_after == Some(layer) {
                x = x.detach();
            }
            if opts.stop_after == Some(layer) {
                break;
            }
            if layer == n {
                final_cls = Some(x.i((.., 0, ..))?);
            }
        }

        Ok(EncodeOutput {
            cls_by_layer,
            final_cls,
            gates,
            token_mask: batch.mask.flatten_all()?,
            truncated: batch.truncated.clone(),
        })
    }

    /// Encodes one text in evaluation mode without adapters.
    pub fn encode(&self, text: &str, tap_layers: &BTreeSet<usize>) -> Result<EncodeResult> {
        self.encode_with(text, tap_layers, None)
    }

    pub fn encode_with(
        &self,
        text: &str,
        tap_layers: &BTreeSet<usize>,
        hooks: Option<&dyn SiteHook>,
    ) -> Result<EncodeResult> {
        let batch = self.tokenize_single(&[text])?;
        let out = self.forward(
            &batch,
            &EncodeOptions {
                tap_layers: tap_layers.clone(),
                ..EncodeOptions::default()
            },
            hooks,
            Mode::Eval,
        )?;
        let mut cls_by_layer = BTreeMap::new();
        for (l, t) in &out.cls_by_layer {
            cls_by_layer.insert(*l, tensor::to_vec1(t)?);
        }
        let final_cls = tensor::to_vec1(out.final_cls.as_ref().expect("full pass"))?;
        if !final_cls.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("encoder produced non-finite values".into()));
        }
        Ok(EncodeResult {
            cls_by_layer,
            final_cls,
            truncated: out.truncated[0],
        })
    }
}
