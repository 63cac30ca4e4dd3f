//! HiDAC assembly and the fine-tuning baseline.
//!
//! Both arguments go through the same frozen encoder and adapter stack
//! separately. Final-layer `[CLS]` vectors `u`, `v` are fused for the
//! classifier; the tap-layer `[CLS]` vectors are averaged into `h` for the
//! contrastive objective.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adapters::{default_tap_layer, AdapterPlacement, AdapterStack, Block};
use crate::backbone::{EncodeOptions, EncodeOutput, Encoder, FreezeReport, SiteHook, TokenBatch};
use crate::error::{Error, Result};
use crate::losses::LabelPrototypes;
use crate::relsdata::{apply_ordering, OrderingStrategy, RelationInstance, UnifiedLabel, NUM_LABELS};
use crate::tensor::{self, linear, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `[u; v; u − v; u * v]`
    Enhanced,
    /// `[u; v]`
    Concat,
}

impl FusionMode {
    pub fn width(self, d: usize) -> usize {
        match self {
            FusionMode::Enhanced => 4 * d,
            FusionMode::Concat => 2 * d,
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "enhanced" => Ok(Self::Enhanced),
            "concat" => Ok(Self::Concat),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

/// How the two losses reach the adapter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientRouting {
    /// Lower block sees only the contrastive loss, upper block and head only
    /// cross-entropy.
    Strict,
    /// Both losses flow everywhere.
    Soft,
}

impl FromStr for GradientRouting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(Self::Strict),
            "soft" => Ok(Self::Soft),
            _ => Err(Error::Config(format!("unknown gradient routing {s:?}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Enhanced => "enhanced",
            FusionMode::Concat => "concat",
        })
    }
}

fn check_pair(u: &Tensor, v: &Tensor) -> Result<()> {
    if u.dims() != v.dims() {
        return Err(Error::Shape(format!("fusion inputs {:?} and {:?}", u.dims(), v.dims())));
    }
    Ok(())
}

/// Fuses along the last axis; works for vectors and row batches alike.
pub fn fuse(u: &Tensor, v: &Tensor, mode: FusionMode) -> Result<Tensor> {
    check_pair(u, v)?;
    let last = u.rank() - 1;
    Ok(match mode {
        FusionMode::Concat => Tensor::cat(&[u, v], last)?,
        FusionMode::Enhanced => Tensor::cat(&[u, v, &(u - v)?, &(u * v)?], last)?,
    })
}

pub fn pool_contrastive(u_tap: &Tensor, v_tap: &Tensor) -> Result<Tensor> {
    check_pair(u_tap, v_tap)?;
    Ok(((u_tap + v_tap)? * 0.5)?)
}

/// Feed-forward classifier: GELU between layers, dropout before each linear.
#[derive(Debug, Clone)]
pub struct MlpHead {
    layers: Vec<(Var, Var)>,
    dropout: f64,
}

impl MlpHead {
    /// `widths` lists every layer width, input first, logits last.
    pub fn new(widths: &[usize], dropout: f64, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid head widths {widths:?}")));
        }
        let mut rng = tensor::seeded_rng(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let weight = tensor::normal_var(&mut rng, &[w[1], w[0]], (w[0] as f64).powf(-0.5))?;
                let bias = tensor::const_var(&[w[1]], 0.0)?;
                Ok((weight, bias))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, dropout })
    }

    /// The default shape `4d → d → d/2 → 17` (input width follows fusion).
    pub fn for_fusion(d: usize, fusion: FusionMode, dropout: f64, seed: u64) -> Result<Self> {
        Self::new(&[fusion.width(d), d, (d / 2).max(1), NUM_LABELS], dropout, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.dims()[1]
    }

    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = mode.dropout(&h, self.dropout)?;
            h = linear(&h, w.as_tensor(), Some(b.as_tensor()))?;
            if i < last {
                h = h.gelu_erf()?;
            }
        }
        Ok(h)
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("head.{i}.weight"), w.clone()));
            out.push((format!("head.{i}.bias"), b.clone()));
        }
        out
    }
}

/// RoBERTa-style sequence classification head: dense, tanh, projection.
#[derive(Debug, Clone)]
pub struct ClassificationHead {
    dense: (Var, Var),
    out_proj: (Var, Var),
    dropout: f64,
}

impl ClassificationHead {
    pub fn new(d: usize, dropout: f64, seed: u64) -> Result<Self> {
        let mut rng = tensor::seeded_rng(seed);
        let std = (d as f64).powf(-0.5);
        Ok(Self {
            dense: (tensor::normal_var(&mut rng, &[d, d], std)?, tensor::const_var(&[d], 0.0)?),
            out_proj: (
                tensor::normal_var(&mut rng, &[NUM_LABELS, d], std)?,
                tensor::const_var(&[NUM_LABELS], 0.0)?,
            ),
            dropout,
        })
    }

    pub fn forward(&self, cls: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        let x = mode.dropout(cls, self.dropout)?;
        let x = linear(&x, self.dense.0.as_tensor(), Some(self.dense.1.as_tensor()))?.tanh()?;
        let x = mode.dropout(&x, self.dropout)?;
        linear(&x, self.out_proj.0.as_tensor(), Some(self.out_proj.1.as_tensor()))
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        vec![
            ("classifier.dense.weight".into(), self.dense.0.clone()),
            ("classifier.dense.bias".into(), self.dense.1.clone()),
            ("classifier.out_proj.weight".into(), self.out_proj.0.clone()),
            ("classifier.out_proj.bias".into(), self.out_proj.1.clone()),
        ]
    }
}

/// Argmax with ties going to the lower canonical index.
pub fn argmax_label(logits: &[f64]) -> Result<UnifiedLabel> {
    if logits.len() != NUM_LABELS {
        return Err(Error::Shape(format!("expected {NUM_LABELS} logits, got {}", logits.len())));
    }
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x.is_nan() {
            return Err(Error::Numeric("NaN logit".into()));
        }
        if x > logits[best] {
            best = i;
        }
    }
    Ok(UnifiedLabel::from_index(best).expect("index below label count"))
}

fn ordered_texts(instances: &[&RelationInstance], ordering: OrderingStrategy) -> Result<(Vec<String>, Vec<String>)> {
    let mut first = Vec::with_capacity(instances.len());
    let mut second = Vec::with_capacity(instances.len());
    for inst in instances {
        if inst.masked {
            return Err(Error::Input(format!(
                "instance {} has masked argument text and cannot be encoded",
                inst.id
            )));
        }
        let pair = apply_ordering(inst, ordering);
        first.push(pair.first);
        second.push(pair.second);
    }
    Ok((first, second))
}

/// Anything that maps relation instances to 17 logits.
pub trait RelationClassifier {
    fn logits(&self, instances: &[&RelationInstance], mode: Mode<'_>) -> Result<Tensor>;

    /// Evaluation-mode predictions in chunks of `batch` instances.
    fn predict(&self, instances: &[RelationInstance], batch: usize) -> Result<Vec<UnifiedLabel>> {
        let refs: Vec<&RelationInstance> = instances.iter().collect();
        let mut out = Vec::with_capacity(instances.len());
        for chunk in refs.chunks(batch.max(1)) {
            let logits = self.logits(chunk, Mode::Eval)?.to_vec2::<f64>()?;
            for row in logits {
                out.push(argmax_label(&row)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HidacConfig {
    pub placement: AdapterPlacement,
    /// Defaults to a third of the encoder depth (8 of 24).
    pub tap_layer: Option<usize>,
    pub fusion: FusionMode,
    pub routing: GradientRouting,
    pub ordering: OrderingStrategy,
    pub head_dropout: f64,
    pub seed: u64,
}

impl HidacConfig {
    pub fn full_scale() -> Self {
        Self {
            placement: AdapterPlacement::default(),
            tap_layer: Some(8),
            fusion: FusionMode::Enhanced,
            routing: GradientRouting::Strict,
            ordering: OrderingStrategy::Natural,
            head_dropout: 0.1,
            seed: 42,
        }
    }

    /// Desk-scale preset: rank 4, α 8, no head dropout.
    pub fn toy(n_layers: usize) -> Self {
        Self {
            head_dropout: 0.0,
            ..Self::scaled(n_layers, 4, 8.0)
        }
    }

    /// Placement and tap scaled to a shallow encoder.
    pub fn scaled(n_layers: usize, rank: usize, alpha: f64) -> Self {
        Self {
            placement: AdapterPlacement::scaled(n_layers, rank, alpha),
            tap_layer: Some(default_tap_layer(n_layers)),
            ..Self::full_scale()
        }
    }
}

/// Batched model output. `gate_stats` maps each mixture layer to its mean
/// gate distribution over real tokens.
pub struct BatchOutput {
    pub logits: Tensor,
    pub h: Tensor,
    pub u: Tensor,
    pub v: Tensor,
    pub gate_stats: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub h_contrastive: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub gate_stats: BTreeMap<usize, Vec<f64>>,
}

pub struct HidacModel {
    encoder: Encoder,
    adapters: AdapterStack,
    prototypes: LabelPrototypes,
    head: MlpHead,
    tap_layer: usize,
    config: HidacConfig,
    base_hash: String,
}

impl HidacModel {
    /// Freezes `encoder` entirely and attaches fresh adapters, head and
    /// prototypes, each from its own seeded stream.
    pub fn new(mut encoder: Encoder, config: HidacConfig) -> Result<Self> {
        let n = encoder.n_layers();
        let tap_layer = config.tap_layer.unwrap_or_else(|| default_tap_layer(n));
        if tap_layer == 0 || tap_layer > n {
            return Err(Error::Config(format!("tap layer {tap_layer} outside 1..={n}")));
        }
        if config.routing == GradientRouting::Strict {
            let p = &config.placement;
            if p.lower.end > tap_layer || p.upper.start <= tap_layer {
                return Err(Error::Config(format!(
                    "strict routing needs the lower block ({}) at or below the tap layer {tap_layer} \
                     and the upper block ({}) above it",
                    p.lower, p.upper
                )));
            }
        }
        encoder.set_trainable(0.0)?;
        let base_hash = encoder.base_checksum()?;
        let d = encoder.hidden_dim();
        let seed = config.seed;
        let adapters = AdapterStack::new(encoder.arch(), &config.placement, tensor::sub_seed(seed, "adapters"))?;
        let prototypes = LabelPrototypes::new(d, tensor::sub_seed(seed, "prototypes"))?;
        let head = MlpHead::for_fusion(d, config.fusion, config.head_dropout, tensor::sub_seed(seed, "head"))?;
        Ok(Self {
            encoder,
            adapters,
            prototypes,
            head,
            tap_layer,
            config,
            base_hash,
        })
    }

    /// Checksum of the frozen base weights, taken at construction.
    pub fn base_hash(&self) -> &str {
        &self.base_hash
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn adapters(&self) -> &AdapterStack {
        &self.adapters
    }

    pub fn prototypes(&self) -> &LabelPrototypes {
        &self.prototypes
    }

    pub fn head(&self) -> &MlpHead {
        &self.head
    }

    pub fn tap_layer(&self) -> usize {
        self.tap_layer
    }

    pub fn config(&self) -> &HidacConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.hidden_dim()
    }

    fn encode_args(
        &self,
        instances: &[&RelationInstance],
        hooks: Option<&dyn SiteHook>,
        opts: &EncodeOptions,
        mode: Mode<'_>,
    ) -> Result<(EncodeOutput, usize)> {
        let (first, second) = ordered_texts(instances, self.config.ordering)?;
        let texts: Vec<&String> = first.iter().chain(second.iter()).collect();
        let batch: TokenBatch = self.encoder.tokenize_single(&texts)?;
        Ok((self.encoder.forward(&batch, opts, hooks, mode)?, instances.len()))
    }

    fn options(&self) -> EncodeOptions {
        let mut opts = EncodeOptions::taps([self.tap_layer]);
        if self.config.routing == GradientRouting::Strict {
            opts.barrier_after = Some(self.tap_layer);
        }
        opts
    }

    /// Full forward pass over a batch.
    pub fn forward_batch(&self, instances: &[&RelationInstance], mode: Mode<'_>) -> Result<BatchOutput> {
        self.forward_with(instances, Some(&self.adapters), mode)
    }

    /// Same computation with the adapters removed: frozen encoder plus head.
    pub fn forward_base(&self, instances: &[&RelationInstance], mode: Mode<'_>) -> Result<BatchOutput> {
        self.forward_with(instances, None, mode)
    }

    fn forward_with(
        &self,
        instances: &[&RelationInstance],
        hooks: Option<&dyn SiteHook>,
        mode: Mode<'_>,
    ) -> Result<BatchOutput> {
        if instances.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let (out, n) = self.encode_args(instances, hooks, &self.options(), mode)?;
        let fin = out.final_cls.as_ref().expect("full pass yields final [CLS]");
        let tap = &out.cls_by_layer[&self.tap_layer];
        let u = fin.narrow(0, 0, n)?;
        let v = fin.narrow(0, n, n)?;
        let h = pool_contrastive(&tap.narrow(0, 0, n)?, &tap.narrow(0, n, n)?)?;
        let logits = self.head.forward(&fuse(&u, &v, self.config.fusion)?, mode)?;
        tensor::ensure_finite(&logits, "logits")?;
        Ok(BatchOutput {
            logits,
            h,
            u,
            v,
            gate_stats: gate_stats(&out)?,
        })
    }

    /// Tap-layer representation only, through the given adapter stack. Used
    /// for the key side of the instance contrastive loss.
    pub fn contrastive_repr(
        &self,
        instances: &[&RelationInstance],
        adapters: &AdapterStack,
        mode: Mode<'_>,
    ) -> Result<Tensor> {
        let mut opts = EncodeOptions::taps([self.tap_layer]);
        opts.stop_after = Some(self.tap_layer);
        let (out, n) = self.encode_args(instances, Some(adapters), &opts, mode)?;
        let tap = &out.cls_by_layer[&self.tap_layer];
        pool_contrastive(&tap.narrow(0, 0, n)?, &tap.narrow(0, n, n)?)
    }

    pub fn forward(&self, instance: &RelationInstance) -> Result<ForwardOutput> {
        let out = self.forward_batch(&[instance], Mode::Eval)?;
        Ok(ForwardOutput {
            logits: tensor::to_vec1(&out.logits)?,
            h_contrastive: tensor::to_vec1(&out.h)?,
            u: tensor::to_vec1(&out.u)?,
            v: tensor::to_vec1(&out.v)?,
            gate_stats: out.gate_stats,
        })
    }

    pub fn classify(&self, instance: &RelationInstance) -> Result<UnifiedLabel> {
        argmax_label(&self.forward(instance)?.logits)
    }

    pub fn lower_vars(&self) -> Vec<(String, Var)> {
        prefixed("adapters.", self.adapters.block_vars(Block::Lower))
    }

    pub fn upper_vars(&self) -> Vec<(String, Var)> {
        prefixed("adapters.", self.adapters.block_vars(Block::Upper))
    }

    pub fn head_vars(&self) -> Vec<(String, Var)> {
        self.head.named_vars()
    }

    pub fn prototype_vars(&self) -> Vec<(String, Var)> {
        vec![("prototypes".into(), self.prototypes.var().clone())]
    }

    /// Everything the optimizer may touch, in checkpoint order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let mut v = prefixed("adapters.", self.adapters.named_vars());
        v.extend(self.head_vars());
        v.extend(self.prototype_vars());
        v
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn load_state(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        load_vars(&self.trainable_vars(), tensors)
    }
}

impl RelationClassifier for HidacModel {
    fn logits(&self, instances: &[&RelationInstance], mode: Mode<'_>) -> Result<Tensor> {
        Ok(self.forward_batch(instances, mode)?.logits)
    }
}

fn prefixed(prefix: &str, vars: Vec<(String, Var)>) -> Vec<(String, Var)> {
    vars.into_iter().map(|(n, v)| (format!("{prefix}{n}"), v)).collect()
}

pub(crate) fn load_vars(vars: &[(String, Var)], tensors: &HashMap<String, Tensor>) -> Result<()> {
    for (name, var) in vars {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Load(format!("checkpoint lacks tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Load(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(tensor::DTYPE)?)?;
    }
    Ok(())
}

/// Masked mean gate distribution per mixture layer, averaged over sites.
fn gate_stats(out: &EncodeOutput) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mask = out.token_mask.unsqueeze(1)?;
    let real = tensor::to_scalar(&out.token_mask.sum_all()?)?;
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (layer, _, g) in &out.gates {
        let mean = tensor::to_vec1(&(g.detach().broadcast_mul(&mask)?.sum(0)? / real)?)?;
        let entry = acc.entry(*layer).or_insert_with(|| (vec![0.0; mean.len()], 0));
        for (a, m) in entry.0.iter_mut().zip(&mean) {
            *a += m;
        }
        entry.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(l, (sum, k))| (l, sum.into_iter().map(|s| s / k as f64).collect()))
        .collect())
}

/// Joint pair encoding with a sequence classification head; the fine-tuning
/// baseline. Encoder trainability follows the unfreeze ratio.
pub struct BaselineModel {
    encoder: Encoder,
    head: ClassificationHead,
    ordering: OrderingStrategy,
    freeze: FreezeReport,
    unfreeze_ratio: f64,
    seed: u64,
    base_hash: String,
}

impl BaselineModel {
    pub fn new(mut encoder: Encoder, unfreeze_ratio: f64, ordering: OrderingStrategy, seed: u64) -> Result<Self> {
        let base_hash = encoder.base_checksum()?;
        let freeze = encoder.set_trainable(unfreeze_ratio)?;
        let head = ClassificationHead::new(
            encoder.hidden_dim(),
            encoder.arch().hidden_dropout,
            tensor::sub_seed(seed, "classifier"),
        )?;
        Ok(Self {
            encoder,
            head,
            ordering,
            freeze,
            unfreeze_ratio,
            seed,
            base_hash,
        })
    }

    /// Checksum of the base weights before any fine-tuning.
    pub fn base_hash(&self) -> &str {
        &self.base_hash
    }

    pub fn unfreeze_ratio(&self) -> f64 {
        self.unfreeze_ratio
    }

    pub fn ordering(&self) -> OrderingStrategy {
        self.ordering
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn freeze_report(&self) -> &FreezeReport {
        &self.freeze
    }

    pub fn head_vars(&self) -> Vec<(String, Var)> {
        self.head.named_vars()
    }

    /// Head plus the unfrozen encoder parameters.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let mut v = prefixed("encoder.", self.encoder.trainable_vars());
        v.extend(self.head_vars());
        v
    }

    pub fn load_state(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        load_vars(&self.trainable_vars(), tensors)
    }
}

impl RelationClassifier for BaselineModel {
    fn logits(&self, instances: &[&RelationInstance], mode: Mode<'_>) -> Result<Tensor> {
        let (first, second) = ordered_texts(instances, self.ordering)?;
        let pairs: Vec<(&String, &String)> = first.iter().zip(second.iter()).collect();
        let batch = self.encoder.tokenize_pairs(&pairs)?;
        let out = self.encoder.forward(&batch, &EncodeOptions::default(), None, mode)?;
        let cls = out.final_cls.expect("full pass yields final [CLS]");
        let logits = self.head.forward(&cls, mode)?;
        tensor::ensure_finite(&logits, "logits")?;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{load_encoder, EncoderSpec};
    use crate::relsdata::{Direction, Framework};
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
    }

    fn inst(id: &str, a: &str, b: &str) -> RelationInstance {
        RelationInstance {
            id: id.into(),
            corpus_id: "eng.rst.toy".into(),
            language: "eng".into(),
            framework: Framework::Rst,
            arg1_text: a.into(),
            arg2_text: b.into(),
            direction: Direction::Forward,
            label: UnifiedLabel::Causal,
            masked: false,
            extra: Default::default(),
        }
    }

    fn toy_model(routing: GradientRouting) -> HidacModel {
        let enc = load_encoder(&EncoderSpec::toy(4, 16, 7)).unwrap();
        let mut cfg = HidacConfig::scaled(4, 4, 8.0);
        cfg.routing = routing;
        HidacModel::new(enc, cfg).unwrap()
    }

    #[test]
    fn fusion_examples() {
        let z = fuse(&t(&[1.0, 2.0]), &t(&[3.0, 4.0]), FusionMode::Enhanced).unwrap();
        assert_eq!(tensor::to_vec1(&z).unwrap(), vec![1.0, 2.0, 3.0, 4.0, -2.0, -2.0, 3.0, 8.0]);
        let c = fuse(&t(&[1.0, 2.0]), &t(&[3.0, 4.0]), FusionMode::Concat).unwrap();
        assert_eq!(tensor::to_vec1(&c).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let same = fuse(&t(&[1.5, -2.0]), &t(&[1.5, -2.0]), FusionMode::Enhanced).unwrap();
        assert_eq!(tensor::to_vec1(&same).unwrap(), vec![1.5, -2.0, 1.5, -2.0, 0.0, 0.0, 2.25, 4.0]);
        let wide = fuse(&t(&[0.5; 1024]), &t(&[0.25; 1024]), FusionMode::Enhanced).unwrap();
        assert_eq!(wide.dims(), &[4096]);
        assert!(matches!(fuse(&t(&[1.0]), &t(&[1.0, 2.0]), FusionMode::Concat), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_examples() {
        let p = pool_contrastive(&t(&[2.0, 0.0]), &t(&[0.0, 2.0])).unwrap();
        assert_eq!(tensor::to_vec1(&p).unwrap(), vec![1.0, 1.0]);
        let w = pool_contrastive(&t(&[0.3, -0.7]), &t(&[0.3, -0.7])).unwrap();
        assert_eq!(tensor::to_vec1(&w).unwrap(), vec![0.3, -0.7]);
        assert!(matches!(pool_contrastive(&t(&[1.0]), &t(&[1.0, 2.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let mut l = vec![0.0; 17];
        l[UnifiedLabel::Temporal.index()] = 1.0;
        assert_eq!(argmax_label(&l).unwrap(), UnifiedLabel::Temporal);
        l[3] = 1.0;
        l[9] = 1.0;
        assert_eq!(argmax_label(&l).unwrap().index(), 3.min(UnifiedLabel::Temporal.index()));
    }

    #[test]
    fn head_width_follows_fusion() {
        assert_eq!(MlpHead::for_fusion(16, FusionMode::Enhanced, 0.1, 0).unwrap().input_dim(), 64);
        assert_eq!(MlpHead::for_fusion(16, FusionMode::Concat, 0.1, 0).unwrap().input_dim(), 32);
    }

    #[test]
    fn fresh_model_matches_bare_encoder() {
        let m = toy_model(GradientRouting::Strict);
        let data = [inst("a", "the rain fell", "so we stayed in"), inst("b", "he left", "she stayed")];
        let refs: Vec<&RelationInstance> = data.iter().collect();
        let with = tensor::to_vec1(&m.forward_batch(&refs, Mode::Eval).unwrap().logits).unwrap();
        let base = tensor::to_vec1(&m.forward_base(&refs, Mode::Eval).unwrap().logits).unwrap();
        for (a, b) in with.iter().zip(&base) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_single_and_h_is_symmetric() {
        let m = toy_model(GradientRouting::Strict);
        let data = [
            inst("a", "the rain fell hard all night", "so we stayed in"),
            inst("b", "he left", "although she asked him to stay for dinner"),
        ];
        let refs: Vec<&RelationInstance> = data.iter().collect();
        let batch = m.forward_batch(&refs, Mode::Eval).unwrap();
        assert_eq!(batch.logits.dims(), &[2, 17]);
        assert_eq!(batch.h.dims(), &[2, 16]);
        let rows = batch.logits.to_vec2::<f64>().unwrap();
        for (i, d) in data.iter().enumerate() {
            let single = m.forward(d).unwrap();
            for (a, b) in single.logits.iter().zip(&rows[i]) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        let swapped = inst("s", &data[0].arg2_text, &data[0].arg1_text);
        let f = m.forward(&data[0]).unwrap();
        let g = m.forward(&swapped).unwrap();
        for (a, b) in f.h_contrastive.iter().zip(&g.h_contrastive) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_ne!(f.logits, g.logits);
    }

    #[test]
    fn gate_stats_are_distributions() {
        let m = toy_model(GradientRouting::Strict);
        let out = m.forward(&inst("a", "one two three", "four five")).unwrap();
        assert_eq!(out.gate_stats.keys().copied().collect::<Vec<_>>(), vec![3, 4]);
        for row in out.gate_stats.values() {
            assert_eq!(row.len(), 6);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_instance_is_input_error() {
        let m = toy_model(GradientRouting::Strict);
        let mut x = inst("m", "_", "_");
        x.masked = true;
        assert!(matches!(m.forward(&x), Err(Error::Input(_))));
    }

    #[test]
    fn strict_placement_must_straddle_tap() {
        let enc = load_encoder(&EncoderSpec::toy(4, 16, 7)).unwrap();
        let mut cfg = HidacConfig::scaled(4, 4, 8.0);
        cfg.tap_layer = Some(3);
        assert!(matches!(HidacModel::new(enc, cfg), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_freeze_and_logits() {
        let enc = load_encoder(&EncoderSpec::toy(4, 16, 7)).unwrap();
        let m = BaselineModel::new(enc, 0.5, OrderingStrategy::Natural, 1).unwrap();
        assert_eq!(m.freeze_report().trainable_layer_indices, vec![3, 4]);
        let data = [inst("a", "x y", "z")];
        let refs: Vec<&RelationInstance> = data.iter().collect();
        assert_eq!(m.logits(&refs, Mode::Eval).unwrap().dims(), &[1, 17]);
        assert!(m.trainable_vars().iter().any(|(n, _)| n.starts_with("encoder.encoder.layer.3.")));
        assert!(!m.trainable_vars().iter().any(|(n, _)| n.starts_with("encoder.encoder.layer.1.")));
    }
}
