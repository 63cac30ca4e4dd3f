//! Low-rank adapters hooked onto frozen linear sublayers.
//!
//! The lower block uses plain LoRA, the upper block a soft mixture of LoRA
//! experts with a per-token softmax gate. Every `B` starts at zero, so a
//! fresh stack leaves the encoder output unchanged.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use candle_core::{Tensor, Var, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ArchConfig, Encoder, HookOutput, HookSite, SiteHook};
use crate::error::{Error, Result};
use crate::tensor::{self, linear};

/// Trainable parameters of one LoRA adapter: `r * (d_in + d_out)`.
pub fn lora_param_count(rank: usize, d_in: usize, d_out: usize) -> usize {
    rank * (d_in + d_out)
}

#[derive(Debug, Clone)]
pub struct LoraLayer {
    a: Var,
    b: Var,
    rank: usize,
    alpha: f64,
    d_in: usize,
    d_out: usize,
}

impl LoraLayer {
    /// `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn new(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_hyper(rank, alpha)?;
        Ok(Self {
            a: tensor::normal_var(rng, &[rank, d_in], (d_in as f64).powf(-0.5))?,
            b: tensor::const_var(&[d_out, rank], 0.0)?,
            rank,
            alpha,
            d_in,
            d_out,
        })
    }

    /// Builds a layer from explicit `A (r × d_in)` and `B (d_out × r)`.
    pub fn from_tensors(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Self> {
        let (rank, d_in) = a.dims2()?;
        let (d_out, rank_b) = b.dims2()?;
        if rank != rank_b {
            return Err(Error::Shape(format!("A has rank {rank}, B has rank {rank_b}")));
        }
        check_hyper(rank, alpha)?;
        Ok(Self {
            a: Var::from_tensor(&a.to_dtype(tensor::DTYPE)?)?,
            b: Var::from_tensor(&b.to_dtype(tensor::DTYPE)?)?,
            rank,
            alpha,
            d_in,
            d_out,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a(&self) -> &Var {
        &self.a
    }

    pub fn b(&self) -> &Var {
        &self.b
    }

    pub fn param_count(&self) -> usize {
        lora_param_count(self.rank, self.d_in, self.d_out)
    }

    fn check(&self, x: &Tensor, base_out: &Tensor) -> Result<()> {
        let (n, d_in) = x.dims2()?;
        let (m, d_out) = base_out.dims2()?;
        if d_in != self.d_in || d_out != self.d_out || n != m {
            return Err(Error::Shape(format!(
                "LoRA {}→{} applied to x {:?} with base output {:?}",
                self.d_in,
                self.d_out,
                x.dims(),
                base_out.dims()
            )));
        }
        Ok(())
    }

    /// `(alpha / r) · B (A x)` for every row of `x`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let down = linear(x, self.a.as_tensor(), None)?;
        Ok((linear(&down, self.b.as_tensor(), None)? * self.scaling())?)
    }

    pub fn forward(&self, x: &Tensor, base_out: &Tensor) -> Result<Tensor> {
        self.check(x, base_out)?;
        Ok((base_out + self.delta(x)?)?)
    }

    fn deep_copy(&self) -> Result<Self> {
        Self::from_tensors(self.a.as_tensor(), self.b.as_tensor(), self.alpha)
    }
}

fn check_hyper(rank: usize, alpha: f64) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("LoRA alpha must be positive, got {alpha}")));
    }
    Ok(())
}

fn as_rows(t: &Tensor) -> Result<Tensor> {
    Ok(match t.rank() {
        1 => t.unsqueeze(0)?,
        2 => t.clone(),
        r => return Err(Error::Shape(format!("expected a vector or matrix, got rank {r}"))),
    })
}

/// `base_out + (alpha / r) · B A x`. Accepts single vectors or row batches.
pub fn lora_forward(layer: &LoraLayer, x: &Tensor, base_out: &Tensor) -> Result<Tensor> {
    let out = layer.forward(&as_rows(x)?, &as_rows(base_out)?)?;
    Ok(if x.rank() == 1 { out.squeeze(0)? } else { out })
}

/// Several LoRA experts mixed by a softmax gate over the token input.
#[derive(Debug, Clone)]
pub struct MoeLoraLayer {
    experts: Vec<LoraLayer>,
    gate: Var,
}

impl MoeLoraLayer {
    pub fn new(
        d_in: usize,
        d_out: usize,
        n_experts: usize,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Config("a mixture adapter needs at least one expert".into()));
        }
        let experts = (0..n_experts)
            .map(|_| LoraLayer::new(d_in, d_out, rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        let gate = tensor::normal_var(rng, &[n_experts, d_in], 0.02)?;
        Ok(Self { experts, gate })
    }

    pub fn from_parts(experts: Vec<LoraLayer>, gate: &Tensor) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Config("a mixture adapter needs at least one expert".into()));
        }
        let (e, d_in) = gate.dims2()?;
        if e != experts.len() || experts.iter().any(|x| x.d_in != d_in) {
            return Err(Error::Shape(format!(
                "gate {:?} does not match {} experts",
                gate.dims(),
                experts.len()
            )));
        }
        Ok(Self {
            experts,
            gate: Var::from_tensor(&gate.to_dtype(tensor::DTYPE)?)?,
        })
    }

    pub fn experts(&self) -> &[LoraLayer] {
        &self.experts
    }

    pub fn gate(&self) -> &Var {
        &self.gate
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(LoraLayer::param_count).sum::<usize>() + self.gate.elem_count()
    }

    /// Per-row gate distribution `softmax(G x)`, shape `(rows, experts)`.
    pub fn gate_weights(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&linear(x, self.gate.as_tensor(), None)?, D::Minus1)?)
    }

    pub fn forward(&self, x: &Tensor, base_out: &Tensor) -> Result<(Tensor, Tensor)> {
        self.experts[0].check(x, base_out)?;
        let weights = self.gate_weights(x)?;
        let mut out = base_out.clone();
        for (e, expert) in self.experts.iter().enumerate() {
            let w = weights.narrow(1, e, 1)?;
            out = (out + expert.delta(x)?.broadcast_mul(&w)?)?;
        }
        Ok((out, weights))
    }

    fn deep_copy(&self) -> Result<Self> {
        let experts = self
            .experts
            .iter()
            .map(LoraLayer::deep_copy)
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(experts, self.gate.as_tensor())
    }
}

/// Mixture forward for a vector or row batch; returns the output and gates.
pub fn moe_forward(layer: &MoeLoraLayer, x: &Tensor, base_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (out, gates) = layer.forward(&as_rows(x)?, &as_rows(base_out)?)?;
    if x.rank() == 1 {
        Ok((out.squeeze(0)?, gates.squeeze(0)?))
    } else {
        Ok((out, gates))
    }
}

/// Inclusive, 1-based layer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }

    pub fn len(&self) -> usize {
        if self.end >= self.start {
            self.end - self.start + 1
        } else {
            0
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }

    fn overlaps(&self, other: &LayerRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// Plain LoRA; trained by the contrastive loss.
    Lower,
    /// Mixture-of-experts LoRA; trained by cross-entropy.
    Upper,
}

/// Where adapters go and how big they are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPlacement {
    pub lower: LayerRange,
    pub upper: LayerRange,
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Hooked sublayers in every adapted layer.
    pub sites: Vec<HookSite>,
}

impl Default for AdapterPlacement {
    /// Full-scale layout: LoRA on 1–8, mixtures on 12–24, r = 128, α = 256.
    fn default() -> Self {
        Self {
            lower: LayerRange::new(1, 8),
            upper: LayerRange::new(12, 24),
            n_experts: 6,
            rank: 128,
            alpha: 256.0,
            sites: vec![HookSite::Query, HookSite::Value],
        }
    }
}

impl AdapterPlacement {
    /// The full-scale split scaled to `n_layers`: the lower block ends at the
    /// tap layer `ceil(n/3)`, the upper block starts at `max(tap + 1, round(n/2))`.
    pub fn scaled(n_layers: usize, rank: usize, alpha: f64) -> Self {
        let tap = default_tap_layer(n_layers);
        let upper_start = (tap + 1).max((n_layers as f64 / 2.0).round() as usize);
        Self {
            lower: LayerRange::new(1, tap),
            upper: LayerRange::new(upper_start.min(n_layers), n_layers),
            rank,
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        for (name, r) in [("lower", self.lower), ("upper", self.upper)] {
            if r.is_empty() || r.start == 0 || r.end > n_layers {
                return Err(Error::Config(format!(
                    "{name} adapter range {r} outside 1..={n_layers}"
                )));
            }
        }
        if self.lower.overlaps(&self.upper) {
            return Err(Error::Config(format!(
                "adapter ranges {} and {} overlap",
                self.lower, self.upper
            )));
        }
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be positive".into()));
        }
        check_hyper(self.rank, self.alpha)?;
        if self.sites.is_empty() {
            return Err(Error::Config("no hook sites selected".into()));
        }
        let mut sorted = self.sites.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.sites.len() {
            return Err(Error::Config("duplicate hook site".into()));
        }
        Ok(())
    }

    pub fn block_of(&self, layer: usize) -> Option<Block> {
        if self.lower.contains(layer) {
            Some(Block::Lower)
        } else if self.upper.contains(layer) {
            Some(Block::Upper)
        } else {
            None
        }
    }

    fn site_layers(&self) -> impl Iterator<Item = (usize, Block)> + '_ {
        self.lower
            .layers()
            .map(|l| (l, Block::Lower))
            .chain(self.upper.layers().map(|l| (l, Block::Upper)))
    }

    /// Every adapter tensor by checkpoint key, without allocating anything.
    pub fn param_shapes(&self, arch: &ArchConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (layer, block) in self.site_layers() {
            for &site in &self.sites {
                let (d_in, d_out) = arch.site_dims(site);
                let prefix = site_key(layer, site);
                match block {
                    Block::Lower => {
                        out.push((format!("{prefix}.A"), vec![self.rank, d_in]));
                        out.push((format!("{prefix}.B"), vec![d_out, self.rank]));
                    }
                    Block::Upper => {
                        for e in 0..self.n_experts {
                            out.push((format!("{prefix}.expert{e}.A"), vec![self.rank, d_in]));
                            out.push((format!("{prefix}.expert{e}.B"), vec![d_out, self.rank]));
                        }
                        out.push((format!("{prefix}.gate"), vec![self.n_experts, d_in]));
                    }
                }
            }
        }
        out
    }

    /// Closed form: Σ_sites lora_param_count, times experts plus gate for mixtures.
    pub fn closed_form_param_count(&self, arch: &ArchConfig) -> usize {
        self.sites
            .iter()
            .map(|&site| {
                let (d_in, d_out) = arch.site_dims(site);
                let lora = lora_param_count(self.rank, d_in, d_out);
                self.lower.len() * lora
                    + self.upper.len() * (self.n_experts * lora + self.n_experts * d_in)
            })
            .sum()
    }
}

/// Tap layer used when none is configured: 8 for 24 layers, `ceil(n/3)` in general.
pub fn default_tap_layer(n_layers: usize) -> usize {
    n_layers.div_ceil(3).max(1)
}

fn site_key(layer: usize, site: HookSite) -> String {
    format!("layer{layer:02}.{site}")
}

#[derive(Debug, Clone)]
pub enum SiteAdapter {
    Lora(LoraLayer),
    Moe(MoeLoraLayer),
}

/// All adapters of one encoder, keyed by `(layer, site)`.
#[derive(Debug, Clone)]
pub struct AdapterStack {
    placement: AdapterPlacement,
    sites: BTreeMap<(usize, HookSite), SiteAdapter>,
}

/// Creates adapters for `placement` on `encoder`. Base weights are not touched.
pub fn attach_adapters(encoder: &Encoder, placement: &AdapterPlacement, seed: u64) -> Result<AdapterStack> {
    AdapterStack::new(encoder.arch(), placement, seed)
}

impl AdapterStack {
    pub fn new(arch: &ArchConfig, placement: &AdapterPlacement, seed: u64) -> Result<Self> {
        placement.validate(arch.n_layers)?;
        let mut rng = tensor::seeded_rng(seed);
        let mut sites = BTreeMap::new();
        for (layer, block) in placement.site_layers() {
            for &site in &placement.sites {
                let (d_in, d_out) = arch.site_dims(site);
                let adapter = match block {
                    Block::Lower => SiteAdapter::Lora(LoraLayer::new(
                        d_in,
                        d_out,
                        placement.rank,
                        placement.alpha,
                        &mut rng,
                    )?),
                    Block::Upper => SiteAdapter::Moe(MoeLoraLayer::new(
                        d_in,
                        d_out,
                        placement.n_experts,
                        placement.rank,
                        placement.alpha,
                        &mut rng,
                    )?),
                };
                sites.insert((layer, site), adapter);
            }
        }
        Ok(Self {
            placement: placement.clone(),
            sites,
        })
    }

    pub fn placement(&self) -> &AdapterPlacement {
        &self.placement
    }

    pub fn sites(&self) -> &BTreeMap<(usize, HookSite), SiteAdapter> {
        &self.sites
    }

    pub fn count_sites(&self, block: Block) -> usize {
        self.sites
            .keys()
            .filter(|(l, _)| self.placement.block_of(*l) == Some(block))
            .count()
    }

    /// Every adapter parameter with its checkpoint key.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for ((layer, site), adapter) in &self.sites {
            let prefix = site_key(*layer, *site);
            match adapter {
                SiteAdapter::Lora(l) => {
                    out.push((format!("{prefix}.A"), l.a.clone()));
                    out.push((format!("{prefix}.B"), l.b.clone()));
                }
                SiteAdapter::Moe(m) => {
                    for (e, l) in m.experts.iter().enumerate() {
                        out.push((format!("{prefix}.expert{e}.A"), l.a.clone()));
                        out.push((format!("{prefix}.expert{e}.B"), l.b.clone()));
                    }
                    out.push((format!("{prefix}.gate"), m.gate.clone()));
                }
            }
        }
        out
    }

    pub fn block_vars(&self, block: Block) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(name, _)| {
                let layer: usize = name[5..7].parse().expect("layer key");
                self.placement.block_of(layer) == Some(block)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn checksum(&self) -> Result<String> {
        let vars = self.named_vars();
        tensor::checksum(vars.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
    }

    /// Independent copy with fresh variables (used for momentum encoders).
    pub fn deep_copy(&self) -> Result<Self> {
        let sites = self
            .sites
            .iter()
            .map(|(k, a)| {
                Ok((
                    *k,
                    match a {
                        SiteAdapter::Lora(l) => SiteAdapter::Lora(l.deep_copy()?),
                        SiteAdapter::Moe(m) => SiteAdapter::Moe(m.deep_copy()?),
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            placement: self.placement.clone(),
            sites,
        })
    }

    /// Overwrites every adapter tensor from `tensors`, checking shapes.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_vars() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Load(format!("missing adapter tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Load(format!(
                    "adapter tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(tensor::DTYPE)?)?;
        }
        Ok(())
    }
}

impl SiteHook for AdapterStack {
    fn adapt(&self, layer: usize, site: HookSite, x: &Tensor, base_out: &Tensor) -> Result<HookOutput> {
        match self.sites.get(&(layer, site)) {
            None => Ok(HookOutput {
                output: base_out.clone(),
                gate: None,
            }),
            Some(SiteAdapter::Lora(l)) => Ok(HookOutput {
                output: l.forward(x, base_out)?,
                gate: None,
            }),
            Some(SiteAdapter::Moe(m)) => {
                let (output, gate) = m.forward(x, base_out)?;
                Ok(HookOutput {
                    output,
                    gate: Some(gate),
                })
            }
        }
    }
}
