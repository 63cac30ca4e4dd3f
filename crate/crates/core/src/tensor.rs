//! Small tensor helpers shared by the encoder, adapters and heads.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from `seed` and a label.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub fn normal_var(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Var> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?)
}

pub fn const_var(shape: &[usize], value: f64) -> Result<Var> {
    let n: usize = shape.iter().product();
    Ok(Var::from_tensor(&Tensor::from_vec(vec![value; n], shape, &device())?)?)
}

/// `x · Wᵀ + b` over the last axis of a 2-D input.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.matmul(&weight.t()?)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Inverted dropout with its own seeded stream.
#[derive(Debug)]
pub struct Dropout {
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: RefCell::new(seeded_rng(seed)),
        }
    }

    pub fn apply(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?;
        Ok(x.mul(&mask)?)
    }
}

/// Evaluation runs without dropout; training threads a seeded stream through.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Eval,
    Train(&'a Dropout),
}

impl Mode<'_> {
    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train(d) => d.apply(x, p),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub fn to_vec1(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

pub fn to_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if to_vec1(t)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains NaN or infinite values")))
    }
}

/// SHA-256 over named tensors, in the given order.
pub fn checksum<'a>(named: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        h.update([0u8]);
        for v in to_vec1(t)? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sq_norm(t: &Tensor) -> Result<f64> {
    to_scalar(&t.sqr()?.sum_all()?)
}
