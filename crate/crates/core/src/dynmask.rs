//! Timestep-gated pose masking of attention logits.
//!
//! A pose image becomes a binary token mask on the attention grid. A small
//! perceptron maps the sinusoidal timestep embedding to a gate `g ∈ (0,1)`,
//! the soft mask is `(1+g)·m`, and it multiplies the scaled attention logits
//! column-wise (one weight per key) before the row softmax. Background keys
//! therefore get logit exactly zero rather than being excluded.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{
    matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Activation, Linear, Mlp, MlpCache,
    Parameter, Parameterized, RngState, Tensor,
};

/// Logit substituted at background keys in [`MaskMode::AdditiveNegInf`].
pub const NEG_LARGE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPoseMask {
    /// Pixel mask `[H×W]` of zeros and ones.
    pub mask: Tensor,
    /// Patch-level mask of length `N`, row-major over the grid.
    pub token_mask: Tensor,
}

impl BinaryPoseMask {
    /// Mask with every token in the foreground.
    pub fn all_foreground(h: usize, w: usize, tokens: usize) -> Self {
        Self {
            mask: Tensor::full(&[h, w], 1.0),
            token_mask: Tensor::full(&[tokens], 1.0),
        }
    }

    pub fn tokens(&self) -> usize {
        self.token_mask.len()
    }

    pub fn foreground_count(&self) -> usize {
        self.token_mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Thresholds a pose image at zero and any-reduces it onto an `H_g×W_g` grid.
pub fn pose_to_mask(pose_image: &Tensor, grid: (usize, usize)) -> Result<BinaryPoseMask> {
    let (h, w) = pose_image.require_matrix("pose_to_mask")?;
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::Config(format!("grid {gh}x{gw} does not divide pose image {h}x{w}")));
    }
    if pose_image.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Input("pose image has negative entries".into()));
    }
    let mask = pose_image.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let (ph, pw) = (h / gh, w / gw);
    let mut token = vec![0.0; gh * gw];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 1.0 {
                token[(y / ph) * gw + x / pw] = 1.0;
            }
        }
    }
    Ok(BinaryPoseMask {
        mask,
        token_mask: Tensor::vector(token),
    })
}

/// Sinusoidal features of an integer timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepEmbedding {
    pub vector: Tensor,
    pub timestep: usize,
}

impl TimestepEmbedding {
    /// `[sin(t·ω_0), …, sin(t·ω_{h−1}), cos(t·ω_0), …]` with
    /// `ω_i = 10000^(−i/h)`, `h = dim/2`.
    pub fn new(timestep: usize, dim: usize) -> Self {
        let half = dim / 2;
        let mut v = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = timestep as f64 * freq;
            v[i] = arg.sin();
            v[half + i] = arg.cos();
        }
        Self {
            vector: Tensor::vector(v),
            timestep,
        }
    }

    pub fn as_row(&self) -> Tensor {
        self.vector.clone().reshape(&[1, self.vector.len()]).expect("nonempty")
    }
}

/// Two-layer perceptron `C_e → hidden → 1` with a logistic output.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNetwork {
    pub mlp: Mlp,
}

impl GateNetwork {
    pub fn init(embed_dim: usize, hidden: usize, rng: &mut RngState) -> Self {
        Self {
            mlp: Mlp::init("gate", &[embed_dim, hidden, 1], Activation::Relu, Activation::Sigmoid, rng),
        }
    }

    pub fn from_layers(first: Linear, last: Linear) -> Result<Self> {
        if last.out_dim() != 1 {
            return Err(Error::dim("GateNetwork", format!("gate emits {} values, need 1", last.out_dim())));
        }
        Ok(Self {
            mlp: Mlp::new(vec![first, last], Activation::Relu, Activation::Sigmoid)?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn forward_cached(&self, e: &TimestepEmbedding) -> Result<(f64, MlpCache)> {
        let cache = self.mlp.forward_cached(&e.as_row())?;
        Ok((cache.output().data()[0], cache))
    }

    /// Accumulates parameter gradients given `dL/dg`.
    pub fn backward(&mut self, cache: &MlpCache, dg: f64) -> Result<()> {
        self.mlp.backward(cache, &Tensor::from_rows(&[&[dg]]))?;
        Ok(())
    }
}

impl Parameterized for GateNetwork {
    fn params(&self) -> Vec<&Parameter> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.mlp.params_mut()
    }
}

pub fn compute_gate(e: &TimestepEmbedding, params: &GateNetwork) -> Result<f64> {
    Ok(params.forward_cached(e)?.0)
}

/// `values = (1+g)·token_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub values: Tensor,
    pub gate: f64,
}

impl SoftMask {
    /// Multiplier of one on every key: plain attention.
    pub fn ones(tokens: usize) -> Self {
        Self {
            values: Tensor::full(&[tokens], 1.0),
            gate: 0.0,
        }
    }
}

pub fn build_soft_mask(m: &BinaryPoseMask, g: f64) -> SoftMask {
    SoftMask {
        values: m.token_mask.scale(1.0 + g),
        gate: g,
    }
}

/// How the soft mask enters the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// `L' = L ⊙ m̃` for every key, including zero-weight background keys.
    #[default]
    Multiplicative,
    /// As above on foreground keys; background keys get [`NEG_LARGE`].
    AdditiveNegInf,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiplicative" => Ok(MaskMode::Multiplicative),
            "additive_ninf" => Ok(MaskMode::AdditiveNegInf),
            other => Err(Error::Config(format!(
                "unknown mask_mode {other:?} (multiplicative|additive_ninf)"
            ))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Multiplicative => "multiplicative",
            MaskMode::AdditiveNegInf => "additive_ninf",
        })
    }
}

/// Forward intermediates of [`masked_attention`].
#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// `QKᵀ/√d`.
    pub scores: Tensor,
    /// Logits after masking.
    pub logits: Tensor,
    /// Row-softmax of `logits`.
    pub weights: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    /// Gradient with respect to each soft-mask value.
    pub dmask: Tensor,
}

fn check_attention_shapes(q: &Tensor, k: &Tensor, v: &Tensor, mask: &SoftMask) -> Result<(usize, usize)> {
    let (n, d) = q.require_matrix("masked_attention")?;
    let (nk, dk) = k.require_matrix("masked_attention")?;
    let (nv, _) = v.require_matrix("masked_attention")?;
    if dk != d || nk != nv {
        return Err(Error::dim(
            "masked_attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if mask.values.len() != nk {
        return Err(Error::dim(
            "masked_attention",
            format!("soft mask has {} values for {nk} key tokens", mask.values.len()),
        ));
    }
    Ok((n, d))
}

pub fn masked_attention_cached(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &SoftMask,
    mode: MaskMode,
) -> Result<AttentionCache> {
    let (_, d) = check_attention_shapes(q, k, v, mask)?;
    let scores = matmul_nt(q, k)?.scale(1.0 / (d as f64).sqrt());
    let m = mask.values.data();
    let mut logits = scores.clone();
    for r in 0..logits.rows() {
        for (c, l) in logits.row_mut(r).iter_mut().enumerate() {
            *l = match mode {
                MaskMode::AdditiveNegInf if m[c] == 0.0 => NEG_LARGE,
                _ => *l * m[c],
            };
        }
    }
    let weights = softmax_rows(&logits);
    let output = matmul(&weights, v)?;
    Ok(AttentionCache {
        scores,
        logits,
        weights,
        output,
    })
}

/// `softmax((QKᵀ/√d) ⊙ m̃) · V` with `m̃` broadcast along the key axis.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &SoftMask) -> Result<Tensor> {
    Ok(masked_attention_cached(q, k, v, mask, MaskMode::Multiplicative)?.output)
}

/// Backward pass of [`masked_attention_cached`].
pub fn masked_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &SoftMask,
    mode: MaskMode,
    cache: &AttentionCache,
    dout: &Tensor,
) -> Result<AttentionGrads> {
    let (_, d) = check_attention_shapes(q, k, v, mask)?;
    let dweights = matmul_nt(dout, v)?;
    let dv = matmul_tn(&cache.weights, dout)?;
    let dlogits = softmax_rows_backward(&cache.weights, &dweights)?;
    let m = mask.values.data();
    let mut dscores = dlogits.clone();
    let mut dmask = vec![0.0; m.len()];
    for r in 0..dscores.rows() {
        let srow = cache.scores.row(r);
        let lrow = dlogits.row(r);
        for (c, ds) in dscores.row_mut(r).iter_mut().enumerate() {
            let background_const = mode == MaskMode::AdditiveNegInf && m[c] == 0.0;
            if background_const {
                *ds = 0.0;
            } else {
                *ds *= m[c];
                dmask[c] += lrow[c] * srow[c];
            }
        }
    }
    let inv = 1.0 / (d as f64).sqrt();
    let dq = matmul(&dscores, k)?.scale(inv);
    let dk = matmul_tn(&dscores, q)?.scale(inv);
    Ok(AttentionGrads {
        dq,
        dk,
        dv,
        dmask: Tensor::vector(dmask),
    })
}

/// Gradient of the gate from the soft-mask gradient: `dL/dg = Σ_k dL/dm̃_k · m_k`.
pub fn gate_grad_from_mask(dmask: &Tensor, token_mask: &Tensor) -> f64 {
    dmask.data().iter().zip(token_mask.data()).map(|(a, b)| a * b).sum()
}
