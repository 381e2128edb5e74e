//! Single-block epsilon-prediction network.
//!
//! ```text
//! h0  = [z | pos | time] · W_in + b_in
//! h1  = h0 + MaskedAttention(h0·Wq, h0·Wk, h0·Wv; (1+g(time))·mask)
//! h2  = h1 + kb · W_kb + b_kb          (W_kb, b_kb start at zero)
//! eps = MLP(h2)
//! ```
//!
//! Without a pose mask the attention multiplier is one on every key; without
//! knowledge-base features the injection term is skipped.

use crate::dynmask::{
    build_soft_mask, gate_grad_from_mask, masked_attention_backward, masked_attention_cached, AttentionCache,
    BinaryPoseMask, GateNetwork, MaskMode, SoftMask, TimestepEmbedding,
};
use crate::error::{Error, Result};
use crate::numerics::{
    matmul, matmul_backward, Activation, Linear, Mlp, MlpCache, Parameter, Parameterized, RngState, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub time_dim: usize,
    pub pos_dim: usize,
    pub model_dim: usize,
    pub head_hidden: usize,
    pub gate_hidden: usize,
    pub kb_dim: usize,
    pub grid: (usize, usize),
    pub mask_mode: MaskMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            time_dim: 16,
            pos_dim: 16,
            model_dim: 32,
            head_hidden: 64,
            gate_hidden: 32,
            kb_dim: 16,
            grid: (8, 8),
            mask_mode: MaskMode::Multiplicative,
        }
    }
}

impl DenoiserConfig {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// What the denoiser is conditioned on besides the noisy latent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionBundle {
    /// Retrieved knowledge-base features `[N×C]`; `None` for the null prompt.
    pub kb_features: Option<Tensor>,
    /// Pose mask driving the dynamic soft mask; `None` disables masking.
    pub pose_mask: Option<BinaryPoseMask>,
}

impl ConditionBundle {
    /// The same conditions with the prompt replaced by the null token.
    pub fn without_prompt(&self) -> Self {
        Self {
            kb_features: None,
            pose_mask: self.pose_mask.clone(),
        }
    }
}

/// Fixed 2-D sinusoidal position features, half per axis.
pub fn positional_encoding(grid: (usize, usize), dim: usize) -> Tensor {
    let (gh, gw) = grid;
    let per_axis = dim / 2;
    let freqs = per_axis / 2;
    let mut t = Tensor::zeros(&[gh * gw, dim]);
    for r in 0..gh {
        for c in 0..gw {
            let row = t.row_mut(r * gw + c);
            for (axis, (coord, extent)) in [(r, gh), (c, gw)].into_iter().enumerate() {
                for k in 0..freqs {
                    let w = std::f64::consts::PI * (1u64 << k) as f64 / extent as f64;
                    row[axis * per_axis + 2 * k] = (coord as f64 * w).sin();
                    row[axis * per_axis + 2 * k + 1] = (coord as f64 * w).cos();
                }
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub input: Linear,
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub gate: GateNetwork,
    pub kb_proj: Linear,
    pub head: Mlp,
    positions: Tensor,
}

/// Forward intermediates needed by [`Denoiser::backward`].
#[derive(Debug, Clone)]
pub struct DenoiserCache {
    x_in: Tensor,
    h0: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: SoftMask,
    attention: AttentionCache,
    gate: Option<(MlpCache, Tensor)>,
    kb: Option<Tensor>,
    head: MlpCache,
}

impl DenoiserCache {
    pub fn output(&self) -> &Tensor {
        self.head.output()
    }

    pub fn soft_mask(&self) -> &SoftMask {
        &self.mask
    }
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, rng: &mut RngState) -> Self {
        let d = config.model_dim;
        let in_dim = config.latent_dim + config.pos_dim + config.time_dim;
        let input = Linear::init("denoiser.input", in_dim, d, rng);
        let wq = Parameter::glorot("denoiser.wq", d, d, rng);
        let wk = Parameter::glorot("denoiser.wk", d, d, rng);
        let wv = Parameter::glorot("denoiser.wv", d, d, rng);
        let gate = GateNetwork::init(config.time_dim, config.gate_hidden, rng);
        let kb_proj = Linear::zeros("denoiser.kb_proj", config.kb_dim, d);
        let head = Mlp::init(
            "denoiser.head",
            &[d, config.head_hidden, config.latent_dim],
            Activation::Relu,
            Activation::None,
            rng,
        );
        let positions = positional_encoding(config.grid, config.pos_dim);
        Self {
            config,
            input,
            wq,
            wk,
            wv,
            gate,
            kb_proj,
            head,
            positions,
        }
    }

    /// Every parameter set to zero.
    pub fn zeros(config: DenoiserConfig) -> Self {
        let mut m = Self::init(config, &mut RngState::new(0));
        for p in m.params_mut() {
            p.value.fill(0.0);
        }
        m
    }

    fn check(&self, z: &Tensor, cond: &ConditionBundle) -> Result<()> {
        let n = self.config.tokens();
        z.require_shape("denoiser", &[n, self.config.latent_dim])?;
        if let Some(kb) = &cond.kb_features {
            kb.require_shape("denoiser", &[n, self.config.kb_dim])?;
        }
        if let Some(m) = &cond.pose_mask {
            if m.tokens() != n {
                return Err(Error::dim(
                    "denoiser",
                    format!("pose mask has {} tokens, model grid has {n}", m.tokens()),
                ));
            }
        }
        Ok(())
    }

    pub fn forward_cached(&self, z: &Tensor, t: usize, cond: &ConditionBundle) -> Result<DenoiserCache> {
        self.check(z, cond)?;
        let n = self.config.tokens();
        let te = TimestepEmbedding::new(t, self.config.time_dim);
        let time_rows = Tensor::new(
            vec![n, self.config.time_dim],
            (0..n).flat_map(|_| te.vector.data().iter().copied()).collect(),
        )?;
        let x_in = Tensor::hcat(&[z, &self.positions, &time_rows])?;
        let h0 = self.input.forward(&x_in)?;
        let q = matmul(&h0, &self.wq.value)?;
        let k = matmul(&h0, &self.wk.value)?;
        let v = matmul(&h0, &self.wv.value)?;
        let (mask, gate) = match &cond.pose_mask {
            Some(pm) => {
                let (g, gcache) = self.gate.forward_cached(&te)?;
                (build_soft_mask(pm, g), Some((gcache, pm.token_mask.clone())))
            }
            None => (SoftMask::ones(n), None),
        };
        let attention = masked_attention_cached(&q, &k, &v, &mask, self.config.mask_mode)?;
        let mut h = h0.add(&attention.output)?;
        if let Some(kb) = &cond.kb_features {
            h.add_assign(&self.kb_proj.forward(kb)?)?;
        }
        let head = self.head.forward_cached(&h)?;
        Ok(DenoiserCache {
            x_in,
            h0,
            q,
            k,
            v,
            mask,
            attention,
            gate,
            kb: cond.kb_features.clone(),
            head,
        })
    }

    pub fn forward(&self, z: &Tensor, t: usize, cond: &ConditionBundle) -> Result<Tensor> {
        Ok(self.forward_cached(z, t, cond)?.head.output().clone())
    }

    /// Accumulates gradients of every parameter group given `dL/dε̂`.
    pub fn backward(&mut self, cache: &DenoiserCache, dout: &Tensor) -> Result<()> {
        let dh = self.head.backward(&cache.head, dout)?;
        if let Some(kb) = &cache.kb {
            self.kb_proj.backward(kb, &dh)?;
        }
        let grads = masked_attention_backward(
            &cache.q,
            &cache.k,
            &cache.v,
            &cache.mask,
            self.config.mask_mode,
            &cache.attention,
            &dh,
        )?;
        let mut dh0 = dh;
        for (w, dproj) in [(&mut self.wq, &grads.dq), (&mut self.wk, &grads.dk), (&mut self.wv, &grads.dv)] {
            let (dx, dw) = matmul_backward(&cache.h0, &w.value, dproj)?;
            w.accumulate(&dw)?;
            dh0.add_assign(&dx)?;
        }
        if let Some((gcache, token_mask)) = &cache.gate {
            let dg = gate_grad_from_mask(&grads.dmask, token_mask);
            self.gate.backward(gcache, dg)?;
        }
        self.input.backward(&cache.x_in, &dh0)?;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let mut out: Vec<(String, Tensor)> =
            self.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        out.push((
            "denoiser.config".into(),
            Tensor::vector(vec![
                c.latent_dim as f64,
                c.time_dim as f64,
                c.pos_dim as f64,
                c.model_dim as f64,
                c.head_hidden as f64,
                c.gate_hidden as f64,
                c.kb_dim as f64,
                c.grid.0 as f64,
                c.grid.1 as f64,
                match c.mask_mode {
                    MaskMode::Multiplicative => 0.0,
                    MaskMode::AdditiveNegInf => 1.0,
                },
            ]),
        ));
        out
    }

    pub fn from_checkpoint(tensors: &[(String, Tensor)]) -> Result<Self> {
        use crate::numerics::checkpoint::find;
        let c = find(tensors, "denoiser.config")?.data().to_vec();
        if c.len() != 10 {
            return Err(Error::Data("denoiser.config has wrong length".into()));
        }
        let u = |i: usize| c[i] as usize;
        let config = DenoiserConfig {
            latent_dim: u(0),
            time_dim: u(1),
            pos_dim: u(2),
            model_dim: u(3),
            head_hidden: u(4),
            gate_hidden: u(5),
            kb_dim: u(6),
            grid: (u(7), u(8)),
            mask_mode: if c[9] == 0.0 {
                MaskMode::Multiplicative
            } else {
                MaskMode::AdditiveNegInf
            },
        };
        let mut model = Self::zeros(config);
        for p in model.params_mut() {
            let t = find(tensors, &p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(model)
    }
}

impl Parameterized for Denoiser {
    fn params(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.input.params().into_iter().collect();
        v.extend([&self.wq, &self.wk, &self.wv]);
        v.extend(self.gate.params());
        v.extend(self.kb_proj.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.input.params_mut().into_iter().collect();
        v.extend([&mut self.wq, &mut self.wk, &mut self.wv]);
        v.extend(self.gate.params_mut());
        v.extend(self.kb_proj.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// Anything that predicts the noise in a latent.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &ConditionBundle) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &ConditionBundle) -> Result<Tensor> {
        self.forward(z_t, t, cond)
    }
}
