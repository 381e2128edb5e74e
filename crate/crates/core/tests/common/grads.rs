//! One randomized gradient check per differentiable component. Each function
//! fills the analytic gradients, then compares them with central differences.

use kbdm::classifier::{predict_logits, TextEmbedding, TokenClassifier};
use kbdm::codebook::{
    assign_indices, codebook_loss, codebook_loss_and_grad, one_hot, pairwise_sq_distance, quantize, Codebook,
    ImageFeatureGrid, TokenIndexVector,
};
use kbdm::diffusion::{ConditionBundle, Denoiser, DenoiserConfig};
use kbdm::dynmask::{
    build_soft_mask, gate_grad_from_mask, masked_attention_backward, masked_attention_cached, pose_to_mask,
    BinaryPoseMask, GateNetwork, MaskMode, TimestepEmbedding,
};
use kbdm::numerics::{
    cross_entropy, finite_diff_check, randn, Parameter, Parameterized, RngState, Tensor,
};

pub const EPS: f64 = 1e-6;

fn dims(rng: &mut RngState, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub fn codebook_loss_check(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let (n, k, c) = (dims(&mut rng, 1, 8), dims(&mut rng, 2, 8), dims(&mut rng, 1, 8));
    let z = ImageFeatureGrid::from_rows(randn(&[n, c], &mut rng)).unwrap();
    let mut cb = Codebook::new(randn(&[k, c], &mut rng)).unwrap();
    let o = one_hot(&assign_indices(&pairwise_sq_distance(&z, &cb).unwrap()), k).unwrap();
    let (_, grad) = codebook_loss_and_grad(&o, &cb, &z).unwrap();
    cb.zero_grad();
    cb.entries.accumulate(&grad).unwrap();
    // Assignments are held fixed, matching the gradient routing of the loss.
    finite_diff_check(&mut cb, EPS, |m| codebook_loss(&quantize(&o, m)?, &z)).unwrap()
}

pub fn classifier_check(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let (t, h, n, k) = (
        dims(&mut rng, 1, 8),
        dims(&mut rng, 1, 8),
        dims(&mut rng, 1, 6),
        dims(&mut rng, 2, 6),
    );
    let mut clf = TokenClassifier::init(t, h, n, k, &mut rng);
    for p in clf.params_mut() {
        p.value = randn(p.value.shape(), &mut rng).scale(0.5);
    }
    let z = TextEmbedding(randn(&[t], &mut rng));
    let target = TokenIndexVector((0..n).map(|_| rng.below(k)).collect());
    clf.zero_grad();
    clf.loss_and_backward(&z, &target, 1.0).unwrap();
    finite_diff_check(&mut clf, EPS, |m| cross_entropy(&predict_logits(&z, m)?.0, &target.0)).unwrap()
}

pub fn gate_check(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let dim = 2 * dims(&mut rng, 1, 4);
    let hidden = dims(&mut rng, 1, 8);
    let mut gate = GateNetwork::init(dim, hidden, &mut rng);
    for p in gate.params_mut() {
        p.value = randn(p.value.shape(), &mut rng);
    }
    let e = TimestepEmbedding::new(rng.below(1000), dim);
    let w = rng.normal();
    gate.zero_grad();
    let (_, cache) = gate.forward_cached(&e).unwrap();
    gate.backward(&cache, w).unwrap();
    finite_diff_check(&mut gate, EPS, |m| Ok(w * kbdm::dynmask::compute_gate(&e, m)?)).unwrap()
}

/// Q, K, V as free parameters plus the gate network that scales the mask.
pub struct AttentionProblem {
    pub q: Parameter,
    pub k: Parameter,
    pub v: Parameter,
    pub gate: GateNetwork,
    pub pose: BinaryPoseMask,
    pub embedding: TimestepEmbedding,
    pub weights: Tensor,
    pub mode: MaskMode,
}

impl Parameterized for AttentionProblem {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.q, &self.k, &self.v];
        v.extend(self.gate.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.q, &mut self.k, &mut self.v];
        v.extend(self.gate.params_mut());
        v
    }
}

impl AttentionProblem {
    pub fn random(seed: u64, mode: MaskMode) -> Self {
        let mut rng = RngState::new(seed);
        let (gh, gw, d) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 3), dims(&mut rng, 1, 8));
        let n = gh * gw;
        let pose_img = Tensor::new(
            vec![2 * gh, 2 * gw],
            (0..4 * n).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let mut gate = GateNetwork::init(4, 3, &mut rng);
        for p in gate.params_mut() {
            p.value = randn(p.value.shape(), &mut rng);
        }
        Self {
            q: Parameter::new("q", randn(&[n, d], &mut rng)),
            k: Parameter::new("k", randn(&[n, d], &mut rng)),
            v: Parameter::new("v", randn(&[n, d], &mut rng)),
            gate,
            pose: pose_to_mask(&pose_img, (gh, gw)).unwrap(),
            embedding: TimestepEmbedding::new(rng.below(1000), 4),
            weights: randn(&[n, d], &mut rng),
            mode,
        }
    }

    pub fn loss(&self) -> kbdm::Result<f64> {
        let g = kbdm::dynmask::compute_gate(&self.embedding, &self.gate)?;
        let mask = build_soft_mask(&self.pose, g);
        let out = masked_attention_cached(&self.q.value, &self.k.value, &self.v.value, &mask, self.mode)?.output;
        Ok(out.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum())
    }

    pub fn backward(&mut self) {
        self.zero_grad();
        let (g, gcache) = self.gate.forward_cached(&self.embedding).unwrap();
        let mask = build_soft_mask(&self.pose, g);
        let cache = masked_attention_cached(&self.q.value, &self.k.value, &self.v.value, &mask, self.mode).unwrap();
        let grads = masked_attention_backward(
            &self.q.value,
            &self.k.value,
            &self.v.value,
            &mask,
            self.mode,
            &cache,
            &self.weights,
        )
        .unwrap();
        self.q.accumulate(&grads.dq).unwrap();
        self.k.accumulate(&grads.dk).unwrap();
        self.v.accumulate(&grads.dv).unwrap();
        let dg = gate_grad_from_mask(&grads.dmask, &self.pose.token_mask);
        self.gate.backward(&gcache, dg).unwrap();
    }
}

pub fn attention_check(seed: u64, mode: MaskMode) -> f64 {
    let mut p = AttentionProblem::random(seed, mode);
    p.backward();
    finite_diff_check(&mut p, EPS, |m| m.loss()).unwrap()
}

/// Small denoiser (N=4, d=4) with every parameter randomized, KB features and a pose mask.
pub fn denoiser_check(seed: u64, mode: MaskMode) -> f64 {
    let mut rng = RngState::new(seed);
    let config = DenoiserConfig {
        latent_dim: 3,
        time_dim: 4,
        pos_dim: 4,
        model_dim: 4,
        head_hidden: 5,
        gate_hidden: 3,
        kb_dim: 3,
        grid: (2, 2),
        mask_mode: mode,
    };
    let mut model = Denoiser::init(config, &mut rng);
    for p in model.params_mut() {
        p.value = randn(p.value.shape(), &mut rng).scale(0.7);
    }
    let pose_img = Tensor::new(
        vec![4, 4],
        (0..16).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let cond = ConditionBundle {
        kb_features: Some(randn(&[4, 3], &mut rng)),
        pose_mask: Some(pose_to_mask(&pose_img, (2, 2)).unwrap()),
    };
    let z = randn(&[4, 3], &mut rng);
    let eps = randn(&[4, 3], &mut rng);
    let t = rng.below(1000);
    model.zero_grad();
    let cache = model.forward_cached(&z, t, &cond).unwrap();
    let d = cache.output().sub(&eps).unwrap().scale(2.0);
    model.backward(&cache, &d).unwrap();
    finite_diff_check(&mut model, EPS, |m| Ok(m.forward(&z, t, &cond)?.sub(&eps)?.sq_norm())).unwrap()
}

/// Worst relative error of `check` over `seeds` consecutive seeds starting at `first`.
pub fn worst_over(first: u64, seeds: u64, check: impl Fn(u64) -> f64) -> f64 {
    (first..first + seeds).map(check).fold(0.0, f64::max)
}
