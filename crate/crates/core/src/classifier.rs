//! Text-query token classifier.
//!
//! A global text vector is mapped by a two-layer perceptron to `N×K` logits,
//! one row per grid position, trained with cross-entropy against the token
//! indices the frozen codebook assigns to matching images. Retrieval takes
//! the per-position argmax and gathers codebook rows. Decomposed retrieval
//! queries each prompt component separately and fuses the results.

use std::fmt;
use std::str::FromStr;

use crate::codebook::{argmax, argmin, one_hot, quantize, Codebook, TokenIndexVector};
use crate::error::{Error, Result};
use crate::numerics::rng::{hash_str, mix64};
use crate::numerics::{
    cosine_lr, cross_entropy, cross_entropy_grad, Activation, Adam, AdamConfig, Mlp, MlpCache, Parameter,
    Parameterized, RngState, Tensor,
};

pub const DEFAULT_TEXT_DIM: usize = 32;

/// Unit-norm text vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(pub Tensor);

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        self.0.data().iter().zip(other.0.data()).map(|(a, b)| a * b).sum::<f64>()
            / (self.0.sq_norm().sqrt() * other.0.sq_norm().sqrt())
    }
}

/// Hash-seeded stand-in text encoder: the label picks a seed, the seed a
/// Gaussian vector, which is normalised to unit length.
pub fn embed_text_dim(label: &str, dim: usize) -> TextEmbedding {
    let mut rng = RngState::new(mix64(hash_str(label)));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    TextEmbedding(Tensor::vector(v))
}

pub fn embed_text(label: &str) -> TextEmbedding {
    embed_text_dim(label, DEFAULT_TEXT_DIM)
}

/// Ordered, nonempty list of prompt components.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptComponents(Vec<String>);

impl PromptComponents {
    pub fn new(components: Vec<String>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Input("prompt has no components".into()));
        }
        if let Some(c) = components.iter().find(|c| c.trim().is_empty() || c.contains(',')) {
            return Err(Error::Input(format!("invalid prompt component {c:?}")));
        }
        Ok(Self(components))
    }

    /// Splits `"a,b,c"` into components, trimming whitespace.
    pub fn parse(prompt: &str) -> Result<Self> {
        let parts: Vec<String> = prompt
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        Self::new(parts)
    }

    pub fn components(&self) -> &[String] {
        &self.0
    }

    /// The undecomposed prompt string.
    pub fn joined(&self) -> String {
        self.0.join(",")
    }
}

impl fmt::Display for PromptComponents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.joined())
    }
}

/// Per-position logits over codebook entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogits(pub Tensor);

impl TokenLogits {
    /// Per-position argmax, lowest index on ties.
    pub fn indices(&self) -> TokenIndexVector {
        TokenIndexVector((0..self.0.rows()).map(|i| argmax(self.0.row(i))).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenClassifier {
    pub mlp: Mlp,
    pub tokens: usize,
    pub entries: usize,
}

impl TokenClassifier {
    pub fn new(mlp: Mlp, tokens: usize, entries: usize) -> Result<Self> {
        if mlp.out_dim() != tokens * entries {
            return Err(Error::dim(
                "TokenClassifier::new",
                format!("perceptron emits {} values, need N*K = {tokens}*{entries}", mlp.out_dim()),
            ));
        }
        Ok(Self { mlp, tokens, entries })
    }

    pub fn init(text_dim: usize, hidden: usize, tokens: usize, entries: usize, rng: &mut RngState) -> Self {
        let mlp = Mlp::init(
            "classifier",
            &[text_dim, hidden, tokens * entries],
            Activation::Relu,
            Activation::None,
            rng,
        );
        Self::new(mlp, tokens, entries).expect("consistent widths")
    }

    fn forward_cached(&self, z_t: &TextEmbedding) -> Result<MlpCache> {
        let x = z_t.0.clone().reshape(&[1, z_t.dim()])?;
        self.mlp.forward_cached(&x)
    }

    /// Cross-entropy over positions and its gradient, accumulated into the
    /// parameters with weight `scale`.
    pub fn loss_and_backward(&mut self, z_t: &TextEmbedding, target: &TokenIndexVector, scale: f64) -> Result<f64> {
        if target.len() != self.tokens {
            return Err(Error::Config(format!(
                "target has {} positions, classifier predicts {}",
                target.len(),
                self.tokens
            )));
        }
        let cache = self.forward_cached(z_t)?;
        let logits = cache.output().clone().reshape(&[self.tokens, self.entries])?;
        let loss = cross_entropy(&logits, &target.0)?;
        let g = cross_entropy_grad(&logits, &target.0)?
            .scale(scale)
            .reshape(&[1, self.tokens * self.entries])?;
        self.mlp.backward(&cache, &g)?;
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .mlp
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        out.push((
            "classifier.shape".into(),
            Tensor::vector(vec![self.tokens as f64, self.entries as f64]),
        ));
        out
    }

    pub fn from_checkpoint(tensors: &[(String, Tensor)]) -> Result<Self> {
        use crate::numerics::checkpoint::find;
        use crate::numerics::Linear;
        let shape = find(tensors, "classifier.shape")?.data().to_vec();
        let mut layers = Vec::new();
        for i in 0..2 {
            let w = find(tensors, &format!("classifier.{i}.weight"))?.clone();
            let b = find(tensors, &format!("classifier.{i}.bias"))?.clone();
            layers.push(Linear::new(
                Parameter::new(format!("classifier.{i}.weight"), w),
                Parameter::new(format!("classifier.{i}.bias"), b),
            )?);
        }
        let mlp = Mlp::new(layers, Activation::Relu, Activation::None)?;
        Self::new(mlp, shape[0] as usize, shape[1] as usize)
    }
}

impl Parameterized for TokenClassifier {
    fn params(&self) -> Vec<&Parameter> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.mlp.params_mut()
    }
}

pub fn predict_logits(z_t: &TextEmbedding, params: &TokenClassifier) -> Result<TokenLogits> {
    if z_t.dim() != params.mlp.in_dim() {
        return Err(Error::dim(
            "predict_logits",
            format!("text dim {} but classifier expects {}", z_t.dim(), params.mlp.in_dim()),
        ));
    }
    let out = params.mlp.forward(&z_t.0.clone().reshape(&[1, z_t.dim()])?)?;
    Ok(TokenLogits(out.reshape(&[params.tokens, params.entries])?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 30,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub epoch_losses: Vec<f64>,
    /// Fraction of positions whose argmax equals the target, per epoch,
    /// evaluated after the epoch's updates.
    pub epoch_accuracy: Vec<f64>,
}

/// Mean per-position index accuracy of the classifier on `pairs`.
pub fn index_accuracy(pairs: &[(TextEmbedding, TokenIndexVector)], params: &TokenClassifier) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (z, a) in pairs {
        let pred = predict_logits(z, params)?.indices();
        hits += pred.0.iter().zip(&a.0).filter(|(p, t)| p == t).count();
        total += a.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Minimises mean position-wise cross-entropy with AdamW and cosine decay.
/// Pairs are visited in a seeded shuffled order each epoch.
pub fn train_classifier(
    pairs: &[(TextEmbedding, TokenIndexVector)],
    params: &mut TokenClassifier,
    config: &ClassifierConfig,
) -> Result<ClassifierReport> {
    if pairs.is_empty() {
        return Err(Error::Config("classifier training set is empty".into()));
    }
    if let Some((i, (_, a))) = pairs.iter().enumerate().find(|(_, (_, a))| a.len() != params.tokens) {
        return Err(Error::Config(format!(
            "pair {i} has {} positions, expected {}",
            a.len(),
            params.tokens
        )));
    }
    if let Some(&bad) = pairs.iter().flat_map(|(_, a)| a.0.iter()).find(|&&j| j >= params.entries) {
        return Err(Error::Config(format!("target index {bad} >= K = {}", params.entries)));
    }
    let mut rng = RngState::new(config.seed).fork("classifier-train");
    let mut opt = Adam::new(AdamConfig::adamw(config.lr, config.weight_decay));
    let batch = config.batch_size.max(1);
    let batches = pairs.len().div_ceil(batch);
    let total = batches * config.epochs;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = ClassifierReport {
        epoch_losses: Vec::new(),
        epoch_accuracy: Vec::new(),
    };
    let mut step = 0;
    for _ in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            params.zero_grad();
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                epoch_loss += params.loss_and_backward(&pairs[i].0, &pairs[i].1, w)?;
            }
            opt.step(params.params_mut(), cosine_lr(config.lr, step, total))?;
            step += 1;
        }
        if !params.all_finite() {
            return Err(Error::Numeric("classifier parameters diverged".into()));
        }
        report.epoch_losses.push(epoch_loss / pairs.len() as f64);
        report.epoch_accuracy.push(index_accuracy(pairs, params)?);
    }
    Ok(report)
}

/// Fisher–Yates shuffle driven by the crate's counter-based stream.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut RngState) {
    for i in (1..items.len()).rev() {
        let j = rng.below(i + 1);
        items.swap(i, j);
    }
}

/// Argmax indices per position, gathered from the codebook.
pub fn retrieve_indexed(z_t: &TextEmbedding, params: &TokenClassifier, cb: &Codebook) -> Result<(TokenIndexVector, Tensor)> {
    if params.entries != cb.size() {
        return Err(Error::dim(
            "retrieve",
            format!("classifier predicts K={} but codebook has {}", params.entries, cb.size()),
        ));
    }
    let idx = predict_logits(z_t, params)?.indices();
    let feats = quantize(&one_hot(&idx, cb.size())?, cb)?;
    Ok((idx, feats))
}

pub fn retrieve(z_t: &TextEmbedding, params: &TokenClassifier, cb: &Codebook) -> Result<Tensor> {
    Ok(retrieve_indexed(z_t, params, cb)?.1)
}

/// How decomposed retrievals are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    /// Position-wise arithmetic mean.
    #[default]
    Mean,
    /// Position-wise sum.
    Sum,
    /// Position-wise mean snapped to the nearest codebook entry.
    Nearest,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Fusion::Mean),
            "sum" => Ok(Fusion::Sum),
            "nearest" => Ok(Fusion::Nearest),
            other => Err(Error::Config(format!("unknown fusion {other:?} (mean|sum|nearest)"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Mean => "mean",
            Fusion::Sum => "sum",
            Fusion::Nearest => "nearest",
        })
    }
}

/// Decomposition and combination: retrieve per component, then fuse.
pub fn retrieve_dc(
    prompt: &PromptComponents,
    params: &TokenClassifier,
    cb: &Codebook,
    fusion: Fusion,
) -> Result<Tensor> {
    let text_dim = params.mlp.in_dim();
    let grids = prompt
        .components()
        .iter()
        .map(|c| retrieve(&embed_text_dim(c, text_dim), params, cb))
        .collect::<Result<Vec<_>>>()?;
    let (first, rest) = grids.split_first().ok_or_else(|| Error::Input("empty prompt".into()))?;
    if rest.is_empty() {
        return Ok(first.clone());
    }
    let mut acc = first.clone();
    for g in rest {
        acc.add_assign(g)?;
    }
    match fusion {
        Fusion::Sum => Ok(acc),
        Fusion::Mean => Ok(acc.scale(1.0 / grids.len() as f64)),
        Fusion::Nearest => {
            let mean = acc.scale(1.0 / grids.len() as f64);
            let grid = crate::codebook::ImageFeatureGrid::from_rows(mean)?;
            let d = crate::codebook::pairwise_sq_distance(&grid, cb)?;
            let idx: Vec<usize> = (0..d.0.rows()).map(|i| argmin(d.0.row(i))).collect();
            cb.entries.value.gather_rows(&idx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Linear;

    fn small(seed: u64) -> (TokenClassifier, Codebook) {
        let mut rng = RngState::new(seed);
        let clf = TokenClassifier::init(8, 6, 3, 4, &mut rng);
        let cb = Codebook::new(crate::numerics::randn(&[4, 2], &mut rng)).unwrap();
        (clf, cb)
    }

    #[test]
    fn embedding_is_deterministic_unit() {
        let a = embed_text("x");
        assert_eq!(a, embed_text("x"));
        assert!((a.0.sq_norm().sqrt() - 1.0).abs() < 1e-12);
        assert_ne!(a, embed_text("y"));
    }

    #[test]
    fn distinct_labels_are_not_colinear() {
        for i in 0..100 {
            let c = embed_text(&format!("a{i}")).cosine(&embed_text(&format!("b{i}")));
            assert!(c > -1.0 && c < 1.0);
        }
    }

    #[test]
    fn prompt_parsing() {
        let p = PromptComponents::parse(" standing , left-facing").unwrap();
        assert_eq!(p.components(), &["standing", "left-facing"]);
        assert_eq!(p.joined(), "standing,left-facing");
        assert!(matches!(PromptComponents::parse(" , "), Err(Error::Input(_))));
        assert!(PromptComponents::new(vec![]).is_err());
    }

    #[test]
    fn zero_final_layer_gives_uniform_logits() {
        let (mut clf, _) = small(1);
        let last = clf.mlp.layers.len() - 1;
        clf.mlp.layers[last] = Linear::zeros("z", 6, 12);
        let l = predict_logits(&embed_text_dim("q", 8), &clf).unwrap();
        assert_eq!(l.0, Tensor::zeros(&[3, 4]));
        assert_eq!(l.indices().0, vec![0, 0, 0]);
    }

    #[test]
    fn wrong_text_dim_is_rejected() {
        let (clf, _) = small(1);
        assert!(matches!(
            predict_logits(&embed_text_dim("q", 5), &clf),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn memorises_single_pair() {
        let mut rng = RngState::new(2);
        let mut clf = TokenClassifier::init(8, 32, 4, 5, &mut rng);
        let pairs = vec![(embed_text_dim("only", 8), TokenIndexVector(vec![4, 0, 2, 2]))];
        let cfg = ClassifierConfig {
            epochs: 200,
            lr: 1e-2,
            batch_size: 1,
            ..Default::default()
        };
        let report = train_classifier(&pairs, &mut clf, &cfg).unwrap();
        assert_eq!(*report.epoch_accuracy.last().unwrap(), 1.0);
    }

    #[test]
    fn inconsistent_targets_are_config_errors() {
        let (mut clf, _) = small(3);
        let pairs = vec![(embed_text_dim("a", 8), TokenIndexVector(vec![0, 1]))];
        assert!(matches!(
            train_classifier(&pairs, &mut clf, &ClassifierConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn retrieval_rows_come_from_codebook() {
        let (clf, cb) = small(4);
        let out = retrieve(&embed_text_dim("p", 8), &clf, &cb).unwrap();
        for i in 0..out.rows() {
            assert!((0..cb.size()).any(|j| cb.entry(j) == out.row(i)));
        }
    }

    #[test]
    fn dc_reductions() {
        let (clf, cb) = small(5);
        let one = PromptComponents::parse("left").unwrap();
        let two = PromptComponents::parse("left,left").unwrap();
        let direct = retrieve(&embed_text_dim("left", 8), &clf, &cb).unwrap();
        assert_eq!(retrieve_dc(&one, &clf, &cb, Fusion::Mean).unwrap(), direct);
        assert_eq!(retrieve_dc(&two, &clf, &cb, Fusion::Mean).unwrap(), direct);
        assert_eq!(retrieve_dc(&two, &clf, &cb, Fusion::Nearest).unwrap(), direct);
        assert_eq!(retrieve_dc(&two, &clf, &cb, Fusion::Sum).unwrap(), direct.scale(2.0));
    }

    #[test]
    fn fusion_parsing() {
        assert_eq!("mean".parse::<Fusion>().unwrap(), Fusion::Mean);
        assert!("max".parse::<Fusion>().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (clf, _) = small(6);
        let back = TokenClassifier::from_checkpoint(&clf.to_checkpoint()).unwrap();
        assert_eq!(back, clf);
    }
}
