//! Vector-quantized visual knowledge base.
//!
//! Image feature tokens are compared with every codebook entry by squared
//! Euclidean distance, assigned to their nearest entry, turned into a one-hot
//! matrix and multiplied back against the codebook to give the quantized
//! features. Training minimises the reconstruction error between quantized
//! and original features with respect to the entries alone; the feature
//! extractor is frozen.

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_lr, matmul, matmul_nt, matmul_tn, mse, Adam, AdamConfig, Parameter, Parameterized, RngState, Tensor,
};

/// `K` trainable entries of dimension `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Parameter,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        let (k, c) = entries.require_matrix("Codebook::new")?;
        if k < 2 || c < 1 {
            return Err(Error::Config(format!("codebook needs K >= 2 and C >= 1, got K={k}, C={c}")));
        }
        if !entries.is_finite() {
            return Err(Error::Numeric("codebook entries must be finite".into()));
        }
        Ok(Self {
            entries: Parameter::new("codebook.entries", entries),
        })
    }

    pub fn size(&self) -> usize {
        self.entries.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.value.cols()
    }

    pub fn entry(&self, j: usize) -> &[f64] {
        self.entries.value.row(j)
    }

    /// Distances, nearest indices and quantized features for one grid.
    pub fn encode(&self, z_e: &ImageFeatureGrid) -> Result<(TokenIndexVector, Tensor)> {
        let d = pairwise_sq_distance(z_e, self)?;
        let a = assign_indices(&d);
        let zq = quantize(&one_hot(&a, self.size())?, self)?;
        Ok((a, zq))
    }
}

impl Parameterized for Codebook {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.entries]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.entries]
    }
}

/// Dense per-token features `[N×C]` laid out on an `H_g × W_g` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureGrid {
    pub features: Tensor,
    pub grid: (usize, usize),
}

impl ImageFeatureGrid {
    pub fn new(features: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (n, _) = features.require_matrix("ImageFeatureGrid::new")?;
        if n != grid.0 * grid.1 {
            return Err(Error::dim(
                "ImageFeatureGrid::new",
                format!("{n} tokens do not fill a {}x{} grid", grid.0, grid.1),
            ));
        }
        Ok(Self { features, grid })
    }

    /// Treats the rows of an `[N×C]` matrix as an `N×1` grid.
    pub fn from_rows(features: Tensor) -> Result<Self> {
        let n = features.rows();
        Self::new(features, (n, 1))
    }

    pub fn tokens(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Squared distances `[N×K]` between tokens and entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(pub Tensor);

/// Nearest-entry index per token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenIndexVector(pub Vec<usize>);

impl TokenIndexVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fraction of positions where both vectors hold the same index.
    pub fn agreement(&self, other: &TokenIndexVector) -> f64 {
        let same = self.0.iter().zip(&other.0).filter(|(a, b)| a == b).count();
        same as f64 / self.0.len().max(1) as f64
    }
}

/// `[N×K]` matrix with a single one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotAssignment(pub Tensor);

/// `D[i,j] = ‖z_i‖² + ‖e_j‖² − 2 z_i·e_j`.
pub fn pairwise_sq_distance(z_e: &ImageFeatureGrid, cb: &Codebook) -> Result<DistanceMatrix> {
    if z_e.dim() != cb.dim() {
        return Err(Error::dim(
            "pairwise_sq_distance",
            format!("feature C={} but codebook C={}", z_e.dim(), cb.dim()),
        ));
    }
    let e = &cb.entries.value;
    let cross = matmul_nt(&z_e.features, e)?;
    let z_norms: Vec<f64> = (0..z_e.tokens())
        .map(|i| z_e.features.row(i).iter().map(|v| v * v).sum())
        .collect();
    let e_norms: Vec<f64> = (0..cb.size()).map(|j| e.row(j).iter().map(|v| v * v).sum()).collect();
    let mut d = cross;
    for (i, zn) in z_norms.iter().enumerate() {
        for (v, en) in d.row_mut(i).iter_mut().zip(&e_norms) {
            *v = zn + en - 2.0 * *v;
        }
    }
    Ok(DistanceMatrix(d))
}

/// Row-wise argmin; ties resolve to the smallest column.
pub fn assign_indices(d: &DistanceMatrix) -> TokenIndexVector {
    TokenIndexVector((0..d.0.rows()).map(|i| argmin(d.0.row(i))).collect())
}

pub(crate) fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn one_hot(a: &TokenIndexVector, k: usize) -> Result<OneHotAssignment> {
    if a.is_empty() {
        return Err(Error::Input("empty index vector".into()));
    }
    let mut o = Tensor::zeros(&[a.len(), k]);
    for (row, &j) in a.0.iter().enumerate() {
        if j >= k {
            return Err(Error::Index {
                op: "one_hot",
                row,
                value: j,
                bound: k,
            });
        }
        o.set(row, j, 1.0);
    }
    Ok(OneHotAssignment(o))
}

/// `z_q = O · e`.
pub fn quantize(o: &OneHotAssignment, cb: &Codebook) -> Result<Tensor> {
    if o.0.cols() != cb.size() {
        return Err(Error::dim(
            "quantize",
            format!("one-hot has {} columns but codebook has {} entries", o.0.cols(), cb.size()),
        ));
    }
    matmul(&o.0, &cb.entries.value)
}

/// `MSE(z_q, z_e)`.
pub fn codebook_loss(z_q: &Tensor, z_e: &ImageFeatureGrid) -> Result<f64> {
    mse(z_q, &z_e.features)
}

/// Loss and its gradient with respect to the codebook entries, treating the
/// one-hot assignment as constant: `dL/de = Oᵀ · 2(z_q − z_e)/(N·C)`.
pub fn codebook_loss_and_grad(o: &OneHotAssignment, cb: &Codebook, z_e: &ImageFeatureGrid) -> Result<(f64, Tensor)> {
    let zq = quantize(o, cb)?;
    let loss = codebook_loss(&zq, z_e)?;
    let dzq = crate::numerics::mse_grad(&zq, &z_e.features)?;
    Ok((loss, matmul_tn(&o.0, &dzq)?))
}

/// Frozen stand-in image encoder: non-overlapping `patch × patch` blocks are
/// flattened and multiplied by a fixed seeded projection to `C` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub patch: usize,
    pub projection: Tensor,
}

impl FeatureExtractor {
    pub fn new(patch: usize, dim: usize, seed: u64) -> Self {
        let mut rng = RngState::new(seed).fork("feature-projection");
        let p2 = patch * patch;
        let scale = 1.0 / (p2 as f64).sqrt();
        let data = (0..p2 * dim).map(|_| rng.normal() * scale).collect();
        Self {
            patch,
            projection: Tensor::new(vec![p2, dim], data).expect("positive dims"),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn extract(&self, image: &Tensor) -> Result<ImageFeatureGrid> {
        let (patches, grid) = patchify(image, self.patch)?;
        ImageFeatureGrid::new(matmul(&patches, &self.projection)?, grid)
    }
}

/// Rearranges an `[H×W]` image into `[(H/p)(W/p) × p²]` row-major patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<(Tensor, (usize, usize))> {
    let (h, w) = image.require_matrix("patchify")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("patch {patch} does not divide image {h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let r = image.row(gy * patch + py);
                data.extend_from_slice(&r[gx * patch..(gx + 1) * patch]);
            }
        }
    }
    Ok((Tensor::new(vec![gh * gw, patch * patch], data)?, (gh, gw)))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch: usize, grid: (usize, usize)) -> Result<Tensor> {
    let (n, p2) = patches.require_matrix("unpatchify")?;
    if n != grid.0 * grid.1 || p2 != patch * patch {
        return Err(Error::dim(
            "unpatchify",
            format!("{:?} is not a {}x{} grid of {patch}x{patch} patches", patches.shape(), grid.0, grid.1),
        ));
    }
    let (h, w) = (grid.0 * patch, grid.1 * patch);
    let mut img = Tensor::zeros(&[h, w]);
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let src = patches.row(gy * grid.1 + gx);
            for py in 0..patch {
                for px in 0..patch {
                    img.set(gy * patch + py, gx * patch + px, src[py * patch + px]);
                }
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookConfig {
    pub entries: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Grids per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            entries: 32,
            epochs: 30,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookReport {
    /// Mean loss per epoch, measured while training.
    pub epoch_losses: Vec<f64>,
    pub reseeded: usize,
}

/// First `k` pairwise distinct token rows of the corpus, in order.
pub fn init_from_corpus(corpus: &[ImageFeatureGrid], k: usize) -> Result<Codebook> {
    let dim = corpus
        .first()
        .ok_or_else(|| Error::Config("empty corpus".into()))?
        .dim();
    let mut rows: Vec<&[f64]> = Vec::with_capacity(k);
    'outer: for grid in corpus {
        for i in 0..grid.tokens() {
            let r = grid.features.row(i);
            if !rows.contains(&r) {
                rows.push(r);
                if rows.len() == k {
                    break 'outer;
                }
            }
        }
    }
    if rows.len() < k {
        return Err(Error::Config(format!(
            "corpus has only {} distinct feature rows, codebook needs {k}",
            rows.len()
        )));
    }
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Codebook::new(Tensor::new(vec![k, dim], data)?)
}

/// Seeded D²-weighted (k-means++) selection of `k` corpus tokens as initial entries.
pub fn init_kmeanspp(corpus: &[ImageFeatureGrid], k: usize, seed: u64) -> Result<Codebook> {
    let rows: Vec<&[f64]> = corpus.iter().flat_map(|g| (0..g.tokens()).map(move |i| g.features.row(i))).collect();
    let dim = corpus
        .first()
        .ok_or_else(|| Error::Config("empty corpus".into()))?
        .dim();
    let mut rng = RngState::new(seed).fork("codebook-init");
    let mut chosen: Vec<&[f64]> = vec![rows[rng.below(rows.len())]];
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq(r, chosen[0])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config(format!(
                "corpus has fewer than {k} distinct feature rows"
            )));
        }
        let mut target = rng.uniform() * total;
        let mut pick = rows.len() - 1;
        for (i, &d) in nearest.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        // Guards against the float tail landing on an already chosen row.
        if nearest[pick] <= 0.0 {
            pick = argmax(&nearest);
        }
        let c = rows[pick];
        chosen.push(c);
        for (n, r) in nearest.iter_mut().zip(&rows) {
            *n = n.min(sq(r, c));
        }
    }
    let data = chosen.iter().flat_map(|r| r.iter().copied()).collect();
    Codebook::new(Tensor::new(vec![k, dim], data)?)
}

/// Trains `cb` on `corpus`: per batch, distances → indices → one-hot →
/// quantize → loss → AdamW step on the entries with cosine decay. An entry
/// that receives no assignment for a whole epoch is moved onto a corpus
/// token drawn with probability proportional to its current quantization error.
pub fn train_codebook(corpus: &[ImageFeatureGrid], cb: &mut Codebook, config: &CodebookConfig) -> Result<CodebookReport> {
    if corpus.is_empty() {
        return Err(Error::Config("codebook training corpus is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = RngState::new(config.seed).fork("codebook-train");
    let mut opt = Adam::new(AdamConfig::adamw(config.lr, config.weight_decay));
    let batches = corpus.len().div_ceil(config.batch_size);
    let total = batches * config.epochs;
    let mut report = CodebookReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        reseeded: 0,
    };
    let mut step = 0;
    for _ in 0..config.epochs {
        let mut used = vec![false; cb.size()];
        let mut epoch_loss = 0.0;
        for batch in corpus.chunks(config.batch_size) {
            cb.zero_grad();
            let mut batch_loss = 0.0;
            for grid in batch {
                let a = assign_indices(&pairwise_sq_distance(grid, cb)?);
                for &j in &a.0 {
                    used[j] = true;
                }
                let (loss, grad) = codebook_loss_and_grad(&one_hot(&a, cb.size())?, cb, grid)?;
                batch_loss += loss;
                cb.entries.accumulate(&grad.scale(1.0 / batch.len() as f64))?;
            }
            epoch_loss += batch_loss / batch.len() as f64;
            opt.step(cb.params_mut(), cosine_lr(config.lr, step, total))?;
            step += 1;
        }
        if !cb.entries.value.is_finite() {
            return Err(Error::Numeric("codebook entries diverged".into()));
        }
        report.epoch_losses.push(epoch_loss / batches as f64);
        for j in (0..cb.size()).filter(|&j| !used[j]) {
            reseed_entry(corpus, cb, j, &mut rng)?;
            report.reseeded += 1;
        }
    }
    Ok(report)
}

fn reseed_entry(corpus: &[ImageFeatureGrid], cb: &mut Codebook, j: usize, rng: &mut RngState) -> Result<()> {
    let mut errors = Vec::new();
    for (g, grid) in corpus.iter().enumerate() {
        let d = pairwise_sq_distance(grid, cb)?;
        for i in 0..grid.tokens() {
            let row = d.0.row(i);
            errors.push((g, i, row[argmin(row)].max(0.0)));
        }
    }
    let total: f64 = errors.iter().map(|e| e.2).sum();
    let (g, i) = if total > 0.0 {
        let mut target = rng.uniform() * total;
        let mut pick = (errors[0].0, errors[0].1);
        for &(g, i, e) in &errors {
            pick = (g, i);
            if target < e {
                break;
            }
            target -= e;
        }
        pick
    } else {
        let e = errors[rng.below(errors.len())];
        (e.0, e.1)
    };
    let src = corpus[g].features.row(i).to_vec();
    cb.entries.value.row_mut(j).copy_from_slice(&src);
    Ok(())
}

/// Mean over all tokens of the squared distance to the nearest entry.
pub fn quantization_error(corpus: &[ImageFeatureGrid], cb: &Codebook) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for grid in corpus {
        let d = pairwise_sq_distance(grid, cb)?;
        for i in 0..grid.tokens() {
            let row = d.0.row(i);
            total += row[argmin(row)].max(0.0);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Codebook entries packed into checkpoint form.
pub fn to_checkpoint(cb: &Codebook, fx: &FeatureExtractor) -> Vec<(String, Tensor)> {
    vec![
        ("codebook.entries".into(), cb.entries.value.clone()),
        ("features.projection".into(), fx.projection.clone()),
        ("features.patch".into(), Tensor::vector(vec![fx.patch as f64])),
    ]
}

pub fn from_checkpoint(tensors: &[(String, Tensor)]) -> Result<(Codebook, FeatureExtractor)> {
    use crate::numerics::checkpoint::find;
    let cb = Codebook::new(find(tensors, "codebook.entries")?.clone())?;
    let projection = find(tensors, "features.projection")?.clone();
    let patch = find(tensors, "features.patch")?.data()[0] as usize;
    if projection.rows() != patch * patch || projection.cols() != cb.dim() {
        return Err(Error::Data(format!(
            "feature projection {:?} inconsistent with patch {patch} and codebook dim {}",
            projection.shape(),
            cb.dim()
        )));
    }
    Ok((cb, FeatureExtractor { patch, projection }))
}
