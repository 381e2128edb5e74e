//! The frozen visual knowledge base: feature extractor, codebook and text classifier.

use crate::classifier::{
    embed_text_dim, retrieve_dc, retrieve_indexed, train_classifier, ClassifierReport, Fusion, PromptComponents,
    TextEmbedding, TokenClassifier,
};
use crate::codebook::{
    self, init_kmeanspp, train_codebook, Codebook, CodebookReport, FeatureExtractor, ImageFeatureGrid,
    TokenIndexVector,
};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, RngState, Tensor};
use crate::synthdata::{generate_corpus, SynthConfig, SyntheticSample, IMAGE_SIZE};

use super::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub extractor: FeatureExtractor,
    pub codebook: Codebook,
    pub classifier: TokenClassifier,
}

impl KnowledgeBase {
    pub fn embed(&self, label: &str) -> TextEmbedding {
        embed_text_dim(label, self.classifier.mlp.in_dim())
    }

    /// Retrieved feature grid for the whole prompt, or fused per component with `dc`.
    pub fn query(&self, prompt: &PromptComponents, dc: bool, fusion: Fusion) -> Result<Tensor> {
        if dc {
            retrieve_dc(prompt, &self.classifier, &self.codebook, fusion)
        } else {
            Ok(retrieve_indexed(&self.embed(&prompt.joined()), &self.classifier, &self.codebook)?.1)
        }
    }

    pub fn prompt_indices(&self, prompt: &PromptComponents) -> Result<TokenIndexVector> {
        Ok(retrieve_indexed(&self.embed(&prompt.joined()), &self.classifier, &self.codebook)?.0)
    }

    pub fn image_features(&self, image: &Tensor) -> Result<ImageFeatureGrid> {
        self.extractor.extract(image)
    }

    pub fn image_indices(&self, image: &Tensor) -> Result<TokenIndexVector> {
        Ok(self.codebook.encode(&self.extractor.extract(image)?)?.0)
    }

    /// Index a blank patch quantizes to.
    pub fn background_index(&self) -> Result<usize> {
        let blank = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]);
        Ok(self.image_indices(&blank)?.0[0])
    }

    pub fn to_checkpoint(&self) -> Vec<(String, Tensor)> {
        let mut t = codebook::to_checkpoint(&self.codebook, &self.extractor);
        t.extend(self.classifier.to_checkpoint());
        t
    }

    pub fn from_checkpoint(tensors: &[(String, Tensor)]) -> Result<Self> {
        let (codebook, extractor) = codebook::from_checkpoint(tensors)?;
        let classifier = TokenClassifier::from_checkpoint(tensors)?;
        if classifier.entries != codebook.size() {
            return Err(Error::Data(format!(
                "classifier predicts K={} but codebook has {} entries",
                classifier.entries,
                codebook.size()
            )));
        }
        Ok(Self {
            extractor,
            codebook,
            classifier,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}

/// Training pairs for one sample: the joined prompt and each single component,
/// all mapped to the indices of the sample's image.
pub fn classifier_pairs(
    samples: &[SyntheticSample],
    extractor: &FeatureExtractor,
    codebook: &Codebook,
    text_dim: usize,
) -> Result<Vec<(TextEmbedding, TokenIndexVector)>> {
    let mut pairs = Vec::with_capacity(samples.len() * 3);
    for s in samples {
        let (idx, _) = codebook.encode(&extractor.extract(&s.image)?)?;
        pairs.push((embed_text_dim(&s.labels.joined(), text_dim), idx.clone()));
        if s.labels.components().len() > 1 {
            for c in s.labels.components() {
                pairs.push((embed_text_dim(c, text_dim), idx.clone()));
            }
        }
    }
    Ok(pairs)
}

/// The jitter-free corpus the classifier learns from: every label maps to one image.
pub fn kb_corpus(config: &ExperimentConfig, seed: u64) -> Result<Vec<SyntheticSample>> {
    generate_corpus(&SynthConfig {
        count: config.kb_count,
        seed,
        classes: config.synth.classes.clone(),
        jitter: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbReport {
    pub codebook: CodebookReport,
    pub classifier: ClassifierReport,
}

/// Trains the codebook on `images` and returns it with its feature extractor.
pub fn build_codebook(
    config: &ExperimentConfig,
    images: &[&Tensor],
    seed: u64,
) -> Result<(Codebook, FeatureExtractor, CodebookReport)> {
    let extractor = FeatureExtractor::new(config.patch, config.feature_dim, seed);
    let grids = images.iter().map(|im| extractor.extract(im)).collect::<Result<Vec<_>>>()?;
    let mut cb = init_kmeanspp(&grids, config.codebook.entries, seed)?;
    let cb_config = codebook::CodebookConfig {
        seed,
        ..config.codebook.clone()
    };
    let report = train_codebook(&grids, &mut cb, &cb_config)?;
    Ok((cb, extractor, report))
}

/// Trains the classifier against a frozen codebook.
pub fn build_classifier(
    config: &ExperimentConfig,
    extractor: &FeatureExtractor,
    codebook: &Codebook,
    samples: &[SyntheticSample],
    seed: u64,
) -> Result<(TokenClassifier, ClassifierReport)> {
    let text_dim = crate::classifier::DEFAULT_TEXT_DIM;
    let pairs = classifier_pairs(samples, extractor, codebook, text_dim)?;
    let tokens = pairs[0].1.len();
    let mut rng = RngState::new(seed).fork("classifier-init");
    let mut clf = TokenClassifier::init(text_dim, config.classifier.hidden, tokens, codebook.size(), &mut rng);
    let cfg = crate::classifier::ClassifierConfig {
        seed,
        ..config.classifier.clone()
    };
    let report = train_classifier(&pairs, &mut clf, &cfg)?;
    Ok((clf, report))
}

/// Codebook from the training corpus images, classifier from the jitter-free corpus.
pub fn build_kb(config: &ExperimentConfig, train: &[SyntheticSample], seed: u64) -> Result<(KnowledgeBase, KbReport)> {
    if train.is_empty() {
        return Err(Error::Config("knowledge base needs a nonempty corpus".into()));
    }
    let images: Vec<&Tensor> = train.iter().map(|s| &s.image).collect();
    let (codebook, extractor, cb_report) = build_codebook(config, &images, seed)?;
    let samples = kb_corpus(config, seed)?;
    let (classifier, clf_report) = build_classifier(config, &extractor, &codebook, &samples, seed)?;
    Ok((
        KnowledgeBase {
            extractor,
            codebook,
            classifier,
        },
        KbReport {
            codebook: cb_report,
            classifier: clf_report,
        },
    ))
}
