//! Training, sampling and evaluation of the adapter ablation matrix.

use rand::RngCore;

use crate::classifier::{Fusion, PromptComponents};
use crate::diffusion::{
    ddim_sample, encode_latent, train_diffusion, ConditionBundle, Denoiser, DiffusionConfig, DiffusionReport,
    NoiseSchedule, TrainingItem,
};
use crate::dynmask::pose_to_mask;
use crate::error::Result;
use crate::numerics::{RngState, Tensor};
use crate::synthdata::{generate_corpus, Keypoint, PoseClass, SynthConfig, SyntheticSample};

use super::config::{AblationFlags, ExperimentConfig};
use super::io::{csv, fixed};
use super::kb::{build_kb, KnowledgeBase};
use super::metrics::{eval_frechet_proxy, eval_label_consistency, eval_pose_pck, MetricReport};

/// Row order of the ablation table.
pub const ABLATION_ROWS: [AblationFlags; 4] = [
    AblationFlags::BASELINE,
    AblationFlags::KB,
    AblationFlags::KB_DM,
    AblationFlags::KB_DM_DC,
];

/// Everything one seed of the ablation shares across rows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
    pub kb: KnowledgeBase,
}

pub fn training_corpus(config: &ExperimentConfig, seed: u64) -> Result<Vec<SyntheticSample>> {
    generate_corpus(&SynthConfig {
        seed,
        ..config.synth.clone()
    })
}

/// Held-out conditions drawn from a stream disjoint from the training corpus.
pub fn eval_corpus(config: &ExperimentConfig, seed: u64) -> Result<Vec<SyntheticSample>> {
    generate_corpus(&SynthConfig {
        count: config.eval_count,
        seed: RngState::new(seed).fork("eval-corpus").next_u64(),
        ..config.synth.clone()
    })
}

pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let train = training_corpus(config, seed)?;
    let eval = eval_corpus(config, seed)?;
    let (kb, _) = build_kb(config, &train, seed)?;
    Ok(Prepared { seed, train, eval, kb })
}

/// Conditions for one sample under `flags`. KB features need `kb`.
pub fn condition_for(
    labels: &PromptComponents,
    pose_image: &Tensor,
    kb: Option<&KnowledgeBase>,
    flags: AblationFlags,
    fusion: Fusion,
    grid: (usize, usize),
) -> Result<ConditionBundle> {
    flags.validate()?;
    let kb_features = match (flags.kb, kb) {
        (true, Some(kb)) => Some(kb.query(labels, flags.dc, fusion)?),
        (true, None) => {
            return Err(crate::Error::Config("KB conditioning enabled without a knowledge base".into()));
        }
        (false, _) => None,
    };
    let pose_mask = if flags.dm {
        Some(pose_to_mask(pose_image, grid)?)
    } else {
        None
    };
    Ok(ConditionBundle { kb_features, pose_mask })
}

pub fn training_items(
    samples: &[SyntheticSample],
    kb: Option<&KnowledgeBase>,
    flags: AblationFlags,
    config: &ExperimentConfig,
) -> Result<Vec<TrainingItem>> {
    let dc = config.denoiser_config();
    samples
        .iter()
        .map(|s| {
            let cond = condition_for(&s.labels, &s.pose_image, kb, flags, config.fusion, dc.grid)?;
            Ok(TrainingItem {
                latent: encode_latent(&s.image, config.patch)?.0,
                pose_mask: cond.pose_mask,
                kb_features: cond.kb_features,
            })
        })
        .collect()
}

/// Trains one denoiser; every row of a seed starts from the same weights.
pub fn train_cell(
    config: &ExperimentConfig,
    prepared: &Prepared,
    flags: AblationFlags,
) -> Result<(Denoiser, NoiseSchedule, DiffusionReport)> {
    let items = training_items(&prepared.train, Some(&prepared.kb), flags, config)?;
    let mut rng = RngState::new(prepared.seed).fork("denoiser-init");
    let mut model = Denoiser::init(config.denoiser_config(), &mut rng);
    let dcfg = DiffusionConfig {
        seed: prepared.seed,
        ..config.diffusion.clone()
    };
    let sched = dcfg.schedule()?;
    let report = train_diffusion(&items, &mut model, &sched, &dcfg)?;
    Ok((model, sched, report))
}

/// Sampling seed of evaluation item `i`; shared by all rows.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    RngState::new(seed).fork("eval-sample").fork_index(i as u64).next_u64()
}

pub fn generate_eval_images(
    config: &ExperimentConfig,
    prepared: &Prepared,
    flags: AblationFlags,
    model: &Denoiser,
    sched: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    let grid = model.config.grid;
    prepared
        .eval
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cond = condition_for(&s.labels, &s.pose_image, Some(&prepared.kb), flags, config.fusion, grid)?;
            ddim_sample(
                &cond,
                model,
                sched,
                config.sample_steps,
                sample_seed(prepared.seed, i),
                config.guidance,
            )
        })
        .collect()
}

pub fn evaluate_images(
    config: &ExperimentConfig,
    prepared: &Prepared,
    images: &[Tensor],
) -> Result<MetricReport> {
    let keypoints: Vec<Vec<Keypoint>> = prepared.eval.iter().map(|s| s.keypoints.clone()).collect();
    let classes: Vec<PoseClass> = prepared.eval.iter().map(|s| s.class).collect();
    let prompts: Vec<PromptComponents> = prepared.eval.iter().map(|s| s.labels.clone()).collect();
    let reference: Vec<Tensor> = prepared.eval.iter().map(|s| s.image.clone()).collect();
    let candidates: Vec<PromptComponents> = config.classes().iter().map(|c| c.labels()).collect();
    Ok(MetricReport {
        pose_pck: eval_pose_pck(images, &keypoints, &classes, config.pck_threshold)?,
        frechet_proxy: eval_frechet_proxy(images, &reference, &prepared.kb.extractor)?,
        label_consistency: eval_label_consistency(images, &prompts, &candidates, &prepared.kb)?,
    })
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub flags: AblationFlags,
    pub report: MetricReport,
    pub losses: Vec<f64>,
}

pub fn run_cell(config: &ExperimentConfig, prepared: &Prepared, flags: AblationFlags) -> Result<CellResult> {
    let (model, sched, report) = train_cell(config, prepared, flags)?;
    let images = generate_eval_images(config, prepared, flags, &model, &sched)?;
    Ok(CellResult {
        flags,
        report: evaluate_images(config, prepared, &images)?,
        losses: report.epoch_losses,
    })
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// `cells[s][r]`: seed `s`, row `r` of [`ABLATION_ROWS`].
    pub cells: Vec<Vec<CellResult>>,
}

impl AblationTable {
    pub fn mean(&self, row: usize) -> Result<MetricReport> {
        let reports: Vec<MetricReport> = self.cells.iter().map(|c| c[row].report).collect();
        MetricReport::mean(&reports)
    }

    /// One line per row with seed-averaged metrics.
    pub fn to_csv(&self) -> Result<String> {
        let mut rows = Vec::new();
        for (r, flags) in ABLATION_ROWS.iter().enumerate() {
            rows.push(format!("{},{},{}", flags.label(), self.mean(r)?.csv_fields(), self.seeds.len()));
        }
        Ok(csv("config,pose_pck,frechet_proxy,label_consistency,seeds", rows))
    }

    /// Per-seed metrics, one line per (seed, row).
    pub fn to_csv_per_seed(&self) -> String {
        let mut rows = Vec::new();
        for (seed, cells) in self.seeds.iter().zip(&self.cells) {
            for c in cells {
                rows.push(format!("{seed},{},{}", c.flags.label(), c.report.csv_fields()));
            }
        }
        csv("seed,config,pose_pck,frechet_proxy,label_consistency", rows)
    }

    /// The directional checks mirroring the ablation trend, with their margins.
    pub fn trend_checks(&self) -> Result<Vec<TrendCheck>> {
        let m: Vec<MetricReport> = (0..ABLATION_ROWS.len()).map(|r| self.mean(r)).collect::<Result<_>>()?;
        let dm_margin = m[2].pose_pck - m[1].pose_pck;
        let dc_margin = m[3].label_consistency - m[2].label_consistency;
        let base_margin = m[1..]
            .iter()
            .map(|r| r.pose_pck - m[0].pose_pck)
            .fold(f64::INFINITY, f64::min);
        Ok(vec![
            TrendCheck::new("pose_pck(+KB+DM) >= pose_pck(+KB)", dm_margin),
            TrendCheck::new("label_consistency(+KB+DM+D&C) >= label_consistency(+KB+DM)", dc_margin),
            TrendCheck::new("baseline has the lowest pose_pck", base_margin),
        ])
    }

    pub fn report(&self) -> Result<String> {
        let mut s = self.to_csv()?;
        s.push('\n');
        for c in self.trend_checks()? {
            s.push_str(&c.to_string());
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub name: &'static str,
    pub margin: f64,
    pub holds: bool,
}

impl TrendCheck {
    fn new(name: &'static str, margin: f64) -> Self {
        Self {
            name,
            margin,
            holds: margin >= 0.0,
        }
    }
}

impl std::fmt::Display for TrendCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.holds { "HOLDS" } else { "FAILS" };
        write!(f, "{tag} {} (margin {})", self.name, fixed(self.margin))
    }
}

/// Runs every row of [`ABLATION_ROWS`] for `config.repeats` consecutive seeds.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationTable> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.repeats as u64).map(|i| config.seed + i).collect();
    let mut cells = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let prepared = prepare(config, seed)?;
        let row = ABLATION_ROWS
            .iter()
            .map(|&flags| run_cell(config, &prepared, flags))
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    Ok(AblationTable { seeds, cells })
}
