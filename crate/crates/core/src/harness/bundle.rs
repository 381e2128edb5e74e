//! A trained denoiser packaged with everything sampling needs.

use std::path::Path;

use crate::classifier::{Fusion, PromptComponents};
use crate::diffusion::{ddim_sample, make_schedule, ConditionBundle, Denoiser, NoiseSchedule};
use crate::dynmask::pose_to_mask;
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, Tensor};

use super::config::AblationFlags;
use super::kb::KnowledgeBase;

#[derive(Debug, Clone)]
pub struct DiffusionBundle {
    pub model: Denoiser,
    pub flags: AblationFlags,
    pub fusion: Fusion,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Present whenever `flags.kb` is set.
    pub kb: Option<KnowledgeBase>,
}

fn fusion_code(f: Fusion) -> f64 {
    match f {
        Fusion::Mean => 0.0,
        Fusion::Sum => 1.0,
        Fusion::Nearest => 2.0,
    }
}

impl DiffusionBundle {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    /// Conditions for one sample; an absent prompt or pose disables that adapter.
    pub fn condition(&self, prompt: Option<&PromptComponents>, pose_image: Option<&Tensor>) -> Result<ConditionBundle> {
        let kb_features = match (prompt, self.flags.kb) {
            (Some(p), true) => {
                let kb = self
                    .kb
                    .as_ref()
                    .ok_or_else(|| Error::Config("bundle uses KB conditioning but stores no knowledge base".into()))?;
                Some(kb.query(p, self.flags.dc, self.fusion)?)
            }
            _ => None,
        };
        let pose_mask = match (pose_image, self.flags.dm) {
            (Some(img), true) => Some(pose_to_mask(img, self.model.config.grid)?),
            _ => None,
        };
        Ok(ConditionBundle { kb_features, pose_mask })
    }

    pub fn sample(
        &self,
        prompt: Option<&PromptComponents>,
        pose_image: Option<&Tensor>,
        steps: usize,
        seed: u64,
        guidance: f64,
    ) -> Result<Tensor> {
        let cond = self.condition(prompt, pose_image)?;
        ddim_sample(&cond, &self.model, &self.schedule()?, steps, seed, guidance)
    }

    pub fn to_checkpoint(&self) -> Vec<(String, Tensor)> {
        let mut t = self.model.to_checkpoint();
        let f = |b: bool| if b { 1.0 } else { 0.0 };
        t.push((
            "bundle.flags".into(),
            Tensor::vector(vec![f(self.flags.kb), f(self.flags.dm), f(self.flags.dc), fusion_code(self.fusion)]),
        ));
        t.push((
            "bundle.schedule".into(),
            Tensor::vector(vec![self.timesteps as f64, self.beta_start, self.beta_end]),
        ));
        if let Some(kb) = &self.kb {
            t.extend(kb.to_checkpoint());
        }
        t
    }

    pub fn from_checkpoint(tensors: &[(String, Tensor)]) -> Result<Self> {
        let model = Denoiser::from_checkpoint(tensors)?;
        let flags = checkpoint::find(tensors, "bundle.flags")?.data().to_vec();
        let sched = checkpoint::find(tensors, "bundle.schedule")?.data().to_vec();
        if flags.len() != 4 || sched.len() != 3 {
            return Err(Error::Data("malformed bundle metadata".into()));
        }
        let flags_parsed = AblationFlags::new(flags[0] != 0.0, flags[1] != 0.0, flags[2] != 0.0);
        let fusion = match flags[3] as u8 {
            0 => Fusion::Mean,
            1 => Fusion::Sum,
            2 => Fusion::Nearest,
            other => return Err(Error::Data(format!("unknown fusion code {other}"))),
        };
        let kb = if flags_parsed.kb {
            Some(KnowledgeBase::from_checkpoint(tensors)?)
        } else {
            None
        };
        Ok(Self {
            model,
            flags: flags_parsed,
            fusion,
            timesteps: sched[0] as usize,
            beta_start: sched[1],
            beta_end: sched[2],
            kb,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}
