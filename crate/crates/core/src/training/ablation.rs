//! Inference bundles compared in the ablation study.

use serde::{Deserialize, Serialize};

use super::data::SyntheticSample;
use crate::adapters::{GLOBAL_PREFIX, LORA_PREFIX};
use crate::backbone::{ModelConfig, BASE_PREFIX};
use crate::diffusion::{Pipeline, SampleConfig};
use crate::error::{Error, Result};
use crate::numeric::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full-attention control used sparsely, no fine-tuning.
    Naive,
    /// Sparse adapters fine-tuned with the local loss only.
    NoGpsi,
    /// Sparse adapters with the global embedder.
    Full,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::NoGpsi => "no_gpsi",
            Variant::Full => "full",
        }
    }
}

/// `control` holds base plus stage-two weights; `adapters` the fine-tuned groups.
pub fn build_ablation(model: &ModelConfig, control: &ParamSet<f32>, adapters: Option<&ParamSet<f32>>, variant: Variant) -> Result<Pipeline> {
    if !control.contains(&format!("{BASE_PREFIX}patch.w")) || !control.contains("control.patch.w") {
        return Err(Error::MissingWeights("base and control checkpoints".into()));
    }
    let mut ps = control.clone();
    ps.remove_prefix(LORA_PREFIX);
    ps.remove_prefix(GLOBAL_PREFIX);
    if variant != Variant::Naive {
        let a = adapters.ok_or_else(|| Error::MissingWeights(format!("adapter checkpoint for {}", variant.name())))?;
        ps.merge(a);
        if variant == Variant::NoGpsi {
            ps.remove_prefix(GLOBAL_PREFIX);
        }
    }
    Pipeline::new(model, ps)
}

/// Mean masked-pixel MSE of sparse edits against the ground-truth fill.
pub fn masked_mse(p: &Pipeline, samples: &[SyntheticSample], cfg: &SampleConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation split".into()));
    }
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let c = SampleConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
        let out = p.sample_edit(&s.video, &s.mask, &s.prompt_ids, &c)?;
        total += super::metrics::region_metrics(&out.video, &s.target, &s.mask, true)?.mse;
    }
    Ok(total / samples.len() as f64)
}
