//! Encoded samples and batch assembly.
//!
//! The encoder is frozen, so every sample is encoded exactly once and
//! training only ever touches the cached feature maps.

use casam_tensor::{Rng, Tensor};

use crate::bench::{box_channel, BoxPrompt, FrozenBackbone, Sample, TaskData, TaskSpec, IMAGE_SIZE};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    /// `[C,h,w]` encoder output.
    pub features: Tensor,
    /// `[1,H,W]` ground truth.
    pub mask: Tensor,
    pub bbox: BoxPrompt,
}

#[derive(Debug, Clone)]
pub struct EncodedTask {
    pub spec: TaskSpec,
    pub train: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
}

impl EncodedTask {
    pub fn task_id(&self) -> u32 {
        self.spec.task_id
    }
}

pub fn encode_samples(backbone: &FrozenBackbone, samples: &[Sample]) -> Result<Vec<EncodedSample>> {
    let features = backbone.encode_all(samples)?;
    Ok(features
        .into_iter()
        .zip(samples)
        .map(|(features, s)| EncodedSample {
            features,
            mask: s.mask.clone(),
            bbox: s.bbox,
        })
        .collect())
}

pub fn encode_task(backbone: &FrozenBackbone, task: &TaskData) -> Result<EncodedTask> {
    Ok(EncodedTask {
        spec: task.spec.clone(),
        train: encode_samples(backbone, &task.train)?,
        test: encode_samples(backbone, &task.test)?,
    })
}

pub fn encode_stream(backbone: &FrozenBackbone, stream: &[TaskData]) -> Result<Vec<EncodedTask>> {
    stream.iter().map(|t| encode_task(backbone, t)).collect()
}

/// Stacked inputs for one optimisation or evaluation step.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B,C,h,w]`
    pub features: Tensor,
    /// `[B,1,H,W]`
    pub masks: Tensor,
    /// `[B,1,h,w]` box channel.
    pub boxes: Tensor,
    pub prompts: Vec<BoxPrompt>,
    /// Positions of the samples in the slice the batch was drawn from, when
    /// the caller tracks them.
    pub indices: Vec<usize>,
}

impl Batch {
    /// Stacks samples; with a generator, box prompts are jittered by up to
    /// `jitter` of their extent.
    pub fn assemble(samples: &[&EncodedSample], jitter: f64, rng: Option<&mut Rng>) -> Result<Self> {
        let prompts: Vec<BoxPrompt> = match rng {
            Some(rng) => samples
                .iter()
                .map(|s| s.bbox.jittered(jitter, IMAGE_SIZE, rng))
                .collect(),
            None => samples.iter().map(|s| s.bbox).collect(),
        };
        Self::with_prompts(samples, prompts)
    }

    /// Stacks samples with the given box prompts.
    pub fn with_prompts(samples: &[&EncodedSample], prompts: Vec<BoxPrompt>) -> Result<Self> {
        if samples.is_empty() || samples.len() != prompts.len() {
            return Err(crate::error::CoreError::invalid(format!(
                "batch of {} samples with {} prompts",
                samples.len(),
                prompts.len()
            )));
        }
        let features = Tensor::stack(&samples.iter().map(|s| &s.features).collect::<Vec<_>>())?;
        let masks = Tensor::stack(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
        Ok(Self {
            features,
            masks,
            boxes: box_channel(&prompts),
            prompts,
            indices: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}
