//! Staged training: single-stream fine-tuning, context-stream surgery and
//! joint training with a frozen decoder.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::geometry::{make_context_3d, sample_pose, PoseBounds, RenderConfig};
use crate::harness::dataset::Sample;
use crate::harness::pipeline::{assemble_contexts, token_map, ContextAssembly, MatchSource, Resources};
use crate::nn::{AdamW, AdamWConfig, DualStreamModel, Gradients, ParamGroup, PlateauScheduler, Tensor};
use crate::retrieval::{ContextSample, RetrievalConfig};
use crate::correspondence::{CorrespondenceSet, MatchConfig, TokenMatchMap};
use crate::rng::SeededRng;

/// Training stages in the order they must run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Initial single-stream weights (random or loaded).
    Initialized = 1,
    SingleStream = 2,
    ContextInit = 3,
    Joint = 4,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        Ok(match n {
            1 => Stage::Initialized,
            2 => Stage::SingleStream,
            3 => Stage::ContextInit,
            4 => Stage::Joint,
            _ => return Err(RadError::Config(format!("no training stage {n}"))),
        })
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

/// Fractions of joint-training samples whose contexts come from retrieval and
/// from 3D augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextMix {
    pub retrieval: f64,
    pub augmentation: f64,
}

impl Default for ContextMix {
    fn default() -> Self {
        Self {
            retrieval: 0.5,
            augmentation: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub single_stream_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub single_stream_lr: f64,
    pub joint_lr: f64,
    pub optimizer: AdamWConfig,
    pub silog_lambda: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub mix: ContextMix,
    pub max_angle_deg: f64,
    /// Translation bound as a fraction of the sample's median depth.
    pub translation_fraction: f64,
    pub render: RenderConfig,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            single_stream_epochs: 10,
            joint_epochs: 10,
            batch_size: 4,
            single_stream_lr: 5e-5,
            joint_lr: 5e-5,
            optimizer: AdamWConfig::default(),
            silog_lambda: crate::nn::model::SILOG_LAMBDA,
            grad_clip: None,
            mix: ContextMix::default(),
            max_angle_deg: 10.0,
            translation_fraction: 0.05,
            render: RenderConfig::default(),
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let m = self.mix;
        if !(0.0..=1.0).contains(&m.retrieval) || !(0.0..=1.0).contains(&m.augmentation) {
            return Err(RadError::Config("context mix fractions must lie in [0, 1]".into()));
        }
        if (m.retrieval + m.augmentation - 1.0).abs() > 1e-9 {
            return Err(RadError::Config(format!(
                "context mix must sum to 1, got {}",
                m.retrieval + m.augmentation
            )));
        }
        if self.batch_size == 0 {
            return Err(RadError::Config("batch size must be positive".into()));
        }
        if !(self.single_stream_lr > 0.0 && self.joint_lr > 0.0) {
            return Err(RadError::Config("learning rates must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(RadError::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RadError::io(path, e))?;
        let plan: TrainPlan = toml::from_str(&text).map_err(|e| RadError::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub steps: usize,
    /// Samples without a defined loss (no valid ground truth).
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextCounts {
    pub retrieval: usize,
    pub augmentation: usize,
    /// Retrieval was drawn but the sample had no retrieved contexts.
    pub retrieval_unavailable: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Option<Stage>,
    pub epochs: Vec<EpochLog>,
    pub contexts: ContextCounts,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// A model together with the last stage it completed.
#[derive(Clone)]
pub struct StagedModel {
    pub model: DualStreamModel,
    pub completed: Stage,
}

impl StagedModel {
    pub fn initialized(model: DualStreamModel) -> Self {
        Self {
            model,
            completed: Stage::Initialized,
        }
    }

    fn require(&self, next: Stage) -> Result<()> {
        if self.completed.number() + 1 != next.number() {
            return Err(RadError::Config(format!(
                "stage {} needs stage {} completed, model is at stage {}",
                next.number(),
                next.number() - 1,
                self.completed.number()
            )));
        }
        Ok(())
    }

    /// Fine-tunes the single-stream model; the context stream is not used.
    pub fn train_single_stream(&mut self, samples: &[&Sample], plan: &TrainPlan) -> Result<TrainLog> {
        plan.validate()?;
        self.require(Stage::SingleStream)?;
        self.model.params.unfreeze_all();
        for g in [ParamGroup::ContextPatch, ParamGroup::ContextPos, ParamGroup::ContextBlocks] {
            self.model.freeze(g, true);
        }
        let grid = self.model.config.grid();
        let empty = TokenMatchMap::empty(grid, grid, 0);
        let log = run_epochs(
            &mut self.model,
            samples,
            plan,
            Stage::SingleStream,
            plan.single_stream_epochs,
            plan.single_stream_lr,
            |_, _, _| Ok((Vec::new(), empty.clone())),
        )?;
        self.model.params.unfreeze_all();
        self.completed = Stage::SingleStream;
        Ok(log)
    }

    /// Copies the trained input stream into the context stream.
    pub fn init_context_stream(&mut self, seed: u64) -> Result<()> {
        self.require(Stage::ContextInit)?;
        self.model.init_context_stream(&mut SeededRng::derived(seed, 3))?;
        self.completed = Stage::ContextInit;
        Ok(())
    }

    /// Joint training with the decoder frozen. `bank[i]` holds the retrieved
    /// contexts for `samples[i]`.
    pub fn train_joint(&mut self, samples: &[&Sample], bank: &[ContextAssembly], plan: &TrainPlan) -> Result<TrainLog> {
        plan.validate()?;
        self.require(Stage::Joint)?;
        if bank.len() != samples.len() {
            return Err(RadError::input(format!(
                "{} retrieval entries for {} samples",
                bank.len(),
                samples.len()
            )));
        }
        self.model.params.unfreeze_all();
        self.model.freeze(ParamGroup::Decoder, true);
        let cfg = self.model.config.clone();
        let mut counts = ContextCounts::default();
        let mut log = run_epochs(
            &mut self.model,
            samples,
            plan,
            Stage::Joint,
            plan.joint_epochs,
            plan.joint_lr,
            |i, sample, rng| {
                let use_retrieval = rng.gen::<f64>() < plan.mix.retrieval;
                if use_retrieval {
                    let entry = &bank[i];
                    if !entry.contexts.is_empty() {
                        counts.retrieval += 1;
                        return Ok((entry.contexts.clone(), entry.map.clone()));
                    }
                    counts.retrieval_unavailable += 1;
                }
                counts.augmentation += 1;
                let (contexts, sets) = augmented_contexts(sample, cfg.max_contexts, plan, rng)?;
                let map = token_map(&sets, &cfg)?;
                Ok((contexts, map))
            },
        )?;
        log.contexts = counts;
        self.model.params.unfreeze_all();
        self.completed = Stage::Joint;
        Ok(log)
    }
}

/// `m` views of the sample rendered from random poses, each with its analytic
/// correspondences. Views in which nothing is visible are dropped.
pub fn augmented_contexts(
    sample: &Sample,
    m: usize,
    plan: &TrainPlan,
    rng: &mut SeededRng,
) -> Result<(Vec<ContextSample>, Vec<CorrespondenceSet>)> {
    let median = sample.depth.median().unwrap_or(1.0);
    let bounds = PoseBounds {
        max_angle_deg: plan.max_angle_deg,
        max_translation_m: plan.translation_fraction * median,
    };
    let mut contexts = Vec::with_capacity(m);
    let mut sets = Vec::with_capacity(m);
    for _ in 0..m {
        let pose = sample_pose(rng, &bounds);
        let aug = make_context_3d(&sample.image, &sample.depth, &sample.intrinsics, &pose, sample.scene_id, &plan.render)?;
        if aug.no_visible_points {
            continue;
        }
        contexts.push(aug.context);
        sets.push(aug.correspondences);
    }
    Ok((contexts, sets))
}

/// Precomputes retrieved contexts and desk matches for every sample, using
/// `resources.uncertainty_model` for the uncertainty maps.
pub fn build_retrieval_bank(
    samples: &[&Sample],
    resources: Resources<'_>,
    retrieval: &RetrievalConfig,
    matching: &MatchConfig,
    model_cfg: &crate::nn::ModelConfig,
    seed: u64,
) -> Result<Vec<ContextAssembly>> {
    samples
        .iter()
        .map(|s| {
            let mut rng = SeededRng::derived(seed, s.id);
            assemble_contexts(
                &s.image,
                s.scene_id,
                &s.segments_or_fallback(),
                resources,
                MatchSource::Desk(matching),
                retrieval,
                model_cfg,
                &mut rng,
            )
        })
        .collect()
}

fn frozen_snapshot(model: &DualStreamModel) -> Vec<(usize, Tensor)> {
    (0..model.params.len())
        .filter(|&id| model.params.is_frozen(id))
        .map(|id| (id, model.params.entry(id).value.clone()))
        .collect()
}

fn check_frozen(model: &DualStreamModel, snapshot: &[(usize, Tensor)]) -> Result<()> {
    for (id, t) in snapshot {
        let e = model.params.entry(*id);
        if e.value.data.iter().zip(&t.data).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(RadError::FrozenDrift(e.name.clone()));
        }
    }
    Ok(())
}

fn run_epochs<F>(
    model: &mut DualStreamModel,
    samples: &[&Sample],
    plan: &TrainPlan,
    stage: Stage,
    epochs: usize,
    lr: f64,
    mut example: F,
) -> Result<TrainLog>
where
    F: FnMut(usize, &Sample, &mut SeededRng) -> Result<(Vec<ContextSample>, TokenMatchMap)>,
{
    let mut rng = SeededRng::derived(plan.seed, 100 + stage.number() as u64);
    let mut optim = AdamW::new(plan.optimizer, model.params.len());
    let mut sched = PlateauScheduler::new(lr);
    let snapshot = frozen_snapshot(model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog {
        stage: Some(stage),
        ..TrainLog::default()
    };
    if let Some(dir) = &plan.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| RadError::io(dir, e))?;
    }
    for epoch in 0..epochs {
        let lr = sched.lr;
        order.shuffle(&mut rng);
        let (mut total, mut counted, mut steps, mut skipped) = (0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(plan.batch_size) {
            let mut grads = Gradients::empty(model.params.len());
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let (contexts, map) = example(i, samples[i], &mut rng)?;
                let s = samples[i];
                match model.loss_and_grad(&s.image, &contexts, &map, &s.depth, plan.silog_lambda) {
                    Ok((loss, g)) => parts.push((loss, g)),
                    Err(RadError::UndefinedLoss) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if parts.is_empty() {
                continue;
            }
            let scale = 1.0 / parts.len() as f64;
            for (loss, g) in &parts {
                total += loss;
                counted += 1;
                grads.accumulate(g, scale);
            }
            if let Some(cap) = plan.grad_clip {
                let norm = grads.global_norm();
                if norm > cap {
                    for g in grads.grads.iter_mut().flatten() {
                        g.scale(cap / norm);
                    }
                }
            }
            optim.step(&mut model.params, &grads, lr)?;
            check_frozen(model, &snapshot)?;
            steps += 1;
        }
        let mean_loss = if counted > 0 { total / counted as f64 } else { f64::NAN };
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            lr,
            steps,
            skipped,
        });
        if counted > 0 {
            sched.observe(mean_loss);
        }
        if let Some(dir) = &plan.checkpoint_dir {
            let n = stage.number();
            model.params.save(&dir.join(format!("stage{n}_epoch{epoch:03}.radw")))?;
            model.params.save(&dir.join(format!("stage{n}_last.radw")))?;
        }
    }
    Ok(log)
}
