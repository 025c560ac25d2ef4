//! End-to-end inference: retrieve contexts, match, build the token map, run
//! the dual-stream model.

use serde::{Deserialize, Serialize};

use crate::correspondence::{
    expand_matching_tokens, match_desk, pixels_to_tokens, CorrespondenceSet, MatchConfig, TokenMatchMap,
};
use crate::error::{RadError, Result};
use crate::image::{DepthMap, ImageBuffer};
use crate::nn::{DualStreamModel, ModelConfig};
use crate::retrieval::{
    retrieve_context, ContextSample, DescriptorIndex, KnnHit, RetrievalConfig, RetrievalStatus, SampleStore,
};
use crate::rng::SeededRng;
use crate::segment::SegmentMap;
use crate::uncertainty::DepthModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Each input token sees only its matched context tokens.
    #[default]
    Matched,
    /// Each input token sees every context token.
    FullContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub retrieval: RetrievalConfig,
    pub matching: MatchConfig,
    pub attention: AttentionMode,
}

/// Where pixel correspondences come from.
#[derive(Debug, Clone, Copy)]
pub enum MatchSource<'a> {
    Desk(&'a MatchConfig),
    /// One set per retrieved context, in rank order.
    Precomputed(&'a [CorrespondenceSet]),
}

/// Pool access plus the frozen model used for uncertainty estimation.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub index: &'a DescriptorIndex,
    pub pool: &'a dyn SampleStore,
    pub uncertainty_model: &'a dyn DepthModel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub uncertainty_mean: Option<f64>,
    pub uncertainty_max: Option<f64>,
    pub kept_segments: Vec<u32>,
    pub fell_back_to_unmasked: bool,
    pub retrieved: Vec<KnnHit>,
    pub pixel_matches: Vec<usize>,
    pub token_matches: usize,
    pub status: Option<RetrievalStatus>,
}

#[derive(Debug, Clone)]
pub struct ContextAssembly {
    pub contexts: Vec<ContextSample>,
    pub correspondences: Vec<CorrespondenceSet>,
    pub map: TokenMatchMap,
    pub diagnostics: Diagnostics,
}

impl ContextAssembly {
    pub fn none(cfg: &ModelConfig) -> Self {
        let grid = cfg.grid();
        Self {
            contexts: Vec::new(),
            correspondences: Vec::new(),
            map: TokenMatchMap::empty(grid, grid, 0),
            diagnostics: Diagnostics::default(),
        }
    }

    /// Swaps the matched map for full-context attention over the same contexts.
    pub fn with_attention(mut self, mode: AttentionMode) -> Self {
        if mode == AttentionMode::FullContext {
            let m = self.contexts.len();
            self.map = TokenMatchMap::full(self.map.input_grid, self.map.context_grid, m);
        }
        self
    }
}

/// Builds the token map from per-context pixel correspondences.
pub fn token_map(sets: &[CorrespondenceSet], cfg: &ModelConfig) -> Result<TokenMatchMap> {
    let raw: Vec<_> = sets.iter().map(|s| pixels_to_tokens(s, cfg.patch)).collect();
    let grid = cfg.grid();
    expand_matching_tokens(&raw, cfg.neighborhood_radius, grid, grid, sets.len()).map_err(|e| e.in_stage("expand"))
}

/// Retrieval, matching and token-map construction. `M = 0` yields an empty
/// assembly without touching the pool.
#[allow(clippy::too_many_arguments)]
pub fn assemble_contexts(
    image: &ImageBuffer,
    scene_id: u32,
    segments: &SegmentMap,
    resources: Resources<'_>,
    matches: MatchSource<'_>,
    retrieval: &RetrievalConfig,
    model_cfg: &ModelConfig,
    rng: &mut SeededRng,
) -> Result<ContextAssembly> {
    if retrieval.m > model_cfg.max_contexts {
        return Err(RadError::Config(format!(
            "retrieval asks for {} contexts, the model holds {}",
            retrieval.m, model_cfg.max_contexts
        )));
    }
    if retrieval.m == 0 {
        return Ok(ContextAssembly::none(model_cfg));
    }
    let outcome = retrieve_context(
        image,
        scene_id,
        resources.uncertainty_model,
        segments,
        resources.index,
        resources.pool,
        retrieval,
        rng,
    )
    .map_err(|e| e.in_stage("retrieve"))?;

    let correspondences = match matches {
        MatchSource::Desk(mc) => outcome.contexts.iter().map(|c| match_desk(image, &c.image, mc)).collect(),
        MatchSource::Precomputed(sets) => {
            if sets.len() < outcome.contexts.len() {
                return Err(RadError::input(format!(
                    "{} match sets supplied for {} contexts",
                    sets.len(),
                    outcome.contexts.len()
                ))
                .in_stage("match"));
            }
            let mut out = Vec::with_capacity(outcome.contexts.len());
            for (c, s) in outcome.contexts.iter().zip(sets) {
                let a = (image.width(), image.height());
                let b = (c.image.width(), c.image.height());
                if s.image_a_size != a || s.image_b_size != b {
                    return Err(RadError::input("match set sizes disagree with the images").in_stage("match"));
                }
                if let Some((i, why)) = s.first_violation() {
                    return Err(RadError::input(format!("match {i}: {why}")).in_stage("match"));
                }
                out.push(s.clone());
            }
            out
        }
    };
    let map = token_map(&correspondences, model_cfg)?;

    let diagnostics = Diagnostics {
        uncertainty_mean: outcome.uncertainty.as_ref().map(|u| u.mean()),
        uncertainty_max: outcome.uncertainty.as_ref().map(|u| u.max()),
        kept_segments: outcome.kept_segments.iter().copied().collect(),
        fell_back_to_unmasked: outcome.fell_back_to_unmasked,
        retrieved: outcome.hits.clone(),
        pixel_matches: correspondences.iter().map(CorrespondenceSet::len).collect(),
        token_matches: map.total_matches(),
        status: Some(outcome.status),
    };
    Ok(ContextAssembly {
        contexts: outcome.contexts,
        correspondences,
        map,
        diagnostics,
    })
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub depth: DepthMap,
    pub assembly: ContextAssembly,
}

/// Runs the full pipeline on one image.
#[allow(clippy::too_many_arguments)]
pub fn run_inference(
    image: &ImageBuffer,
    scene_id: u32,
    segments: &SegmentMap,
    model: &DualStreamModel,
    resources: Resources<'_>,
    matches: MatchSource<'_>,
    cfg: &InferenceConfig,
    rng: &mut SeededRng,
) -> Result<InferenceOutput> {
    let assembly = assemble_contexts(image, scene_id, segments, resources, matches, &cfg.retrieval, &model.config, rng)?
        .with_attention(cfg.attention);
    let depth = predict_assembled(model, image, &assembly)?;
    Ok(InferenceOutput { depth, assembly })
}

pub fn predict_assembled(model: &DualStreamModel, image: &ImageBuffer, assembly: &ContextAssembly) -> Result<DepthMap> {
    model
        .predict_with(image, &assembly.contexts, &assembly.map)
        .map_err(|e| e.in_stage("encode"))
}
