//! Phase drivers shared by the command line and the benches.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::actstore::ActivationSet;
use crate::bundle::VectorBundle;
use crate::corpus::{self, ContrastivePair, TemplateBank, Vignette};
use crate::error::Result;
use crate::extract::{self, LayerScanReport};
use crate::factor::Factor;
use crate::intervene::{self, InterventionScan, ScanPlan, SteeringConfig, ToyBackend};
use crate::purify::{self, PurifiedVector};
use crate::rng;
use crate::toynet::{self, ToyModel, ToyModelConfig};
use crate::weighting::{self, LayerSweep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub toy: ToyModelConfig,
    pub pairs_per_factor: usize,
    pub folds: usize,
    /// Template families used for the vignette set; all when empty.
    pub families: Vec<String>,
    pub variants_per_family: usize,
    pub alpha: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            toy: ToyModelConfig::default(),
            pairs_per_factor: 200,
            folds: 5,
            families: Vec::new(),
            variants_per_family: 36,
            alpha: SteeringConfig::default_alpha("toy"),
        }
    }
}

impl PipelineConfig {
    pub fn family_ids(&self, bank: &TemplateBank) -> Vec<String> {
        if self.families.is_empty() {
            bank.family_ids()
        } else {
            self.families.clone()
        }
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(self.seed, &[rng::tag(stage)])
    }

    pub fn corpus_seed(&self) -> u64 {
        self.stage_seed("corpus")
    }

    pub fn capture_seed(&self) -> u64 {
        self.stage_seed("capture")
    }

    pub fn fold_seed(&self) -> u64 {
        self.stage_seed("folds")
    }
}

/// Filtered contrastive capture and layer scan for one factor.
#[derive(Debug, Clone)]
pub struct FactorExtraction {
    pub factor: Factor,
    pub generated: usize,
    pub kept: usize,
    pub set: ActivationSet,
    pub scan: LayerScanReport,
}

/// Captures `pairs` and keeps only those the model judges consistently with
/// their labels. Returns the filtered set and the number of pairs kept.
pub fn capture_consistent(
    model: &ToyModel,
    pairs: &[ContrastivePair],
    factor: Factor,
    cfg: &PipelineConfig,
) -> Result<(ActivationSet, usize)> {
    let captured = toynet::capture_pairs(model, pairs, cfg.capture_seed())?;
    let judged = toynet::judge_pairs(model, &captured, factor);
    let kept = corpus::filter_pairs(pairs, &judged)?;
    let keep: HashSet<&str> = kept.iter().map(|p| p.pair_id.as_str()).collect();
    let set = captured.filter(|r| r.pair_id.as_deref().is_some_and(|p| keep.contains(p)))?;
    Ok((set, kept.len()))
}

/// Pair-level k-fold layer scan over every pair present in `set`.
pub fn scan_set(set: &ActivationSet, factor: Factor, cfg: &PipelineConfig) -> Result<LayerScanReport> {
    let ids: Vec<String> = set.pair_rows().into_iter().map(|(p, _, _)| p).collect();
    let folds = corpus::kfold_split(&ids, cfg.folds, cfg.fold_seed())?;
    extract::kfold_layer_scan(set, factor, &folds)
}

/// Generates, captures, filters and scans the pairs of one factor.
pub fn extract_factor(model: &ToyModel, bank: &TemplateBank, factor: Factor, cfg: &PipelineConfig) -> Result<FactorExtraction> {
    let pairs = corpus::atomic_pairs(bank, factor, cfg.pairs_per_factor, cfg.corpus_seed())?;
    let (set, kept) = capture_consistent(model, &pairs, factor, cfg)?;
    let scan = scan_set(&set, factor, cfg)?;
    Ok(FactorExtraction {
        factor,
        generated: pairs.len(),
        kept,
        set,
        scan,
    })
}

/// Final per-layer directions for every extracted factor.
pub fn raw_bundle(model_id: &str, extractions: &[FactorExtraction]) -> Result<VectorBundle> {
    let dim = extractions.first().map_or(0, |e| e.set.dim());
    let mut bundle = VectorBundle::new(model_id, "raw", dim);
    for e in extractions {
        for cv in extract::fit_all_layers(&e.set, e.factor)?.0 {
            bundle.insert(e.factor, cv.layer, cv.direction)?;
        }
    }
    Ok(bundle)
}

pub struct ToyRun {
    pub model: ToyModel,
    pub extractions: Vec<FactorExtraction>,
    pub raw: VectorBundle,
    pub purified: VectorBundle,
    pub purification: Vec<PurifiedVector>,
    pub vignettes: Vec<Vignette>,
    pub vignette_set: ActivationSet,
    pub regression: LayerSweep,
    pub steering: InterventionScan,
}

/// Runs every phase against the toy backend.
pub fn run_toy(cfg: &PipelineConfig) -> Result<ToyRun> {
    let model = toynet::init_model(cfg.toy.clone())?;
    let bank = TemplateBank::builtin();
    let extractions = Factor::ALL
        .iter()
        .map(|&f| extract_factor(&model, &bank, f, cfg))
        .collect::<Result<Vec<_>>>()?;
    let raw = raw_bundle(&model.model_id(), &extractions)?;
    let (purified, purification) = purify::purify_bundle(&raw)?;
    let vignettes = corpus::fill_templates(&bank, &cfg.family_ids(&bank), cfg.variants_per_family, cfg.corpus_seed())?;
    let vignette_set = toynet::capture_vignettes(&model, &vignettes, cfg.capture_seed())?;
    let regression = weighting::layer_sweep(&vignette_set, &raw, &purified, None)?;
    let backend = ToyBackend::new(&model, cfg.capture_seed());
    let plan = ScanPlan {
        alpha: cfg.alpha,
        ..ScanPlan::for_family("toy")
    };
    let partition = intervene::partition_baseline(&backend, vignette_set.records())?;
    let steering = intervene::layer_intervention_scan(&backend, vignette_set.records(), &partition, &purified, &plan)?;
    Ok(ToyRun {
        model,
        extractions,
        raw,
        purified,
        purification,
        vignettes,
        vignette_set,
        regression,
        steering,
    })
}
