//! Stimulation, suppression and orthogonal knockout of factor directions
//! during a forward pass, and the per-layer causal scan built on them.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::actstore::RecordMeta;
use crate::bundle::VectorBundle;
use crate::error::{Error, Result};
use crate::factor::Factor;
use crate::linalg::{dot, norm};
use crate::toynet::{Frame, Stimulus, ToyModel};

/// Percentage points per unit of score change on the 1-5 scale.
pub const PCT_PER_POINT: f64 = 25.0;
/// Minimum |delta| for an antecedent to count as causally effective.
pub const EFFECT_THRESHOLD: f64 = 0.5;
/// Baseline cut between the low and high groups.
pub const SCORE_CUT: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Stimulate,
    Suppress,
    Knockout,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Stimulate, Mode::Suppress, Mode::Knockout];

    /// Group the mode is evaluated on.
    pub fn group(self) -> Group {
        match self {
            Mode::Stimulate => Group::Low,
            Mode::Suppress | Mode::Knockout => Group::High,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Low,
    High,
}

/// One intervention: strength, mode, layer and steered factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub alpha: f64,
    pub mode: Mode,
    pub layer: usize,
    pub factor: Factor,
}

impl SteeringConfig {
    /// Default steering strength by model family.
    pub fn default_alpha(family: &str) -> f64 {
        let f = family.to_ascii_lowercase();
        if f.starts_with("toy") {
            3.0
        } else if f.contains("gemma") {
            3000.0
        } else {
            15.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            Mode::Knockout => true,
            _ => self.alpha > 0.0 && self.alpha.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("steering alpha must be positive, got {}", self.alpha)))
        }
    }
}

/// Grid evaluated by [`layer_intervention_scan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub alpha: f64,
    pub modes: Vec<Mode>,
    /// Restrict the scan to these layers; every layer the bundle covers when
    /// `None`.
    pub layers: Option<Vec<usize>>,
    pub factors: Vec<Factor>,
    /// Gate on |mean delta| used to find the target layer interval.
    pub effect_threshold: f64,
}

impl ScanPlan {
    pub fn for_family(family: &str) -> Self {
        ScanPlan {
            alpha: SteeringConfig::default_alpha(family),
            modes: Mode::ALL.to_vec(),
            layers: None,
            factors: Factor::PREDICTORS.to_vec(),
            effect_threshold: EFFECT_THRESHOLD,
        }
    }
}

fn check_unit(dir: &[f64]) -> Result<()> {
    let n = norm(dir);
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnit(n));
    }
    Ok(())
}

/// `h + sign * alpha * dir` with `sign = +1` for stimulation, `-1` for
/// suppression.
pub fn steer(h: &[f64], dir: &[f64], alpha: f64, mode: Mode) -> Result<Vec<f64>> {
    check_unit(dir)?;
    let s = match mode {
        Mode::Stimulate => alpha,
        Mode::Suppress => -alpha,
        Mode::Knockout => return knockout(h, dir),
    };
    Ok(h.iter().zip(dir).map(|(x, v)| x + s * v).collect())
}

/// `h - (h . dir) dir`.
pub fn knockout(h: &[f64], dir: &[f64]) -> Result<Vec<f64>> {
    check_unit(dir)?;
    let c = dot(h, dir);
    Ok(h.iter().zip(dir).map(|(x, v)| x - c * v).collect())
}

/// A model that can be scored with an edit applied to one hidden state.
pub trait Backend {
    fn num_states(&self) -> usize;
    fn dim(&self) -> usize;
    fn baseline_score(&self, record: &RecordMeta) -> Result<f64>;
    fn edited_score(&self, record: &RecordMeta, layer: usize, edit: &dyn Fn(&[f64]) -> Result<Vec<f64>>) -> Result<f64>;
}

/// Backend over the toy model; records are replayed from their metadata
/// under the jealousy rating frame.
pub struct ToyBackend<'a> {
    model: &'a ToyModel,
    seed: u64,
    cache: Mutex<HashMap<String, std::sync::Arc<Vec<Vec<f64>>>>>,
}

impl<'a> ToyBackend<'a> {
    pub fn new(model: &'a ToyModel, seed: u64) -> Self {
        ToyBackend {
            model,
            seed,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn states(&self, record: &RecordMeta) -> (Stimulus, std::sync::Arc<Vec<Vec<f64>>>) {
        let stim = Stimulus::for_record(record, Frame::Jealousy, self.seed);
        let mut cache = self.cache.lock().expect("cache lock");
        let states = cache
            .entry(record.record_id.clone())
            .or_insert_with(|| std::sync::Arc::new(self.model.encode(&stim)))
            .clone();
        (stim, states)
    }
}

impl Backend for ToyBackend<'_> {
    fn num_states(&self) -> usize {
        self.model.num_states()
    }

    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn baseline_score(&self, record: &RecordMeta) -> Result<f64> {
        let (_, states) = self.states(record);
        self.model.predict_score(states.last().expect("at least one state"))
    }

    fn edited_score(&self, record: &RecordMeta, layer: usize, edit: &dyn Fn(&[f64]) -> Result<Vec<f64>>) -> Result<f64> {
        let (stim, states) = self.states(record);
        let h = states.get(layer).ok_or(Error::LayerOutOfRange {
            layer,
            count: states.len(),
        })?;
        let edited = edit(h)?;
        Ok(self.model.forward_from(&stim, layer, &edited)?.1)
    }
}

/// Stand-in for backends that captured activations but cannot re-run the
/// model.
pub struct NoHook {
    pub reason: String,
    pub states: usize,
    pub dim: usize,
}

impl Backend for NoHook {
    fn num_states(&self) -> usize {
        self.states
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn baseline_score(&self, _: &RecordMeta) -> Result<f64> {
        Err(Error::HookUnavailable(self.reason.clone()))
    }

    fn edited_score(&self, _: &RecordMeta, _: usize, _: &dyn Fn(&[f64]) -> Result<Vec<f64>>) -> Result<f64> {
        Err(Error::HookUnavailable(self.reason.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Record indices with ground truth <= 2 and baseline below the cut.
    pub low: Vec<usize>,
    /// Record indices with ground truth 5 and baseline above the cut.
    pub high: Vec<usize>,
    pub baseline: Vec<f64>,
    /// Records sitting exactly on the cut.
    pub on_cut: usize,
}

impl Partition {
    pub fn group(&self, g: Group) -> &[usize] {
        match g {
            Group::Low => &self.low,
            Group::High => &self.high,
        }
    }
}

/// Scores every record without intervention and splits them by
/// [`partition_scores`].
pub fn partition_baseline(backend: &dyn Backend, records: &[RecordMeta]) -> Result<Partition> {
    let scores = records
        .iter()
        .map(|r| backend.baseline_score(r))
        .collect::<Result<Vec<_>>>()?;
    partition_scores(records, scores)
}

/// Low group: ground truth <= 2 and score below the cut. High group: ground
/// truth 5 and score above it. Scores exactly on the cut join neither.
pub fn partition_scores(records: &[RecordMeta], scores: Vec<f64>) -> Result<Partition> {
    if scores.len() != records.len() {
        return Err(Error::DimMismatch {
            expected: records.len(),
            actual: scores.len(),
        });
    }
    let mut p = Partition {
        low: Vec::new(),
        high: Vec::new(),
        baseline: Vec::new(),
        on_cut: 0,
    };
    for (i, (rec, &s)) in records.iter().zip(&scores).enumerate() {
        let gt = rec
            .ground_truth
            .ok_or_else(|| Error::Invariant(format!("record {:?} has no ground truth", rec.record_id)))?;
        if s == SCORE_CUT {
            p.on_cut += 1;
        } else if gt <= 2 && s < SCORE_CUT {
            p.low.push(i);
        } else if gt == 5 && s > SCORE_CUT {
            p.high.push(i);
        }
    }
    p.baseline = scores;
    Ok(p)
}

/// Score change of one record under one intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub record_id: String,
    pub factor: Factor,
    pub layer: usize,
    pub mode: Mode,
    pub alpha: f64,
    pub s_pre: f64,
    pub s_post: f64,
    pub delta: f64,
    pub delta_pct: f64,
}

pub fn apply_and_score(
    backend: &dyn Backend,
    record: &RecordMeta,
    config: &SteeringConfig,
    direction: &[f64],
) -> Result<InterventionResult> {
    config.validate()?;
    if direction.len() != backend.dim() {
        return Err(Error::DimMismatch {
            expected: backend.dim(),
            actual: direction.len(),
        });
    }
    check_unit(direction)?;
    let s_pre = backend.baseline_score(record)?;
    let edit = |h: &[f64]| steer(h, direction, config.alpha, config.mode);
    let s_post = backend.edited_score(record, config.layer, &edit)?;
    let delta = s_post - s_pre;
    Ok(InterventionResult {
        record_id: record.record_id.clone(),
        factor: config.factor,
        layer: config.layer,
        mode: config.mode,
        alpha: config.alpha,
        s_pre,
        s_post,
        delta,
        delta_pct: PCT_PER_POINT * delta,
    })
}

/// Mean per-record change of one (factor, layer, mode) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanCell {
    pub factor: Factor,
    pub layer: usize,
    pub mode: Mode,
    pub alpha: f64,
    pub n: usize,
    pub mean_delta: f64,
    pub mean_delta_pct: f64,
}

/// Applies `config` to every record of the group its mode targets.
pub fn score_group(
    backend: &dyn Backend,
    records: &[RecordMeta],
    partition: &Partition,
    config: &SteeringConfig,
    direction: &[f64],
) -> Result<ScanCell> {
    let idx = partition.group(config.mode.group());
    if idx.is_empty() {
        return Err(Error::Empty(match config.mode.group() {
            Group::Low => "low baseline group",
            Group::High => "high baseline group",
        }));
    }
    let mut total = 0.0;
    for &i in idx {
        total += apply_and_score(backend, &records[i], config, direction)?.delta;
    }
    let mean_delta = total / idx.len() as f64;
    Ok(ScanCell {
        factor: config.factor,
        layer: config.layer,
        mode: config.mode,
        alpha: config.alpha,
        n: idx.len(),
        mean_delta,
        mean_delta_pct: PCT_PER_POINT * mean_delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub factor: Factor,
    pub layer: usize,
    pub mode: Mode,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionScan {
    pub alpha: f64,
    pub n_low: usize,
    pub n_high: usize,
    pub cells: Vec<ScanCell>,
    pub failures: Vec<CellFailure>,
    /// Longest layer run where both antecedents move the score by at least
    /// the effect threshold in both directions.
    pub l_target: Option<(usize, usize)>,
    /// Factors by mean |delta| over `l_target`, strongest first.
    pub ranking: Vec<(Factor, f64)>,
    /// Set when two ranked factors had equal effect and were ordered by name.
    pub tie: bool,
}

impl InterventionScan {
    pub fn get(&self, factor: Factor, layer: usize, mode: Mode) -> Option<&ScanCell> {
        self.cells
            .iter()
            .find(|r| r.factor == factor && r.layer == layer && r.mode == mode)
    }
}

fn target_run(cells: &[ScanCell], layers: &[usize], gate: f64) -> Option<(usize, usize)> {
    let effective = |l: usize| {
        Factor::ANTECEDENTS.iter().all(|&f| {
            let d = |m| {
                cells
                    .iter()
                    .find(|r| r.factor == f && r.layer == l && r.mode == m)
                    .map(|r| r.mean_delta)
            };
            matches!((d(Mode::Stimulate), d(Mode::Suppress)),
                (Some(up), Some(down)) if up >= gate && down <= -gate)
        })
    };
    let mut best: Option<(usize, usize)> = None;
    let mut run: Option<(usize, usize)> = None;
    for &l in layers {
        if effective(l) {
            run = match run {
                Some((s, e)) if e + 1 == l => Some((s, l)),
                _ => Some((l, l)),
            };
            let r = run.expect("just set");
            if best.is_none_or(|(s, e)| r.1 - r.0 > e - s) {
                best = Some(r);
            }
        } else {
            run = None;
        }
    }
    best
}

fn rank_cells(cells: &[ScanCell], range: (usize, usize), factors: &[Factor]) -> (Vec<(Factor, f64)>, bool) {
    let mut ranking: Vec<(Factor, f64)> = factors
        .iter()
        .map(|&f| {
            let ds: Vec<f64> = cells
                .iter()
                .filter(|r| {
                    r.factor == f && (range.0..=range.1).contains(&r.layer) && r.mode != Mode::Knockout
                })
                .map(|r| r.mean_delta.abs())
                .collect();
            let m = if ds.is_empty() { 0.0 } else { ds.iter().sum::<f64>() / ds.len() as f64 };
            (f, m)
        })
        .collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.name().cmp(b.0.name())));
    let tie = ranking.windows(2).any(|w| (w[0].1 - w[1].1).abs() <= 1e-12);
    (ranking, tie)
}

/// Ranks the scanned factors by mean |delta| of stimulation and suppression
/// over `L_target`. Equal effects are ordered by name and flagged.
pub fn rank_factors(scan: &InterventionScan) -> Result<(Vec<(Factor, f64)>, bool)> {
    let range = scan.l_target.ok_or(Error::Empty("target layer interval"))?;
    let mut factors: Vec<Factor> = scan.cells.iter().map(|c| c.factor).collect();
    factors.sort();
    factors.dedup();
    Ok(rank_cells(&scan.cells, range, &factors))
}

pub fn layer_intervention_scan(
    backend: &dyn Backend,
    records: &[RecordMeta],
    partition: &Partition,
    directions: &VectorBundle,
    plan: &ScanPlan,
) -> Result<InterventionScan> {
    if partition.low.is_empty() && partition.high.is_empty() {
        return Err(Error::Empty("baseline partitions"));
    }
    let layers: Vec<usize> = match &plan.layers {
        Some(ls) => ls.clone(),
        None => directions.common_layers(&plan.factors),
    };
    if layers.is_empty() {
        return Err(Error::Empty("steering layers"));
    }
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &layer in &layers {
        for &factor in &plan.factors {
            for &mode in &plan.modes {
                let config = SteeringConfig {
                    alpha: plan.alpha,
                    mode,
                    layer,
                    factor,
                };
                let cell = directions
                    .get(factor, layer)
                    .and_then(|dir| score_group(backend, records, partition, &config, dir));
                match cell {
                    Ok(c) => cells.push(c),
                    Err(e) => failures.push(CellFailure {
                        factor,
                        layer,
                        mode,
                        error: e.to_string(),
                    }),
                }
            }
        }
    }
    let l_target = target_run(&cells, &layers, plan.effect_threshold);
    let (ranking, tie) = match l_target {
        Some(r) => rank_cells(&cells, r, &plan.factors),
        None => (Vec::new(), false),
    };
    Ok(InterventionScan {
        alpha: plan.alpha,
        n_low: partition.low.len(),
        n_high: partition.high.len(),
        cells,
        failures,
        l_target,
        ranking,
        tie,
    })
}

/// Mean delta for each strength in `alphas`, other settings fixed.
pub fn alpha_sweep(
    backend: &dyn Backend,
    records: &[RecordMeta],
    partition: &Partition,
    base: &SteeringConfig,
    direction: &[f64],
    alphas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    alphas
        .iter()
        .map(|&alpha| {
            let config = SteeringConfig { alpha, ..base.clone() };
            score_group(backend, records, partition, &config, direction).map(|c| (alpha, c.mean_delta))
        })
        .collect()
}
