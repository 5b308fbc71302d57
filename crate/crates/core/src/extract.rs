//! LAT framing, mean-difference concept vectors and cross-validated layer scans.

use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationSet, LayerView};
use crate::corpus::FoldAssignment;
use crate::error::{Error, Result};
use crate::factor::Factor;
use crate::linalg::{dot_f32, norm};

/// Norms below this are treated as zero.
pub const NORM_TOL: f64 = 1e-8;

/// Prompt frame that elicits one factor's representation. The suffix stops
/// mid-sentence so the next token is the model's judgement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatTemplate {
    pub factor: Factor,
    pub prefix: String,
    pub suffix: String,
}

/// Marker opening every framed prompt; its presence means "already wrapped".
pub const FRAME_MARKER: &str = "[INST]";

impl LatTemplate {
    pub fn for_factor(factor: Factor) -> LatTemplate {
        let (concept, suffix) = match factor {
            Factor::Superiority => ("advantage", "The level of advantage is"),
            Factor::Relevance => (
                "importance of this domain to the narrator",
                "The importance of this domain to the narrator is",
            ),
            Factor::Weekday => ("day mentioned", "The day mentioned is"),
            Factor::Jealousy => ("jealousy", "The level of jealousy is"),
        };
        LatTemplate {
            factor,
            prefix: format!("{FRAME_MARKER} Consider the {concept} in the following scenario: Scenario:"),
            suffix: format!("[/INST] {suffix}"),
        }
    }

    pub fn registry() -> Vec<LatTemplate> {
        Factor::ALL.iter().map(|&f| LatTemplate::for_factor(f)).collect()
    }

    pub fn id(&self) -> String {
        format!("lat:{}", self.factor)
    }

    /// `prefix + scenario + suffix`, whitespace-normalized. Already-framed
    /// input is rejected so a text is never wrapped twice.
    pub fn wrap(&self, scenario: &str) -> Result<String> {
        if scenario.trim().is_empty() {
            return Err(Error::Empty("scenario"));
        }
        if scenario.contains(FRAME_MARKER) || scenario.contains("[/INST]") {
            return Err(Error::Invariant(format!(
                "scenario is already framed: {:?}",
                scenario.chars().take(40).collect::<String>()
            )));
        }
        let text = format!("{} {scenario} {}", self.prefix, self.suffix);
        Ok(text.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

pub fn wrap_lat(template: &LatTemplate, scenario: &str) -> Result<String> {
    template.wrap(scenario)
}

/// Unit concept direction for one factor at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub factor: Factor,
    pub layer: usize,
    pub direction: Vec<f64>,
    /// Norm of the mean difference before normalization.
    pub raw_norm: f64,
    pub n_pairs_used: usize,
    /// Digest of the activation set the vector was fitted on.
    pub source_hash: String,
}

/// Mean of `pos - neg` over the given row pairs.
pub fn mean_difference(view: &LayerView<'_>, rows: &[(usize, usize)]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Empty("pair rows"));
    }
    let mut acc = vec![0.0; view.dim()];
    for &(p, n) in rows {
        for ((a, x), y) in acc.iter_mut().zip(view.row(p)).zip(view.row(n)) {
            *a += f64::from(*x) - f64::from(*y);
        }
    }
    let k = rows.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

/// Unit vector and original norm; fails on a (near-)zero input.
pub fn normalize(v: &[f64], what: &str) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !(n > NORM_TOL) {
        return Err(Error::Degenerate {
            what: what.to_owned(),
            norm: n,
        });
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

pub fn fit_concept(
    set: &ActivationSet,
    factor: Factor,
    layer: usize,
    rows: &[(usize, usize)],
) -> Result<ConceptVector> {
    fit_hashed(set, factor, layer, rows, set.digest())
}

fn fit_hashed(
    set: &ActivationSet,
    factor: Factor,
    layer: usize,
    rows: &[(usize, usize)],
    source_hash: String,
) -> Result<ConceptVector> {
    let view = set.select_layer(layer)?;
    let diff = mean_difference(&view, rows)?;
    let (direction, raw_norm) = normalize(&diff, &format!("{factor} mean difference at layer {layer}"))?;
    Ok(ConceptVector {
        factor,
        layer,
        direction,
        raw_norm,
        n_pairs_used: rows.len(),
        source_hash,
    })
}

/// Fraction of pairs whose positive half projects strictly higher. Ties
/// count as failures.
pub fn projection_accuracy(view: &LayerView<'_>, direction: &[f64], rows: &[(usize, usize)]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Empty("pair rows"));
    }
    if direction.len() != view.dim() {
        return Err(Error::DimMismatch {
            expected: view.dim(),
            actual: direction.len(),
        });
    }
    let hits = rows
        .iter()
        .filter(|&&(p, n)| dot_f32(view.row(p), direction) > dot_f32(view.row(n), direction))
        .count();
    Ok(hits as f64 / rows.len() as f64)
}

/// Longest run of at least `min_len` consecutive layers with accuracy
/// `>= threshold`, as an inclusive range. The earliest run wins ties.
pub fn stable_range(mean_accuracy: &[f64], threshold: f64, min_len: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for i in 0..=mean_accuracy.len() {
        let ok = mean_accuracy.get(i).is_some_and(|&a| a >= threshold);
        match (ok, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let len = i - s;
                let best_len = best.map_or(0, |(a, b)| b - a + 1);
                if len >= min_len.max(1) && len > best_len {
                    best = Some((s, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScanReport {
    pub factor: Factor,
    pub k: usize,
    pub n_pairs: usize,
    /// `fold_accuracy[f][l]`: held-out accuracy of fold `f` at layer `l`.
    pub fold_accuracy: Vec<Vec<f64>>,
    pub mean_accuracy: Vec<f64>,
    pub std_accuracy: Vec<f64>,
    pub stable_range: Option<(usize, usize)>,
    /// Layers where some fold produced a degenerate mean difference.
    pub degenerate_layers: Vec<usize>,
}

impl LayerScanReport {
    pub fn best_layer(&self) -> usize {
        let mut best = 0;
        for (l, &a) in self.mean_accuracy.iter().enumerate() {
            if a > self.mean_accuracy[best] {
                best = l;
            }
        }
        best
    }
}

pub const STABLE_THRESHOLD: f64 = 0.9;
pub const STABLE_MIN_LEN: usize = 3;

/// K-fold pair-level scan over every layer of `set`.
pub fn kfold_layer_scan(set: &ActivationSet, factor: Factor, folds: &FoldAssignment) -> Result<LayerScanReport> {
    let pairs = set.pair_rows();
    let k = folds.k;
    if pairs.len() < k {
        return Err(Error::TooFewPairs { k, n: pairs.len() });
    }
    let mut by_fold: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k];
    for (id, p, n) in &pairs {
        let f = folds
            .fold_of(id)
            .ok_or_else(|| Error::Invariant(format!("pair {id:?} has no fold")))?;
        if f >= k {
            return Err(Error::Invariant(format!("pair {id:?} in fold {f} of {k}")));
        }
        by_fold[f].push((*p, *n));
    }
    if let Some(f) = by_fold.iter().position(Vec::is_empty) {
        return Err(Error::EmptyFold(f));
    }

    let layers = set.layers();
    let views: Vec<_> = (0..layers).map(|l| set.select_layer(l)).collect::<Result<_>>()?;
    let mut fold_accuracy = vec![vec![0.0; layers]; k];
    let mut degenerate = std::collections::BTreeSet::new();
    for f in 0..k {
        let test = &by_fold[f];
        let train: Vec<_> = (0..k).filter(|&g| g != f).flat_map(|g| by_fold[g].iter().copied()).collect();
        for i in 0..layers {
            let diff = mean_difference(&views[i], &train)?;
            let Ok((dir, _)) = normalize(&diff, "fold mean difference") else {
                // No direction: every held-out pair counts as a miss.
                degenerate.insert(i);
                continue;
            };
            fold_accuracy[f][i] = projection_accuracy(&views[i], &dir, test)?;
        }
    }
    let mean_accuracy: Vec<f64> = (0..layers)
        .map(|l| fold_accuracy.iter().map(|r| r[l]).sum::<f64>() / k as f64)
        .collect();
    let std_accuracy = (0..layers)
        .map(|l| {
            let col: Vec<f64> = fold_accuracy.iter().map(|r| r[l]).collect();
            crate::linalg::sample_std(&col)
        })
        .collect();
    Ok(LayerScanReport {
        factor,
        k,
        n_pairs: pairs.len(),
        stable_range: stable_range(&mean_accuracy, STABLE_THRESHOLD, STABLE_MIN_LEN),
        fold_accuracy,
        mean_accuracy,
        std_accuracy,
        degenerate_layers: degenerate.into_iter().collect(),
    })
}

fn all_rows(set: &ActivationSet) -> Vec<(usize, usize)> {
    set.pair_rows().into_iter().map(|(_, p, n)| (p, n)).collect()
}

/// Final per-layer vectors fitted on every pair of `set`. Layers whose mean
/// difference is degenerate are skipped and listed separately.
pub fn fit_all_layers(set: &ActivationSet, factor: Factor) -> Result<(Vec<ConceptVector>, Vec<usize>)> {
    let rows = all_rows(set);
    let hash = set.digest();
    let mut vectors = Vec::new();
    let mut skipped = Vec::new();
    for l in 0..set.layers() {
        match fit_hashed(set, factor, l, &rows, hash.clone()) {
            Ok(v) => vectors.push(v),
            Err(Error::Degenerate { .. }) => skipped.push(l),
            Err(e) => return Err(e),
        }
    }
    Ok((vectors, skipped))
}

/// Accuracy of the layer-`i` direction on the layer-`j` pairs.
pub fn cross_layer_transfer(set: &ActivationSet, vector: &ConceptVector, layer: usize) -> Result<f64> {
    projection_accuracy(&set.select_layer(layer)?, &vector.direction, &all_rows(set))
}

/// Full `i x j` transfer matrix over `vectors` (one per fitted layer) and all
/// layers of `set`.
pub fn transfer_matrix(set: &ActivationSet, vectors: &[ConceptVector]) -> Result<Vec<Vec<f64>>> {
    vectors
        .iter()
        .map(|v| (0..set.layers()).map(|j| cross_layer_transfer(set, v, j)).collect())
        .collect()
}
