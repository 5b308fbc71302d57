//! Deterministic toy backend with planted, layer-maturing concept directions.
//!
//! States `h_0..h_L` follow
//!
//! ```text
//! h_0     = b_0 + g_0 * s(0) + eps
//! h_{l+1} = R_l h_l + b_{l+1} + g_{l+1} * s(l+1)
//! ```
//!
//! where `s(l) = sum_t y_t v_t(l)` over the planted factor directions, plus an
//! appraisal term along `v_jea(l)` when the input is framed as a jealousy
//! rating. Rotations are orthogonal, so `v_t(l) = R_{l-1}..R_0 v_t(0)` stay
//! orthonormal at every layer and the cumulative coefficient along `v_t(l)` is
//! `y_t * sum_{j<=l} g_j`.
//!
//! The readout `1 + 4 * sigmoid(kappa * w.(h_L - bias_L))` with
//! `w = a_sup v_sup(L) + a_rel v_rel(L)` ignores the weekday and appraisal
//! directions.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationSet, Polarity, RecordMeta};
use crate::corpus::{assign_ground_truth, ContrastivePair, PairJudgement, Vignette};
use crate::error::{Error, Result};
use crate::factor::Factor;
use crate::linalg::{dot, dot_f32};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub d: usize,
    pub layers: usize,
    pub seed: u64,
    /// Injection gains for states `0..=layers`; must sum to one.
    pub gamma: Vec<f64>,
    pub a_sup: f64,
    pub a_rel: f64,
    pub readout_gain: f64,
    /// Scenario noise; shared by the two halves of a contrastive pair.
    pub noise_sigma: f64,
    /// Per-text noise on top of the scenario noise.
    pub wording_sigma: f64,
    pub bias_scale: f64,
    /// Amplitude, gain and threshold of the jealousy appraisal channel.
    pub appraisal_scale: f64,
    pub appraisal_gain: f64,
    pub appraisal_threshold: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            d: 64,
            layers: 12,
            seed: 0,
            gamma: default_gamma(12),
            a_sup: 1.0,
            a_rel: 1.5,
            readout_gain: 4.0,
            noise_sigma: 0.3,
            wording_sigma: 0.01,
            bias_scale: 1.0,
            appraisal_scale: 4.0,
            appraisal_gain: 4.0,
            appraisal_threshold: 1.75,
        }
    }
}

/// Linear ramp from zero over states 0..=3, flat through `layers - 3`, zero
/// afterwards; normalized to unit sum.
pub fn default_gamma(layers: usize) -> Vec<f64> {
    let plateau_end = layers.saturating_sub(3).max(3);
    let raw: Vec<f64> = (0..=layers)
        .map(|l| match l {
            0..=3 => l as f64 / 3.0,
            l if l <= plateau_end => 1.0,
            _ => 0.0,
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|g| g / total).collect()
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 8 {
            return Err(Error::Config(format!("hidden dim {} < 8", self.d)));
        }
        if self.layers < 4 {
            return Err(Error::Config(format!("layer count {} < 4", self.layers)));
        }
        if self.gamma.len() != self.layers + 1 {
            return Err(Error::Config(format!(
                "gamma has {} entries, expected {}",
                self.gamma.len(),
                self.layers + 1
            )));
        }
        if self.gamma.iter().any(|&g| g < 0.0 || !g.is_finite()) {
            return Err(Error::Config("gamma entries must be nonnegative".into()));
        }
        let total: f64 = self.gamma.iter().sum();
        if total == 0.0 {
            return Err(Error::Config("gamma is identically zero".into()));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("gamma sums to {total}, expected 1")));
        }
        if self.noise_sigma < 0.0 || self.wording_sigma < 0.0 || self.bias_scale < 0.0 {
            return Err(Error::Config("noise and bias scales must be nonnegative".into()));
        }
        if self.readout_gain <= 0.0 {
            return Err(Error::Config("readout gain must be positive".into()));
        }
        Ok(())
    }
}

/// Elicitation frame of an input. Only the jealousy frame engages the
/// appraisal channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Neutral,
    Jealousy,
}

impl Frame {
    pub fn for_factor(factor: Factor) -> Frame {
        if factor == Factor::Jealousy {
            Frame::Jealousy
        } else {
            Frame::Neutral
        }
    }
}

/// One toy input: factor labels `(sup, rel, weekday)`, frame and noise seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stimulus {
    pub labels: [u8; 3],
    pub frame: Frame,
    pub scenario_seed: u64,
    pub wording_seed: u64,
}

impl Stimulus {
    pub fn new(labels: [u8; 3], frame: Frame, scenario_seed: u64, wording_seed: u64) -> Self {
        Stimulus {
            labels,
            frame,
            scenario_seed,
            wording_seed,
        }
    }

    /// Rebuilds the stimulus of a captured record. Pair halves share their
    /// scenario seed through the pair id.
    pub fn for_record(meta: &RecordMeta, frame: Frame, seed: u64) -> Self {
        let scenario = meta.pair_id.as_deref().unwrap_or(&meta.record_id);
        let label = |f| meta.label(f).unwrap_or(0);
        Stimulus {
            labels: [
                label(Factor::Superiority),
                label(Factor::Relevance),
                label(Factor::Weekday),
            ],
            frame,
            scenario_seed: rng::derive_seed(seed, &[rng::tag(scenario), 0]),
            wording_seed: rng::derive_seed(seed, &[rng::tag(&meta.record_id), 1]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    rotations: Vec<DMatrix<f64>>,
    biases: Vec<Vec<f64>>,
    /// `bias_traj[l]`: state at layer `l` for zero labels and zero noise.
    bias_traj: Vec<Vec<f64>>,
    /// `planted[l] = [v_sup, v_rel, v_wk, v_jea]` at layer `l`.
    planted: Vec<[Vec<f64>; 4]>,
    cumulative: Vec<f64>,
}

/// Planted unit directions at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDirections {
    pub sup: Vec<f64>,
    pub rel: Vec<f64>,
    pub weekday: Vec<f64>,
    pub appraisal: Vec<f64>,
}

fn gaussian(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn haar_orthogonal(rng: &mut impl rand::Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut *rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn init_model(config: ToyModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let (d, layers) = (config.d, config.layers);
    let mut stream = rng::stream(config.seed, &[rng::tag("toynet")]);

    let basis = DMatrix::from_fn(d, 4, |_, _| StandardNormal.sample(&mut stream));
    let q = basis.qr().q();
    let first: [Vec<f64>; 4] = std::array::from_fn(|t| q.column(t).iter().copied().collect());
    if first.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Config("could not orthonormalize planted directions".into()));
    }

    let rotations: Vec<_> = (0..layers).map(|_| haar_orthogonal(&mut stream, d)).collect();
    let biases: Vec<Vec<f64>> = (0..=layers)
        .map(|_| {
            gaussian(&mut stream, d)
                .into_iter()
                .map(|x| x * config.bias_scale)
                .collect()
        })
        .collect();

    let rotate = |r: &DMatrix<f64>, v: &[f64]| -> Vec<f64> {
        (r * DVector::from_column_slice(v)).iter().copied().collect()
    };
    let mut planted = vec![first];
    let mut bias_traj = vec![biases[0].clone()];
    for l in 0..layers {
        let next = std::array::from_fn(|t| rotate(&rotations[l], &planted[l][t]));
        planted.push(next);
        let mut b = rotate(&rotations[l], &bias_traj[l]);
        for (x, y) in b.iter_mut().zip(&biases[l + 1]) {
            *x += y;
        }
        bias_traj.push(b);
    }
    let cumulative = config
        .gamma
        .iter()
        .scan(0.0, |acc, g| {
            *acc += g;
            Some(*acc)
        })
        .collect();

    Ok(ToyModel {
        config,
        rotations,
        biases,
        bias_traj,
        planted,
        cumulative,
    })
}

impl ToyModel {
    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    /// Number of captured states, `layers + 1`.
    pub fn num_states(&self) -> usize {
        self.config.layers + 1
    }

    pub fn model_id(&self) -> String {
        format!("toy-d{}-L{}-seed{}", self.config.d, self.config.layers, self.config.seed)
    }

    pub fn rotation(&self, layer: usize) -> &DMatrix<f64> {
        &self.rotations[layer]
    }

    pub fn bias_trajectory(&self, layer: usize) -> &[f64] {
        &self.bias_traj[layer]
    }

    pub fn cumulative_gain(&self, layer: usize) -> f64 {
        self.cumulative[layer]
    }

    /// Layers whose cumulative gain reaches `threshold`.
    pub fn layers_with_gain(&self, threshold: f64) -> Vec<usize> {
        (0..self.num_states())
            .filter(|&l| self.cumulative[l] >= threshold - 1e-12)
            .collect()
    }

    pub fn planted_directions(&self, layer: usize) -> Result<PlantedDirections> {
        let p = self.planted.get(layer).ok_or(Error::LayerOutOfRange {
            layer,
            count: self.num_states(),
        })?;
        Ok(PlantedDirections {
            sup: p[0].clone(),
            rel: p[1].clone(),
            weekday: p[2].clone(),
            appraisal: p[3].clone(),
        })
    }

    /// Planted unit direction for a predictor factor, or the appraisal
    /// direction for jealousy.
    pub fn planted(&self, factor: Factor, layer: usize) -> &[f64] {
        let t = match factor {
            Factor::Superiority => 0,
            Factor::Relevance => 1,
            Factor::Weekday => 2,
            Factor::Jealousy => 3,
        };
        &self.planted[layer][t]
    }

    /// Appraisal level in `[0, 1]` for antecedent labels.
    pub fn appraisal(&self, sup: u8, rel: u8) -> f64 {
        let c = &self.config;
        sigmoid(c.appraisal_gain * (c.a_sup * f64::from(sup) + c.a_rel * f64::from(rel) - c.appraisal_threshold))
    }

    /// Direction a noiseless mean difference over this model's contrastive
    /// pairs converges to.
    pub fn expected_concept_direction(&self, factor: Factor, layer: usize) -> Vec<f64> {
        match factor {
            Factor::Jealousy => {
                let a = self.config.appraisal_scale * (self.appraisal(1, 1) - self.appraisal(0, 0));
                let p = &self.planted[layer];
                let v: Vec<f64> = (0..self.dim())
                    .map(|i| p[0][i] + p[1][i] + a * p[3][i])
                    .collect();
                let n = crate::linalg::norm(&v);
                v.into_iter().map(|x| x / n).collect()
            }
            f => self.planted(f, layer).to_vec(),
        }
    }

    /// Readout direction `w = a_sup v_sup(L) + a_rel v_rel(L)`.
    pub fn readout_direction(&self) -> Vec<f64> {
        let last = &self.planted[self.config.layers];
        last[0]
            .iter()
            .zip(&last[1])
            .map(|(s, r)| self.config.a_sup * s + self.config.a_rel * r)
            .collect()
    }

    fn injection(&self, stim: &Stimulus, layer: usize, h: &mut [f64]) {
        let g = self.config.gamma[layer];
        if g == 0.0 {
            return;
        }
        let p = &self.planted[layer];
        let mut coef = [
            f64::from(stim.labels[0]),
            f64::from(stim.labels[1]),
            f64::from(stim.labels[2]),
            0.0,
        ];
        if stim.frame == Frame::Jealousy {
            coef[3] = self.config.appraisal_scale * self.appraisal(stim.labels[0], stim.labels[1]);
        }
        for (t, c) in coef.iter().enumerate() {
            if *c != 0.0 {
                for (x, v) in h.iter_mut().zip(&p[t]) {
                    *x += g * c * v;
                }
            }
        }
    }

    fn noise(&self, stim: &Stimulus) -> Vec<f64> {
        let d = self.dim();
        let mut eps = vec![0.0; d];
        if self.config.noise_sigma > 0.0 {
            let mut r = rng::stream(stim.scenario_seed, &[rng::tag("scenario")]);
            for (x, z) in eps.iter_mut().zip(gaussian(&mut r, d)) {
                *x += self.config.noise_sigma * z;
            }
        }
        if self.config.wording_sigma > 0.0 {
            let mut r = rng::stream(stim.wording_seed, &[rng::tag("wording")]);
            for (x, z) in eps.iter_mut().zip(gaussian(&mut r, d)) {
                *x += self.config.wording_sigma * z;
            }
        }
        eps
    }

    fn step(&self, stim: &Stimulus, layer: usize, h: &[f64]) -> Vec<f64> {
        let mut next: Vec<f64> = (&self.rotations[layer] * DVector::from_column_slice(h))
            .iter()
            .copied()
            .collect();
        for (x, b) in next.iter_mut().zip(&self.biases[layer + 1]) {
            *x += b;
        }
        self.injection(stim, layer + 1, &mut next);
        next
    }

    /// All states `h_0..=h_L`.
    pub fn encode(&self, stim: &Stimulus) -> Vec<Vec<f64>> {
        let mut h0 = self.biases[0].clone();
        self.injection(stim, 0, &mut h0);
        for (x, e) in h0.iter_mut().zip(self.noise(stim)) {
            *x += e;
        }
        let mut states = Vec::with_capacity(self.num_states());
        states.push(h0);
        for l in 0..self.config.layers {
            let next = self.step(stim, l, &states[l]);
            states.push(next);
        }
        states
    }

    /// Propagates a (possibly edited) state at `layer` to the last state and
    /// scores it.
    pub fn forward_from(&self, stim: &Stimulus, layer: usize, h: &[f64]) -> Result<(Vec<f64>, f64)> {
        if layer > self.config.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                count: self.num_states(),
            });
        }
        if h.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: h.len(),
            });
        }
        let mut cur = h.to_vec();
        for l in layer..self.config.layers {
            cur = self.step(stim, l, &cur);
        }
        let score = self.predict_score(&cur)?;
        Ok((cur, score))
    }

    /// Readout logit `kappa * w.(h_L - bias_L)`.
    pub fn readout_logit(&self, h_last: &[f64]) -> f64 {
        let w = self.readout_direction();
        let centered: Vec<f64> = h_last
            .iter()
            .zip(&self.bias_traj[self.config.layers])
            .map(|(h, b)| h - b)
            .collect();
        self.config.readout_gain * dot(&w, &centered)
    }

    pub fn predict_score(&self, h_last: &[f64]) -> Result<f64> {
        if h_last.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: h_last.len(),
            });
        }
        Ok(1.0 + 4.0 * sigmoid(self.readout_logit(h_last)))
    }

    /// Toy zero-shot judgement: is `factor` rated "High" for this final state?
    /// Compares the coordinate along the factor's planted direction with half
    /// the planted contrast.
    pub fn judge_factor(&self, h_last: &[f32], factor: Factor) -> bool {
        let last = self.config.layers;
        let dir = self.planted(factor, last);
        let coord = dot_f32(h_last, dir) - dot(&self.bias_traj[last], dir);
        let threshold = match factor {
            Factor::Jealousy => {
                0.5 * self.config.appraisal_scale * (self.appraisal(1, 1) + self.appraisal(0, 0))
            }
            _ => 0.5,
        };
        coord > threshold
    }
}

fn to_f32(states: Vec<Vec<f64>>) -> impl Iterator<Item = f32> {
    states.into_iter().flatten().map(|x| x as f32)
}

fn labelled(id: String, labels: [u8; 3]) -> RecordMeta {
    let mut meta = RecordMeta::new(id);
    meta.labels.insert(Factor::Superiority, labels[0]);
    meta.labels.insert(Factor::Relevance, labels[1]);
    meta.labels.insert(Factor::Weekday, labels[2]);
    let gt = assign_ground_truth(labels[0], labels[1]);
    meta.labels.insert(Factor::Jealousy, u8::from(gt >= 3));
    meta.ground_truth = Some(gt);
    meta
}

/// Captures both halves of every pair under the pair factor's frame.
pub fn capture_pairs(model: &ToyModel, pairs: &[ContrastivePair], seed: u64) -> Result<ActivationSet> {
    let factor = match pairs.first() {
        Some(p) => p.factor,
        None => return Err(Error::Empty("contrastive pairs")),
    };
    if let Some(p) = pairs.iter().find(|p| p.factor != factor) {
        return Err(Error::Invariant(format!(
            "pair {:?} has factor {}, expected {factor}",
            p.pair_id, p.factor
        )));
    }
    let frame = Frame::for_factor(factor);
    let mut records = Vec::with_capacity(2 * pairs.len());
    let mut tensor = Vec::with_capacity(2 * pairs.len() * model.num_states() * model.dim());
    for pair in pairs {
        let (pos, neg) = pair.half_labels();
        for (labels, polarity, suffix) in [(pos, Polarity::Pos, "pos"), (neg, Polarity::Neg, "neg")] {
            let mut meta = labelled(format!("{}/{suffix}", pair.pair_id), labels);
            meta.pair_id = Some(pair.pair_id.clone());
            meta.polarity = Some(polarity);
            meta.split_tag = Some(pair.domain_tag.clone());
            if factor == Factor::Jealousy {
                meta.labels.insert(Factor::Jealousy, u8::from(polarity == Polarity::Pos));
            }
            let stim = Stimulus::for_record(&meta, frame, seed);
            tensor.extend(to_f32(model.encode(&stim)));
            records.push(meta);
        }
    }
    ActivationSet::new(
        records,
        model.num_states(),
        model.dim(),
        tensor,
        model.model_id(),
        format!("lat:{factor}"),
    )
}

/// Captures vignettes under the jealousy rating frame.
pub fn capture_vignettes(model: &ToyModel, vignettes: &[Vignette], seed: u64) -> Result<ActivationSet> {
    let mut records = Vec::with_capacity(vignettes.len());
    let mut tensor = Vec::with_capacity(vignettes.len() * model.num_states() * model.dim());
    for v in vignettes {
        let mut meta = labelled(v.vignette_id.clone(), v.labels());
        meta.split_tag = Some(v.family.clone());
        let stim = Stimulus::for_record(&meta, Frame::Jealousy, seed);
        tensor.extend(to_f32(model.encode(&stim)));
        records.push(meta);
    }
    ActivationSet::new(
        records,
        model.num_states(),
        model.dim(),
        tensor,
        model.model_id(),
        "lat:jealousy",
    )
}

/// Toy judgements of each captured pair, keyed by pair id.
pub fn judge_pairs(model: &ToyModel, set: &ActivationSet, factor: Factor) -> HashMap<String, PairJudgement> {
    let last = set.layers() - 1;
    set.pair_rows()
        .into_iter()
        .map(|(id, pos, neg)| {
            let j = PairJudgement {
                pos_high: model.judge_factor(set.state(pos, last), factor),
                neg_high: model.judge_factor(set.state(neg, last), factor),
            };
            (id, j)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use rand::SeedableRng;

    fn quiet() -> ToyModelConfig {
        ToyModelConfig {
            noise_sigma: 0.0,
            wording_sigma: 0.0,
            ..ToyModelConfig::default()
        }
    }

    fn stim(labels: [u8; 3]) -> Stimulus {
        Stimulus::new(labels, Frame::Neutral, 1, 2)
    }

    #[test]
    fn default_gamma_shape() {
        let g = default_gamma(12);
        assert_eq!(g.len(), 13);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g[0], 0.0);
        assert!(g[1] < g[2] && g[2] < g[3]);
        assert!(g[3..=9].windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));
        assert!(g[10..].iter().all(|&x| x == 0.0));
        let m = init_model(ToyModelConfig::default()).unwrap();
        assert!((m.cumulative_gain(5) - 0.5).abs() < 1e-12);
        assert_eq!(m.layers_with_gain(0.5), (5..=12).collect::<Vec<_>>());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(ToyModelConfig::default()).unwrap();
        let b = init_model(ToyModelConfig::default()).unwrap();
        assert_eq!(a.rotations, b.rotations);
        assert_eq!(a.planted, b.planted);
        let p = a.planted_directions(0).unwrap();
        assert!(dot(&p.sup, &p.rel).abs() < 1e-9);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let zero = ToyModelConfig {
            gamma: vec![0.0; 13],
            ..ToyModelConfig::default()
        };
        assert!(init_model(zero).is_err());
        let small = ToyModelConfig {
            d: 2,
            ..ToyModelConfig::default()
        };
        assert!(init_model(small).is_err());
        let short = ToyModelConfig {
            layers: 3,
            gamma: default_gamma(3),
            ..ToyModelConfig::default()
        };
        assert!(init_model(short).is_err());
    }

    #[test]
    fn rotations_preserve_norms() {
        let m = init_model(ToyModelConfig::default()).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for l in 0..12 {
            let rot = m.rotation(l);
            let id = rot * rot.transpose();
            assert!((id - DMatrix::identity(64, 64)).abs().max() < 1e-6);
        }
        for i in 0..100 {
            let x = gaussian(&mut r, 64);
            let y: Vec<f64> = (m.rotation(i % 12) * DVector::from_column_slice(&x)).iter().copied().collect();
            assert!((norm(&x) - norm(&y)).abs() < 1e-6);
        }
    }

    #[test]
    fn planted_directions_orthonormal_everywhere() {
        let m = init_model(ToyModelConfig::default()).unwrap();
        for l in 0..m.num_states() {
            let p = m.planted_directions(l).unwrap();
            let all = [&p.sup, &p.rel, &p.weekday, &p.appraisal];
            for (i, a) in all.iter().enumerate() {
                assert!((norm(a) - 1.0).abs() < 1e-9);
                for b in &all[i + 1..] {
                    assert!(dot(a, b).abs() < 1e-9);
                }
            }
        }
        assert!(m.planted_directions(13).is_err());
    }

    #[test]
    fn zero_labels_give_bias_trajectory() {
        let m = init_model(quiet()).unwrap();
        let states = m.encode(&stim([0, 0, 0]));
        for (l, h) in states.iter().enumerate() {
            let diff: f64 = h.iter().zip(m.bias_trajectory(l)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "layer {l}");
        }
    }

    #[test]
    fn cumulative_gain_oracle() {
        let m = init_model(quiet()).unwrap();
        let states = m.encode(&stim([1, 0, 0]));
        for (l, h) in states.iter().enumerate() {
            let centered: Vec<f64> = h.iter().zip(m.bias_trajectory(l)).map(|(a, b)| a - b).collect();
            let coord = dot(m.planted(Factor::Superiority, l), &centered);
            assert!((coord - m.cumulative_gain(l)).abs() < 1e-6, "layer {l}");
        }
        let last = &states[12];
        let centered: Vec<f64> = last.iter().zip(m.bias_trajectory(12)).map(|(a, b)| a - b).collect();
        assert!((dot(m.planted(Factor::Superiority, 12), &centered) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn noise_seeds_only_change_noise() {
        let m = init_model(ToyModelConfig::default()).unwrap();
        let q = init_model(quiet()).unwrap();
        let a = m.encode(&Stimulus::new([1, 1, 0], Frame::Neutral, 5, 6));
        let b = m.encode(&Stimulus::new([1, 1, 0], Frame::Neutral, 7, 8));
        let clean = q.encode(&stim([1, 1, 0]));
        // Noise enters at h_0 and is rotated forward: subtracting the clean
        // trajectory leaves equal-norm residuals at every layer.
        for l in 0..13 {
            let ra: Vec<f64> = a[l].iter().zip(&clean[l]).map(|(x, y)| x - y).collect();
            let rb: Vec<f64> = b[l].iter().zip(&clean[l]).map(|(x, y)| x - y).collect();
            assert!((norm(&ra) - norm(&a[0].iter().zip(&clean[0]).map(|(x, y)| x - y).collect::<Vec<_>>())).abs() < 1e-9);
            assert_ne!(ra, rb);
        }
        assert_eq!(a, m.encode(&Stimulus::new([1, 1, 0], Frame::Neutral, 5, 6)));
    }

    #[test]
    fn score_midpoint_and_range() {
        let m = init_model(quiet()).unwrap();
        let s = m.predict_score(m.bias_trajectory(12)).unwrap();
        assert!((s - 3.0).abs() < 1e-12);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let h: Vec<f64> = gaussian(&mut r, 64).into_iter().map(|x| x * 5.0).collect();
            let s = m.predict_score(&h).unwrap();
            assert!((1.0..=5.0).contains(&s));
        }
        assert!(m.predict_score(&[0.0; 3]).is_err());
    }

    #[test]
    fn score_matches_scalar_oracle() {
        // labels (1,1), noise 0: coordinates along v_sup, v_rel at L are 1,
        // so the logit is kappa * (a_sup + a_rel) = 4 * 2.5.
        let m = init_model(quiet()).unwrap();
        let h = m.encode(&stim([1, 1, 0])).pop().unwrap();
        let expected = 1.0 + 4.0 / (1.0 + (-10.0f64).exp());
        assert!((m.predict_score(&h).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn forward_from_consistency_and_commutation() {
        let m = init_model(ToyModelConfig::default()).unwrap();
        let s = Stimulus::new([0, 1, 1], Frame::Jealousy, 9, 10);
        let states = m.encode(&s);
        for l in 0..=12 {
            let (h, _) = m.forward_from(&s, l, &states[l]).unwrap();
            assert_eq!(h, states[12], "layer {l}");
        }
        assert!(m.forward_from(&s, 13, &states[0]).is_err());

        let w = m.readout_direction();
        let base = m.readout_logit(&states[12]) / 4.0;
        for l in [0, 4, 8] {
            let alpha = 0.7;
            let pushed: Vec<f64> = states[l]
                .iter()
                .zip(m.planted(Factor::Superiority, l))
                .map(|(h, v)| h + alpha * v)
                .collect();
            let (h, _) = m.forward_from(&s, l, &pushed).unwrap();
            assert!((m.readout_logit(&h) / 4.0 - base - alpha * 1.0).abs() < 1e-9);

            let wk: Vec<f64> = states[l]
                .iter()
                .zip(m.planted(Factor::Weekday, l))
                .map(|(h, v)| h + 3.0 * v)
                .collect();
            let (_, score) = m.forward_from(&s, l, &wk).unwrap();
            let (_, base_score) = m.forward_from(&s, l, &states[l]).unwrap();
            assert!((score - base_score).abs() < 1e-9);
        }
        assert_eq!(w.len(), 64);
    }

    #[test]
    fn appraisal_only_under_jealousy_frame() {
        let m = init_model(quiet()).unwrap();
        let neutral = m.encode(&Stimulus::new([1, 1, 0], Frame::Neutral, 0, 0));
        let framed = m.encode(&Stimulus::new([1, 1, 0], Frame::Jealousy, 0, 0));
        let diff: Vec<f64> = framed[12].iter().zip(&neutral[12]).map(|(a, b)| a - b).collect();
        let expected = m.config().appraisal_scale * m.appraisal(1, 1);
        assert!((dot(&diff, m.planted(Factor::Jealousy, 12)) - expected).abs() < 1e-9);
        assert!((m.predict_score(&framed[12]).unwrap() - m.predict_score(&neutral[12]).unwrap()).abs() < 1e-12);
        assert!(m.appraisal(0, 1) > m.appraisal(1, 0));
    }
}
