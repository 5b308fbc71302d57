//! Projection scores and per-layer standardized regression of the jealousy
//! score on the purified factor scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::actstore::ActivationSet;
use crate::bundle::VectorBundle;
use crate::error::{Error, Result};
use crate::factor::Factor;
use crate::linalg::{dot_f32, mean, sample_std};
use crate::stats::two_sided_p;

/// Significance level for the antecedent coefficients.
pub const ALPHA: f64 = 0.05;
/// Largest admissible placebo coefficient magnitude.
pub const PLACEBO_BOUND: f64 = 0.05;

/// Per-record projection scores at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub layer: usize,
    pub record_ids: Vec<String>,
    pub ground_truth: Vec<f64>,
    /// Scores keyed by factor; jealousy uses the raw direction, predictors
    /// the purified ones.
    pub scores: BTreeMap<Factor, Vec<f64>>,
    pub standardized: bool,
}

impl ScoreTable {
    /// Copy with every score column z-scored.
    pub fn standardize(&self) -> Result<ScoreTable> {
        let scores = self
            .scores
            .iter()
            .map(|(f, xs)| zscore(xs, f.name()).map(|z| (*f, z)))
            .collect::<Result<_>>()?;
        Ok(ScoreTable {
            scores,
            standardized: true,
            ..self.clone()
        })
    }

    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn get(&self, factor: Factor) -> Result<&[f64]> {
        self.scores
            .get(&factor)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invariant(format!("score table lacks {factor}")))
    }
}

pub fn project_scores(
    set: &ActivationSet,
    layer: usize,
    raw: &VectorBundle,
    purified: &VectorBundle,
) -> Result<ScoreTable> {
    let view = set.select_layer(layer)?;
    let mut dirs = vec![(Factor::Jealousy, raw.get(Factor::Jealousy, layer)?)];
    for f in Factor::PREDICTORS {
        dirs.push((f, purified.get(f, layer)?));
    }
    for (_, d) in &dirs {
        if d.len() != set.dim() {
            return Err(Error::DimMismatch {
                expected: set.dim(),
                actual: d.len(),
            });
        }
    }
    let mut scores: BTreeMap<Factor, Vec<f64>> = BTreeMap::new();
    let mut ids = Vec::with_capacity(view.rows());
    let mut gt = Vec::with_capacity(view.rows());
    for (i, rec) in view.records().iter().enumerate() {
        let g = rec
            .ground_truth
            .ok_or_else(|| Error::Invariant(format!("record {:?} has no ground truth", rec.record_id)))?;
        ids.push(rec.record_id.clone());
        gt.push(f64::from(g));
        for (f, d) in &dirs {
            scores.entry(*f).or_default().push(dot_f32(view.row(i), d));
        }
    }
    Ok(ScoreTable {
        layer,
        record_ids: ids,
        ground_truth: gt,
        scores,
        standardized: false,
    })
}

/// Standard scores with the `n - 1` denominator.
pub fn zscore(xs: &[f64], name: &str) -> Result<Vec<f64>> {
    if xs.len() < 2 {
        return Err(Error::ZeroVariance(name.to_owned()));
    }
    let m = mean(xs);
    let s = sample_std(xs);
    if !(s > 1e-12 * m.abs().max(1.0)) {
        return Err(Error::ZeroVariance(name.to_owned()));
    }
    Ok(xs.iter().map(|x| (x - m) / s).collect())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::Invariant(format!("correlation needs 3 points, got {}", x.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("x".into()));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("y".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix;
/// `None` when a pivot collapses.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > 1e-10 * scale) {
            return None;
        }
        let d = d.sqrt();
        l[j][j] = d;
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / d;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}

/// Ordinary least squares with intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub n: usize,
    pub df: usize,
    pub intercept: f64,
    pub factors: Vec<Factor>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub r2: f64,
}

impl OlsFit {
    fn index(&self, f: Factor) -> Result<usize> {
        self.factors
            .iter()
            .position(|&g| g == f)
            .ok_or_else(|| Error::Invariant(format!("fit has no {f} term")))
    }

    pub fn beta_of(&self, f: Factor) -> Result<f64> {
        Ok(self.beta[self.index(f)?])
    }

    pub fn p_of(&self, f: Factor) -> Result<f64> {
        Ok(self.p[self.index(f)?])
    }
}

fn collinear_pair(xs: &[(Factor, &[f64])]) -> (Factor, Factor) {
    let mut best = (xs[0].0, xs.get(1).map_or(xs[0].0, |x| x.0));
    let mut best_r = -1.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let r = pearson(xs[i].1, xs[j].1).map_or(1.0, f64::abs);
            if r > best_r {
                best_r = r;
                best = (xs[i].0, xs[j].0);
            }
        }
    }
    best
}

pub fn ols_fit(y: &[f64], xs: &[(Factor, &[f64])]) -> Result<OlsFit> {
    let n = y.len();
    let p = xs.len() + 1;
    if let Some((_, x)) = xs.iter().find(|(_, x)| x.len() != n) {
        return Err(Error::DimMismatch {
            expected: n,
            actual: x.len(),
        });
    }
    if n <= p {
        return Err(Error::Invariant(format!("{n} observations cannot fit {p} coefficients")));
    }
    let row = |i: usize| -> Vec<f64> {
        let mut r = Vec::with_capacity(p);
        r.push(1.0);
        r.extend(xs.iter().map(|(_, x)| x[i]));
        r
    };
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for i in 0..n {
        let r = row(i);
        for a in 0..p {
            xty[a] += r[a] * y[i];
            for b in 0..p {
                xtx[a][b] += r[a] * r[b];
            }
        }
    }
    let Some(l) = cholesky(&xtx) else {
        if xs.len() == 1 {
            return Err(Error::ZeroVariance(xs[0].0.to_string()));
        }
        let (a, b) = collinear_pair(xs);
        return Err(Error::Singular { a, b });
    };
    let coef = cholesky_solve(&l, &xty);
    let my = mean(y);
    let (mut rss, mut tss) = (0.0, 0.0);
    for i in 0..n {
        let r = row(i);
        let fitted: f64 = r.iter().zip(&coef).map(|(a, b)| a * b).sum();
        rss += (y[i] - fitted).powi(2);
        tss += (y[i] - my).powi(2);
    }
    if tss == 0.0 {
        return Err(Error::ZeroVariance("response".into()));
    }
    let df = n - p;
    let sigma2 = rss / df as f64;
    let mut se = Vec::with_capacity(p - 1);
    for a in 1..p {
        let mut e = vec![0.0; p];
        e[a] = 1.0;
        let col = cholesky_solve(&l, &e);
        se.push((sigma2 * col[a]).sqrt());
    }
    let beta = coef[1..].to_vec();
    let t: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let pv = t.iter().map(|&t| two_sided_p(t, df as f64)).collect();
    Ok(OlsFit {
        n,
        df,
        intercept: coef[0],
        factors: xs.iter().map(|(f, _)| *f).collect(),
        beta,
        se,
        t,
        p: pv,
        r2: 1.0 - rss / tss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityCheck {
    /// Both antecedents positive and significant.
    pub antecedent_ok: bool,
    /// Placebo weight within the near-zero bound.
    pub placebo_ok: bool,
}

impl ValidityCheck {
    pub fn valid(&self) -> bool {
        self.antecedent_ok && self.placebo_ok
    }
}

pub fn validity_check(fit: &OlsFit) -> Result<ValidityCheck> {
    validity_check_with(fit, ALPHA, PLACEBO_BOUND)
}

/// [`validity_check`] with explicit significance level and placebo bound.
pub fn validity_check_with(fit: &OlsFit, alpha: f64, placebo_bound: f64) -> Result<ValidityCheck> {
    let antecedent = |f| -> Result<bool> { Ok(fit.p_of(f)? < alpha && fit.beta_of(f)? > 0.0) };
    Ok(ValidityCheck {
        antecedent_ok: antecedent(Factor::Superiority)? && antecedent(Factor::Relevance)?,
        placebo_ok: fit.beta_of(Factor::Weekday)?.abs() <= placebo_bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub layer: usize,
    pub fit: OlsFit,
    /// Pearson correlation of the raw jealousy score with ground truth.
    pub pearson_r: f64,
    pub validity: ValidityCheck,
}

/// Regresses z(s_jea) on z(s_sup), z(s_rel), z(s_wk).
pub fn regress_table(table: &ScoreTable) -> Result<RegressionReport> {
    let z = if table.standardized { table.clone() } else { table.standardize()? };
    let xs: Vec<(Factor, &[f64])> = Factor::PREDICTORS
        .iter()
        .map(|&f| z.get(f).map(|c| (f, c)))
        .collect::<Result<_>>()?;
    let fit = ols_fit(z.get(Factor::Jealousy)?, &xs)?;
    let pearson_r = pearson(table.get(Factor::Jealousy)?, &table.ground_truth)?;
    Ok(RegressionReport {
        layer: table.layer,
        validity: validity_check(&fit)?,
        fit,
        pearson_r,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub reports: Vec<RegressionReport>,
    /// Layers whose fit failed, with the reason; the sweep continues past them.
    pub failures: Vec<(usize, String)>,
}

impl LayerSweep {
    pub fn at(&self, layer: usize) -> Option<&RegressionReport> {
        self.reports.iter().find(|r| r.layer == layer)
    }
}

/// Regression at each layer of `range` (inclusive; every layer where all
/// four directions exist when `None`).
pub fn layer_sweep(
    set: &ActivationSet,
    raw: &VectorBundle,
    purified: &VectorBundle,
    range: Option<(usize, usize)>,
) -> Result<LayerSweep> {
    if let Some((a, b)) = range {
        if a > b || b >= set.layers() {
            return Err(Error::LayerOutOfRange {
                layer: b.max(a),
                count: set.layers(),
            });
        }
    }
    let layers: Vec<usize> = raw
        .layers_of(Factor::Jealousy)
        .into_iter()
        .filter(|l| range.is_none_or(|(a, b)| (a..=b).contains(l)))
        .filter(|&l| Factor::PREDICTORS.iter().all(|&f| purified.contains(f, l)))
        .collect();
    if layers.is_empty() {
        return Err(Error::Empty("layers with all four directions"));
    }
    let mut sweep = LayerSweep {
        reports: Vec::new(),
        failures: Vec::new(),
    };
    for l in layers {
        match project_scores(set, l, raw, purified).and_then(|t| regress_table(&t)) {
            Ok(r) => sweep.reports.push(r),
            Err(e) => sweep.failures.push((l, e.to_string())),
        }
    }
    Ok(sweep)
}
