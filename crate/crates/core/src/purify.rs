//! Null-space projection of a factor direction against its confounders.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bundle::VectorBundle;
use crate::error::{Error, Result};
use crate::extract::{normalize, NORM_TOL};
use crate::factor::Factor;
use crate::linalg::{cosine, dot};

/// Singular values below `SVD_REL_TOL * max` are dropped from the basis.
pub const SVD_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifiedVector {
    pub factor: Factor,
    pub layer: usize,
    pub direction: Vec<f64>,
    pub confounders: Vec<Factor>,
    /// Rank of the confounder span.
    pub rank: usize,
    /// Norm of `(I - P) v` before renormalization.
    pub residual_norm: f64,
    /// Cosine between the purified and raw directions.
    pub cos_raw: f64,
}

/// Orthonormal basis of `span(vectors)` from a thin SVD.
pub fn confounder_basis(vectors: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = vectors.first() else {
        return Err(Error::Empty("confounder vectors"));
    };
    let d = first.len();
    if let Some(v) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::DimMismatch {
            expected: d,
            actual: v.len(),
        });
    }
    let m = DMatrix::from_fn(d, vectors.len(), |i, j| vectors[j][i]);
    let svd = m.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(Error::Degenerate {
            what: "confounder set".into(),
            norm: 0.0,
        });
    }
    Ok(svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s > SVD_REL_TOL * smax)
        .map(|(j, _)| u.column(j).iter().copied().collect())
        .collect())
}

/// `(I - P) v` for the orthogonal projector `P` onto `span(basis)`.
pub fn project_out(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut z = v.to_vec();
    for u in basis {
        let c = dot(u, v);
        for (x, b) in z.iter_mut().zip(u) {
            *x -= c * b;
        }
    }
    z
}

pub fn orthogonalize(
    factor: Factor,
    layer: usize,
    v: &[f64],
    confounders: &[(Factor, &[f64])],
) -> Result<PurifiedVector> {
    let cs: Vec<&[f64]> = confounders.iter().map(|(_, c)| *c).collect();
    let basis = confounder_basis(&cs)?;
    if let Some(u) = basis.first() {
        if u.len() != v.len() {
            return Err(Error::DimMismatch {
                expected: u.len(),
                actual: v.len(),
            });
        }
    }
    let z = project_out(v, &basis);
    let (direction, residual_norm) = normalize(&z, &format!("purified {factor} at layer {layer}"))?;
    debug_assert!(residual_norm > NORM_TOL);
    Ok(PurifiedVector {
        factor,
        layer,
        cos_raw: cosine(&direction, v),
        direction,
        confounders: confounders.iter().map(|(f, _)| *f).collect(),
        rank: basis.len(),
        residual_norm,
    })
}

/// Purifies every predictor direction of `raw` against its confounders at
/// each layer where all of them are present. Jealousy is carried over as-is
/// because it is scored with its raw direction.
pub fn purify_bundle(raw: &VectorBundle) -> Result<(VectorBundle, Vec<PurifiedVector>)> {
    let mut out = VectorBundle::new(raw.model_id.clone(), "purified", raw.dim());
    let mut details = Vec::new();
    for factor in Factor::PREDICTORS {
        let confs = factor.confounders();
        let mut needed = vec![factor];
        needed.extend(&confs);
        for layer in raw.common_layers(&needed) {
            let cs: Vec<(Factor, &[f64])> = confs
                .iter()
                .map(|&c| raw.get(c, layer).map(|v| (c, v)))
                .collect::<Result<_>>()?;
            let p = orthogonalize(factor, layer, raw.get(factor, layer)?, &cs)?;
            out.insert(factor, layer, p.direction.clone())?;
            details.push(p);
        }
    }
    for layer in raw.layers_of(Factor::Jealousy) {
        out.insert(Factor::Jealousy, layer, raw.get(Factor::Jealousy, layer)?.to_vec())?;
    }
    Ok((out, details))
}
