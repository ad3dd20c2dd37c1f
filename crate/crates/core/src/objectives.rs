//! Neighbour contrast, centroid contrast, redundancy reduction and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Tape, Tensor, Var};

/// Temperature, off-diagonal weight and fusion weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveParams {
    pub tau: f64,
    pub lambda_red: f64,
    /// Weight of the neighbour term.
    pub sigma: f64,
    /// Weight of the centroid term.
    pub kappa: f64,
    /// Weight of the redundancy term.
    pub eta: f64,
    /// Average the neighbour and centroid terms over both view assignments.
    pub symmetrize: bool,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams {
            tau: 0.2,
            lambda_red: 0.5,
            sigma: 0.5,
            kappa: 0.5,
            eta: 5.0,
            symmetrize: true,
        }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        for (name, w) in [
            ("lambda_red", self.lambda_red),
            ("sigma", self.sigma),
            ("kappa", self.kappa),
            ("eta", self.eta),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }

    /// Ablation variant with only the selected terms active; weights of the
    /// active terms keep their current values.
    pub fn with_terms(mut self, neighbour: bool, centroid: bool, redundancy: bool) -> Self {
        if !neighbour {
            self.sigma = 0.0;
        }
        if !centroid {
            self.kappa = 0.0;
        }
        if !redundancy {
            self.eta = 0.0;
        }
        self
    }
}

/// Temperature-scaled InfoNCE with in-batch negatives:
/// `mean_i −log( exp(aᵢ·bᵢ/τ) / Σₖ exp(aᵢ·bₖ/τ) )` on row-normalized inputs.
pub fn info_nce(tape: &mut Tape, anchors: Var, targets: Var, tau: f64) -> Result<Var> {
    let (n, d) = tape.value(anchors).dims2()?;
    if tape.value(targets).shape() != tape.value(anchors).shape() {
        return Err(Error::shape("info_nce", tape.value(anchors).shape(), tape.value(targets).shape()));
    }
    if n < 2 {
        return Err(Error::Contract(format!("contrastive loss needs N >= 2 for negatives, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    debug_assert!(d > 0);
    let (a, _) = tape.l2_normalize(anchors, Axis::Rows)?;
    let (b, _) = tape.l2_normalize(targets, Axis::Rows)?;
    let sims = tape.matmul_nt(a, b)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let log_probs = tape.log_softmax_rows(logits)?;
    let eye = tape.constant(Tensor::eye(n));
    let diag = tape.mul(log_probs, eye)?;
    let total = tape.sum(diag);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Neighbour contrast: the support-set neighbours `nn1` are detached, the
/// predictor outputs `p2` carry gradient.
pub fn neighbour_loss(tape: &mut Tape, nn1: Var, p2: Var, tau: f64) -> Result<Var> {
    let nn1 = tape.detach(nn1);
    info_nce(tape, nn1, p2, tau)
}

/// Centroid contrast between the two centroid batches; gradient flows into
/// both (and from there into the shared encoder).
pub fn centroid_loss(tape: &mut Tape, c1: Var, c2: Var, tau: f64) -> Result<Var> {
    info_nce(tape, c1, c2, tau)
}

/// `z1ᵀ·z2` after unit-normalizing every feature column over the batch.
/// Also returns the indices of degenerate (all-zero) columns of either input.
pub fn cross_correlation(tape: &mut Tape, z1: Var, z2: Var) -> Result<(Var, Vec<usize>)> {
    let (n, _) = tape.value(z1).dims2()?;
    if tape.value(z1).shape() != tape.value(z2).shape() {
        return Err(Error::shape("cross_correlation", tape.value(z1).shape(), tape.value(z2).shape()));
    }
    if n < 2 {
        return Err(Error::Contract(format!("cross-correlation needs N >= 2, got {n}")));
    }
    let (a, mut flagged) = tape.l2_normalize(z1, Axis::Cols)?;
    let (b, flagged2) = tape.l2_normalize(z2, Axis::Cols)?;
    flagged.extend(flagged2);
    flagged.sort_unstable();
    flagged.dedup();
    Ok((tape.matmul_tn(a, b)?, flagged))
}

/// `sqrt(Σᵢ((1−cc¹ᵢᵢ)² + (1−cc²ᵢᵢ)²) / 2D)
///  + λ·sqrt(Σᵢ Σ_{j≠i}((cc¹ᵢⱼ)² + (cc²ᵢⱼ)²) / 2D(D−1))`
pub fn redundancy_loss(tape: &mut Tape, cc1: Var, cc2: Var, lambda_red: f64) -> Result<Var> {
    let (d, d2) = tape.value(cc1).dims2()?;
    if d != d2 || tape.value(cc1).shape() != tape.value(cc2).shape() {
        return Err(Error::shape("redundancy_loss", tape.value(cc1).shape(), tape.value(cc2).shape()));
    }
    if d < 2 {
        return Err(Error::Contract(format!("redundancy loss needs D >= 2, got {d}")));
    }
    let eye = tape.constant(Tensor::eye(d));
    let off_mask = tape.constant(Tensor::eye(d).map(|v| 1.0 - v));

    let mut diag_terms = Vec::with_capacity(2);
    let mut off_terms = Vec::with_capacity(2);
    for cc in [cc1, cc2] {
        let gap = tape.sub(eye, cc)?;
        let gap = tape.mul(gap, eye)?;
        let gap = tape.square(gap);
        diag_terms.push(tape.sum(gap));
        let off = tape.mul(cc, off_mask)?;
        let off = tape.square(off);
        off_terms.push(tape.sum(off));
    }
    let diag = tape.add(diag_terms[0], diag_terms[1])?;
    let diag = tape.scale(diag, 1.0 / (2.0 * d as f64));
    let diag = tape.sqrt(diag);
    let off = tape.add(off_terms[0], off_terms[1])?;
    let off = tape.scale(off, 1.0 / (2.0 * d as f64 * (d as f64 - 1.0)));
    let off = tape.sqrt(off);
    let off = tape.scale(off, lambda_red);
    tape.add(diag, off)
}

/// Component losses recorded on the current tape; absent terms were not
/// computed (weight zero, or the support set is still warming up).
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub neighbour: Option<Var>,
    pub centroid: Option<Var>,
    pub redundancy: Option<Var>,
}

/// Scalar values of the fused objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_nn: Option<f64>,
    pub l_centroid: Option<f64>,
    pub l_red: Option<f64>,
    pub l_total: f64,
}

/// `σ·l_nn + κ·l_centroid + η·l_red` over the terms that are present.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, params: &ObjectiveParams) -> Result<(Var, LossBreakdown)> {
    let mut total: Option<Var> = None;
    let mut l_total = 0.0;
    let mut add = |tape: &mut Tape, term: Option<Var>, weight: f64| -> Result<Option<f64>> {
        let Some(v) = term else { return Ok(None) };
        let value = tape.value(v).item();
        let weighted = tape.scale(v, weight);
        l_total += weight * value;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
        Ok(Some(value))
    };
    let l_nn = add(tape, terms.neighbour, params.sigma)?;
    let l_centroid = add(tape, terms.centroid, params.kappa)?;
    let l_red = add(tape, terms.redundancy, params.eta)?;
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let l_total = tape.value(total).item();
    Ok((
        total,
        LossBreakdown {
            l_nn,
            l_centroid,
            l_red,
            l_total,
        },
    ))
}
