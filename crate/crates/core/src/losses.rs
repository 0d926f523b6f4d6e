//! Training objectives.
//!
//! All losses are recorded on a [`Tape`] so they can be differentiated; the
//! `*_value` helpers evaluate them on plain tensors.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::synth::Modality;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-sample supervision for a fine-tuning batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    /// Class index of each sample's identity.
    pub identities: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl BatchLabels {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    /// `(pos, neg)` flat indices into an `N × N` distance matrix for every triplet
    /// whose anchor has modality `anchor` and whose positive and negative come from
    /// the other modality.
    pub fn cross_triplets(&self, anchor: Modality) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for a in 0..n {
            if self.modalities[a] != anchor {
                continue;
            }
            for p in 0..n {
                if self.modalities[p] == anchor || self.identities[p] != self.identities[a] {
                    continue;
                }
                for q in 0..n {
                    if self.modalities[q] == anchor || self.identities[q] == self.identities[a] {
                        continue;
                    }
                    out.push((a * n + p, a * n + q));
                }
            }
        }
        out
    }
}

/// Cross-modality triplet loss on `embeddings: [N, D]`.
///
/// Point-cloud anchors take positives and negatives only from silhouettes and vice
/// versa; each direction is the mean hinge over all its valid triplets and the two
/// directions are averaged.
pub fn cross_modality_triplet<R: Real>(tape: &mut Tape<R>, embeddings: Var, labels: &BatchLabels, margin: R) -> Result<Var> {
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.modalities.len() != labels.len() {
        return Err(Error::Invalid(alloc::format!(
            "embeddings {:?} do not match {} labels",
            shape,
            labels.len()
        )));
    }
    let from_points = labels.cross_triplets(Modality::PointCloud);
    let from_sils = labels.cross_triplets(Modality::Silhouette);
    if from_points.is_empty() || from_sils.is_empty() {
        return Err(Error::DegenerateBatch("no valid cross-modality triplet"));
    }
    let dist = tape.pairwise_euclidean(embeddings, embeddings)?;
    let lp = tape.triplet_hinge(dist, &from_points, margin)?;
    let ls = tape.triplet_hinge(dist, &from_sils, margin)?;
    let both = tape.add(lp, ls)?;
    Ok(tape.scale(both, R::from_f64(0.5)))
}

/// Mean cross-entropy over parts and samples of per-part identity logits
/// `logits: [N, P, K]`.
pub fn part_cross_entropy<R: Real>(tape: &mut Tape<R>, logits: Var, labels: &BatchLabels) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != labels.len() {
        return Err(Error::Invalid(alloc::format!("logits {:?} do not match {} labels", shape, labels.len())));
    }
    let (n, p, k) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(logits, &[n * p, k])?;
    let targets: Vec<usize> = labels.identities.iter().flat_map(|&id| core::iter::repeat_n(id, p)).collect();
    tape.softmax_cross_entropy(flat, &targets)
}

/// `L = L_cross-triplet + γ · L_ce`. With `γ = 0` the cross-entropy term is not
/// evaluated and the result is exactly the triplet loss.
pub fn combined_loss<R: Real>(
    tape: &mut Tape<R>,
    embeddings: Var,
    logits: Option<Var>,
    labels: &BatchLabels,
    gamma: R,
    margin: R,
) -> Result<Var> {
    let trip = cross_modality_triplet(tape, embeddings, labels, margin)?;
    if gamma == R::ZERO {
        return Ok(trip);
    }
    let logits = logits.ok_or(Error::Invalid("combined loss with γ > 0 needs identity logits".into()))?;
    let ce = part_cross_entropy(tape, logits, labels)?;
    let weighted = tape.scale(ce, gamma);
    tape.add(trip, weighted)
}

/// Cosine-similarity matrix `N_L2(S) · N_L2(P)ᵀ` recorded on the tape.
pub fn similarity<R: Real>(tape: &mut Tape<R>, sil: Var, pts: Var) -> Result<Var> {
    let sn = tape.l2_normalize(sil)?;
    let pn = tape.l2_normalize(pts)?;
    tape.matmul_nt(sn, pn)
}

/// Symmetric contrastive loss over paired rows of `sil: [N, D]` and `pts: [N, D]`:
/// `½(CE(M/τ, G) + CE((M/τ)ᵀ, G))` where row `i` targets column `i`.
pub fn contrastive_loss<R: Real>(tape: &mut Tape<R>, sil: Var, pts: Var, tau: R) -> Result<Var> {
    let (ss, ps) = (tape.shape(sil).to_vec(), tape.shape(pts).to_vec());
    if ss.len() != 2 || ss != ps || ss[0] == 0 {
        return Err(Error::Invalid(alloc::format!("contrastive loss needs equal [N, D] inputs, got {ss:?} and {ps:?}")));
    }
    if !(tau > R::ZERO) {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    let n = ss[0];
    let m = similarity(tape, sil, pts)?;
    let logits = tape.scale(m, R::ONE / tau);
    let logits_t = tape.transpose(logits)?;
    let targets: Vec<usize> = (0..n).collect();
    let a = tape.softmax_cross_entropy(logits, &targets)?;
    let b = tape.softmax_cross_entropy(logits_t, &targets)?;
    let both = tape.add(a, b)?;
    Ok(tape.scale(both, R::from_f64(0.5)))
}

/// Part-level variant over `[N, N_H, d]` inputs: every `(sample, part)` row is its
/// own class, so `(i, k)` in one modality matches only `(i, k)` in the other.
pub fn part_contrastive_loss<R: Real>(tape: &mut Tape<R>, sil_parts: Var, pts_parts: Var, tau: R) -> Result<Var> {
    let (sil, pts) = flatten_parts(tape, sil_parts, pts_parts)?;
    contrastive_loss(tape, sil, pts, tau)
}

fn flatten_parts<R: Real>(tape: &mut Tape<R>, sil_parts: Var, pts_parts: Var) -> Result<(Var, Var)> {
    let (ss, ps) = (tape.shape(sil_parts).to_vec(), tape.shape(pts_parts).to_vec());
    if ss.len() != 3 || ss != ps {
        return Err(Error::Invalid(alloc::format!("part contrastive loss needs equal [N, P, d] inputs, got {ss:?} and {ps:?}")));
    }
    let rows = ss[0] * ss[1];
    let sil = tape.reshape(sil_parts, &[rows, ss[2]])?;
    let pts = tape.reshape(pts_parts, &[rows, ss[2]])?;
    Ok((sil, pts))
}

/// Mean diagonal minus mean off-diagonal of a square similarity matrix. With a
/// single row there is no off-diagonal and the diagonal mean is returned.
pub fn alignment_metric<R: Real>(m: &Tensor<R>) -> Result<f64> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] || m.shape()[0] == 0 {
        return Err(Error::Invalid(alloc::format!("alignment needs a square matrix, got {:?}", m.shape())));
    }
    let n = m.shape()[0];
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = m.data()[i * n + j].to_f64();
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let diag = diag / n as f64;
    if n == 1 {
        return Ok(diag);
    }
    Ok(diag - off / (n * (n - 1)) as f64)
}

fn eval_scalar<R: Real>(f: impl FnOnce(&mut Tape<R>) -> Result<Var>) -> Result<R> {
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    tape.value(out).item()
}

pub fn contrastive_loss_value<R: Real>(sil: &Tensor<R>, pts: &Tensor<R>, tau: R) -> Result<R> {
    eval_scalar(|t| {
        let (s, p) = (t.constant(sil.clone()), t.constant(pts.clone()));
        contrastive_loss(t, s, p, tau)
    })
}

pub fn part_contrastive_loss_value<R: Real>(sil: &Tensor<R>, pts: &Tensor<R>, tau: R) -> Result<R> {
    eval_scalar(|t| {
        let (s, p) = (t.constant(sil.clone()), t.constant(pts.clone()));
        part_contrastive_loss(t, s, p, tau)
    })
}

pub fn cross_modality_triplet_value<R: Real>(embeddings: &Tensor<R>, labels: &BatchLabels, margin: R) -> Result<R> {
    eval_scalar(|t| {
        let e = t.constant(embeddings.clone());
        cross_modality_triplet(t, e, labels, margin)
    })
}

pub fn combined_loss_value<R: Real>(
    embeddings: &Tensor<R>,
    logits: &Tensor<R>,
    labels: &BatchLabels,
    gamma: R,
    margin: R,
) -> Result<R> {
    eval_scalar(|t| {
        let e = t.constant(embeddings.clone());
        let l = t.constant(logits.clone());
        combined_loss(t, e, Some(l), labels, gamma, margin)
    })
}

pub fn part_cross_entropy_value<R: Real>(logits: &Tensor<R>, labels: &BatchLabels) -> Result<R> {
    eval_scalar(|t| {
        let l = t.constant(logits.clone());
        part_cross_entropy(t, l, labels)
    })
}

/// Cosine-similarity matrix of two `[N, D]` embedding sets.
pub fn similarity_matrix<R: Real>(sil: &Tensor<R>, pts: &Tensor<R>) -> Result<Tensor<R>> {
    let mut tape = Tape::new();
    let (s, p) = (tape.constant(sil.clone()), tape.constant(pts.clone()));
    let m = similarity(&mut tape, s, p)?;
    Ok(tape.value(m).clone())
}
