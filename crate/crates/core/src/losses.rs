//! Concordance correlation, the frame-wise audio/visual InfoNCE alignment
//! term, and their weighted sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{CccMoments, Negatives, Tape, Var};
use crate::block::Projection;
use crate::error::{dim_err, Error, Result};
use crate::params::Bound;

/// Added to the CCC denominator inside the loss.
pub const CCC_EPS: f64 = 1e-8;

/// A CCC value plus whether both inputs were constant (denominator zero),
/// in which case the value is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ccc {
    pub value: f64,
    pub degenerate: bool,
}

/// Lin's concordance correlation coefficient with population moments:
/// `2·cov / (σ_p² + σ_l² + (μ_p − μ_l)²)`.
pub fn ccc(pred: &[f64], label: &[f64]) -> Result<Ccc> {
    if pred.len() != label.len() {
        return Err(Error::Alignment(format!(
            "ccc length mismatch: {} vs {}",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < 2 {
        return Err(dim_err!("ccc needs at least two frames, got {}", pred.len()));
    }
    let m = CccMoments::new(pred, label);
    let den = m.denominator();
    if den == 0.0 {
        return Ok(Ccc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Ccc {
        value: (2.0 * m.cov / den).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `1 − CCC` on the tape, denominator regularized by [`CCC_EPS`].
pub fn ccc_loss(tape: &mut Tape<'_>, pred: Var, label: Var) -> Result<Var> {
    tape.ccc_loss(pred, label, CCC_EPS)
}

/// Settings of the alignment term.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub tau: f64,
    /// `None`: every other frame of the participant is a negative.
    pub negatives: Option<usize>,
    /// Seeds the negative sampler when `negatives` is `Some`.
    pub seed: u64,
}

impl AlignmentConfig {
    pub fn new(tau: f64, negatives: Option<usize>) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        if negatives == Some(0) {
            return Err(Error::Config("negative count must be >= 1".into()));
        }
        Ok(AlignmentConfig {
            tau,
            negatives,
            seed: 0,
        })
    }
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            tau: 0.07,
            negatives: None,
            seed: 0,
        }
    }
}

/// Maps audio and visual embeddings of different widths onto one
/// contrastive width.
#[derive(Debug, Clone)]
pub struct ContrastiveProjection {
    pub audio: Projection,
    pub visual: Projection,
}

fn sample_negatives(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = k.min(n.saturating_sub(1));
    (0..n)
        .map(|r| {
            rand::seq::index::sample(rng, n - 1, k)
                .into_iter()
                .map(|j| if j >= r { j + 1 } else { j })
                .collect()
        })
        .collect()
}

/// Symmetric frame-wise InfoNCE between each participant's audio and visual
/// embeddings, averaged over participants, frames and both directions:
/// `(1 / (2·Σ_i n_i)) · Σ_i Σ_r [ℓ_{A→V}(i, r) + ℓ_{V→A}(i, r)]`.
///
/// Rows are ℓ2-normalized inside. Widths must agree unless `proj` maps both
/// modalities to a common width.
pub fn infonce_alignment_loss(
    tape: &mut Tape<'_>,
    embeddings: &[(Var, Var)],
    cfg: &AlignmentConfig,
    proj: Option<(&ContrastiveProjection, &Bound)>,
) -> Result<Var> {
    if embeddings.is_empty() {
        return Err(Error::Usage("alignment loss needs at least one participant".into()));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {}", cfg.tau)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut terms = Vec::with_capacity(embeddings.len());
    let mut frames = 0usize;
    for &(a, v) in embeddings {
        let (a, v) = match proj {
            Some((pr, bound)) => (pr.audio.apply(tape, bound, a)?, pr.visual.apply(tape, bound, v)?),
            None => (a, v),
        };
        let (na, ka) = dims(tape, a)?;
        let (nv, kv) = dims(tape, v)?;
        if na != nv {
            return Err(Error::Alignment(format!(
                "audio has {na} frames, visual has {nv}"
            )));
        }
        if ka != kv {
            return Err(Error::Config(format!(
                "audio width {ka} differs from visual width {kv}; enable the contrastive projection"
            )));
        }
        let a = tape.l2_normalize_rows(a)?;
        let v = tape.l2_normalize_rows(v)?;
        let neg = match cfg.negatives {
            None => Negatives::All,
            Some(k) => Negatives::Sampled(sample_negatives(na, k, &mut rng)),
        };
        terms.push(tape.info_nce(a, v, cfg.tau, neg)?);
        frames += na;
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / (2.0 * frames as f64))
}

fn dims(tape: &Tape<'_>, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [n, k] => Ok((*n, *k)),
        other => Err(dim_err!("embeddings must be 2-D, got {other:?}")),
    }
}

/// Weights of the two loss terms; both must be positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ccc: f64,
    pub lambda_align: f64,
}

impl LossWeights {
    pub fn new(lambda_ccc: f64, lambda_align: f64) -> Result<Self> {
        if !(lambda_ccc > 0.0) || !(lambda_align > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be positive, got ({lambda_ccc}, {lambda_align})"
            )));
        }
        Ok(LossWeights {
            lambda_ccc,
            lambda_align,
        })
    }

    /// Scalar `λ_ccc·ccc + λ_align·align`.
    pub fn combine(&self, ccc_l: f64, align_l: f64) -> f64 {
        self.lambda_ccc * ccc_l + self.lambda_align * align_l
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ccc: 1.0,
            lambda_align: 0.4,
        }
    }
}

/// `λ_ccc·ccc_l + λ_align·align_l` on the tape.
pub fn total_loss(tape: &mut Tape<'_>, ccc_l: Var, align_l: Var, w: &LossWeights) -> Result<Var> {
    LossWeights::new(w.lambda_ccc, w.lambda_align)?;
    let c = tape.scale(ccc_l, w.lambda_ccc)?;
    let a = tape.scale(align_l, w.lambda_align)?;
    tape.add(c, a)
}
