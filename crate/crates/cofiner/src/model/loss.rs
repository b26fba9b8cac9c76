//! Cross-entropy losses over tag probabilities.
//!
//! The fine loss is plain token-mean cross-entropy. The coarse loss first
//! marginalizes fine probabilities through the tag-level F2C matrix
//! (`p_coarse = p_fine . M`), applies the per-token consistency indicator, and
//! divides by the sentence's total token count (not the surviving count).
//! Both losses return the gradient with respect to the probability rows;
//! [`super::backward`] routes it through the cached softmax.

use super::ProbBatch;
use crate::f2c::F2CMatrix;
use crate::{Error, Result};

/// Probabilities below this floor contribute `ln(floor)` and zero gradient.
/// The only deviation from exact cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

/// Loss value and gradient w.r.t. the fine probability rows.
#[derive(Debug)]
pub struct FineLoss {
    pub loss: f64,
    pub dprobs: Vec<f32>,
}

/// Token-mean cross-entropy against gold fine tags.
pub fn fine_loss(probs: &ProbBatch, gold: &[usize]) -> Result<FineLoss> {
    let n = probs.num_tokens();
    let nt = probs.num_tags;
    if gold.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} gold tags for {} tokens",
            gold.len(),
            n
        )));
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= nt) {
        return Err(Error::InvalidArgument(format!(
            "gold tag index {bad} out of range ({nt} tags)"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0f64;
    let mut dprobs = vec![0.0f32; n * nt];
    for (i, &g) in gold.iter().enumerate() {
        let p = probs.probs[i * nt + g] as f64;
        total += p.max(LOG_FLOOR).ln();
        if p >= LOG_FLOOR {
            dprobs[i * nt + g] = (-(inv_n) / p) as f32;
        }
    }
    Ok(FineLoss {
        loss: -(total * inv_n),
        dprobs,
    })
}

/// Loss value plus gradients w.r.t. both the fine rows and the marginalized
/// coarse rows (the latter feeds the learnable-matrix update).
#[derive(Debug)]
pub struct CoarseLoss {
    pub loss: f64,
    /// Gradient w.r.t. the fine probability rows, [n, num_fine_tags].
    pub dprobs: Vec<f32>,
    /// Gradient w.r.t. the coarse probability rows, [n, num_coarse_tags].
    pub d_coarse: Vec<f64>,
}

/// Denominator of the masked coarse loss. The default divides by the
/// sentence's total token count; `Surviving` divides by the number of
/// unmasked tokens instead (reserved variant, off everywhere by default).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoarseNorm {
    #[default]
    TotalTokens,
    Surviving,
}

/// Masked cross-entropy of `p_fine . M` against gold coarse tags.
///
/// Tokens whose mask entry is false contribute nothing; the denominator stays
/// the sentence's token count. Gradients backpropagate through the fixed
/// matrix (`dL/dp_fine = dL/dp_coarse . M^T`).
pub fn coarse_loss(
    probs: &ProbBatch,
    matrix: &F2CMatrix,
    gold_coarse: &[usize],
    mask: &[bool],
) -> Result<CoarseLoss> {
    coarse_loss_normalized(probs, matrix, gold_coarse, mask, CoarseNorm::TotalTokens)
}

/// [`coarse_loss`] with an explicit denominator choice.
pub fn coarse_loss_normalized(
    probs: &ProbBatch,
    matrix: &F2CMatrix,
    gold_coarse: &[usize],
    mask: &[bool],
    norm: CoarseNorm,
) -> Result<CoarseLoss> {
    let n = probs.num_tokens();
    let ft = probs.num_tags;
    let ct = matrix.num_coarse_tags();
    if matrix.num_fine_tags() != ft {
        return Err(Error::ShapeMismatch(format!(
            "matrix maps {} fine tags, model has {ft}",
            matrix.num_fine_tags()
        )));
    }
    if gold_coarse.len() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} gold tags / {} mask entries for {} tokens",
            gold_coarse.len(),
            mask.len(),
            n
        )));
    }
    if let Some(&bad) = gold_coarse.iter().find(|&&g| g >= ct) {
        return Err(Error::InvalidArgument(format!(
            "gold coarse tag index {bad} out of range ({ct} tags)"
        )));
    }

    let m = matrix.tag_level();
    let denominator = match norm {
        CoarseNorm::TotalTokens => n,
        CoarseNorm::Surviving => mask.iter().filter(|&&b| b).count().max(1),
    };
    let inv_n = 1.0 / denominator as f64;
    let mut total = 0.0f64;
    let mut dprobs = vec![0.0f32; n * ft];
    let mut d_coarse = vec![0.0f64; n * ct];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let g = gold_coarse[i];
        let row = probs.row(i);
        // only column g of p_coarse is needed for the loss
        let mut pc = 0.0f64;
        for (k, &p) in row.iter().enumerate() {
            pc += p as f64 * m[k * ct + g];
        }
        total += pc.max(LOG_FLOOR).ln();
        if pc >= LOG_FLOOR {
            let dpc = -(inv_n) / pc;
            d_coarse[i * ct + g] = dpc;
            for (k, d) in dprobs[i * ft..(i + 1) * ft].iter_mut().enumerate() {
                *d = (dpc * m[k * ct + g]) as f32;
            }
        }
    }
    Ok(CoarseLoss {
        loss: -(total * inv_n),
        dprobs,
        d_coarse,
    })
}
