//! The fine-to-coarse mapping matrix.
//!
//! Built in three steps from a coarse tagger's reannotation of the fine
//! corpus: count entity-type co-occurrences between fine gold tags and
//! predicted coarse tags, keep only the top-k counts per fine row, and
//! row-normalize into `M[l][s] = p(coarse = s | fine = l)`.
//!
//! Predicted-`O` counts are tracked in a reserved extra column but never take
//! part in top-k selection or normalization: a fine entity type must map to a
//! coarse entity type, otherwise the coarse loss would teach the model to
//! hide entities.
//!
//! The type-level matrix is expanded to tag level preserving the BIO prefix
//! (`B->B`, `I->I`, `O->O`) so that `p_fine . M` stays a distribution map.

use crate::corpus::{Corpus, TagSchema};
use crate::model::{adamw_update, Moments, OptimConfig, ProbBatch};
use crate::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// How many co-occurrence counts to keep per fine row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    K(usize),
    All,
}

impl Default for TopK {
    fn default() -> Self {
        TopK::K(1)
    }
}

impl std::fmt::Display for TopK {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopK::K(k) => write!(f, "{k}"),
            TopK::All => write!(f, "all"),
        }
    }
}

impl std::str::FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopK::All);
        }
        let k: usize = s
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad top-k value {s:?}")))?;
        if k == 0 {
            return Err(Error::InvalidArgument("top-k must be at least 1".into()));
        }
        Ok(TopK::K(k))
    }
}

/// Entity-type co-occurrence counts between fine gold labels and predicted
/// coarse labels. The last column counts predicted `O`.
#[derive(Debug, Clone)]
pub struct CooccurrenceMatrix {
    pub fine_schema: TagSchema,
    pub coarse_schema: TagSchema,
    /// [num_fine_types, num_coarse_types + 1] row-major.
    counts: Vec<u64>,
}

impl CooccurrenceMatrix {
    pub fn new(fine_schema: TagSchema, coarse_schema: TagSchema) -> Self {
        let len = fine_schema.num_types() * (coarse_schema.num_types() + 1);
        CooccurrenceMatrix {
            fine_schema,
            coarse_schema,
            counts: vec![0; len],
        }
    }

    fn width(&self) -> usize {
        self.coarse_schema.num_types() + 1
    }

    pub fn count(&self, fine_ty: usize, coarse_ty: usize) -> u64 {
        self.counts[fine_ty * self.width() + coarse_ty]
    }

    /// Predicted-O count for a fine type.
    pub fn o_count(&self, fine_ty: usize) -> u64 {
        self.counts[fine_ty * self.width() + self.coarse_schema.num_types()]
    }

    pub fn row(&self, fine_ty: usize) -> &[u64] {
        &self.counts[fine_ty * self.width()..(fine_ty + 1) * self.width()]
    }

    pub fn add(&mut self, fine_ty: usize, coarse_col: usize, n: u64) {
        let w = self.width();
        self.counts[fine_ty * w + coarse_col] += n;
    }
}

/// Count co-occurrences between fine gold entity types and coarse predictions.
///
/// `coarse_predictions` holds predicted coarse tag indices aligned
/// token-for-token with `fine_corpus`. Tokens whose fine gold tag is `O` are
/// ignored; predicted `O` increments the reserved column.
pub fn count_cooccurrence(
    fine_corpus: &Corpus,
    coarse_schema: &TagSchema,
    coarse_predictions: &[Vec<usize>],
) -> Result<CooccurrenceMatrix> {
    if coarse_predictions.len() != fine_corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted sentences for {} fine sentences",
            coarse_predictions.len(),
            fine_corpus.len()
        )));
    }
    let mut m = CooccurrenceMatrix::new(fine_corpus.schema.clone(), coarse_schema.clone());
    let o_col = coarse_schema.num_types();
    for (sent, preds) in fine_corpus.sentences.iter().zip(coarse_predictions) {
        if preds.len() != sent.len() {
            return Err(Error::InvalidArgument(format!(
                "prediction length {} for sentence of {} tokens",
                preds.len(),
                sent.len()
            )));
        }
        for (&gold, &pred) in sent.tags.iter().zip(preds) {
            if gold == 0 {
                continue;
            }
            let fine_ty = (gold - 1) / 2;
            let col = if pred == 0 { o_col } else { (pred - 1) / 2 };
            m.add(fine_ty, col, 1);
        }
    }
    Ok(m)
}

/// Keep the top-k counts per fine row (ties broken by lower column index) and
/// zero the rest. The predicted-O column is always zeroed first.
pub fn refine_topk(c: &CooccurrenceMatrix, k: TopK) -> CooccurrenceMatrix {
    let mut out = c.clone();
    let ct = c.coarse_schema.num_types();
    let w = out.width();
    for f in 0..c.fine_schema.num_types() {
        let row = &mut out.counts[f * w..(f + 1) * w];
        row[ct] = 0;
        if let TopK::K(k) = k {
            let mut order: Vec<usize> = (0..ct).collect();
            order.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
            for &col in order.iter().skip(k) {
                row[col] = 0;
            }
        }
    }
    out
}

/// Row-normalize refined counts into a type-level F2C matrix.
///
/// All-zero rows (a fine type never co-occurred with any coarse entity type)
/// fall back to the uniform distribution over coarse entity types; those rows
/// are reported in [`F2CMatrix::fallback_rows`] so callers can warn.
pub fn normalize(c: &CooccurrenceMatrix) -> F2CMatrix {
    let f = c.fine_schema.num_types();
    let ct = c.coarse_schema.num_types();
    let mut type_level = vec![0.0f64; f * ct];
    let mut fallback_rows = Vec::new();
    for l in 0..f {
        let row = c.row(l);
        let sum: u64 = row[..ct].iter().sum();
        if sum == 0 {
            let u = 1.0 / ct as f64;
            for s in 0..ct {
                type_level[l * ct + s] = u;
            }
            fallback_rows.push(l);
        } else {
            for s in 0..ct {
                type_level[l * ct + s] = row[s] as f64 / sum as f64;
            }
        }
    }
    F2CMatrix::from_type_level(
        c.fine_schema.clone(),
        c.coarse_schema.clone(),
        type_level,
        TopK::All,
        fallback_rows,
        Provenance::default(),
    )
}

/// Expand a row-stochastic type-level matrix to tag level: `B->B`, `I->I`,
/// `O->O` with probability 1, everything else zero.
pub fn build_tag_level(type_level: &[f64], fine_types: usize, coarse_types: usize) -> Vec<f64> {
    let ft = 2 * fine_types + 1;
    let ct = 2 * coarse_types + 1;
    let mut tag = vec![0.0f64; ft * ct];
    tag[0] = 1.0; // O -> O
    for l in 0..fine_types {
        for s in 0..coarse_types {
            let p = type_level[l * coarse_types + s];
            tag[(1 + 2 * l) * ct + (1 + 2 * s)] = p; // B -> B
            tag[(2 + 2 * l) * ct + (2 + 2 * s)] = p; // I -> I
        }
    }
    tag
}

/// Row-wise softmax of f32 logits, computed in f64.
pub fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            out[r * cols + c] = e / sum;
        }
    }
    out
}

/// Row-wise softmax Jacobian: map dL/d(type_level) to dL/d(logits).
pub fn softmax_logit_grads(
    type_level: &[f64],
    d_type: &[f64],
    rows: usize,
    cols: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let p = &type_level[r * cols..(r + 1) * cols];
        let d = &d_type[r * cols..(r + 1) * cols];
        let dot: f64 = p.iter().zip(d).map(|(p, d)| p * d).sum();
        for c in 0..cols {
            out[r * cols + c] = p[c] * (d[c] - dot);
        }
    }
    out
}

/// Where a matrix came from, for artifact tagging.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub coarse_model: String,
    pub fine_corpus: String,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "coarse_model={} fine_corpus={}",
            if self.coarse_model.is_empty() {
                "-"
            } else {
                &self.coarse_model
            },
            if self.fine_corpus.is_empty() {
                "-"
            } else {
                &self.fine_corpus
            },
        )
    }
}

/// Reparameterization state for the learnable-matrix mode (default off).
#[derive(Debug, Clone)]
struct LearnableState {
    /// Free logits, [fine_types, coarse_types]; type_level = row softmax.
    logits: Vec<f32>,
    grad: Vec<f32>,
    moments: Moments,
    /// Accumulated dL/d(tag_level) since the last step.
    grad_tag: Vec<f64>,
}

/// Row-stochastic fine-to-coarse mapping matrix.
#[derive(Debug, Clone)]
pub struct F2CMatrix {
    pub fine_schema: TagSchema,
    pub coarse_schema: TagSchema,
    /// [num_fine_types, num_coarse_types], rows sum to 1.
    type_level: Vec<f64>,
    /// [num_fine_tags, num_coarse_tags], prefix-preserving block expansion.
    tag_level: Vec<f64>,
    pub k_used: TopK,
    /// Fine rows that fell back to the uniform distribution.
    pub fallback_rows: Vec<usize>,
    pub provenance: Provenance,
    learnable: Option<LearnableState>,
}

impl F2CMatrix {
    pub fn from_type_level(
        fine_schema: TagSchema,
        coarse_schema: TagSchema,
        type_level: Vec<f64>,
        k_used: TopK,
        fallback_rows: Vec<usize>,
        provenance: Provenance,
    ) -> Self {
        assert_eq!(
            type_level.len(),
            fine_schema.num_types() * coarse_schema.num_types()
        );
        let tag_level = build_tag_level(
            &type_level,
            fine_schema.num_types(),
            coarse_schema.num_types(),
        );
        F2CMatrix {
            fine_schema,
            coarse_schema,
            type_level,
            tag_level,
            k_used,
            fallback_rows,
            provenance,
            learnable: None,
        }
    }

    /// The identity map for a schema mapped onto itself.
    pub fn identity(schema: &TagSchema) -> Self {
        let n = schema.num_types();
        let mut type_level = vec![0.0f64; n * n];
        for i in 0..n {
            type_level[i * n + i] = 1.0;
        }
        F2CMatrix::from_type_level(
            schema.clone(),
            schema.clone(),
            type_level,
            TopK::All,
            vec![],
            Provenance::default(),
        )
    }

    pub fn type_level(&self) -> &[f64] {
        &self.type_level
    }

    pub fn type_entry(&self, fine_ty: usize, coarse_ty: usize) -> f64 {
        self.type_level[fine_ty * self.coarse_schema.num_types() + coarse_ty]
    }

    pub fn tag_level(&self) -> &[f64] {
        &self.tag_level
    }

    pub fn num_fine_tags(&self) -> usize {
        self.fine_schema.num_tags()
    }

    pub fn num_coarse_tags(&self) -> usize {
        self.coarse_schema.num_tags()
    }

    /// Check row-stochasticity of the type level (1 +/- 1e-9).
    pub fn validate(&self) -> Result<()> {
        let ct = self.coarse_schema.num_types();
        for (l, row) in self.type_level.chunks(ct).enumerate() {
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidState(format!("negative entry in row {l}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidState(format!("row {l} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn learnable_enabled(&self) -> bool {
        self.learnable.is_some()
    }

    /// Switch to learnable mode: type_level becomes the row softmax of free
    /// logits initialized at `ln(type_level + 1e-8)`.
    pub fn enable_learnable(&mut self) {
        let n = self.type_level.len();
        let logits: Vec<f32> = self
            .type_level
            .iter()
            .map(|&p| (p + 1e-8).ln() as f32)
            .collect();
        let ft = self.fine_schema.num_tags();
        let ct = self.coarse_schema.num_tags();
        self.learnable = Some(LearnableState {
            logits,
            grad: vec![0.0; n],
            moments: Moments::new(n),
            grad_tag: vec![0.0; ft * ct],
        });
        self.rederive_from_logits();
    }

    fn rederive_from_logits(&mut self) {
        let state = self.learnable.as_ref().expect("learnable mode enabled");
        let f = self.fine_schema.num_types();
        let c = self.coarse_schema.num_types();
        let logits64: Vec<f64> = state.logits.iter().map(|&l| l as f64).collect();
        self.type_level = softmax_rows(&logits64, f, c);
        self.tag_level = build_tag_level(&self.type_level, f, c);
    }

    /// Accumulate the learnable-matrix gradient for one sentence:
    /// `dL/dM_tag = p_fine^T . dL/dp_coarse`, summed over tokens.
    pub fn accumulate_learnable(&mut self, probs: &ProbBatch, d_coarse: &[f64]) -> Result<()> {
        let ft = self.fine_schema.num_tags();
        let ct = self.coarse_schema.num_tags();
        if probs.num_tags != ft || d_coarse.len() != probs.num_tokens() * ct {
            return Err(Error::ShapeMismatch(
                "probability batch does not align with the matrix".into(),
            ));
        }
        let state = self
            .learnable
            .as_mut()
            .ok_or_else(|| Error::InvalidState("learnable-matrix mode is disabled".into()))?;
        for i in 0..probs.num_tokens() {
            let prow = probs.row(i);
            let drow = &d_coarse[i * ct..(i + 1) * ct];
            for (k, &p) in prow.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (j, &d) in drow.iter().enumerate() {
                    if d != 0.0 {
                        state.grad_tag[k * ct + j] += p as f64 * d;
                    }
                }
            }
        }
        Ok(())
    }

    /// Fold accumulated tag-level gradients down to the logits, take one AdamW
    /// step, and re-derive the matrix.
    pub fn learnable_step(&mut self, cfg: &OptimConfig) -> Result<()> {
        let f = self.fine_schema.num_types();
        let c = self.coarse_schema.num_types();
        let ct = self.coarse_schema.num_tags();
        let type_level = self.type_level.clone();
        let state = self
            .learnable
            .as_mut()
            .ok_or_else(|| Error::InvalidState("learnable-matrix mode is disabled".into()))?;
        // tag entries (B-l, B-s) and (I-l, I-s) are tied to type entry (l, s)
        let mut d_type = vec![0.0f64; f * c];
        for l in 0..f {
            for s in 0..c {
                d_type[l * c + s] = state.grad_tag[(1 + 2 * l) * ct + (1 + 2 * s)]
                    + state.grad_tag[(2 + 2 * l) * ct + (2 + 2 * s)];
            }
        }
        let d_logits = softmax_logit_grads(&type_level, &d_type, f, c);
        for (g, d) in state.grad.iter_mut().zip(&d_logits) {
            *g = *d as f32;
        }
        let mut logits = std::mem::take(&mut state.logits);
        adamw_update(cfg, &mut state.moments, &mut logits, &mut state.grad);
        state.logits = logits;
        state.grad_tag.iter_mut().for_each(|g| *g = 0.0);
        self.rederive_from_logits();
        Ok(())
    }

    /// TSV export: header of coarse type names, one row per fine type with
    /// 9-decimal probabilities.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("fine_type");
        for c in self.coarse_schema.entity_types() {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        let ct = self.coarse_schema.num_types();
        for (l, name) in self.fine_schema.entity_types().iter().enumerate() {
            out.push_str(name);
            for s in 0..ct {
                let _ = write!(out, "\t{:.9}", self.type_level[l * ct + s]);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Parse a matrix back from its TSV export.
    pub fn from_tsv(text: &str, provenance: Provenance) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty matrix TSV".into()))?;
        let mut cols = header.split('\t');
        if cols.next() != Some("fine_type") {
            return Err(Error::InvalidArgument("matrix TSV missing header".into()));
        }
        let coarse_schema = TagSchema::new(cols.map(str::to_string))?;
        let ct = coarse_schema.num_types();
        let mut fine_names = Vec::new();
        let mut type_level = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let name = parts
                .next()
                .ok_or_else(|| Error::InvalidArgument(format!("matrix TSV row {i} empty")))?;
            fine_names.push(name.to_string());
            let probs: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad probability {p:?}")))
                })
                .collect::<Result<_>>()?;
            if probs.len() != ct {
                return Err(Error::InvalidArgument(format!(
                    "row {name} has {} probabilities, expected {ct}",
                    probs.len()
                )));
            }
            type_level.extend(probs);
        }
        let fine_schema = TagSchema::new(fine_names)?;
        // re-normalize: 9-decimal rendering may be off by < 1e-8 per row
        let ct = coarse_schema.num_types();
        for row in type_level.chunks_mut(ct) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("matrix row sums to {sum}")));
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Ok(F2CMatrix::from_type_level(
            fine_schema,
            coarse_schema,
            type_level,
            TopK::All,
            vec![],
            provenance,
        ))
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        F2CMatrix::from_tsv(
            &text,
            Provenance {
                coarse_model: String::new(),
                fine_corpus: path.display().to_string(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{TagSchema, TaggedSentence};
    use crate::rng::Rng;

    fn schemas() -> (TagSchema, TagSchema) {
        (
            TagSchema::new(["company", "politician", "river"]).unwrap(),
            TagSchema::new(["LOC", "ORG", "PER"]).unwrap(),
        )
    }

    #[test]
    fn counts_hand_example() {
        let (fine, coarse) = schemas();
        let corpus = Corpus::new(
            "f",
            fine.clone(),
            vec![TaggedSentence {
                tokens: vec!["acme".into(), "corp".into(), "runs".into()],
                tags: vec![fine.begin_tag(0), fine.inside_tag(0), 0],
            }],
        )
        .unwrap();
        let preds = vec![vec![coarse.begin_tag(1), coarse.inside_tag(1), 0]];
        let m = count_cooccurrence(&corpus, &coarse, &preds).unwrap();
        assert_eq!(m.count(0, 1), 2);
        let total: u64 = (0..3).map(|f| m.row(f).iter().sum::<u64>()).sum();
        assert_eq!(total, 2, "only the two entity tokens count");
    }

    #[test]
    fn all_o_predictions_land_in_o_column() {
        let (fine, coarse) = schemas();
        let corpus = Corpus::new(
            "f",
            fine.clone(),
            vec![TaggedSentence {
                tokens: vec!["a".into(), "b".into()],
                tags: vec![fine.begin_tag(2), fine.inside_tag(2)],
            }],
        )
        .unwrap();
        let preds = vec![vec![0, 0]];
        let m = count_cooccurrence(&corpus, &coarse, &preds).unwrap();
        assert_eq!(m.o_count(2), 2);
        assert_eq!((0..3).map(|s| m.count(2, s)).sum::<u64>(), 0);
    }

    #[test]
    fn empty_corpus_gives_zero_matrix() {
        let (fine, coarse) = schemas();
        let corpus = Corpus::new("f", fine, vec![]).unwrap();
        let m = count_cooccurrence(&corpus, &coarse, &[]).unwrap();
        assert!((0..3).all(|f| m.row(f).iter().all(|&c| c == 0)));
    }

    #[test]
    fn misaligned_predictions_are_an_error() {
        let (fine, coarse) = schemas();
        let corpus = Corpus::new(
            "f",
            fine,
            vec![TaggedSentence {
                tokens: vec!["a".into()],
                tags: vec![0],
            }],
        )
        .unwrap();
        assert!(count_cooccurrence(&corpus, &coarse, &[]).is_err());
        assert!(count_cooccurrence(&corpus, &coarse, &[vec![0, 0]]).is_err());
    }

    fn matrix_from_rows(rows: &[&[u64]]) -> CooccurrenceMatrix {
        let (fine, coarse) = schemas();
        let mut m = CooccurrenceMatrix::new(fine, coarse);
        for (f, row) in rows.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                m.add(f, c, n);
            }
        }
        m
    }

    #[test]
    fn top1_keeps_largest() {
        let m = matrix_from_rows(&[&[7, 2, 1], &[0, 5, 5], &[1, 1, 1]]);
        let r = refine_topk(&m, TopK::K(1));
        assert_eq!(r.row(0)[..3], [7, 0, 0]);
        // ties break toward the lower column index
        assert_eq!(r.row(1)[..3], [0, 5, 0]);
        assert_eq!(r.row(2)[..3], [1, 0, 0]);
    }

    #[test]
    fn topk_all_only_clears_o_column() {
        let (fine, coarse) = schemas();
        let mut m = CooccurrenceMatrix::new(fine, coarse);
        m.add(0, 0, 3);
        m.add(0, 1, 1);
        m.add(0, 3, 9); // predicted-O column
        let r = refine_topk(&m, TopK::All);
        assert_eq!(r.row(0), &[3, 1, 0, 0]);
    }

    #[test]
    fn default_topk_is_one() {
        assert_eq!(TopK::default(), TopK::K(1));
    }

    #[test]
    fn single_support_rows_are_k_invariant() {
        // k=1 and k=all differ only when a fine row has more than one nonzero
        let m = matrix_from_rows(&[&[4, 0, 0], &[0, 0, 9], &[0, 2, 0]]);
        let k1 = refine_topk(&m, TopK::K(1));
        let kall = refine_topk(&m, TopK::All);
        for f in 0..3 {
            assert_eq!(k1.row(f), kall.row(f));
        }
        let mixed = matrix_from_rows(&[&[4, 1, 0], &[0, 0, 9], &[0, 2, 0]]);
        let k1 = refine_topk(&mixed, TopK::K(1));
        let kall = refine_topk(&mixed, TopK::All);
        assert_ne!(k1.row(0), kall.row(0));
        assert_eq!(k1.row(1), kall.row(1));
        assert_eq!(k1.row(2), kall.row(2));
    }

    #[test]
    fn normalize_examples() {
        let m = matrix_from_rows(&[&[7, 0, 0], &[3, 1, 0], &[0, 0, 0]]);
        let f2c = normalize(&m);
        f2c.validate().unwrap();
        assert_eq!(f2c.type_entry(0, 0), 1.0);
        assert_eq!(f2c.type_entry(1, 0), 0.75);
        assert_eq!(f2c.type_entry(1, 1), 0.25);
        // all-zero row falls back to uniform and is reported
        assert_eq!(f2c.fallback_rows, vec![2]);
        for s in 0..3 {
            assert!((f2c.type_entry(2, s) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_after_all_equals_plain_row_normalization() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let rows: Vec<Vec<u64>> = (0..3)
                .map(|_| (0..3).map(|_| 1 + rng.range(50) as u64).collect())
                .collect();
            let m = matrix_from_rows(&[&rows[0], &rows[1], &rows[2]]);
            let f2c = normalize(&refine_topk(&m, TopK::All));
            for (f, row) in rows.iter().enumerate() {
                let sum: u64 = row.iter().sum();
                for (s, &n) in row.iter().enumerate() {
                    let direct = n as f64 / sum as f64;
                    assert_eq!(f2c.type_entry(f, s), direct);
                }
            }
        }
    }

    #[test]
    fn topk_support_nesting() {
        let mut rng = Rng::new(23);
        for _ in 0..50 {
            let rows: Vec<Vec<u64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.range(10) as u64).collect())
                .collect();
            let m = matrix_from_rows(&[&rows[0], &rows[1], &rows[2]]);
            let mut prev: Option<CooccurrenceMatrix> = None;
            for k in 1..=3 {
                let cur = refine_topk(&m, TopK::K(k));
                if let Some(p) = &prev {
                    for f in 0..3 {
                        for s in 0..3 {
                            if p.count(f, s) > 0 {
                                assert!(cur.count(f, s) > 0, "support must nest");
                            }
                        }
                    }
                }
                prev = Some(cur);
            }
        }
    }

    #[test]
    fn tag_level_block_expansion() {
        let fine = TagSchema::new(["only"]).unwrap();
        let coarse = TagSchema::new(["C"]).unwrap();
        let m = F2CMatrix::from_type_level(
            fine,
            coarse,
            vec![1.0],
            TopK::K(1),
            vec![],
            Provenance::default(),
        );
        // 3x3: O->O, B->B, I->I
        assert_eq!(
            m.tag_level(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn identity_matrix_tag_level_is_identity() {
        let s = TagSchema::new(["A", "B"]).unwrap();
        let m = F2CMatrix::identity(&s);
        let n = s.num_tags();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(m.tag_level()[i * n + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn tag_level_rows_stay_stochastic() {
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let rows: Vec<Vec<u64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.range(20) as u64).collect())
                .collect();
            let m = matrix_from_rows(&[&rows[0], &rows[1], &rows[2]]);
            let f2c = normalize(&refine_topk(&m, TopK::K(2)));
            let ct = f2c.num_coarse_tags();
            for row in f2c.tag_level().chunks(ct) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn learnable_requires_enabling() {
        let (fine, coarse) = schemas();
        let m = matrix_from_rows(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]]);
        let mut f2c = normalize(&refine_topk(&m, TopK::K(1)));
        let probs = ProbBatch {
            probs: vec![1.0 / fine.num_tags() as f32; fine.num_tags()],
            num_tags: fine.num_tags(),
            sentence: 0,
        };
        let d = vec![0.0f64; coarse.num_tags()];
        assert!(matches!(
            f2c.accumulate_learnable(&probs, &d),
            Err(Error::InvalidState(_))
        ));
        f2c.enable_learnable();
        f2c.accumulate_learnable(&probs, &d).unwrap();
    }

    #[test]
    fn learnable_zero_gradient_keeps_matrix() {
        let m = matrix_from_rows(&[&[3, 1, 0], &[0, 4, 0], &[0, 0, 2]]);
        let mut f2c = normalize(&refine_topk(&m, TopK::All));
        f2c.enable_learnable();
        let before = f2c.type_level().to_vec();
        f2c.learnable_step(&OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        })
        .unwrap();
        let after = f2c.type_level();
        for (a, b) in before.iter().zip(after) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn learnable_rows_stay_stochastic_after_updates() {
        let m = matrix_from_rows(&[&[3, 1, 1], &[1, 4, 1], &[1, 1, 2]]);
        let mut f2c = normalize(&refine_topk(&m, TopK::All));
        f2c.enable_learnable();
        let ft = f2c.fine_schema.num_tags();
        let ct = f2c.coarse_schema.num_tags();
        let probs = ProbBatch {
            probs: (0..ft)
                .map(|i| (i + 1) as f32 / ((ft * (ft + 1)) / 2) as f32)
                .collect(),
            num_tags: ft,
            sentence: 0,
        };
        let mut d = vec![0.0f64; ct];
        d[1] = -2.0;
        for _ in 0..5 {
            f2c.accumulate_learnable(&probs, &d).unwrap();
            f2c.learnable_step(&OptimConfig::default()).unwrap();
        }
        f2c.validate().unwrap();
        let before = f2c.type_level().to_vec();
        // the update moved the matrix away from where it started
        let m0 = normalize(&refine_topk(&m, TopK::All));
        assert!(before
            .iter()
            .zip(m0.type_level())
            .any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn tsv_roundtrip() {
        let m = matrix_from_rows(&[&[7, 2, 1], &[0, 5, 5], &[1, 1, 1]]);
        let f2c = normalize(&refine_topk(&m, TopK::K(2)));
        let tsv = f2c.to_tsv();
        assert!(tsv.starts_with("fine_type\tLOC\tORG\tPER\n"));
        let back = F2CMatrix::from_tsv(&tsv, Provenance::default()).unwrap();
        back.validate().unwrap();
        let ct = 3;
        for l in 0..3 {
            for s in 0..ct {
                assert!((back.type_entry(l, s) - f2c.type_entry(l, s)).abs() < 1e-8);
            }
        }
    }
}
