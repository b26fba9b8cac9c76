//! Inconsistency filtering.
//!
//! The fine model (frozen) predicts a coarse tag for every token of a coarse
//! corpus by marginalizing through the F2C matrix and taking the argmax. A
//! token survives when the prediction equals the gold coarse tag (full tag:
//! prefix and type); everything else is masked out of the coarse loss.

use crate::corpus::{Corpus, TaggedSentence};
use crate::f2c::F2CMatrix;
use crate::model::{featurize, forward, TokenClassifier};
use crate::rng::fnv1a;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Filter statistics for one coarse entity type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypeFilterStats {
    /// Gold entity tokens of this type.
    pub tokens: usize,
    /// Gold entity tokens of this type that were masked out.
    pub filtered: usize,
}

impl TypeFilterStats {
    pub fn filtered_fraction(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.filtered as f64 / self.tokens as f64
        }
    }
}

/// Per-token survival mask over a coarse corpus (`true` = label survived).
#[derive(Debug, Clone)]
pub struct ConsistencyMask {
    pub sentence_masks: Vec<Vec<bool>>,
    pub total_tokens: usize,
    /// Tokens masked out (mask entry false).
    pub masked_tokens: usize,
    /// Indexed by coarse entity type.
    pub per_type: Vec<TypeFilterStats>,
    /// Checksum of the checkpoint the mask was built with (0 for all-true).
    pub checkpoint_checksum: u64,
    /// Provenance string of the matrix the mask was built with.
    pub matrix_provenance: String,
}

impl ConsistencyMask {
    /// The trivial mask: every label survives (the `no_filtering` mode).
    pub fn all_true(corpus: &Corpus) -> Self {
        let sentence_masks: Vec<Vec<bool>> = corpus
            .sentences
            .iter()
            .map(|s| vec![true; s.len()])
            .collect();
        let total_tokens = corpus.total_tokens();
        let mut per_type = vec![
            TypeFilterStats {
                tokens: 0,
                filtered: 0
            };
            corpus.schema.num_types()
        ];
        for s in &corpus.sentences {
            for &t in &s.tags {
                if t != 0 {
                    per_type[(t - 1) / 2].tokens += 1;
                }
            }
        }
        ConsistencyMask {
            sentence_masks,
            total_tokens,
            masked_tokens: 0,
            per_type,
            checkpoint_checksum: 0,
            matrix_provenance: "all-true".into(),
        }
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.masked_tokens as f64 / self.total_tokens as f64
        }
    }

    pub fn sentence(&self, i: usize) -> &[bool] {
        &self.sentence_masks[i]
    }

    /// Serialize: a header comment recording provenance, then one '0'/'1'
    /// line per sentence, aligned with corpus order.
    pub fn to_cache_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# checkpoint={:016x} matrix={}",
            self.checkpoint_checksum, self.matrix_provenance
        );
        for mask in &self.sentence_masks {
            for &b in mask {
                out.push(if b { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_cache_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Parse a cache file back, recomputing the statistics against the corpus
    /// it belongs to.
    pub fn read_cache(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty mask cache".into()))?;
        let mut checkpoint_checksum = 0u64;
        let matrix_provenance;
        if let Some(rest) = header.strip_prefix("# ") {
            // the matrix provenance may itself contain spaces
            let (head, matrix) = rest.split_once(" matrix=").unwrap_or((rest, ""));
            matrix_provenance = matrix.to_string();
            if let Some(v) = head.strip_prefix("checkpoint=") {
                checkpoint_checksum = u64::from_str_radix(v, 16).unwrap_or(0);
            }
        } else {
            return Err(Error::InvalidArgument("mask cache missing header".into()));
        }
        let mut sentence_masks = Vec::with_capacity(corpus.len());
        for (i, line) in lines.enumerate() {
            let mask: Vec<bool> = line
                .chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    other => Err(Error::InvalidArgument(format!(
                        "bad mask character {other:?}"
                    ))),
                })
                .collect::<Result<_>>()?;
            if i < corpus.len() && mask.len() != corpus.sentences[i].len() {
                return Err(Error::ShapeMismatch(format!(
                    "mask line {i} has {} entries for a {}-token sentence",
                    mask.len(),
                    corpus.sentences[i].len()
                )));
            }
            sentence_masks.push(mask);
        }
        if sentence_masks.len() != corpus.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} mask lines for {} sentences",
                sentence_masks.len(),
                corpus.len()
            )));
        }
        let mut built = summarize(corpus, sentence_masks);
        built.checkpoint_checksum = checkpoint_checksum;
        built.matrix_provenance = matrix_provenance;
        Ok(built)
    }
}

fn summarize(corpus: &Corpus, sentence_masks: Vec<Vec<bool>>) -> ConsistencyMask {
    let mut per_type = vec![
        TypeFilterStats {
            tokens: 0,
            filtered: 0
        };
        corpus.schema.num_types()
    ];
    let mut total_tokens = 0;
    let mut masked_tokens = 0;
    for (sent, mask) in corpus.sentences.iter().zip(&sentence_masks) {
        total_tokens += sent.len();
        for (&tag, &keep) in sent.tags.iter().zip(mask) {
            if !keep {
                masked_tokens += 1;
            }
            if tag != 0 {
                let ty = (tag - 1) / 2;
                per_type[ty].tokens += 1;
                if !keep {
                    per_type[ty].filtered += 1;
                }
            }
        }
    }
    ConsistencyMask {
        sentence_masks,
        total_tokens,
        masked_tokens,
        per_type,
        checkpoint_checksum: 0,
        matrix_provenance: String::new(),
    }
}

/// Predict coarse tags for one sentence with the frozen fine model: argmax of
/// `p_fine . M` per token, ties broken by the lowest tag index.
pub fn predict_coarse(
    model: &TokenClassifier,
    matrix: &F2CMatrix,
    sentence: &TaggedSentence,
) -> Result<Vec<usize>> {
    if matrix.num_fine_tags() != model.config.num_tags {
        return Err(Error::ShapeMismatch(format!(
            "matrix maps {} fine tags, model head has {}",
            matrix.num_fine_tags(),
            model.config.num_tags
        )));
    }
    let buckets = featurize(sentence, &model.config);
    let (probs, _) = forward(model, &buckets, false, None);
    let ct = matrix.num_coarse_tags();
    let m = matrix.tag_level();
    let mut out = Vec::with_capacity(sentence.len());
    for i in 0..probs.num_tokens() {
        let row = probs.row(i);
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for j in 0..ct {
            let mut pc = 0.0f64;
            for (k, &p) in row.iter().enumerate() {
                pc += p as f64 * m[k * ct + j];
            }
            if pc > best_p {
                best_p = pc;
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Build the consistency mask for a coarse corpus: a token survives when the
/// frozen fine model's mapped prediction equals the gold coarse tag.
pub fn build_mask(
    model: &TokenClassifier,
    matrix: &F2CMatrix,
    coarse_corpus: &Corpus,
) -> Result<ConsistencyMask> {
    if matrix.coarse_schema != coarse_corpus.schema {
        return Err(Error::Schema(
            "matrix coarse schema does not match the corpus".into(),
        ));
    }
    let mut sentence_masks = Vec::with_capacity(coarse_corpus.len());
    for sent in &coarse_corpus.sentences {
        let pred = predict_coarse(model, matrix, sent)?;
        sentence_masks.push(
            sent.tags
                .iter()
                .zip(&pred)
                .map(|(&gold, &p)| gold == p)
                .collect(),
        );
    }
    let mut mask = summarize(coarse_corpus, sentence_masks);
    mask.checkpoint_checksum = fnv1a(&crate::model::checkpoint_bytes(model));
    mask.matrix_provenance = matrix.provenance.to_string();
    Ok(mask)
}

/// One row of the filtering report.
#[derive(Debug, Clone)]
pub struct FilterReportRow {
    pub coarse_type: String,
    pub tokens: usize,
    pub filtered: usize,
    pub proportion: f64,
}

/// Per-coarse-type filtering proportions, for the scatter analysis.
pub fn filtering_report(mask: &ConsistencyMask, coarse_corpus: &Corpus) -> Vec<FilterReportRow> {
    mask.per_type
        .iter()
        .enumerate()
        .map(|(ty, stats)| FilterReportRow {
            coarse_type: coarse_corpus.schema.type_name(ty).to_string(),
            tokens: stats.tokens,
            filtered: stats.filtered,
            proportion: stats.filtered_fraction(),
        })
        .collect()
}

/// Render the report as TSV with a trailing delta-F1 slot column.
pub fn filtering_report_tsv(rows: &[FilterReportRow]) -> String {
    let mut out = String::from("coarse_type\ttokens\tfiltered\tproportion\tdelta_f1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\tNA",
            r.coarse_type, r.tokens, r.filtered, r.proportion
        );
    }
    out
}
