//! Span-level evaluation and experiment suites.
//!
//! Predictions are matched against gold on exact (type, start, end) spans,
//! micro-averaged over the corpus. Predicted tag sequences undergo the same
//! BIO repair as loaded corpora before span extraction, since per-token argmax
//! decoding can emit invalid transitions.

use crate::corpus::{bio_repair, sample_kshot, spans_of_tags, Corpus, TagSchema, TaggedSentence};
use crate::f2c::{F2CMatrix, TopK};
use crate::filtering::predict_coarse;
use crate::model::{featurize, forward, ProbBatch, TokenClassifier};
use crate::trainer::{run_pipeline, TrainPlan};
use crate::{Error, Result};
use std::fmt::Write as _;

/// Precision / recall / F1 triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Prf {
        let precision = if predicted == 0 {
            0.0
        } else {
            correct as f64 / predicted as f64
        };
        let recall = if gold == 0 {
            0.0
        } else {
            correct as f64 / gold as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// Span counts and scores for one entity type.
#[derive(Debug, Clone)]
pub struct TypeEval {
    pub entity_type: String,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub scores: Prf,
}

/// Micro scores plus the per-type breakdown.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub micro: Prf,
    pub gold_spans: usize,
    pub predicted_spans: usize,
    pub correct_spans: usize,
    pub per_type: Vec<TypeEval>,
    pub sentences: usize,
    /// BIO repairs applied to predicted sequences before span extraction.
    pub repaired_predictions: usize,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("type\tgold\tpredicted\tcorrect\tprecision\trecall\tf1\n");
        let _ = writeln!(
            out,
            "micro\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            self.gold_spans,
            self.predicted_spans,
            self.correct_spans,
            self.micro.precision,
            self.micro.recall,
            self.micro.f1
        );
        for t in &self.per_type {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                t.entity_type,
                t.gold,
                t.predicted,
                t.correct,
                t.scores.precision,
                t.scores.recall,
                t.scores.f1
            );
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>7} {:>9} {:>9} {:>9}",
            "type", "gold", "pred", "correct", "precision", "recall", "f1"
        );
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>7} {:>9.4} {:>9.4} {:>9.4}",
            "micro",
            self.gold_spans,
            self.predicted_spans,
            self.correct_spans,
            self.micro.precision,
            self.micro.recall,
            self.micro.f1
        );
        for t in &self.per_type {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>7} {:>9.4} {:>9.4} {:>9.4}",
                t.entity_type,
                t.gold,
                t.predicted,
                t.correct,
                t.scores.precision,
                t.scores.recall,
                t.scores.f1
            );
        }
        out
    }
}

/// Score predicted tag sequences against gold, both under `schema`.
///
/// Predictions are BIO-repaired (copies; inputs untouched), then spans are
/// matched on exact (type, start, end).
pub fn score_tags(
    schema: &TagSchema,
    gold: &[Vec<usize>],
    predictions: &[Vec<usize>],
) -> Result<EvalReport> {
    if gold.len() != predictions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            predictions.len()
        )));
    }
    let nt = schema.num_types();
    let mut per_gold = vec![0usize; nt];
    let mut per_pred = vec![0usize; nt];
    let mut per_correct = vec![0usize; nt];
    let mut repaired = 0usize;
    for (g, p) in gold.iter().zip(predictions) {
        if g.len() != p.len() {
            return Err(Error::ShapeMismatch(format!(
                "sentence with {} gold tags vs {} predicted",
                g.len(),
                p.len()
            )));
        }
        let mut p = p.clone();
        repaired += bio_repair(&mut p);
        let gold_spans = spans_of_tags(g);
        let pred_spans = spans_of_tags(&p);
        for s in &gold_spans {
            per_gold[s.entity_type] += 1;
        }
        for s in &pred_spans {
            per_pred[s.entity_type] += 1;
        }
        let gold_set: std::collections::HashSet<_> = gold_spans.iter().collect();
        for s in &pred_spans {
            if gold_set.contains(s) {
                per_correct[s.entity_type] += 1;
            }
        }
    }
    let gold_spans: usize = per_gold.iter().sum();
    let predicted_spans: usize = per_pred.iter().sum();
    let correct_spans: usize = per_correct.iter().sum();
    let per_type = (0..nt)
        .map(|t| TypeEval {
            entity_type: schema.type_name(t).to_string(),
            gold: per_gold[t],
            predicted: per_pred[t],
            correct: per_correct[t],
            scores: Prf::from_counts(per_correct[t], per_pred[t], per_gold[t]),
        })
        .collect();
    Ok(EvalReport {
        micro: Prf::from_counts(correct_spans, predicted_spans, gold_spans),
        gold_spans,
        predicted_spans,
        correct_spans,
        per_type,
        sentences: gold.len(),
        repaired_predictions: repaired,
    })
}

/// Per-token argmax over the model's own tag distribution, ties toward the
/// lowest index.
pub fn predict_tags(model: &TokenClassifier, sentence: &TaggedSentence) -> Vec<usize> {
    let buckets = featurize(sentence, &model.config);
    let (probs, _) = forward(model, &buckets, false, None);
    argmax_rows(&probs)
}

pub(crate) fn argmax_rows(probs: &ProbBatch) -> Vec<usize> {
    (0..probs.num_tokens())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0usize;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Span-level evaluation of a model on a corpus.
///
/// When `schema` is the model's own tag space, predictions are its argmax
/// tags. When `schema` is a coarse space, `matrix` must be supplied and
/// predictions go through `p_fine . M`.
pub fn evaluate(
    model: &TokenClassifier,
    matrix: Option<&F2CMatrix>,
    corpus: &Corpus,
    schema: &TagSchema,
) -> Result<EvalReport> {
    if corpus.schema != *schema {
        return Err(Error::Schema(
            "evaluation schema does not match the corpus".into(),
        ));
    }
    match matrix {
        None => {
            if schema.num_tags() != model.config.num_tags {
                return Err(Error::InvalidArgument(format!(
                    "model head has {} tags but schema has {}; supply a mapping matrix",
                    model.config.num_tags,
                    schema.num_tags()
                )));
            }
        }
        Some(m) => {
            if m.num_fine_tags() != model.config.num_tags {
                return Err(Error::ShapeMismatch(format!(
                    "matrix maps {} fine tags, model head has {}",
                    m.num_fine_tags(),
                    model.config.num_tags
                )));
            }
            if m.coarse_schema != *schema {
                return Err(Error::Schema(
                    "matrix coarse schema does not match the evaluation schema".into(),
                ));
            }
        }
    }
    let mut gold = Vec::with_capacity(corpus.len());
    let mut preds = Vec::with_capacity(corpus.len());
    for sent in &corpus.sentences {
        gold.push(sent.tags.clone());
        preds.push(match matrix {
            None => predict_tags(model, sent),
            Some(m) => predict_coarse(model, m, sent)?,
        });
    }
    score_tags(schema, &gold, &preds)
}

/// Published full-scale F1 reference points for the shot curve. These numbers
/// come from a RoBERTa-large system trained on the full Few-NERD / OntoNotes /
/// CoNLL'03 datasets and are NOT-REPRODUCIBLE-AT-DESK-SCALE; they are carried
/// as annotations only.
pub const FULL_SCALE_REFERENCE_F1: [(usize, f64); 5] = [
    (10, 44.951),
    (20, 51.142),
    (40, 56.409),
    (80, 56.847),
    (100, 57.178),
];

/// One column of the shot curve.
#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub k: usize,
    pub per_seed: Vec<f64>,
    pub mean_f1: f64,
    pub stdev_f1: f64,
}

/// Test F1 as a function of the shot size K.
#[derive(Debug, Clone)]
pub struct KshotCurve {
    pub points: Vec<CurvePoint>,
    pub seeds: Vec<u64>,
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let stdev = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, stdev)
}

impl KshotCurve {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# reference_full_scale_f1 (NOT-REPRODUCIBLE-AT-DESK-SCALE):");
        for (k, f1) in FULL_SCALE_REFERENCE_F1 {
            let _ = write!(out, " {k}-shot={f1}");
        }
        out.push('\n');
        out.push_str("metric");
        for p in &self.points {
            let _ = write!(out, "\t{}", p.k);
        }
        out.push('\n');
        out.push_str("mean_f1");
        for p in &self.points {
            let _ = write!(out, "\t{:.6}", p.mean_f1);
        }
        out.push('\n');
        out.push_str("stdev_f1");
        for p in &self.points {
            let _ = write!(out, "\t{:.6}", p.stdev_f1);
        }
        out.push('\n');
        for (si, seed) in self.seeds.iter().enumerate() {
            let _ = write!(out, "seed_{seed}");
            for p in &self.points {
                let _ = write!(out, "\t{:.6}", p.per_seed[si]);
            }
            out.push('\n');
        }
        out
    }
}

/// Run the full pipeline for each (K, seed), sampling a K-shot fine corpus
/// from `pool`, and report test span-F1 per shot size.
///
/// `base` supplies everything but the fine corpus and the seed; it must carry
/// a test corpus.
pub fn kshot_curve(
    base: &TrainPlan,
    pool: &Corpus,
    ks: &[usize],
    seeds: &[u64],
) -> Result<KshotCurve> {
    if base.test.is_none() {
        return Err(Error::InvalidArgument(
            "kshot_curve needs a test corpus in the plan".into(),
        ));
    }
    if ks.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("empty K list or seed list".into()));
    }
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let shot = sample_kshot(pool, k, seed)?;
            let plan = base.derive(shot.corpus, seed);
            let run = run_pipeline(&plan)?;
            per_seed.push(run.test_f1.expect("plan has a test corpus"));
        }
        let (mean_f1, stdev_f1) = mean_stdev(&per_seed);
        points.push(CurvePoint {
            k,
            per_seed,
            mean_f1,
            stdev_f1,
        });
    }
    Ok(KshotCurve {
        points,
        seeds: seeds.to_vec(),
    })
}

/// One row of the top-k sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub k: TopK,
    pub per_seed: Vec<f64>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TopkSweep {
    pub points: Vec<SweepPoint>,
    pub seeds: Vec<u64>,
}

impl TopkSweep {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("k\tmean_f1");
        for seed in &self.seeds {
            let _ = write!(out, "\tseed_{seed}");
        }
        out.push('\n');
        for p in &self.points {
            let _ = write!(out, "{}\t{:.6}", p.k, p.mean_f1);
            for f1 in &p.per_seed {
                let _ = write!(out, "\t{f1:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Run the pipeline varying only the matrix refinement's top-k. The fine
/// corpus is a fresh `kshot`-shot sample per seed, shared across k values.
pub fn topk_sweep(
    base: &TrainPlan,
    pool: &Corpus,
    kshot: usize,
    topks: &[TopK],
    seeds: &[u64],
) -> Result<TopkSweep> {
    if base.test.is_none() {
        return Err(Error::InvalidArgument(
            "topk_sweep needs a test corpus in the plan".into(),
        ));
    }
    let mut rows: Vec<SweepPoint> = topks
        .iter()
        .map(|&k| SweepPoint {
            k,
            per_seed: Vec::new(),
            mean_f1: 0.0,
        })
        .collect();
    for &seed in seeds {
        let shot = sample_kshot(pool, kshot, seed)?;
        for (row, &k) in rows.iter_mut().zip(topks) {
            let mut plan = base.derive(shot.corpus.clone(), seed);
            plan.topk = k;
            let run = run_pipeline(&plan)?;
            row.per_seed
                .push(run.test_f1.expect("plan has a test corpus"));
        }
    }
    for row in &mut rows {
        let (mean, _) = mean_stdev(&row.per_seed);
        row.mean_f1 = mean;
    }
    Ok(TopkSweep {
        points: rows,
        seeds: seeds.to_vec(),
    })
}
