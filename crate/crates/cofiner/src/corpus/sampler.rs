//! K~(K+5)-shot sub-corpus sampling.
//!
//! Entity types are processed in ascending order of corpus frequency. For the
//! current type, candidate sentences containing it are drawn uniformly at
//! random without replacement; a candidate is rejected when accepting it would
//! push any type's occurrence count above K+5, and accepted sentences add the
//! occurrence counts of every entity they contain. Sampling stops early once
//! every present type has reached K.

use super::{extract_spans, Corpus};
use crate::rng::{stream, Rng};
use crate::{Error, Result};

/// Shot sizes shipped as presets.
pub const KSHOT_PRESETS: [usize; 5] = [10, 20, 40, 80, 100];

/// A sampled sub-corpus plus the per-type occurrence bookkeeping.
#[derive(Debug)]
pub struct KshotSample {
    pub corpus: Corpus,
    /// Entity occurrences per type in the sample, indexed by entity type.
    pub counts: Vec<usize>,
    /// Types whose candidates ran out before reaching K.
    pub exhausted: Vec<usize>,
    /// True when every type present in the input reached at least K.
    pub normal_termination: bool,
}

/// Sample a sub-corpus in which every present entity type occurs at least `k`
/// and at most `k + 5` times (exhaustion of a rare type is reported, not an
/// error). Deterministic given `seed`.
pub fn sample_kshot(corpus: &Corpus, k: usize, seed: u64) -> Result<KshotSample> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let num_types = corpus.schema.num_types();
    // entity occurrences per sentence and per type
    let sentence_counts: Vec<Vec<usize>> = corpus
        .sentences
        .iter()
        .map(|s| {
            let mut c = vec![0usize; num_types];
            for span in extract_spans(s) {
                c[span.entity_type] += 1;
            }
            c
        })
        .collect();
    let mut freq = vec![0usize; num_types];
    for sc in &sentence_counts {
        for (f, c) in freq.iter_mut().zip(sc) {
            *f += c;
        }
    }
    if freq.iter().all(|&f| f == 0) {
        return Err(Error::InvalidArgument(format!(
            "corpus {:?} contains no entities",
            corpus.name
        )));
    }

    let mut present: Vec<usize> = (0..num_types).filter(|&t| freq[t] > 0).collect();
    present.sort_by_key(|&t| (freq[t], t));

    let mut rng = Rng::new(stream(seed, "kshot", k as u64));
    let mut selected = vec![false; corpus.len()];
    let mut counts = vec![0usize; num_types];
    let mut exhausted: Vec<usize> = (0..num_types).filter(|&t| freq[t] == 0).collect();

    for &ty in &present {
        if present.iter().all(|&t| counts[t] >= k) {
            break;
        }
        let mut candidates: Vec<usize> = (0..corpus.len())
            .filter(|&i| !selected[i] && sentence_counts[i][ty] > 0)
            .collect();
        rng.shuffle(&mut candidates);
        let mut next = 0;
        while counts[ty] < k && next < candidates.len() {
            let si = candidates[next];
            next += 1;
            let sc = &sentence_counts[si];
            let overflow = (0..num_types).any(|t| counts[t] + sc[t] > k + 5);
            if overflow {
                continue;
            }
            selected[si] = true;
            for (c, add) in counts.iter_mut().zip(sc) {
                *c += add;
            }
        }
        if counts[ty] < k {
            exhausted.push(ty);
        }
    }

    let sentences = corpus
        .sentences
        .iter()
        .zip(&selected)
        .filter(|(_, &sel)| sel)
        .map(|(s, _)| s.clone())
        .collect();
    let normal_termination = present.iter().all(|&t| counts[t] >= k);
    exhausted.sort_unstable();
    Ok(KshotSample {
        corpus: Corpus::new(
            format!("{}-{}shot", corpus.name, k),
            corpus.schema.clone(),
            sentences,
        )?,
        counts,
        exhausted,
        normal_termination,
    })
}
