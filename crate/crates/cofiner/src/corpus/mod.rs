//! Corpora of BIO-tagged sentences.
//!
//! A [`TagSchema`] turns an entity-type inventory into the BIO tag alphabet
//! `["O", "B-t0", "I-t0", "B-t1", ...]`. Tag indices follow that fixed layout:
//! index 0 is `O`, odd indices are `B-` tags, even nonzero indices are `I-`
//! tags, and `(tag - 1) / 2` recovers the entity-type index. All span and
//! prefix logic in the crate relies on this arithmetic.

mod conll;
mod sampler;
mod synthetic;

pub use conll::{conll_string, read_conll, read_conll_str, write_conll, ConllRead};
pub use sampler::{sample_kshot, KshotSample, KSHOT_PRESETS};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

use crate::{Error, Result};
use std::collections::HashMap;
use std::fmt;

/// An entity-type inventory plus the induced BIO tag alphabet.
#[derive(Debug, Clone)]
pub struct TagSchema {
    entity_types: Vec<String>,
    tag_alphabet: Vec<String>,
    tag_index: HashMap<String, usize>,
    type_index: HashMap<String, usize>,
}

impl PartialEq for TagSchema {
    fn eq(&self, other: &Self) -> bool {
        self.entity_types == other.entity_types
    }
}
impl Eq for TagSchema {}

impl TagSchema {
    /// Build a schema from entity-type names, preserving their order.
    ///
    /// Names may not repeat, may not contain `-` (it separates the BIO prefix
    /// from the type in tag strings), and may not be `O`.
    pub fn new<I, S>(entity_types: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let mut tag_alphabet = Vec::with_capacity(2 * entity_types.len() + 1);
        tag_alphabet.push("O".to_string());
        let mut type_index = HashMap::new();
        for (i, name) in entity_types.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Schema("empty entity-type name".into()));
            }
            if name == "O" {
                return Err(Error::Schema("entity type may not be named \"O\"".into()));
            }
            if name.contains('-') {
                return Err(Error::Schema(format!(
                    "entity type {name:?} contains '-', which is reserved for the BIO prefix"
                )));
            }
            if type_index.insert(name.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate entity type {name:?}")));
            }
            tag_alphabet.push(format!("B-{name}"));
            tag_alphabet.push(format!("I-{name}"));
        }
        let tag_index = tag_alphabet
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(TagSchema {
            entity_types,
            tag_alphabet,
            tag_index,
            type_index,
        })
    }

    /// Build a schema from an unordered set of names, sorted lexicographically.
    pub fn induce<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        TagSchema::new(names)
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn num_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn tag_alphabet(&self) -> &[String] {
        &self.tag_alphabet
    }

    pub fn num_tags(&self) -> usize {
        self.tag_alphabet.len()
    }

    pub fn tag_of(&self, name: &str) -> Option<usize> {
        self.tag_index.get(name).copied()
    }

    pub fn type_of(&self, name: &str) -> Option<usize> {
        self.type_index.get(name).copied()
    }

    pub fn tag_name(&self, tag: usize) -> &str {
        &self.tag_alphabet[tag]
    }

    pub fn type_name(&self, ty: usize) -> &str {
        &self.entity_types[ty]
    }

    /// Tag index of `B-<type>`.
    pub fn begin_tag(&self, ty: usize) -> usize {
        1 + 2 * ty
    }

    /// Tag index of `I-<type>`.
    pub fn inside_tag(&self, ty: usize) -> usize {
        2 + 2 * ty
    }

    /// Entity-type index of a tag; `None` for `O`.
    pub fn type_of_tag(&self, tag: usize) -> Option<usize> {
        if tag == 0 {
            None
        } else {
            Some((tag - 1) / 2)
        }
    }

    /// One entity-type name per line, for sidecar schema files.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.entity_types {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        TagSchema::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }
}

impl fmt::Display for TagSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} types / {} tags", self.num_types(), self.num_tags())
    }
}

pub fn is_begin(tag: usize) -> bool {
    tag % 2 == 1
}

pub fn is_inside(tag: usize) -> bool {
    tag != 0 && tag.is_multiple_of(2)
}

/// Entity-type index encoded in a nonzero tag.
pub fn tag_type(tag: usize) -> usize {
    debug_assert!(tag > 0);
    (tag - 1) / 2
}

/// A token sequence with aligned BIO tag indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<usize>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<usize>, schema: &TagSchema) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty sentence".into()));
        }
        if tokens.len() != tags.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens vs {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| t.is_empty()) {
            return Err(Error::InvalidArgument(format!("empty token {t:?}")));
        }
        if let Some(&bad) = tags.iter().find(|&&t| t >= schema.num_tags()) {
            return Err(Error::Schema(format!(
                "tag index {bad} out of range for {}",
                schema
            )));
        }
        Ok(TaggedSentence { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A named set of sentences under one schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub schema: TagSchema,
    pub sentences: Vec<TaggedSentence>,
}

impl Corpus {
    pub fn new(
        name: impl Into<String>,
        schema: TagSchema,
        sentences: Vec<TaggedSentence>,
    ) -> Result<Self> {
        let corpus = Corpus {
            name: name.into(),
            schema,
            sentences,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sentences.iter().enumerate() {
            if s.tokens.len() != s.tags.len() || s.tokens.is_empty() {
                return Err(Error::ShapeMismatch(format!(
                    "sentence {i}: {} tokens vs {} tags",
                    s.tokens.len(),
                    s.tags.len()
                )));
            }
            if let Some(&bad) = s.tags.iter().find(|&&t| t >= self.schema.num_tags()) {
                return Err(Error::Schema(format!(
                    "sentence {i}: tag index {bad} out of range for {}",
                    self.schema
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }
}

/// A maximal entity mention: type plus token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub entity_type: usize,
    pub start: usize,
    pub end: usize,
}

/// Repair BIO violations in place: an `I-t` not preceded by `B-t` or `I-t`
/// becomes `B-t`. Returns the number of edited positions.
pub fn bio_repair(tags: &mut [usize]) -> usize {
    let mut repairs = 0;
    for i in 0..tags.len() {
        let t = tags[i];
        if is_inside(t) {
            let ok = i > 0 && tags[i - 1] != 0 && tag_type(tags[i - 1]) == tag_type(t);
            if !ok {
                tags[i] = t - 1; // I-x -> B-x
                repairs += 1;
            }
        }
    }
    repairs
}

pub fn is_bio_valid(tags: &[usize]) -> bool {
    tags.iter().enumerate().all(|(i, &t)| {
        !is_inside(t) || (i > 0 && tags[i - 1] != 0 && tag_type(tags[i - 1]) == tag_type(t))
    })
}

/// Extract maximal spans from a BIO-valid tag sequence, in start order.
///
/// Each `B-t` opens a span; following `I-t` of the same type extend it; `O` or
/// a different tag closes it.
pub fn spans_of_tags(tags: &[usize]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &t) in tags.iter().enumerate() {
        let extends = matches!(&open, Some(s) if is_inside(t) && tag_type(t) == s.entity_type);
        if extends {
            open.as_mut().unwrap().end = i + 1;
        } else {
            if let Some(s) = open.take() {
                spans.push(s);
            }
            if t != 0 && is_begin(t) {
                open = Some(Span {
                    entity_type: tag_type(t),
                    start: i,
                    end: i + 1,
                });
            }
        }
    }
    if let Some(s) = open.take() {
        spans.push(s);
    }
    spans
}

/// Spans of a sentence (requires BIO-valid tags; see [`bio_repair`]).
pub fn extract_spans(sentence: &TaggedSentence) -> Vec<Span> {
    spans_of_tags(&sentence.tags)
}

/// Inverse of span extraction: write `B-`/`I-` tags for non-overlapping spans
/// onto an all-`O` sequence of length `len`.
pub fn spans_to_tags(spans: &[Span], len: usize) -> Vec<usize> {
    let mut tags = vec![0usize; len];
    for s in spans {
        debug_assert!(s.start < s.end && s.end <= len);
        tags[s.start] = 1 + 2 * s.entity_type;
        for t in tags.iter_mut().take(s.end).skip(s.start + 1) {
            *t = 2 + 2 * s.entity_type;
        }
    }
    tags
}
