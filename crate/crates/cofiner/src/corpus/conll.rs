//! CoNLL-style column files.
//!
//! One `token<TAB>tag` pair per line (a single space is also accepted on read;
//! TAB is always emitted on write). An empty line terminates a sentence, and
//! the final sentence is followed by exactly one empty line. `-DOCSTART-`
//! lines are skipped on read and counted.

use super::{bio_repair, Corpus, TagSchema, TaggedSentence};
use crate::{Error, Result};
use std::fs;
use std::path::Path;

/// Result of reading a corpus file.
#[derive(Debug)]
pub struct ConllRead {
    pub corpus: Corpus,
    /// Number of BIO violations repaired at load time.
    pub repairs: usize,
    /// Number of `-DOCSTART-` lines skipped.
    pub docstarts_skipped: usize,
}

fn split_columns(line: &str) -> Option<(&str, &str)> {
    let (tok, tag) = if line.contains('\t') {
        let mut it = line.split('\t');
        let tok = it.next()?;
        let tag = it.next()?;
        if it.next().is_some() {
            return None;
        }
        (tok, tag)
    } else {
        let mut it = line.split(' ');
        let tok = it.next()?;
        let tag = it.next()?;
        if it.next().is_some() {
            return None;
        }
        (tok, tag)
    };
    if tok.is_empty() || tag.is_empty() {
        return None;
    }
    Some((tok, tag))
}

/// Entity-type name encoded in a tag string, if it is a valid BIO tag.
fn tag_parts(tag: &str) -> Option<(char, Option<&str>)> {
    if tag == "O" {
        return Some(('O', None));
    }
    let rest = tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-"))?;
    if rest.is_empty() {
        return None;
    }
    Some((tag.as_bytes()[0] as char, Some(rest)))
}

/// Parse CoNLL text. When `schema` is `None` one is induced from the tags seen
/// (entity types sorted lexicographically). BIO violations are repaired and
/// counted.
pub fn read_conll_str(name: &str, text: &str, schema: Option<&TagSchema>) -> Result<ConllRead> {
    let mut raw_sentences: Vec<Vec<(String, String)>> = Vec::new();
    let mut current: Vec<(String, String)> = Vec::new();
    let mut docstarts_skipped = 0usize;
    let mut type_names: Vec<String> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            if !current.is_empty() {
                raw_sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            docstarts_skipped += 1;
            continue;
        }
        let (tok, tag) = split_columns(line).ok_or_else(|| Error::Parse {
            path: name.to_string(),
            line: lineno,
            msg: format!("expected \"token<TAB>tag\", got {line:?}"),
        })?;
        match schema {
            Some(s) => {
                if s.tag_of(tag).is_none() {
                    return Err(Error::Schema(format!(
                        "{name}:{lineno}: tag {tag:?} not in provided schema ({s})"
                    )));
                }
            }
            None => {
                let (_, ty) = tag_parts(tag).ok_or_else(|| Error::Parse {
                    path: name.to_string(),
                    line: lineno,
                    msg: format!("malformed tag {tag:?}"),
                })?;
                if let Some(ty) = ty {
                    type_names.push(ty.to_string());
                }
            }
        }
        current.push((tok.to_string(), tag.to_string()));
    }
    if !current.is_empty() {
        raw_sentences.push(current);
    }

    let schema = match schema {
        Some(s) => s.clone(),
        None => TagSchema::induce(type_names)?,
    };

    let mut repairs = 0usize;
    let mut sentences = Vec::with_capacity(raw_sentences.len());
    for raw in raw_sentences {
        let tokens: Vec<String> = raw.iter().map(|(t, _)| t.clone()).collect();
        let mut tags: Vec<usize> = raw
            .iter()
            .map(|(_, tag)| schema.tag_of(tag).expect("tag validated above"))
            .collect();
        repairs += bio_repair(&mut tags);
        sentences.push(TaggedSentence { tokens, tags });
    }

    Ok(ConllRead {
        corpus: Corpus::new(name, schema, sentences)?,
        repairs,
        docstarts_skipped,
    })
}

/// Read a corpus file. The corpus is named after the file stem.
pub fn read_conll(path: impl AsRef<Path>, schema: Option<&TagSchema>) -> Result<ConllRead> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    read_conll_str(&name, &text, schema)
}

/// Render a corpus in the exact format read by [`read_conll`].
pub fn conll_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in &corpus.sentences {
        for (tok, &tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(corpus.schema.tag_name(tag));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn write_conll(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, conll_string(corpus)).map_err(|e| Error::io(path.display().to_string(), e))
}
