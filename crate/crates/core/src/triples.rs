//! The serialized triple-list grammar and its extraction prompt.
//!
//! Facts travel between model and evaluator as lines of the form
//! `(subject, relation, object);`. Inside a parenthesized group only the
//! first two commas delimit slots; any further commas belong to the object,
//! so measurements like `(liver, shows, mass, 3 cm)` keep their tail intact.
//! Prose after the last group is preserved verbatim as residual text rather
//! than rejected, because judge models occasionally append commentary.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::chain::{normalize_phrase, ChainError, RelationLexicon, Triplet};
use crate::labels;

/// Errors from the triple-list grammar.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TripleError {
    #[error("malformed triple at byte {offset}: {reason}")]
    MalformedTriple { offset: usize, reason: String },
    #[error("triple {index} cannot be serialized: {detail}")]
    InvalidTriplet { index: usize, detail: String },
    #[error("report text is empty")]
    EmptyInput,
}

/// Result of parsing judge output: the recovered triplets plus any
/// trailing prose the grammar did not consume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleListDocument {
    pub triples: Vec<Triplet>,
    pub residual_text: String,
}

/// Builds the fact-extraction request for one radiology report.
///
/// The prompt pins the output contract the parser expects: one
/// `(subject, relation, object);` group per fact, negations phrased as
/// `not observed`, no surrounding prose.
pub fn build_extraction_prompt(report_text: &str) -> Result<String, TripleError> {
    if report_text.trim().is_empty() {
        return Err(TripleError::EmptyInput);
    }
    Ok(format!(
        "You are a medical fact-extraction assistant. Read the radiology report \
below and extract every clinical fact as a (subject, relation, object) triplet, \
one per line, each group terminated by a semicolon. Subjects and objects should \
be organs, anatomical regions, lesions, or their attributes; relations should be \
short verb phrases taken from the report wherever possible. Express explicitly \
negated findings with the relation \"not observed\". Output only the triplet \
list, with no commentary before or after it.\n\
\n\
Example output line:\n\
(Right hemicolon, not observed, wall thickening);\n\
\n\
Report:\n\
{}",
        report_text.trim()
    ))
}

/// Parses a triple list, tolerating trailing prose.
///
/// Groups are read from the start of the text. Scanning stops at the first
/// non-whitespace character that does not open a group; everything from
/// there on lands in `residual_text`. Errors are raised only for defects
/// inside a group: a missing closing parenthesis, a nested opening
/// parenthesis, fewer than two slot-delimiting commas, a stray `;`, or an
/// empty slot.
pub fn parse_triple_list(text: &str) -> Result<TripleListDocument, TripleError> {
    let mut triples = Vec::new();
    let mut rest = text;
    let mut consumed = 0usize;
    loop {
        let trimmed = rest.trim_start();
        consumed += rest.len() - trimmed.len();
        rest = trimmed;
        if rest.is_empty() {
            return Ok(TripleListDocument {
                triples,
                residual_text: String::new(),
            });
        }
        if !rest.starts_with('(') {
            return Ok(TripleListDocument {
                triples,
                residual_text: rest.trim_end().to_owned(),
            });
        }
        let group_start = consumed;
        let malformed = |reason: &str| TripleError::MalformedTriple {
            offset: group_start,
            reason: reason.to_owned(),
        };
        let body_len = match rest[1..].find(['(', ')']) {
            Some(i) if rest[1..].as_bytes()[i] == b')' => i,
            Some(_) => return Err(malformed("nested opening parenthesis")),
            None => return Err(malformed("unbalanced parentheses: no closing parenthesis")),
        };
        let body = &rest[1..1 + body_len];
        if body.contains(';') {
            return Err(malformed("separator `;` inside parentheses"));
        }
        let c1 = body
            .find(',')
            .ok_or_else(|| malformed("fewer than two slot-delimiting commas"))?;
        let c2 = c1
            + 1
            + body[c1 + 1..]
                .find(',')
                .ok_or_else(|| malformed("fewer than two slot-delimiting commas"))?;
        let triplet = Triplet::new(&body[..c1], &body[c1 + 1..c2], &body[c2 + 1..])
            .map_err(|e| malformed(&e.to_string()))?;
        triples.push(triplet);
        // Step past ")" and an optional ";" separator.
        let mut after = 1 + body_len + 1;
        let tail = rest[after..].trim_start();
        if let Some(stripped) = tail.strip_prefix(';') {
            after += rest[after..].len() - stripped.len();
        }
        consumed += after;
        rest = &rest[after..];
    }
}

/// Serializes triplets back into the line grammar, one group per line.
///
/// Fields are re-validated so that triplets deserialized from untrusted
/// JSON cannot smuggle reserved characters into the output.
pub fn format_triple_list(triples: &[Triplet]) -> Result<String, TripleError> {
    let mut out = String::new();
    for (index, t) in triples.iter().enumerate() {
        // Round-tripping through the constructor re-runs slot validation.
        let checked = Triplet::new(&t.subject, &t.relation, &t.object).map_err(|e| {
            TripleError::InvalidTriplet {
                index,
                detail: e.to_string(),
            }
        })?;
        if checked != *t {
            return Err(TripleError::InvalidTriplet {
                index,
                detail: ChainError::EmptyField { slot: "subject" }.to_string(),
            });
        }
        out.push_str(&format!("({}, {}, {});\n", t.subject, t.relation, t.object));
    }
    Ok(out)
}

/// A set of known entity phrases (organs, regions, lesions) used to detect
/// slot-order mistakes in extracted triples.
#[derive(Clone, Debug, Default)]
pub struct EntityLexicon {
    phrases: BTreeSet<String>,
}

impl EntityLexicon {
    /// Organ and region names from the built-in label table plus common
    /// lesion and finding nouns.
    pub fn builtin() -> EntityLexicon {
        let mut lex = EntityLexicon::default();
        for name in labels::builtin_label_names() {
            lex.insert(name);
            if name.contains('_') {
                lex.insert(&name.replace('_', " "));
            }
        }
        for extra in EXTRA_ENTITY_PHRASES {
            lex.insert(extra);
        }
        lex
    }

    pub fn from_phrases<'a, I: IntoIterator<Item = &'a str>>(phrases: I) -> EntityLexicon {
        let mut lex = EntityLexicon::default();
        for phrase in phrases {
            lex.insert(phrase);
        }
        lex
    }

    fn insert(&mut self, phrase: &str) {
        let key = normalize_phrase(phrase);
        if !key.is_empty() {
            self.phrases.insert(key);
        }
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.contains(&normalize_phrase(phrase))
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

const EXTRA_ENTITY_PHRASES: &[&str] = &[
    "mass",
    "lesion",
    "tumor",
    "nodule",
    "cyst",
    "metastasis",
    "lymph node",
    "wall thickening",
    "effusion",
    "ascites",
    "fat stranding",
    "calcification",
    "necrosis",
    "ulcer",
    "polyp",
    "stenosis",
    "thrombus",
    "fluid collection",
    "margin",
    "boundary",
    "density",
    "enhancement pattern",
    "right hemicolon",
    "left hemicolon",
    "gastric antrum",
    "gastric body",
    "gastric fundus",
    "pancreatic head",
    "pancreatic body",
    "pancreatic tail",
    "uncinate process",
    "right lobe of liver",
    "left lobe of liver",
    "caudate lobe",
    "esophagogastric junction",
    "sigmoid colon",
    "transverse colon",
    "ascending colon",
    "descending colon",
    "rectum",
    "cecum",
    "duodenal bulb",
    "porta hepatis",
    "retroperitoneum",
    "peritoneum",
    "omentum",
    "mesentery",
];

/// Fixes the common extractor mistake of emitting `(subject, object,
/// relation)` instead of `(subject, relation, object)`.
///
/// The swap fires only when the relation slot holds a known entity phrase
/// *and* the object slot holds a known relation phrase, so well-formed
/// triples are never disturbed. Returns the (possibly repaired) triplet
/// and whether a swap happened.
pub fn repair_slot_order(
    triplet: &Triplet,
    relations: &RelationLexicon,
    entities: &EntityLexicon,
) -> (Triplet, bool) {
    if entities.contains(&triplet.relation) && relations.contains(&triplet.object) {
        (
            Triplet {
                subject: triplet.subject.clone(),
                relation: triplet.object.clone(),
                object: triplet.relation.clone(),
            },
            true,
        )
    } else {
        (triplet.clone(), false)
    }
}
