//! Domain types for clinical reasoning chains.
//!
//! A model answer to a tumor-imaging question is treated as free text that
//! splits into a reasoning body and a final summary, and the reasoning body
//! decomposes into `(subject, relation, object)` triplets grouped into three
//! chain levels: factual findings, interpretive impressions, and high-order
//! logical reasoning. The types here carry that decomposition; the grammar
//! for serializing triplet lists lives in [`crate::triples`] and the scoring
//! rubric in [`crate::rubric`].

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The five abdominal organs a question can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Liver,
    Pancreas,
    Stomach,
    Colon,
    Esophagus,
}

impl Organ {
    /// All organs in canonical order.
    pub const ALL: [Organ; 5] = [
        Organ::Liver,
        Organ::Pancreas,
        Organ::Stomach,
        Organ::Colon,
        Organ::Esophagus,
    ];

    /// Lowercase name as used in records and file names.
    pub fn name(self) -> &'static str {
        match self {
            Organ::Liver => "liver",
            Organ::Pancreas => "pancreas",
            Organ::Stomach => "stomach",
            Organ::Colon => "colon",
            Organ::Esophagus => "esophagus",
        }
    }

    /// Parses a lowercase organ name.
    pub fn parse(name: &str) -> Option<Organ> {
        let needle = name.trim();
        Organ::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(needle))
    }
}

impl core::fmt::Display for Organ {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// The four question families in the evaluation suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    /// Where is the organ / tumor (multiple-choice position questions).
    Localization,
    /// Lesion attribute questions: segment, shape, boundary, density, count, other.
    LesionAttribute,
    /// Tumor / node / metastasis staging questions.
    TnmPrediction,
    /// Free-text report generation graded via chain scoring.
    CotReport,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Localization,
        TaskKind::LesionAttribute,
        TaskKind::TnmPrediction,
        TaskKind::CotReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Localization => "Localization",
            TaskKind::LesionAttribute => "LesionAttribute",
            TaskKind::TnmPrediction => "TnmPrediction",
            TaskKind::CotReport => "CotReport",
        }
    }
}

impl core::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether an answer is picked from options or written freely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnswerFormat {
    #[serde(rename = "multiple-choice")]
    MultipleChoice,
    #[serde(rename = "open-ended")]
    OpenEnded,
}

/// The three chain levels, ordered finding < impression < reasoning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChainLevel {
    /// Factual findings read directly off the image.
    #[serde(rename = "FC")]
    Fc,
    /// Interpretive impressions derived from findings.
    #[serde(rename = "IC")]
    Ic,
    /// High-order logical reasoning toward a diagnosis.
    #[serde(rename = "LRC")]
    Lrc,
}

impl ChainLevel {
    pub const ALL: [ChainLevel; 3] = [ChainLevel::Fc, ChainLevel::Ic, ChainLevel::Lrc];

    pub fn name(self) -> &'static str {
        match self {
            ChainLevel::Fc => "FC",
            ChainLevel::Ic => "IC",
            ChainLevel::Lrc => "LRC",
        }
    }
}

impl core::fmt::Display for ChainLevel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Errors from constructing or validating chain types.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("triplet {slot} slot is empty after trimming")]
    EmptyField { slot: &'static str },
    #[error("triplet {slot} slot contains reserved character {ch:?}")]
    ReservedChar { slot: &'static str, ch: char },
    #[error("input text is empty")]
    EmptyInput,
    #[error("source span {start}..{end} exceeds text length {len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("relation lexicon class {class:?} is empty")]
    EmptyLexiconClass { class: &'static str },
    #[error("relation phrase {phrase:?} appears in more than one lexicon class")]
    DuplicateLexiconPhrase { phrase: String },
    #[error("relation lexicon is not valid JSON: {0}")]
    LexiconSyntax(String),
}

/// One `(subject, relation, object)` fact.
///
/// Fields are stored trimmed. No field may be empty or contain `;`, `(`,
/// or `)`, which are reserved by the list serialization in
/// [`crate::triples`]. Commas are legal inside the object slot (and,
/// strictly, inside any slot, but a comma in subject or relation will not
/// survive a serialization round trip).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triplet {
    /// Builds a triplet, trimming each slot and rejecting empty slots and
    /// reserved characters.
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Triplet, ChainError> {
        fn check(slot: &'static str, value: &str) -> Result<String, ChainError> {
            let trimmed = value.trim();
            if trimmed.is_empty() {
                return Err(ChainError::EmptyField { slot });
            }
            if let Some(ch) = trimmed.chars().find(|c| matches!(c, ';' | '(' | ')')) {
                return Err(ChainError::ReservedChar { slot, ch });
            }
            Ok(trimmed.to_owned())
        }
        Ok(Triplet {
            subject: check("subject", subject)?,
            relation: check("relation", relation)?,
            object: check("object", object)?,
        })
    }
}

impl core::fmt::Display for Triplet {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

/// A group of triplets at one chain level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub level: ChainLevel,
    pub triplets: Vec<Triplet>,
    /// Byte span in the originating reasoning text, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_span: Option<[usize; 2]>,
}

impl ReasoningChain {
    pub fn new(level: ChainLevel, triplets: Vec<Triplet>) -> ReasoningChain {
        ReasoningChain {
            level,
            triplets,
            source_span: None,
        }
    }

    /// Attaches a byte span, validated against the origin text length.
    pub fn with_span(mut self, start: usize, end: usize, origin_len: usize) -> Result<ReasoningChain, ChainError> {
        if start > end || end > origin_len {
            return Err(ChainError::SpanOutOfBounds {
                start,
                end,
                len: origin_len,
            });
        }
        self.source_span = Some([start, end]);
        Ok(self)
    }
}

/// A model answer split into reasoning body, summary, and per-level chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoTRecord {
    /// Everything before the summary marker, trimmed.
    pub reasoning_text: String,
    /// The summary marker and everything after it, trimmed. Empty when the
    /// marker is missing.
    pub summary_text: String,
    /// Chains keyed by level; levels with no triplets are omitted.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub chains: BTreeMap<ChainLevel, ReasoningChain>,
    /// True when no summary marker was found and the whole text was kept
    /// as reasoning.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub marker_missing: bool,
}

impl CoTRecord {
    pub fn with_chains(mut self, chains: BTreeMap<ChainLevel, ReasoningChain>) -> CoTRecord {
        self.chains = chains;
        self
    }
}

/// The phrase that opens an answer summary.
pub const DEFAULT_SUMMARY_MARKERS: &[&str] = &["Thus, the answer is"];

/// Splits answer text into reasoning body and summary.
///
/// Markers are tried in order; the first marker that occurs anywhere in the
/// text wins, and the split happens at its last occurrence so that a marker
/// quoted mid-reasoning does not truncate the chain. The summary keeps the
/// marker itself. When no marker is present the whole text becomes the
/// reasoning body and `marker_missing` is set.
pub fn segment_cot(text: &str, markers: &[&str]) -> Result<CoTRecord, ChainError> {
    if text.trim().is_empty() {
        return Err(ChainError::EmptyInput);
    }
    for marker in markers {
        if marker.is_empty() {
            continue;
        }
        if let Some(idx) = text.rfind(marker) {
            return Ok(CoTRecord {
                reasoning_text: text[..idx].trim().to_string(),
                summary_text: text[idx..].trim().to_string(),
                chains: BTreeMap::new(),
                marker_missing: false,
            });
        }
    }
    Ok(CoTRecord {
        reasoning_text: text.trim().to_string(),
        summary_text: String::new(),
        chains: BTreeMap::new(),
        marker_missing: true,
    })
}

/// Lowercases, trims, and collapses internal whitespace runs to one space.
pub(crate) fn normalize_phrase(raw: &str) -> String {
    let mut out = String::new();
    let mut pending_space = false;
    for ch in raw.trim().chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            for low in ch.to_lowercase() {
                out.push(low);
            }
        }
    }
    out
}

#[derive(Deserialize)]
struct LexiconFile {
    observational: Vec<String>,
    suggestive: Vec<String>,
    conclusive: Vec<String>,
}

/// Maps relation phrases to chain levels.
///
/// Phrases are matched after normalization (case folding, whitespace
/// collapsing). Observational phrases classify as findings, suggestive
/// phrases as impressions, and conclusive phrases as logical reasoning.
#[derive(Clone, Debug)]
pub struct RelationLexicon {
    entries: BTreeMap<String, ChainLevel>,
}

impl RelationLexicon {
    /// Loads the lexicon shipped with the crate.
    pub fn builtin() -> RelationLexicon {
        RelationLexicon::from_json(include_str!("../data/relation_lexicon.json"))
            .expect("embedded relation lexicon must be valid")
    }

    /// Parses a lexicon from JSON of the form
    /// `{"observational": [...], "suggestive": [...], "conclusive": [...]}`.
    ///
    /// Every class must be non-empty and no normalized phrase may appear in
    /// two classes.
    pub fn from_json(json: &str) -> Result<RelationLexicon, ChainError> {
        let file: LexiconFile =
            serde_json::from_str(json).map_err(|e| ChainError::LexiconSyntax(e.to_string()))?;
        let classes = [
            ("observational", ChainLevel::Fc, &file.observational),
            ("suggestive", ChainLevel::Ic, &file.suggestive),
            ("conclusive", ChainLevel::Lrc, &file.conclusive),
        ];
        let mut entries = BTreeMap::new();
        for (class, level, phrases) in classes {
            if phrases.iter().all(|p| p.trim().is_empty()) {
                return Err(ChainError::EmptyLexiconClass { class });
            }
            for phrase in phrases {
                let key = normalize_phrase(phrase);
                if key.is_empty() {
                    continue;
                }
                if let Some(prev) = entries.insert(key.clone(), level) {
                    if prev != level {
                        return Err(ChainError::DuplicateLexiconPhrase { phrase: key });
                    }
                }
            }
        }
        Ok(RelationLexicon { entries })
    }

    /// Exact lookup of a normalized relation phrase.
    pub fn lookup(&self, relation: &str) -> Option<ChainLevel> {
        self.entries.get(&normalize_phrase(relation)).copied()
    }

    /// True when the phrase is a known relation of any class.
    pub fn contains(&self, phrase: &str) -> bool {
        self.entries.contains_key(&normalize_phrase(phrase))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A level call for one triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelCall {
    pub level: ChainLevel,
    /// Set when the relation was not in the lexicon and the call fell back
    /// to the finding level.
    pub low_confidence: bool,
}

/// Assigns a chain level to a triplet by its relation phrase.
///
/// Unknown relations fall back to the finding level with the
/// low-confidence flag set, so downstream aggregation can surface them
/// without dropping the fact.
pub fn classify_level(triplet: &Triplet, lexicon: &RelationLexicon) -> LevelCall {
    match lexicon.lookup(&triplet.relation) {
        Some(level) => LevelCall {
            level,
            low_confidence: false,
        },
        None => LevelCall {
            level: ChainLevel::Fc,
            low_confidence: true,
        },
    }
}

/// Groups triplets into per-level chains, preserving input order within
/// each level. Returns the chains and the count of low-confidence calls.
pub fn chains_from_triplets(
    triplets: Vec<Triplet>,
    lexicon: &RelationLexicon,
) -> (BTreeMap<ChainLevel, ReasoningChain>, usize) {
    let mut chains: BTreeMap<ChainLevel, ReasoningChain> = BTreeMap::new();
    let mut low_confidence = 0usize;
    for triplet in triplets {
        let call = classify_level(&triplet, lexicon);
        if call.low_confidence {
            low_confidence += 1;
        }
        chains
            .entry(call.level)
            .or_insert_with(|| ReasoningChain::new(call.level, Vec::new()))
            .triplets
            .push(triplet);
    }
    (chains, low_confidence)
}

/// Errors from validating question records.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum VqaError {
    #[error("record {id}: field {field} is empty")]
    EmptyField { id: String, field: &'static str },
    #[error("record {id}: multiple-choice question needs at least two distinct options")]
    TooFewOptions { id: String },
    #[error("record {id}: duplicate option {option:?}")]
    DuplicateOption { id: String, option: String },
    #[error("record {id}: ground-truth answer is not among the options")]
    AnswerNotInOptions { id: String },
    #[error("record {id}: open-ended question must not carry options")]
    StrayOptions { id: String },
    #[error("duplicate record id {id}")]
    DuplicateId { id: String },
}

/// One question in the evaluation corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub id: String,
    pub patient_id: String,
    pub organ: Organ,
    pub task: TaskKind,
    /// Fine-grained question column, e.g. `shape` or `tumor_stage`.
    pub subtask: String,
    pub format: AnswerFormat,
    pub question: String,
    pub answer_gt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    /// Ground-truth reasoning chain, carried by report-style questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot_gt: Option<CoTRecord>,
    /// Reviewer flag: whether the record passed manual screening.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usable: Option<bool>,
    /// Reviewer quality note.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<String>,
}

impl VqaRecord {
    /// Checks per-record invariants: non-empty core fields, and option-list
    /// rules per answer format.
    pub fn validate(&self) -> Result<(), VqaError> {
        let id = || self.id.clone();
        for (field, value) in [
            ("id", &self.id),
            ("patient_id", &self.patient_id),
            ("subtask", &self.subtask),
            ("question", &self.question),
            ("answer_gt", &self.answer_gt),
        ] {
            if value.trim().is_empty() {
                return Err(VqaError::EmptyField { id: id(), field });
            }
        }
        match self.format {
            AnswerFormat::MultipleChoice => {
                let mut seen = BTreeMap::new();
                for option in &self.options {
                    if let Some(()) = seen.insert(option.trim().to_owned(), ()) {
                        return Err(VqaError::DuplicateOption {
                            id: id(),
                            option: option.clone(),
                        });
                    }
                }
                if seen.len() < 2 {
                    return Err(VqaError::TooFewOptions { id: id() });
                }
                if !self
                    .options
                    .iter()
                    .any(|o| o.trim() == self.answer_gt.trim())
                {
                    return Err(VqaError::AnswerNotInOptions { id: id() });
                }
            }
            AnswerFormat::OpenEnded => {
                if !self.options.is_empty() {
                    return Err(VqaError::StrayOptions { id: id() });
                }
            }
        }
        Ok(())
    }
}

/// Validates every record and the cross-record unique-id invariant.
pub fn validate_corpus(records: &[VqaRecord]) -> Result<(), VqaError> {
    let mut ids = BTreeMap::new();
    for record in records {
        record.validate()?;
        if ids.insert(record.id.clone(), ()).is_some() {
            return Err(VqaError::DuplicateId {
                id: record.id.clone(),
            });
        }
    }
    Ok(())
}
