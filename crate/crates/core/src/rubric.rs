//! The ten-dimension grading rubric and chain-score arithmetic.
//!
//! A graded answer gets three chain scores on a 0–100 scale: the mean of
//! the finding dimensions, of the impression dimensions, and of the
//! reasoning dimensions, each times ten. A corpus rolls up into a single
//! quality number as a weighted sum of per-level means. The judge returns
//! its dimension scores as a JSON scorecard embedded in free text;
//! [`parse_scorecard`] recovers it tolerantly and with typed errors.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainLevel, CoTRecord};
use crate::triples::format_triple_list;

/// One score band of a rubric dimension: an inclusive score range and the
/// criterion a judge must apply to award it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub min: u8,
    pub max: u8,
    pub criterion: &'static str,
}

/// A graded dimension: stable identifier, human title, what it measures,
/// and six bands partitioning 0..=10.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimensionSpec {
    pub id: &'static str,
    pub title: &'static str,
    pub description: &'static str,
    pub bands: [Band; 6],
}

/// The rubric for one chain level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rubric {
    pub level: ChainLevel,
    /// Key of this level's section inside the scorecard JSON.
    pub section_key: &'static str,
    pub dimensions: &'static [DimensionSpec],
}

/// The six score bands shared by every dimension.
pub const SCORE_BANDS: [(u8, u8); 6] = [(10, 10), (8, 9), (6, 7), (4, 5), (1, 3), (0, 0)];

macro_rules! bands {
    ($b10:expr, $b89:expr, $b67:expr, $b45:expr, $b13:expr, $b0:expr) => {
        [
            Band { min: 10, max: 10, criterion: $b10 },
            Band { min: 8, max: 9, criterion: $b89 },
            Band { min: 6, max: 7, criterion: $b67 },
            Band { min: 4, max: 5, criterion: $b45 },
            Band { min: 1, max: 3, criterion: $b13 },
            Band { min: 0, max: 0, criterion: $b0 },
        ]
    };
}

static FINDING_DIMS: [DimensionSpec; 3] = [
    DimensionSpec {
        id: "existence_match",
        title: "Existence Match",
        description: "Degree to which predicted facts match the ground-truth facts.",
        bands: bands!(
            "Prediction contains all key ground-truth facts with no omission or redundancy.",
            "Prediction covers the vast majority of ground-truth facts, with only minor omissions or redundancies (<10%).",
            "Prediction covers some ground-truth facts but exhibits moderate omissions or redundancies (10-30%).",
            "Prediction covers only a small portion of ground-truth facts; substantial omissions or redundancies (30-50%).",
            "Low match rate; only a few facts are correct and the error rate is very high.",
            "Prediction includes none of the ground-truth facts."
        ),
    },
    DimensionSpec {
        id: "completeness",
        title: "Completeness",
        description: "Extent to which key facts are fully expressed without missing or spurious content.",
        bands: bands!(
            "Prediction covers 100% of ground-truth facts with no omissions.",
            "Only minor omissions (<10%), high coverage.",
            "Noticeable omissions (10-30%), coverage is moderately compromised.",
            "Majority of key facts are missing (30-50%), poor coverage.",
            "Extensive omissions (>50%), very low coverage.",
            "Prediction fails to cover any key facts."
        ),
    },
    DimensionSpec {
        id: "accuracy",
        title: "Accuracy",
        description: "Correctness of factual statements in the prediction.",
        bands: bands!(
            "All predicted entries are accurate with no invalid or incorrect statements.",
            "Vast majority accurate (<10% problematic), only minor issues.",
            "Moderate errors or invalid entries (10-30%) that negatively affect overall quality.",
            "Numerous erroneous entries (>30%), only a small fraction correct.",
            "Very few accurate entries (>50% error rate).",
            "All predictions are invalid; no correct entries."
        ),
    },
];

static IMPRESSION_DIMS: [DimensionSpec; 3] = [
    DimensionSpec {
        id: "clarity",
        title: "Clarity",
        description: "Medical clarity of the impression statements.",
        bands: bands!(
            "Impression is completely clear, logically coherent, and unambiguous.",
            "Description is clear with only minor incomplete expressions or slight ambiguity (<10%).",
            "Basically clear but contains some ambiguities that moderately hinder understanding.",
            "Blurry description with numerous ambiguities significantly affecting medical interpretation.",
            "Very difficult to understand; almost unusable due to severe ambiguity.",
            "Impression chain is empty or entirely invalid and unclear."
        ),
    },
    DimensionSpec {
        id: "consistency",
        title: "Consistency",
        description: "Logical consistency of the impressions with the underlying finding chain.",
        bands: bands!(
            "Fully consistent with the factual chain; all impressions are derived from facts with no unreasonable content.",
            "Overall consistent with only minor (<10%) deviations from the factual chain.",
            "Partially inconsistent with the factual chain, showing moderate deviation (10-30%).",
            "Large proportion of content inconsistent with or weakly related to the factual chain (30-50%).",
            "Impression content is mostly illogical and unrelated to the factual chain.",
            "Impression is entirely invalid or completely contradicts the factual chain."
        ),
    },
    DimensionSpec {
        id: "medical_utility",
        title: "Medical Utility",
        description: "Clinical usefulness of the impressions for diagnosis and decision-making.",
        bands: bands!(
            "Impression chain is highly useful, directly supporting diagnosis and clinical decision-making with no additional input needed.",
            "High clinical utility; most content is medically meaningful with only minor adjustments required.",
            "Partial diagnostic value but considerable portions lack utility or have vague meaning (10-30%).",
            "Very limited clinical utility (>50% of content lacks diagnostic value).",
            "Impression provides almost no diagnostic significance or is largely incorrect.",
            "Impression chain is invalid or contains no medically meaningful statements."
        ),
    },
];

static REASONING_DIMS: [DimensionSpec; 4] = [
    DimensionSpec {
        id: "logical_completeness",
        title: "Logical Completeness",
        description: "Logical closure and completeness of the higher-order reasoning.",
        bands: bands!(
            "The reasoning chain perfectly covers all key points, with no logical gaps or omissions.",
            "Reasoning is largely complete, with only minor (<10%) logical gaps or omitted details.",
            "Some logical interruptions or omissions exist, but most reasoning paths remain valid (10-30%).",
            "Significant logical gaps, missing many key points, and notable interruptions in reasoning (30-50%).",
            "Most of the reasoning chain is invalid; significant logical flaws, key derivations incomplete.",
            "No reasoning process, or the reasoning chain completely fails."
        ),
    },
    DimensionSpec {
        id: "reasoning_depth",
        title: "Reasoning Depth",
        description: "Whether the reasoning depth reflects cross-entity and hierarchical associations.",
        bands: bands!(
            "Reasoning demonstrates highly complex hierarchical relationships and deep cross-entity connections.",
            "Reasoning shows moderate depth; most steps are reasonable with minor (<10%) missing complexity.",
            "Reasoning depth is insufficient; logical chains are relatively shallow, capturing only surface-level inference (10-30% missing depth).",
            "Reasoning lacks depth, limited to single-layer derivations or simple restatements of facts.",
            "Reasoning is very superficial; most content is invalid or lacks analytical depth.",
            "Reasoning chain has no depth; no higher-order inference."
        ),
    },
    DimensionSpec {
        id: "clinical_relevance",
        title: "Clinical Relevance",
        description: "Whether the reasoning contributes to diagnosis and aligns with the medical context.",
        bands: bands!(
            "Reasoning fully aligns with the medical context and is highly relevant and practical.",
            "Most reasoning is medically meaningful; only minor content is irrelevant (<10%).",
            "Some reasoning entries are meaningful, but overall relevance is limited (10-30% invalid content).",
            "Majority of content lacks medical significance; only a few entries provide support (>30% clinically irrelevant).",
            "Reasoning is almost clinically useless; content deviates from the medical background.",
            "Reasoning chain is entirely meaningless or invalid."
        ),
    },
    DimensionSpec {
        id: "evidence_integration",
        title: "Evidence Integration",
        description: "Whether multiple findings and cues are integrated reasonably.",
        bands: bands!(
            "Reasoning seamlessly integrates all evidence from the finding and impression chains, supporting its conclusions.",
            "Most evidence is integrated, with minor (<10%) gaps or weak connections.",
            "Partial integration; some information is not adopted or is weakly related (10-30%).",
            "Integration is poor; reasoning is limited to single evidence items (>30% weak integration).",
            "Integration is largely insufficient; evidence shows no clear relation.",
            "Reasoning is completely detached from the evidence; no integration or logical coherence."
        ),
    },
];

static FINDING_RUBRIC: Rubric = Rubric {
    level: ChainLevel::Fc,
    section_key: "s1_finding",
    dimensions: &FINDING_DIMS,
};
static IMPRESSION_RUBRIC: Rubric = Rubric {
    level: ChainLevel::Ic,
    section_key: "s2_impression",
    dimensions: &IMPRESSION_DIMS,
};
static REASONING_RUBRIC: Rubric = Rubric {
    level: ChainLevel::Lrc,
    section_key: "s3_reasoning",
    dimensions: &REASONING_DIMS,
};

/// The built-in rubric for a chain level.
pub fn rubric_for(level: ChainLevel) -> &'static Rubric {
    match level {
        ChainLevel::Fc => &FINDING_RUBRIC,
        ChainLevel::Ic => &IMPRESSION_RUBRIC,
        ChainLevel::Lrc => &REASONING_RUBRIC,
    }
}

/// Errors from scoring and scorecard handling.
#[derive(Clone, Debug, PartialEq, Error)]
pub enum RubricError {
    #[error("no JSON object found in judge output")]
    NoJsonFound,
    #[error("scorecard schema error: {detail}")]
    SchemaError { detail: String },
    #[error("dimension {dimension} score {value} outside 0..=10")]
    RangeError { dimension: String, value: i64 },
    #[error("dimension {dimension} has unparseable score {raw:?}")]
    FormatError { dimension: String, raw: String },
    #[error("dimension list does not match one rubric level: {detail}")]
    IncompleteDims { detail: String },
    #[error("invalid weights: {detail}")]
    BadWeights { detail: String },
    #[error("cannot aggregate an empty corpus")]
    EmptyCorpus,
    #[error("ground-truth record has no chains to grade against")]
    EmptyGroundTruth,
}

/// A judged score for one rubric dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimScore {
    pub dimension: String,
    pub value: u8,
}

impl DimScore {
    pub fn new(dimension: &str, value: u8) -> Result<DimScore, RubricError> {
        if value > 10 {
            return Err(RubricError::RangeError {
                dimension: dimension.to_owned(),
                value: value as i64,
            });
        }
        Ok(DimScore {
            dimension: dimension.to_owned(),
            value,
        })
    }
}

/// Rounds to two decimals using the shortest-decimal formatter, which
/// applies round-half-even to the exact binary value. Deterministic across
/// platforms; used for every human-facing score.
pub fn round2(x: f64) -> f64 {
    format!("{x:.2}").parse().expect("formatted float reparses")
}

/// Mean of the dimension scores times ten, as a 0–100 chain score,
/// rounded to two decimals.
///
/// The dimension list must be exactly the dimensions of one rubric level
/// (any order, no duplicates); anything else is rejected rather than
/// silently averaged.
pub fn chain_score(dims: &[DimScore]) -> Result<f64, RubricError> {
    let mut seen = BTreeSet::new();
    for d in dims {
        if d.value > 10 {
            return Err(RubricError::RangeError {
                dimension: d.dimension.clone(),
                value: d.value as i64,
            });
        }
        if !seen.insert(d.dimension.as_str()) {
            return Err(RubricError::IncompleteDims {
                detail: format!("duplicate dimension {}", d.dimension),
            });
        }
    }
    let matched = ChainLevel::ALL.into_iter().find(|&level| {
        let rubric = rubric_for(level);
        rubric.dimensions.len() == seen.len()
            && rubric.dimensions.iter().all(|spec| seen.contains(spec.id))
    });
    if matched.is_none() {
        return Err(RubricError::IncompleteDims {
            detail: format!("got dimensions {:?}", seen),
        });
    }
    let sum: u32 = dims.iter().map(|d| d.value as u32).sum();
    Ok(round2(sum as f64 * 10.0 / dims.len() as f64))
}

/// Weights for combining the three per-level corpus means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w_fc: f64,
    pub w_ic: f64,
    pub w_lrc: f64,
}

impl Weights {
    /// Validates that all weights are finite and non-negative and sum to
    /// one within 1e-9.
    pub fn new(w_fc: f64, w_ic: f64, w_lrc: f64) -> Result<Weights, RubricError> {
        for (name, w) in [("w_fc", w_fc), ("w_ic", w_ic), ("w_lrc", w_lrc)] {
            if !w.is_finite() || w < 0.0 {
                return Err(RubricError::BadWeights {
                    detail: format!("{name} = {w} must be finite and non-negative"),
                });
            }
        }
        let drift = w_fc + w_ic + w_lrc - 1.0;
        if !(-1e-9..=1e-9).contains(&drift) {
            return Err(RubricError::BadWeights {
                detail: format!("weights sum to {}", w_fc + w_ic + w_lrc),
            });
        }
        Ok(Weights { w_fc, w_ic, w_lrc })
    }

    /// Checks deserialized weights against the constructor invariants.
    pub fn validate(&self) -> Result<(), RubricError> {
        Weights::new(self.w_fc, self.w_ic, self.w_lrc).map(|_| ())
    }
}

impl Default for Weights {
    /// Reasoning counts slightly more than findings or impressions.
    fn default() -> Weights {
        Weights {
            w_fc: 0.3,
            w_ic: 0.3,
            w_lrc: 0.4,
        }
    }
}

/// A parsed judge scorecard: dimension scores per level in canonical
/// rubric order, plus the judge's own holistic 0–100 number, kept for
/// audit only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scorecard {
    pub fc: Vec<DimScore>,
    pub ic: Vec<DimScore>,
    pub lrc: Vec<DimScore>,
    pub judge_overall_raw: Option<u32>,
}

impl Scorecard {
    /// Builds a scorecard, verifying each level is complete and ordering
    /// dimensions canonically.
    pub fn new(
        fc: Vec<DimScore>,
        ic: Vec<DimScore>,
        lrc: Vec<DimScore>,
        judge_overall_raw: Option<u32>,
    ) -> Result<Scorecard, RubricError> {
        fn canonical(level: ChainLevel, dims: Vec<DimScore>) -> Result<Vec<DimScore>, RubricError> {
            let rubric = rubric_for(level);
            let mut by_id: BTreeMap<String, DimScore> = BTreeMap::new();
            for d in dims {
                if d.value > 10 {
                    return Err(RubricError::RangeError {
                        dimension: d.dimension.clone(),
                        value: d.value as i64,
                    });
                }
                let key = d.dimension.clone();
                if by_id.insert(key, d).is_some() {
                    return Err(RubricError::IncompleteDims {
                        detail: "duplicate dimension in section".to_owned(),
                    });
                }
            }
            let mut out = Vec::with_capacity(rubric.dimensions.len());
            for spec in rubric.dimensions {
                match by_id.remove(spec.id) {
                    Some(d) => out.push(d),
                    None => {
                        return Err(RubricError::IncompleteDims {
                            detail: format!("{} missing {}", rubric.section_key, spec.id),
                        })
                    }
                }
            }
            if let Some((extra, _)) = by_id.into_iter().next() {
                return Err(RubricError::IncompleteDims {
                    detail: format!("unknown dimension {extra} in {}", rubric.section_key),
                });
            }
            Ok(out)
        }
        if let Some(overall) = judge_overall_raw {
            if overall > 100 {
                return Err(RubricError::RangeError {
                    dimension: "overall_score".to_owned(),
                    value: overall as i64,
                });
            }
        }
        Ok(Scorecard {
            fc: canonical(ChainLevel::Fc, fc)?,
            ic: canonical(ChainLevel::Ic, ic)?,
            lrc: canonical(ChainLevel::Lrc, lrc)?,
            judge_overall_raw,
        })
    }

    /// The three 0–100 chain scores.
    pub fn chain_scores(&self) -> Result<(f64, f64, f64), RubricError> {
        Ok((
            chain_score(&self.fc)?,
            chain_score(&self.ic)?,
            chain_score(&self.lrc)?,
        ))
    }
}

/// One scored sample as persisted to scorecard files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorecardRecord {
    pub sample_id: String,
    pub model: String,
    pub task: String,
    pub organ: String,
    pub s_fc: f64,
    pub s_ic: f64,
    pub s_lrc: f64,
    pub dims: DimsBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_overall_raw: Option<u32>,
}

/// Dimension scores grouped by scorecard section.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimsBlock {
    pub s1_finding: BTreeMap<String, u8>,
    pub s2_impression: BTreeMap<String, u8>,
    pub s3_reasoning: BTreeMap<String, u8>,
}

impl From<&Scorecard> for DimsBlock {
    fn from(card: &Scorecard) -> DimsBlock {
        let to_map = |dims: &[DimScore]| {
            dims.iter()
                .map(|d| (d.dimension.clone(), d.value))
                .collect::<BTreeMap<_, _>>()
        };
        DimsBlock {
            s1_finding: to_map(&card.fc),
            s2_impression: to_map(&card.ic),
            s3_reasoning: to_map(&card.lrc),
        }
    }
}

impl ScorecardRecord {
    pub fn from_scorecard(
        sample_id: &str,
        model: &str,
        task: &str,
        organ: &str,
        card: &Scorecard,
    ) -> Result<ScorecardRecord, RubricError> {
        let (s_fc, s_ic, s_lrc) = card.chain_scores()?;
        Ok(ScorecardRecord {
            sample_id: sample_id.to_owned(),
            model: model.to_owned(),
            task: task.to_owned(),
            organ: organ.to_owned(),
            s_fc,
            s_ic,
            s_lrc,
            dims: DimsBlock::from(card),
            judge_overall_raw: card.judge_overall_raw,
        })
    }
}

/// Weighted corpus quality from per-level means supplied directly.
pub fn cot_e_from_means(mean_fc: f64, mean_ic: f64, mean_lrc: f64, weights: &Weights) -> f64 {
    weights.w_fc * mean_fc + weights.w_ic * mean_ic + weights.w_lrc * mean_lrc
}

/// Weighted corpus quality over scored samples: per-level means are taken
/// across the corpus first, then combined. Full precision; round for
/// display with [`round2`].
pub fn cot_e(records: &[ScorecardRecord], weights: &Weights) -> Result<f64, RubricError> {
    if records.is_empty() {
        return Err(RubricError::EmptyCorpus);
    }
    weights.validate()?;
    let n = records.len() as f64;
    let mean_fc = records.iter().map(|r| r.s_fc).sum::<f64>() / n;
    let mean_ic = records.iter().map(|r| r.s_ic).sum::<f64>() / n;
    let mean_lrc = records.iter().map(|r| r.s_lrc).sum::<f64>() / n;
    Ok(cot_e_from_means(mean_fc, mean_ic, mean_lrc, weights))
}

/// Every parseable JSON object embedded in free text, in order of its
/// opening brace. Lets judge-output parsers skip fences and prose and try
/// each candidate object against their schema.
pub fn embedded_json_objects(text: &str) -> impl Iterator<Item = serde_json::Value> + '_ {
    text.char_indices()
        .filter(|&(_, c)| c == '{')
        .filter_map(move |(start, _)| {
            let mut depth = 0u32;
            let mut in_str = false;
            let mut escape = false;
            for (i, b) in text.as_bytes().iter().enumerate().skip(start) {
                if in_str {
                    if escape {
                        escape = false;
                    } else if *b == b'\\' {
                        escape = true;
                    } else if *b == b'"' {
                        in_str = false;
                    }
                } else {
                    match b {
                        b'"' => in_str = true,
                        b'{' => depth += 1,
                        b'}' => {
                            depth -= 1;
                            if depth == 0 {
                                return serde_json::from_str(&text[start..=i]).ok();
                            }
                        }
                        _ => {}
                    }
                }
            }
            None
        })
}

fn dim_value(section: &str, id: &str, value: &serde_json::Value) -> Result<u8, RubricError> {
    let dimension = format!("{section}.{id}");
    let parsed: i64 = match value {
        serde_json::Value::Number(n) => n.as_i64().ok_or_else(|| RubricError::FormatError {
            dimension: dimension.clone(),
            raw: n.to_string(),
        })?,
        serde_json::Value::String(s) => {
            let numerator = match s.split_once('/') {
                Some((num, den)) => {
                    if den.trim() != "10" {
                        return Err(RubricError::FormatError {
                            dimension,
                            raw: s.clone(),
                        });
                    }
                    num
                }
                None => s.as_str(),
            };
            numerator
                .trim()
                .parse()
                .map_err(|_| RubricError::FormatError {
                    dimension: dimension.clone(),
                    raw: s.clone(),
                })?
        }
        other => {
            return Err(RubricError::FormatError {
                dimension,
                raw: other.to_string(),
            })
        }
    };
    if !(0..=10).contains(&parsed) {
        return Err(RubricError::RangeError {
            dimension,
            value: parsed,
        });
    }
    Ok(parsed as u8)
}

/// Parses a judge scorecard out of raw model output.
///
/// Tolerated: markdown fences, prose before and after the JSON, a missing
/// `scoring` wrapper, integer scores instead of `"n/10"` strings, and a
/// missing `overall_score`. Rejected with typed errors: no JSON object at
/// all, missing or unknown sections and dimensions, scores outside 0..=10,
/// and unparseable score syntax.
pub fn parse_scorecard(judge_text: &str) -> Result<Scorecard, RubricError> {
    let mut found_object = false;
    let mut first_schema_err = None;
    for value in embedded_json_objects(judge_text) {
        found_object = true;
        match scorecard_from_value(&value) {
            Ok(card) => return Ok(card),
            Err(e) => {
                if first_schema_err.is_none() {
                    first_schema_err = Some(e);
                }
            }
        }
    }
    match first_schema_err {
        Some(e) => Err(e),
        None if found_object => Err(RubricError::SchemaError {
            detail: "JSON object lacks scoring sections".to_owned(),
        }),
        None => Err(RubricError::NoJsonFound),
    }
}

fn scorecard_from_value(value: &serde_json::Value) -> Result<Scorecard, RubricError> {
    let root = value.as_object().ok_or_else(|| RubricError::SchemaError {
        detail: "top-level JSON is not an object".to_owned(),
    })?;
    let scoring = match root.get("scoring") {
        Some(serde_json::Value::Object(inner)) => inner,
        Some(other) => {
            return Err(RubricError::SchemaError {
                detail: format!("scoring is {}, not an object", type_name(other)),
            })
        }
        // Tolerate judges that omit the wrapper and emit sections at top level.
        None => root,
    };
    let mut per_level: BTreeMap<ChainLevel, Vec<DimScore>> = BTreeMap::new();
    for level in ChainLevel::ALL {
        let rubric = rubric_for(level);
        let section = scoring
            .get(rubric.section_key)
            .ok_or_else(|| RubricError::SchemaError {
                detail: format!("missing section {}", rubric.section_key),
            })?
            .as_object()
            .ok_or_else(|| RubricError::SchemaError {
                detail: format!("section {} is not an object", rubric.section_key),
            })?;
        let mut dims = Vec::new();
        for spec in rubric.dimensions {
            let raw = section.get(spec.id).ok_or_else(|| RubricError::SchemaError {
                detail: format!("section {} missing {}", rubric.section_key, spec.id),
            })?;
            dims.push(DimScore {
                dimension: spec.id.to_owned(),
                value: dim_value(rubric.section_key, spec.id, raw)?,
            });
        }
        for key in section.keys() {
            if !rubric.dimensions.iter().any(|spec| spec.id == key) {
                return Err(RubricError::SchemaError {
                    detail: format!("unknown dimension {key} in {}", rubric.section_key),
                });
            }
        }
        per_level.insert(level, dims);
    }
    let judge_overall_raw = match scoring.get("overall_score") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::Number(n)) => Some(n.as_i64().and_then(|v| u32::try_from(v).ok()).ok_or_else(
            || RubricError::FormatError {
                dimension: "overall_score".to_owned(),
                raw: n.to_string(),
            },
        )?),
        Some(serde_json::Value::String(s)) => {
            let numerator = match s.split_once('/') {
                Some((num, den)) if den.trim() == "100" => num,
                Some(_) => {
                    return Err(RubricError::FormatError {
                        dimension: "overall_score".to_owned(),
                        raw: s.clone(),
                    })
                }
                None => s.as_str(),
            };
            Some(numerator.trim().parse().map_err(|_| RubricError::FormatError {
                dimension: "overall_score".to_owned(),
                raw: s.clone(),
            })?)
        }
        Some(other) => {
            return Err(RubricError::FormatError {
                dimension: "overall_score".to_owned(),
                raw: other.to_string(),
            })
        }
    };
    Scorecard::new(
        per_level.remove(&ChainLevel::Fc).unwrap_or_default(),
        per_level.remove(&ChainLevel::Ic).unwrap_or_default(),
        per_level.remove(&ChainLevel::Lrc).unwrap_or_default(),
        judge_overall_raw,
    )
}

fn type_name(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "a bool",
        serde_json::Value::Number(_) => "a number",
        serde_json::Value::String(_) => "a string",
        serde_json::Value::Array(_) => "an array",
        serde_json::Value::Object(_) => "an object",
    }
}

/// Renders a scorecard in the canonical judge JSON shape, with `"n/10"`
/// score strings. Inverse of [`parse_scorecard`] for valid cards.
pub fn render_scorecard(card: &Scorecard) -> String {
    let section = |dims: &[DimScore]| {
        let mut map = serde_json::Map::new();
        for d in dims {
            map.insert(
                d.dimension.clone(),
                serde_json::Value::String(format!("{}/10", d.value)),
            );
        }
        serde_json::Value::Object(map)
    };
    let mut scoring = serde_json::Map::new();
    scoring.insert("s1_finding".to_owned(), section(&card.fc));
    scoring.insert("s2_impression".to_owned(), section(&card.ic));
    scoring.insert("s3_reasoning".to_owned(), section(&card.lrc));
    if let Some(overall) = card.judge_overall_raw {
        scoring.insert(
            "overall_score".to_owned(),
            serde_json::Value::String(format!("{overall}/100")),
        );
    }
    let mut root = serde_json::Map::new();
    root.insert("scoring".to_owned(), serde_json::Value::Object(scoring));
    serde_json::Value::Object(root).to_string()
}

fn render_chain_block(record: &CoTRecord) -> String {
    let mut out = String::new();
    for level in ChainLevel::ALL {
        let label = match level {
            ChainLevel::Fc => "FINDING",
            ChainLevel::Ic => "IMPRESSION",
            ChainLevel::Lrc => "REASONING",
        };
        out.push_str(label);
        out.push_str(":\n");
        match record.chains.get(&level) {
            Some(chain) if !chain.triplets.is_empty() => {
                let listing = format_triple_list(&chain.triplets)
                    .unwrap_or_else(|_| "(unserializable chain)\n".to_owned());
                out.push_str(&listing);
            }
            _ => out.push_str("(none)\n"),
        }
    }
    out
}

/// Builds the grading request for one sample: full rubric text, the
/// ground-truth and predicted chains as triple lists, and the exact JSON
/// output contract.
pub fn build_scoring_prompt(gt: &CoTRecord, pred: &CoTRecord) -> Result<String, RubricError> {
    if gt.chains.values().all(|c| c.triplets.is_empty()) {
        return Err(RubricError::EmptyGroundTruth);
    }
    let mut prompt = String::from(
        "You are a senior radiologist grading a model-written reasoning chain against \
the ground truth for the same CT study. Score every dimension below with an \
integer from 0 to 10, strictly following the band criteria.\n\n",
    );
    for level in ChainLevel::ALL {
        let rubric = rubric_for(level);
        prompt.push_str(&format!("Section {}:\n", rubric.section_key));
        for spec in rubric.dimensions {
            prompt.push_str(&format!("- {} ({}): {}\n", spec.id, spec.title, spec.description));
            for band in &spec.bands {
                if band.min == band.max {
                    prompt.push_str(&format!("    {}: {}\n", band.min, band.criterion));
                } else {
                    prompt.push_str(&format!("    {}-{}: {}\n", band.min, band.max, band.criterion));
                }
            }
        }
        prompt.push('\n');
    }
    prompt.push_str("Ground-truth chains:\n");
    prompt.push_str(&render_chain_block(gt));
    prompt.push_str("\nPredicted chains:\n");
    prompt.push_str(&render_chain_block(pred));
    prompt.push_str(
        "\nRespond with exactly one JSON object and nothing else, in this shape:\n\
{\"scoring\": {\"s1_finding\": {\"existence_match\": \"8/10\", \"completeness\": \"7/10\", \
\"accuracy\": \"9/10\"}, \"s2_impression\": {\"clarity\": \"8/10\", \"consistency\": \"8/10\", \
\"medical_utility\": \"7/10\"}, \"s3_reasoning\": {\"logical_completeness\": \"8/10\", \
\"reasoning_depth\": \"7/10\", \"clinical_relevance\": \"8/10\", \"evidence_integration\": \
\"7/10\"}, \"overall_score\": \"77/100\"}}\n",
    );
    Ok(prompt)
}

/// Fields a score report can group by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupField {
    Model,
    Task,
    Organ,
}

impl GroupField {
    pub fn parse(name: &str) -> Option<GroupField> {
        match name.trim().to_ascii_lowercase().as_str() {
            "model" => Some(GroupField::Model),
            "task" => Some(GroupField::Task),
            "organ" => Some(GroupField::Organ),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupField::Model => "model",
            GroupField::Task => "task",
            GroupField::Organ => "organ",
        }
    }

    fn key_of<'a>(self, record: &'a ScorecardRecord) -> &'a str {
        match self {
            GroupField::Model => &record.model,
            GroupField::Task => &record.task,
            GroupField::Organ => &record.organ,
        }
    }
}

/// One aggregated row: group key, sample count, per-level means, and the
/// weighted composite, all display-rounded to two decimals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub key: Vec<String>,
    pub n: usize,
    pub s_fc: f64,
    pub s_ic: f64,
    pub s_lrc: f64,
    pub cot_e: f64,
}

/// A grouped score report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportTable {
    pub group_fields: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Data-quality observations, e.g. expected groups with no records.
    pub notes: Vec<String>,
}

/// Aggregates scored samples into per-group means and composites.
///
/// With an empty `group_by` the whole corpus forms one row with an empty
/// key. Rows sort by key. The composite is computed from full-precision
/// means, then rounded.
pub fn aggregate_scores(
    records: &[ScorecardRecord],
    group_by: &[GroupField],
    weights: &Weights,
) -> Result<ReportTable, RubricError> {
    if records.is_empty() {
        return Err(RubricError::EmptyCorpus);
    }
    weights.validate()?;
    let mut groups: BTreeMap<Vec<String>, Vec<&ScorecardRecord>> = BTreeMap::new();
    for record in records {
        let key: Vec<String> = group_by
            .iter()
            .map(|f| f.key_of(record).to_owned())
            .collect();
        groups.entry(key).or_default().push(record);
    }
    let rows = groups
        .into_iter()
        .map(|(key, members)| {
            let n = members.len();
            let mean = |pick: fn(&ScorecardRecord) -> f64| {
                members.iter().map(|r| pick(r)).sum::<f64>() / n as f64
            };
            let (mfc, mic, mlrc) = (mean(|r| r.s_fc), mean(|r| r.s_ic), mean(|r| r.s_lrc));
            ReportRow {
                key,
                n,
                s_fc: round2(mfc),
                s_ic: round2(mic),
                s_lrc: round2(mlrc),
                cot_e: round2(cot_e_from_means(mfc, mic, mlrc, weights)),
            }
        })
        .collect();
    Ok(ReportTable {
        group_fields: group_by.iter().map(|f| f.name().to_owned()).collect(),
        rows,
        notes: Vec::new(),
    })
}

impl ReportTable {
    /// Records a note for each expected group key that produced no row,
    /// instead of inventing zero-score rows.
    pub fn note_missing_groups(&mut self, expected: &[Vec<String>]) {
        for want in expected {
            if !self.rows.iter().any(|row| &row.key == want) {
                self.notes.push(format!("no records for group {}", want.join("/")));
            }
        }
    }

    /// CSV with a header; key fields first, then n and the four scores.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<String> = self.group_fields.clone();
        header.extend(["n", "s_fc", "s_ic", "s_lrc", "cot_e"].map(String::from));
        push_csv_row(&mut out, &header);
        for row in &self.rows {
            let mut fields = row.key.clone();
            fields.push(row.n.to_string());
            for v in [row.s_fc, row.s_ic, row.s_lrc, row.cot_e] {
                fields.push(format!("{v:.2}"));
            }
            push_csv_row(&mut out, &fields);
        }
        out
    }

    /// Fixed-width text table for terminals.
    pub fn render_text(&self) -> String {
        let mut header: Vec<String> = self.group_fields.clone();
        if header.is_empty() {
            header.push("corpus".to_owned());
        }
        header.extend(["n", "s_fc", "s_ic", "s_lrc", "cot_e"].map(String::from));
        let mut body: Vec<Vec<String>> = Vec::new();
        for row in &self.rows {
            let mut fields = row.key.clone();
            if fields.is_empty() {
                fields.push("all".to_owned());
            }
            fields.push(row.n.to_string());
            for v in [row.s_fc, row.s_ic, row.s_lrc, row.cot_e] {
                fields.push(format!("{v:.2}"));
            }
            body.push(fields);
        }
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &body {
            for (i, cell) in row.iter().enumerate() {
                if cell.len() > widths[i] {
                    widths[i] = cell.len();
                }
            }
        }
        let render_row = |cells: &[String]| {
            let mut line = String::new();
            for (i, cell) in cells.iter().enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                line.push_str(cell);
                for _ in cell.len()..widths[i] {
                    line.push(' ');
                }
            }
            line.trim_end().to_owned()
        };
        let mut out = render_row(&header);
        out.push('\n');
        for row in &body {
            out.push_str(&render_row(row));
            out.push('\n');
        }
        for note in &self.notes {
            out.push_str("note: ");
            out.push_str(note);
            out.push('\n');
        }
        out
    }
}

/// Minimal CSV quoting: fields with commas, quotes, or newlines get
/// wrapped and inner quotes doubled.
pub(crate) fn push_csv_row(out: &mut String, fields: &[String]) {
    for (i, field) in fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        if field.contains([',', '"', '\n']) {
            out.push('"');
            for ch in field.chars() {
                if ch == '"' {
                    out.push('"');
                }
                out.push(ch);
            }
            out.push('"');
        } else {
            out.push_str(field);
        }
    }
    out.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{chains_from_triplets, segment_cot, RelationLexicon, Triplet, DEFAULT_SUMMARY_MARKERS};
    use alloc::vec;
    use proptest::prelude::*;

    fn dims(pairs: &[(&str, u8)]) -> Vec<DimScore> {
        pairs
            .iter()
            .map(|(d, v)| DimScore::new(d, *v).unwrap())
            .collect()
    }

    #[test]
    fn rubrics_have_expected_shape_and_band_partition() {
        assert_eq!(rubric_for(ChainLevel::Fc).dimensions.len(), 3);
        assert_eq!(rubric_for(ChainLevel::Ic).dimensions.len(), 3);
        assert_eq!(rubric_for(ChainLevel::Lrc).dimensions.len(), 4);
        for level in ChainLevel::ALL {
            for spec in rubric_for(level).dimensions {
                // Bands cover 0..=10 exactly once, descending.
                let mut covered = [false; 11];
                for band in &spec.bands {
                    assert!(band.min <= band.max);
                    for v in band.min..=band.max {
                        assert!(!covered[v as usize], "{} double-covers {v}", spec.id);
                        covered[v as usize] = true;
                    }
                    assert!(!band.criterion.is_empty());
                }
                assert!(covered.iter().all(|c| *c), "{} leaves a gap", spec.id);
                let expected: Vec<(u8, u8)> = spec.bands.iter().map(|b| (b.min, b.max)).collect();
                assert_eq!(expected, SCORE_BANDS.to_vec());
            }
        }
    }

    #[test]
    fn chain_score_is_ten_times_dim_mean() {
        let fc = dims(&[("existence_match", 8), ("completeness", 7), ("accuracy", 9)]);
        assert_eq!(chain_score(&fc).unwrap(), 80.0);
        let lrc = dims(&[
            ("logical_completeness", 10),
            ("reasoning_depth", 10),
            ("clinical_relevance", 10),
            ("evidence_integration", 10),
        ]);
        assert_eq!(chain_score(&lrc).unwrap(), 100.0);
        let uneven = dims(&[("clarity", 7), ("consistency", 8), ("medical_utility", 7)]);
        // 22/3 * 10 = 73.333... -> 73.33
        assert_eq!(chain_score(&uneven).unwrap(), 73.33);
    }

    #[test]
    fn chain_score_rejects_wrong_dimension_sets() {
        let short = dims(&[("existence_match", 8), ("completeness", 7)]);
        assert!(matches!(chain_score(&short), Err(RubricError::IncompleteDims { .. })));
        let dup = dims(&[
            ("existence_match", 8),
            ("existence_match", 7),
            ("accuracy", 9),
        ]);
        assert!(matches!(chain_score(&dup), Err(RubricError::IncompleteDims { .. })));
        let mixed = dims(&[("existence_match", 8), ("clarity", 7), ("accuracy", 9)]);
        assert!(matches!(chain_score(&mixed), Err(RubricError::IncompleteDims { .. })));
    }

    #[test]
    fn dim_score_range_is_enforced() {
        assert!(matches!(
            DimScore::new("accuracy", 11),
            Err(RubricError::RangeError { .. })
        ));
    }

    #[test]
    fn default_weights_favor_reasoning_and_validate() {
        let w = Weights::default();
        assert_eq!((w.w_fc, w.w_ic, w.w_lrc), (0.3, 0.3, 0.4));
        w.validate().unwrap();
        assert!(Weights::new(0.5, 0.5, 0.5).is_err());
        assert!(Weights::new(-0.1, 0.6, 0.5).is_err());
        assert!(Weights::new(f64::NAN, 0.5, 0.5).is_err());
        Weights::new(0.2, 0.2, 0.6).unwrap();
    }

    #[test]
    fn composite_weights_per_level_means() {
        let w = Weights::default();
        assert_eq!(cot_e_from_means(80.0, 70.0, 60.0, &w), 69.0);
        let card = Scorecard::new(
            dims(&[("existence_match", 8), ("completeness", 8), ("accuracy", 8)]),
            dims(&[("clarity", 7), ("consistency", 7), ("medical_utility", 7)]),
            dims(&[
                ("logical_completeness", 6),
                ("reasoning_depth", 6),
                ("clinical_relevance", 6),
                ("evidence_integration", 6),
            ]),
            None,
        )
        .unwrap();
        let rec = ScorecardRecord::from_scorecard("s1", "m", "t", "o", &card).unwrap();
        assert_eq!(cot_e(&[rec], &w).unwrap(), 69.0);
        assert_eq!(cot_e(&[], &w), Err(RubricError::EmptyCorpus));
    }

    #[test]
    fn round2_is_half_even_on_exact_ties() {
        assert_eq!(round2(0.125), 0.12);
        assert_eq!(round2(0.375), 0.38);
        assert_eq!(round2(43.211), 43.21);
        assert_eq!(round2(73.0 + 1.0 / 3.0), 73.33);
    }

    const CANONICAL_CARD: &str = r#"Here is my assessment.
```json
{"scoring": {"s1_finding": {"existence_match": "8/10", "completeness": "7/10", "accuracy": "9/10"},
"s2_impression": {"clarity": "8/10", "consistency": "9/10", "medical_utility": "7/10"},
"s3_reasoning": {"logical_completeness": "8/10", "reasoning_depth": "6/10", "clinical_relevance": "9/10", "evidence_integration": "7/10"},
"overall_score": "78/100"}}
```
Hope that helps."#;

    #[test]
    fn parses_canonical_scorecard_from_fenced_prose() {
        let card = parse_scorecard(CANONICAL_CARD).unwrap();
        let (s_fc, s_ic, s_lrc) = card.chain_scores().unwrap();
        assert_eq!(s_fc, 80.0);
        assert_eq!(s_ic, 80.0);
        assert_eq!(s_lrc, 75.0);
        assert_eq!(card.judge_overall_raw, Some(78));
        assert_eq!(card.fc[0].dimension, "existence_match");
        assert_eq!(card.fc[0].value, 8);
    }

    #[test]
    fn tolerates_bare_integers_and_missing_wrapper_and_overall() {
        let text = r#"{"s1_finding": {"existence_match": 10, "completeness": 10, "accuracy": 10},
"s2_impression": {"clarity": 10, "consistency": 10, "medical_utility": 10},
"s3_reasoning": {"logical_completeness": 10, "reasoning_depth": 10, "clinical_relevance": 10, "evidence_integration": 10}}"#;
        let card = parse_scorecard(text).unwrap();
        assert_eq!(card.chain_scores().unwrap(), (100.0, 100.0, 100.0));
        assert_eq!(card.judge_overall_raw, None);
    }

    #[test]
    fn scorecard_errors_are_typed() {
        assert_eq!(parse_scorecard("no json here"), Err(RubricError::NoJsonFound));

        let missing = CANONICAL_CARD.replace("\"accuracy\": \"9/10\"", "\"accuracy2\": \"9/10\"");
        assert!(matches!(
            parse_scorecard(&missing),
            Err(RubricError::SchemaError { .. })
        ));

        let out_of_range = CANONICAL_CARD.replace("\"9/10\"", "\"11/10\"");
        assert!(matches!(
            parse_scorecard(&out_of_range),
            Err(RubricError::RangeError { .. })
        ));

        let garbled = CANONICAL_CARD.replace("\"9/10\"", "\"high/10\"");
        assert!(matches!(
            parse_scorecard(&garbled),
            Err(RubricError::FormatError { .. })
        ));

        let wrong_denominator = CANONICAL_CARD.replace("\"9/10\"", "\"9/5\"");
        assert!(matches!(
            parse_scorecard(&wrong_denominator),
            Err(RubricError::FormatError { .. })
        ));
    }

    #[test]
    fn render_then_parse_round_trips() {
        let card = parse_scorecard(CANONICAL_CARD).unwrap();
        let rendered = render_scorecard(&card);
        assert_eq!(parse_scorecard(&rendered).unwrap(), card);
        assert!(rendered.contains("\"8/10\""));
        assert!(rendered.contains("\"78/100\""));
    }

    #[test]
    fn scoring_prompt_embeds_rubric_chains_and_contract() {
        let lex = RelationLexicon::builtin();
        let (chains, _) = chains_from_triplets(
            vec![
                Triplet::new("liver", "shows", "mass").unwrap(),
                Triplet::new("mass", "suggestive of", "HCC").unwrap(),
                Triplet::new("case", "staged as", "T2").unwrap(),
            ],
            &lex,
        );
        let gt = segment_cot("Liver mass seen. Thus, the answer is HCC.", DEFAULT_SUMMARY_MARKERS)
            .unwrap()
            .with_chains(chains);
        let pred = segment_cot("No findings. Thus, the answer is normal.", DEFAULT_SUMMARY_MARKERS).unwrap();
        let prompt = build_scoring_prompt(&gt, &pred).unwrap();
        assert!(prompt.contains("existence_match"));
        assert!(prompt.contains("evidence_integration"));
        assert!(prompt.contains("no logical gaps or omissions"));
        assert!(prompt.contains("(liver, shows, mass);"));
        assert!(prompt.contains("Ground-truth chains:"));
        assert!(prompt.contains("s3_reasoning"));
        // Empty prediction renders placeholder sections, not an error.
        assert!(prompt.contains("(none)"));
        // Empty ground truth is a data error.
        assert_eq!(
            build_scoring_prompt(&pred, &gt),
            Err(RubricError::EmptyGroundTruth)
        );
    }

    fn sample(model: &str, organ: &str, s_fc: f64, s_ic: f64, s_lrc: f64) -> ScorecardRecord {
        ScorecardRecord {
            sample_id: format!("{model}-{organ}-{s_fc}"),
            model: model.to_owned(),
            task: "CotReport".to_owned(),
            organ: organ.to_owned(),
            s_fc,
            s_ic,
            s_lrc,
            dims: DimsBlock::default(),
            judge_overall_raw: None,
        }
    }

    #[test]
    fn aggregation_groups_sorts_and_rounds() {
        let records = vec![
            sample("zeta", "liver", 80.0, 70.0, 60.0),
            sample("alpha", "liver", 90.0, 80.0, 70.0),
            sample("alpha", "colon", 70.0, 60.0, 50.0),
        ];
        let table = aggregate_scores(&records, &[GroupField::Model], &Weights::default()).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].key, vec!["alpha".to_owned()]);
        assert_eq!(table.rows[0].n, 2);
        assert_eq!(table.rows[0].s_fc, 80.0);
        assert_eq!(table.rows[0].cot_e, round2(0.3 * 80.0 + 0.3 * 70.0 + 0.4 * 60.0));
        assert_eq!(table.rows[1].key, vec!["zeta".to_owned()]);

        let whole = aggregate_scores(&records, &[], &Weights::default()).unwrap();
        assert_eq!(whole.rows.len(), 1);
        assert_eq!(whole.rows[0].n, 3);

        let csv = table.to_csv();
        assert!(csv.starts_with("model,n,s_fc,s_ic,s_lrc,cot_e\n"));
        assert!(csv.contains("alpha,2,80.00,70.00,60.00,69.00\n"));

        let text = whole.render_text();
        assert!(text.contains("all"));
    }

    #[test]
    fn missing_expected_groups_become_notes_not_zero_rows() {
        let records = vec![sample("alpha", "liver", 80.0, 70.0, 60.0)];
        let mut table =
            aggregate_scores(&records, &[GroupField::Organ], &Weights::default()).unwrap();
        table.note_missing_groups(&[vec!["liver".to_owned()], vec!["colon".to_owned()]]);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.notes, vec!["no records for group colon".to_owned()]);
        assert!(table.render_text().contains("note: no records for group colon"));
    }

    #[test]
    fn csv_quoting_handles_commas_and_quotes() {
        let mut out = String::new();
        push_csv_row(
            &mut out,
            &["plain".to_owned(), "a,b".to_owned(), "say \"hi\"".to_owned()],
        );
        assert_eq!(out, "plain,\"a,b\",\"say \"\"hi\"\"\"\n");
    }

    proptest! {
        /// Any complete scorecard survives render -> parse unchanged.
        #[test]
        fn scorecard_round_trip(
            values in proptest::collection::vec(0u8..=10, 10),
            overall in proptest::option::of(0u32..=100),
        ) {
            let fc = dims(&[
                ("existence_match", values[0]),
                ("completeness", values[1]),
                ("accuracy", values[2]),
            ]);
            let ic = dims(&[
                ("clarity", values[3]),
                ("consistency", values[4]),
                ("medical_utility", values[5]),
            ]);
            let lrc = dims(&[
                ("logical_completeness", values[6]),
                ("reasoning_depth", values[7]),
                ("clinical_relevance", values[8]),
                ("evidence_integration", values[9]),
            ]);
            let card = Scorecard::new(fc, ic, lrc, overall).unwrap();
            prop_assert_eq!(parse_scorecard(&render_scorecard(&card)).unwrap(), card);
        }
    }
}
