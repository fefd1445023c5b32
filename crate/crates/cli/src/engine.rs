//! Report-to-VQA pipeline: structured feature extraction, chain
//! reasoning with knowledge-graph context, logic calibration with
//! randomized retry strategies, pathology-consistency gating, and
//! question emission.
//!
//! A case moves through a small state machine:
//!
//! ```text
//! FeatureExtract -> Reason -> Calibrate -+-> Summarize -+-> Done
//!                     ^          |       |      |
//!                     +- retry --+       |      +-> Reason (re-reason)
//!                     (<= max_calibration_retries,    (<= max_summarizer_reloops,
//!                      strategy drawn per retry)       calibration budget reset)
//! ```
//!
//! Every agent interaction lands in an [`EngineTrace`] step carrying the
//! request cache key, so a run against replay backends is byte-identical
//! across machines.

use std::collections::BTreeMap;

use medcot_core::chain::{segment_cot, AnswerFormat, CoTRecord, VqaRecord, DEFAULT_SUMMARY_MARKERS};
use medcot_core::kg::{KnowledgeGraph, SynonymMap};
use medcot_core::rubric::embedded_json_objects;
use medcot_core::{Organ, TaskKind};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::judge::{cache_key, JudgeClient, Message, Role};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("report text is empty")]
    EmptyReport,
    #[error("structured report schema error: {detail}")]
    Schema { detail: String },
    #[error("stage code {code:?} does not match {pattern}")]
    TnmPattern { code: String, pattern: &'static str },
    #[error("{role} output has no usable VERDICT line: {detail}")]
    MalformedVerdict { role: Role, detail: String },
    #[error(transparent)]
    Judge(#[from] crate::judge::JudgeError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

// ---------------------------------------------------------------------------
// Structured report
// ---------------------------------------------------------------------------

/// Demographics block of a structured report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
}

/// Findings for one organ. The named attributes are the ones questions
/// are built from; anything else the extractor reports is preserved in
/// `other` rather than dropped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrganFindings {
    pub organ: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub other: BTreeMap<String, String>,
}

/// Pathology block: AJCC-style stage codes plus the written conclusion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pathology {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<String>,
    #[serde(default)]
    pub conclusion: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuredReport {
    #[serde(default)]
    pub patient: PatientMeta,
    pub findings: Vec<OrganFindings>,
    #[serde(default)]
    pub pathology: Pathology,
}

/// Validates one stage code against its letter's pattern:
/// `T[0-4x]`, `N[0-3x]`, `M[01x]`.
pub fn validate_stage_code(letter: char, code: &str) -> Result<(), EngineError> {
    let (pattern, digits): (&'static str, &str) = match letter {
        'T' => ("T[0-4x]", "01234"),
        'N' => ("N[0-3x]", "0123"),
        'M' => ("M[01x]", "01"),
        _ => unreachable!("stage letters are fixed"),
    };
    let mut chars = code.chars();
    let ok = chars.next() == Some(letter)
        && matches!(chars.next(), Some(c) if c == 'x' || digits.contains(c))
        && chars.next().is_none();
    if ok {
        Ok(())
    } else {
        Err(EngineError::TnmPattern { code: code.to_owned(), pattern })
    }
}

impl StructuredReport {
    /// Checks the structural invariants: at least one organ block, and
    /// stage codes (when present) matching the AJCC-style patterns.
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.findings.is_empty() {
            return Err(EngineError::Schema { detail: "no organ findings".into() });
        }
        for (idx, f) in self.findings.iter().enumerate() {
            if f.organ.trim().is_empty() {
                return Err(EngineError::Schema { detail: format!("findings[{idx}]: empty organ name") });
            }
        }
        for (letter, code) in [
            ('T', &self.pathology.t),
            ('N', &self.pathology.n),
            ('M', &self.pathology.m),
        ] {
            if let Some(code) = code {
                validate_stage_code(letter, code)?;
            }
        }
        Ok(())
    }

    /// The first organ block naming one of the five covered organs.
    pub fn primary_task_organ(&self) -> Option<(Organ, &OrganFindings)> {
        self.findings
            .iter()
            .find_map(|f| Organ::parse(&f.organ).map(|o| (o, f)))
    }
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Prompt asking the extractor for the full structured-report JSON.
/// Every schema field is named so the instruction doubles as the schema
/// documentation.
pub fn build_feature_prompt(report_text: &str) -> String {
    format!(
        "Extract structured features from the CT report below.\n\
         Respond with a single JSON object with exactly this shape:\n\
         {{\n\
         \x20 \"patient\": {{\"age\": <years or null>, \"gender\": \"<male|female or null>\"}},\n\
         \x20 \"findings\": [\n\
         \x20   {{\"organ\": \"<organ name>\", \"location\": \"...\", \"shape\": \"...\",\n\
         \x20    \"margin\": \"...\", \"density\": \"...\", \"count\": \"...\"}}\n\
         \x20 ],\n\
         \x20 \"pathology\": {{\"t\": \"T<0-4 or x>\", \"n\": \"N<0-3 or x>\", \"m\": \"M<0, 1 or x>\",\n\
         \x20              \"conclusion\": \"<final diagnostic conclusion>\"}}\n\
         }}\n\
         One findings entry per organ mentioned. Omit unknown attributes or set them to null.\n\
         Additional attributes beyond the listed ones are allowed and will be kept.\n\
         Stage codes must match T[0-4x], N[0-3x], M[01x].\n\n\
         Report:\n{report_text}"
    )
}

fn value_to_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_owned()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Interprets extractor JSON as a [`StructuredReport`]. Known finding
/// attributes map to their fields; unknown ones are preserved in
/// `other`. Validation (organ presence, stage patterns) is applied.
pub fn parse_structured_report(value: &serde_json::Value) -> Result<StructuredReport, EngineError> {
    let obj = value
        .as_object()
        .ok_or_else(|| EngineError::Schema { detail: "top level is not an object".into() })?;

    let patient = match obj.get("patient") {
        Some(serde_json::Value::Object(p)) => PatientMeta {
            age: p.get("age").and_then(|v| match v {
                serde_json::Value::Number(n) => n.as_u64().map(|n| n as u32),
                serde_json::Value::String(s) => s.trim().parse().ok(),
                _ => None,
            }),
            gender: p.get("gender").and_then(value_to_text),
        },
        _ => PatientMeta::default(),
    };

    let raw_findings = obj
        .get("findings")
        .and_then(|v| v.as_array())
        .ok_or_else(|| EngineError::Schema { detail: "missing findings array".into() })?;
    let mut findings = Vec::new();
    for (idx, entry) in raw_findings.iter().enumerate() {
        let block = entry.as_object().ok_or_else(|| EngineError::Schema {
            detail: format!("findings[{idx}] is not an object"),
        })?;
        let organ = block
            .get("organ")
            .and_then(value_to_text)
            .ok_or_else(|| EngineError::Schema { detail: format!("findings[{idx}]: missing organ") })?;
        let mut f = OrganFindings { organ, ..OrganFindings::default() };
        for (key, v) in block {
            let text = value_to_text(v);
            match key.as_str() {
                "organ" => {}
                "location" => f.location = text,
                "shape" => f.shape = text,
                "margin" => f.margin = text,
                "density" => f.density = text,
                "count" => f.count = text,
                _ => {
                    if let Some(text) = text {
                        f.other.insert(key.clone(), text);
                    }
                }
            }
        }
        findings.push(f);
    }

    let pathology = match obj.get("pathology") {
        Some(serde_json::Value::Object(p)) => Pathology {
            t: p.get("t").and_then(value_to_text),
            n: p.get("n").and_then(value_to_text),
            m: p.get("m").and_then(value_to_text),
            conclusion: p.get("conclusion").and_then(value_to_text).unwrap_or_default(),
        },
        _ => Pathology::default(),
    };

    let report = StructuredReport { patient, findings, pathology };
    report.validate()?;
    Ok(report)
}

/// Runs the extractor agent over raw report text and parses the result.
/// The first embedded JSON object that is a valid structured report
/// wins; a schema or stage-pattern problem in the best candidate is
/// reported as-is.
pub fn extract_structured_features(
    report_text: &str,
    run: &RunConfig,
    client: &JudgeClient,
) -> Result<(StructuredReport, TraceStep), EngineError> {
    if report_text.trim().is_empty() {
        return Err(EngineError::EmptyReport);
    }
    let req = run.request_for(Role::Extractor, vec![Message::user(build_feature_prompt(report_text))])?;
    let key = cache_key(&req);
    let resp = client.complete(&req)?;

    let mut last_err: Option<EngineError> = None;
    for candidate in embedded_json_objects(&resp.text) {
        match parse_structured_report(&candidate) {
            Ok(report) => {
                let step = TraceStep {
                    state: EngineState::FeatureExtract,
                    role: Some(Role::Extractor),
                    key: Some(key),
                    outcome: format!("{} organ blocks", report.findings.len()),
                    strategy: None,
                };
                return Ok((report, step));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or(EngineError::Schema { detail: "no JSON object in extractor output".into() }))
}

// ---------------------------------------------------------------------------
// State machine
// ---------------------------------------------------------------------------

/// How a rejected chain's re-reasoning prompt is augmented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetryStrategy {
    /// Widen the knowledge-graph neighborhood around the organ.
    ExpandOrganRegion,
    /// Feed the calibrator's objection back as a suspected cause.
    ProvideSuspectedCause,
}

impl RetryStrategy {
    pub fn name(self) -> &'static str {
        match self {
            RetryStrategy::ExpandOrganRegion => "expand_organ_region",
            RetryStrategy::ProvideSuspectedCause => "provide_suspected_cause",
        }
    }
}

/// Uniform draw over the two retry strategies; deterministic for a
/// seeded generator.
pub fn pick_retry_strategy<R: Rng>(rng: &mut R) -> RetryStrategy {
    if rng.gen_bool(0.5) {
        RetryStrategy::ExpandOrganRegion
    } else {
        RetryStrategy::ProvideSuspectedCause
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineState {
    FeatureExtract,
    Reason,
    Calibrate,
    Summarize,
    Done,
    Failed,
}

impl EngineState {
    /// Legal successor states.
    fn may_precede(self, next: EngineState) -> bool {
        use EngineState::*;
        matches!(
            (self, next),
            (FeatureExtract, Reason)
                | (Reason, Calibrate)
                | (Calibrate, Reason)
                | (Calibrate, Summarize)
                | (Summarize, Reason)
                | (Summarize, Done)
                | (_, Failed)
        )
    }
}

/// One agent interaction (or terminal transition) in a case run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub state: EngineState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    /// Request cache key — stable across identical runs, so it doubles
    /// as the mock id under scripted backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub outcome: String,
    /// Strategy applied to this step (set on retry Reason steps).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<RetryStrategy>,
}

/// Full record of one case run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineTrace {
    pub patient_id: String,
    pub steps: Vec<TraceStep>,
    pub reason_calls: u32,
    pub calibration_retries_used: u32,
    pub summarizer_reloops_used: u32,
    /// `done` or `failed: <reason>`.
    pub final_outcome: String,
}

impl EngineTrace {
    pub fn final_state(&self) -> EngineState {
        self.steps.last().map_or(EngineState::Failed, |s| s.state)
    }

    /// Verifies the recorded transitions against the state machine and
    /// the configured budgets. Used by tests and by trace consumers that
    /// do not trust their producer.
    pub fn check(&self, cfg: &EngineConfig<'_>) -> Result<(), String> {
        let states: Vec<EngineState> = self.steps.iter().map(|s| s.state).collect();
        if states.is_empty() {
            return Err("empty trace".into());
        }
        if !matches!(states[0], EngineState::FeatureExtract | EngineState::Reason) {
            return Err(format!("trace starts in {:?}", states[0]));
        }
        for pair in states.windows(2) {
            if !pair[0].may_precede(pair[1]) {
                return Err(format!("illegal transition {:?} -> {:?}", pair[0], pair[1]));
            }
        }
        if !matches!(states[states.len() - 1], EngineState::Done | EngineState::Failed) {
            return Err(format!("trace ends in {:?}", states[states.len() - 1]));
        }
        let max_reason =
            1 + cfg.max_calibration_retries + cfg.max_summarizer_reloops * (1 + cfg.max_calibration_retries);
        if self.reason_calls > max_reason {
            return Err(format!("{} reason calls exceed bound {max_reason}", self.reason_calls));
        }
        if self.summarizer_reloops_used > cfg.max_summarizer_reloops {
            return Err("summarizer reloops over budget".into());
        }
        Ok(())
    }
}

/// Budgets, seed, and handles for one engine run.
pub struct EngineConfig<'a> {
    pub max_calibration_retries: u32,
    pub max_summarizer_reloops: u32,
    pub rng_seed: u64,
    pub run: &'a RunConfig,
    pub client: &'a JudgeClient,
    pub kg: &'a KnowledgeGraph,
    pub synonyms: SynonymMap,
}

pub const DEFAULT_MAX_CALIBRATION_RETRIES: u32 = 2;
pub const DEFAULT_MAX_SUMMARIZER_RELOOPS: u32 = 1;

impl<'a> EngineConfig<'a> {
    pub fn new(run: &'a RunConfig, client: &'a JudgeClient, kg: &'a KnowledgeGraph) -> EngineConfig<'a> {
        EngineConfig {
            max_calibration_retries: DEFAULT_MAX_CALIBRATION_RETRIES,
            max_summarizer_reloops: DEFAULT_MAX_SUMMARIZER_RELOOPS,
            rng_seed: run.seed,
            run,
            client,
            kg,
            synonyms: SynonymMap::default(),
        }
    }
}

/// Everything a finished (or failed) case produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub records: Vec<VqaRecord>,
    pub trace: EngineTrace,
}

fn parse_gate_verdict(
    role: Role,
    text: &str,
    positive: &str,
    negative: &str,
) -> Result<(bool, String), EngineError> {
    let mut rest = Vec::new();
    let mut verdict = None;
    for line in text.lines() {
        let trimmed = line.trim();
        let upper = trimmed.to_uppercase();
        if verdict.is_none() {
            if let Some(value) = upper.strip_prefix("VERDICT:") {
                let value = value.trim().trim_matches(['.', '!', '"', '\'']).to_lowercase();
                if value == positive {
                    verdict = Some(true);
                } else if value == negative {
                    verdict = Some(false);
                } else {
                    return Err(EngineError::MalformedVerdict {
                        role,
                        detail: format!("VERDICT value {value:?} not in {{{positive}, {negative}}}"),
                    });
                }
                continue;
            }
        }
        if !trimmed.is_empty() {
            rest.push(trimmed.to_owned());
        }
    }
    match verdict {
        Some(v) => Ok((v, rest.join("\n"))),
        None => Err(EngineError::MalformedVerdict { role, detail: "no VERDICT line".into() }),
    }
}

/// Prompt augmentation carried into a re-reasoning round.
enum Augment {
    Retry { strategy: RetryStrategy, issue: String },
    Reloop { objection: String },
}

fn render_report(report: &StructuredReport) -> String {
    let mut out = String::new();
    if let Some(age) = report.patient.age {
        out.push_str(&format!("Patient age: {age}\n"));
    }
    if let Some(gender) = &report.patient.gender {
        out.push_str(&format!("Patient gender: {gender}\n"));
    }
    for f in &report.findings {
        out.push_str(&format!("Organ: {}\n", f.organ));
        for (label, value) in [
            ("location", &f.location),
            ("shape", &f.shape),
            ("margin", &f.margin),
            ("density", &f.density),
            ("count", &f.count),
        ] {
            if let Some(v) = value {
                out.push_str(&format!("  {label}: {v}\n"));
            }
        }
        for (k, v) in &f.other {
            out.push_str(&format!("  {k}: {v}\n"));
        }
    }
    out
}

/// Builds the reasoning prompt: structured findings, knowledge-graph
/// context per covered organ, and any retry augmentation. The
/// expand-organ-region strategy widens retrieval from one to two hops.
fn build_reason_prompt(report: &StructuredReport, cfg: &EngineConfig<'_>, augment: Option<&Augment>) -> String {
    let hops = match augment {
        Some(Augment::Retry { strategy: RetryStrategy::ExpandOrganRegion, .. }) => 2,
        _ => 1,
    };
    let mut context = String::new();
    for f in &report.findings {
        if let Some(organ) = Organ::parse(&f.organ) {
            let edges = cfg.kg.query(&[organ.name()], organ, hops, &cfg.synonyms);
            if !edges.is_empty() {
                context.push_str(&format!("Knowledge about {}:\n", organ.name()));
                context.push_str(&KnowledgeGraph::render_context(&edges));
            }
        }
    }

    let mut prompt = format!(
        "Derive the diagnostic reasoning chain for this case.\n\
         Work from observable findings, through interpretation, to a staged conclusion.\n\n\
         Structured findings:\n{}\n",
        render_report(report)
    );
    if !context.is_empty() {
        prompt.push_str(&format!("\nReference knowledge:\n{context}"));
    }
    match augment {
        Some(Augment::Retry { strategy: RetryStrategy::ExpandOrganRegion, .. }) => {
            prompt.push_str("\nThe previous chain was rejected. Reconsider using the expanded organ region context above.\n");
        }
        Some(Augment::Retry { strategy: RetryStrategy::ProvideSuspectedCause, issue }) => {
            prompt.push_str(&format!(
                "\nThe previous chain was rejected. Suspected cause of the flaw: {issue}\nAddress it directly.\n"
            ));
        }
        Some(Augment::Reloop { objection }) => {
            prompt.push_str(&format!(
                "\nA completed chain was inconsistent with the pathology conclusion: {objection}\nRe-derive the reasoning from the findings.\n"
            ));
        }
        None => {}
    }
    prompt
}

fn build_calibration_prompt(report: &StructuredReport, chain: &str) -> String {
    format!(
        "Check the logical validity of this reasoning chain against the findings.\n\
         Is every inference supported, with no contradiction or unsupported leap?\n\n\
         Findings:\n{}\n\nChain:\n{chain}\n\n\
         Reply with a line `VERDICT: pass` or `VERDICT: fail`.\n\
         After a fail verdict, describe the flaw.",
        render_report(report)
    )
}

fn build_summary_prompt(report: &StructuredReport, chain: &str) -> String {
    format!(
        "Compare the reasoning chain's conclusion with the pathology conclusion.\n\n\
         Chain:\n{chain}\n\nPathology conclusion: {}\n\n\
         Reply with a line `VERDICT: consistent` or `VERDICT: inconsistent`.\n\
         After an inconsistent verdict, state the disagreement.",
        report.pathology.conclusion
    )
}

/// Runs the reasoning/calibration/summary state machine for one case.
///
/// Agent failures and exhausted budgets do not abort the run with an
/// `Err`; they close the trace with a `Failed` step so the caller always
/// gets the full interaction record. `Err` is reserved for invalid
/// input.
pub fn run_case(
    patient_id: &str,
    report: &StructuredReport,
    cfg: &EngineConfig<'_>,
) -> Result<CaseOutcome, EngineError> {
    report.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut trace = EngineTrace { patient_id: patient_id.to_owned(), ..EngineTrace::default() };

    let fail = |mut trace: EngineTrace, reason: String| {
        trace.steps.push(TraceStep {
            state: EngineState::Failed,
            role: None,
            key: None,
            outcome: reason.clone(),
            strategy: None,
        });
        trace.final_outcome = format!("failed: {reason}");
        Ok(CaseOutcome { records: Vec::new(), trace })
    };

    let mut augment: Option<Augment> = None;
    let chain = 'outer: loop {
        // Calibration phase: first attempt plus up to
        // max_calibration_retries strategy-augmented retries.
        let mut retries_left = cfg.max_calibration_retries;
        let chain = loop {
            let strategy = match &augment {
                Some(Augment::Retry { strategy, .. }) => Some(*strategy),
                _ => None,
            };
            let req = match cfg.run.request_for(
                Role::Reasoner,
                vec![Message::user(build_reason_prompt(report, cfg, augment.as_ref()))],
            ) {
                Ok(req) => req,
                Err(e) => return fail(trace, e.to_string()),
            };
            let key = cache_key(&req);
            trace.reason_calls += 1;
            let chain_text = match cfg.client.complete(&req) {
                Ok(resp) => resp.text,
                Err(e) => {
                    trace.steps.push(TraceStep {
                        state: EngineState::Reason,
                        role: Some(Role::Reasoner),
                        key: Some(key),
                        outcome: format!("error: {e}"),
                        strategy,
                    });
                    return fail(trace, format!("reasoner: {e}"));
                }
            };
            trace.steps.push(TraceStep {
                state: EngineState::Reason,
                role: Some(Role::Reasoner),
                key: Some(key),
                outcome: "chain produced".into(),
                strategy,
            });

            let req = match cfg.run.request_for(
                Role::Calibrator,
                vec![Message::user(build_calibration_prompt(report, &chain_text))],
            ) {
                Ok(req) => req,
                Err(e) => return fail(trace, e.to_string()),
            };
            let key = cache_key(&req);
            let verdict = cfg
                .client
                .complete(&req)
                .map_err(EngineError::from)
                .and_then(|resp| parse_gate_verdict(Role::Calibrator, &resp.text, "pass", "fail"));
            match verdict {
                Ok((true, _)) => {
                    trace.steps.push(TraceStep {
                        state: EngineState::Calibrate,
                        role: Some(Role::Calibrator),
                        key: Some(key),
                        outcome: "pass".into(),
                        strategy: None,
                    });
                    break chain_text;
                }
                Ok((false, issue)) => {
                    trace.steps.push(TraceStep {
                        state: EngineState::Calibrate,
                        role: Some(Role::Calibrator),
                        key: Some(key),
                        outcome: "fail".into(),
                        strategy: None,
                    });
                    if retries_left == 0 {
                        return fail(
                            trace,
                            format!(
                                "budget exhausted: calibration failed {} times",
                                cfg.max_calibration_retries + 1
                            ),
                        );
                    }
                    retries_left -= 1;
                    trace.calibration_retries_used += 1;
                    let strategy = pick_retry_strategy(&mut rng);
                    augment = Some(Augment::Retry { strategy, issue });
                }
                Err(e) => {
                    trace.steps.push(TraceStep {
                        state: EngineState::Calibrate,
                        role: Some(Role::Calibrator),
                        key: Some(key),
                        outcome: format!("error: {e}"),
                        strategy: None,
                    });
                    return fail(trace, format!("calibrator: {e}"));
                }
            }
        };

        // Pathology-consistency gate.
        let req = match cfg.run.request_for(
            Role::Summarizer,
            vec![Message::user(build_summary_prompt(report, &chain))],
        ) {
            Ok(req) => req,
            Err(e) => return fail(trace, e.to_string()),
        };
        let key = cache_key(&req);
        let verdict = cfg
            .client
            .complete(&req)
            .map_err(EngineError::from)
            .and_then(|resp| parse_gate_verdict(Role::Summarizer, &resp.text, "consistent", "inconsistent"));
        match verdict {
            Ok((true, _)) => {
                trace.steps.push(TraceStep {
                    state: EngineState::Summarize,
                    role: Some(Role::Summarizer),
                    key: Some(key),
                    outcome: "consistent".into(),
                    strategy: None,
                });
                break 'outer chain;
            }
            Ok((false, objection)) => {
                trace.steps.push(TraceStep {
                    state: EngineState::Summarize,
                    role: Some(Role::Summarizer),
                    key: Some(key),
                    outcome: "inconsistent".into(),
                    strategy: None,
                });
                if trace.summarizer_reloops_used == cfg.max_summarizer_reloops {
                    return fail(
                        trace,
                        format!(
                            "budget exhausted: summary inconsistent {} times",
                            cfg.max_summarizer_reloops + 1
                        ),
                    );
                }
                trace.summarizer_reloops_used += 1;
                // Re-reasoning restarts the calibration phase with a
                // fresh retry budget.
                augment = Some(Augment::Reloop { objection });
            }
            Err(e) => {
                trace.steps.push(TraceStep {
                    state: EngineState::Summarize,
                    role: Some(Role::Summarizer),
                    key: Some(key),
                    outcome: format!("error: {e}"),
                    strategy: None,
                });
                return fail(trace, format!("summarizer: {e}"));
            }
        }
    };

    match emit_records(patient_id, report, &chain) {
        Ok(records) => {
            trace.steps.push(TraceStep {
                state: EngineState::Done,
                role: None,
                key: None,
                outcome: format!("emitted {} records", records.len()),
                strategy: None,
            });
            trace.final_outcome = "done".into();
            Ok(CaseOutcome { records, trace })
        }
        Err(e) => fail(trace, e.to_string()),
    }
}

/// Appends the canonical answer summary to reasoning text and segments
/// the result into a ground-truth record.
fn cot_ground_truth(chain: &str, answer: &str) -> Result<CoTRecord, EngineError> {
    let full = format!("{}\n{} {answer}.", chain.trim(), DEFAULT_SUMMARY_MARKERS[0]);
    segment_cot(&full, DEFAULT_SUMMARY_MARKERS)
        .map_err(|e| EngineError::Schema { detail: format!("ground-truth chain: {e}") })
}

/// Emits one open-ended record per benchmark subtask whose answer
/// material exists in the report, each carrying the validated chain as
/// reasoning ground truth.
fn emit_records(
    patient_id: &str,
    report: &StructuredReport,
    chain: &str,
) -> Result<Vec<VqaRecord>, EngineError> {
    let (organ, f) = report.primary_task_organ().ok_or_else(|| EngineError::Schema {
        detail: "no finding names a covered organ".into(),
    })?;
    let p = &report.pathology;
    let others_text = if f.other.is_empty() {
        None
    } else {
        Some(
            f.other
                .iter()
                .map(|(k, v)| format!("{k}: {v}"))
                .collect::<Vec<_>>()
                .join("; "),
        )
    };
    let conclusion =
        if p.conclusion.trim().is_empty() { None } else { Some(p.conclusion.trim().to_owned()) };

    // (task, subtask, question, answer) per benchmark column; a None
    // answer skips that column for this case.
    let candidates: Vec<(TaskKind, &str, String, Option<String>)> = vec![
        (
            TaskKind::Localization,
            "organ_position",
            "Which organ is primarily involved by the lesion in this scan?".into(),
            Some(organ.name().to_owned()),
        ),
        (
            TaskKind::Localization,
            "tumor_position",
            format!("Where in the {organ} is the lesion located?"),
            f.location.clone(),
        ),
        (
            TaskKind::LesionAttribute,
            "segment_localization",
            format!("Which segment or subregion of the {organ} contains the lesion?"),
            f.other.get("segment").cloned().or_else(|| f.location.clone()),
        ),
        (
            TaskKind::LesionAttribute,
            "shape",
            "What is the shape of the lesion?".into(),
            f.shape.clone(),
        ),
        (
            TaskKind::LesionAttribute,
            "boundary",
            "How would you describe the lesion boundary?".into(),
            f.margin.clone(),
        ),
        (
            TaskKind::LesionAttribute,
            "density",
            "What is the density characteristic of the lesion?".into(),
            f.density.clone(),
        ),
        (
            TaskKind::LesionAttribute,
            "count",
            "How many lesions are present?".into(),
            f.count.clone(),
        ),
        (
            TaskKind::LesionAttribute,
            "others",
            "What additional notable attributes does the lesion show?".into(),
            others_text,
        ),
        (
            TaskKind::TnmPrediction,
            "tumor_stage",
            "What is the T stage of the primary tumor?".into(),
            p.t.clone(),
        ),
        (
            TaskKind::TnmPrediction,
            "node_stage",
            "What is the N stage reflecting regional lymph node involvement?".into(),
            p.n.clone(),
        ),
        (
            TaskKind::TnmPrediction,
            "metastasis",
            "What is the M stage reflecting distant metastasis?".into(),
            p.m.clone(),
        ),
        (
            TaskKind::CotReport,
            "cot_report",
            "Provide the diagnostic conclusion for this case, reasoning step by step.".into(),
            conclusion,
        ),
    ];

    let mut records = Vec::new();
    for (task, subtask, question, answer) in candidates {
        let Some(answer) = answer else { continue };
        let record = VqaRecord {
            id: format!("{patient_id}:{subtask}"),
            patient_id: patient_id.to_owned(),
            organ,
            task,
            subtask: subtask.to_owned(),
            format: AnswerFormat::OpenEnded,
            question,
            answer_gt: answer.clone(),
            options: Vec::new(),
            cot_gt: Some(cot_ground_truth(chain, &answer)?),
            usable: None,
            quality: None,
        };
        record
            .validate()
            .map_err(|e| EngineError::Schema { detail: format!("emitted record: {e}") })?;
        records.push(record);
    }
    Ok(records)
}
