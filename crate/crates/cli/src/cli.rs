//! Command-line surface tying the library modules into workflows.
//!
//! Exit codes: 0 on success, 1 on domain errors (reported as one
//! structured JSON object on standard error so CI can assert on error
//! kinds), 2 on usage errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use medcot_core::accuracy::{
    build_semantic_prompt, match_choice, parse_verdict, summary_table, VerdictRecord,
};
use medcot_core::chain::{
    chains_from_triplets, segment_cot, validate_corpus, AnswerFormat, CoTRecord, RelationLexicon,
    VqaRecord, DEFAULT_SUMMARY_MARKERS,
};
use medcot_core::iir::{run_iir, IirConfig, OrganLexicon, DEFAULT_MAX_ROUNDS};
use medcot_core::kg::{KnowledgeGraph, SynonymMap};
use medcot_core::labels::{match_organ, RemapTable};
use medcot_core::rubric::{
    aggregate_scores, build_scoring_prompt, parse_scorecard, GroupField, ScorecardRecord,
};
use medcot_core::split::split_patients;
use medcot_core::triples::{
    build_extraction_prompt, parse_triple_list, repair_slot_order, EntityLexicon,
};
use medcot_core::Organ;

use crate::config::{BackendSpec, RoleConfig, RunConfig};
use crate::engine::{
    extract_structured_features, run_case, EngineConfig, EngineState, EngineTrace, TraceStep,
};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::judge::{JudgeClient, Message, Role};
use crate::volume_io::{read_volume, write_volume};

/// Model name used when `--replay` runs without a config file.
pub const FIXTURE_MODEL: &str = "fixture";

// ---------------------------------------------------------------------------
// Error envelope
// ---------------------------------------------------------------------------

/// A domain error as printed to standard error: a broad category (which
/// module), a machine-friendly kind (which variant), and prose detail.
#[derive(Debug, Serialize)]
pub struct DomainError {
    pub category: &'static str,
    pub kind: String,
    pub detail: String,
}

impl DomainError {
    pub fn new<E: std::fmt::Debug + std::fmt::Display>(category: &'static str, err: E) -> DomainError {
        DomainError {
            category,
            kind: variant_kind(&format!("{err:?}")),
            detail: err.to_string(),
        }
    }

    pub fn custom(category: &'static str, kind: &str, detail: impl Into<String>) -> DomainError {
        DomainError { category, kind: kind.to_owned(), detail: detail.into() }
    }

    /// Prefixes the detail with the record id it arose from.
    pub fn in_row(mut self, id: &str) -> DomainError {
        self.detail = format!("record {id}: {}", self.detail);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

/// `ReplayMiss { key: ... }` → `replay_miss`.
fn variant_kind(debug: &str) -> String {
    let head: &str = debug
        .split(|c: char| !c.is_ascii_alphanumeric())
        .next()
        .unwrap_or(debug);
    let mut out = String::new();
    for (i, c) in head.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

macro_rules! domain_from {
    ($($ty:ty => $cat:literal),+ $(,)?) => {$(
        impl From<$ty> for DomainError {
            fn from(e: $ty) -> DomainError { DomainError::new($cat, e) }
        }
    )+}
}

domain_from! {
    crate::jsonl::JsonlError => "jsonl",
    crate::config::ConfigError => "config",
    crate::judge::JudgeError => "judge",
    crate::engine::EngineError => "engine",
    crate::volume_io::VolumeIoError => "volume",
    medcot_core::triples::TripleError => "triples",
    medcot_core::rubric::RubricError => "rubric",
    medcot_core::accuracy::AccuracyError => "accuracy",
    medcot_core::chain::ChainError => "chain",
    medcot_core::chain::VqaError => "vqa",
    medcot_core::kg::KgError => "kg",
    medcot_core::labels::LabelError => "labels",
    medcot_core::split::SplitError => "split",
    medcot_core::iir::IirError => "iir",
    std::io::Error => "io",
}

// ---------------------------------------------------------------------------
// Argument types
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "medcot",
    version,
    about = "CT tumor reasoning-chain toolkit: corpus building, judging, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn free-text reasoning into classified fact triplets
    ExtractTriples(ExtractTriplesArgs),
    /// Grade predicted reasoning chains against ground truth with a judge
    ScoreCot(ScoreCotArgs),
    /// Grade predicted answers for correctness
    EvalAccuracy(EvalAccuracyArgs),
    /// Knowledge-graph utilities
    #[command(subcommand)]
    Kg(KgCommand),
    /// Corpus-building pipeline
    #[command(subcommand)]
    Engine(EngineCommand),
    /// Split patient ids into train and test sets
    Split(SplitArgs),
    /// Merge fine-grained segmentation labels into the working label set
    Relabel(RelabelArgs),
    /// Print an organ's bounding box from a label volume
    Roi(RoiArgs),
    /// Simulate the organ-guided iterative reasoning loop
    Iir(IirArgs),
    /// Aggregate scorecards into report tables
    Report(ReportArgs),
}

/// Judge/backend options shared by judge-driven subcommands.
#[derive(Args, Debug)]
struct JudgeOpts {
    /// Run configuration file (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace every role's backend with this replay fixture (JSONL of
    /// {key, response_text})
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Refuse to run unless every backend is offline replay
    #[arg(long)]
    dry_run: bool,
}

impl JudgeOpts {
    fn load(&self) -> Result<(RunConfig, JudgeClient), DomainError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(fixture) = &self.replay {
            if cfg.roles.is_empty() {
                for role in Role::ALL {
                    cfg.roles.insert(
                        role,
                        RoleConfig {
                            model: FIXTURE_MODEL.into(),
                            backend: BackendSpec::Replay { path: fixture.clone() },
                            temperature: 0.0,
                            max_tokens: 2048,
                        },
                    );
                }
            } else {
                cfg.override_with_replay(fixture);
            }
        }
        if self.dry_run {
            let all_replay = !cfg.roles.is_empty()
                && cfg
                    .roles
                    .values()
                    .all(|r| matches!(r.backend, BackendSpec::Replay { .. }));
            if !all_replay {
                return Err(DomainError::custom(
                    "config",
                    "dry_run_needs_replay",
                    "--dry-run requires every role to use a replay backend (pass --replay or configure replay backends)",
                ));
            }
        }
        let client = cfg.build_client()?;
        Ok((cfg, client))
    }
}

#[derive(Args, Debug)]
struct ExtractTriplesArgs {
    /// Input JSONL of {id, text}
    #[arg(long = "in")]
    input: PathBuf,
    /// Output JSONL of {id, cot, low_confidence, residual_text}
    #[arg(long)]
    out: PathBuf,
    /// Treat each row's text as an already-extracted triple list instead
    /// of calling the extractor agent
    #[arg(long)]
    parse_only: bool,
    #[command(flatten)]
    judge: JudgeOpts,
}

#[derive(Args, Debug)]
struct ScoreCotArgs {
    /// Ground-truth corpus (question-record JSONL with reasoning chains)
    #[arg(long)]
    gt: PathBuf,
    /// Predictions JSONL of {id, model, text} or {id, model, cot}
    #[arg(long)]
    pred: PathBuf,
    /// Output scorecard JSONL
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    judge: JudgeOpts,
}

#[derive(Args, Debug)]
struct EvalAccuracyArgs {
    /// Ground-truth corpus (question-record JSONL)
    #[arg(long)]
    gt: PathBuf,
    /// Predictions JSONL of {id, model, text}
    #[arg(long)]
    pred: PathBuf,
    /// Output verdict JSONL
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-model subtask summary CSV here
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    judge: JudgeOpts,
}

#[derive(Subcommand, Debug)]
enum KgCommand {
    /// Load and validate an edge file, reporting edge and duplicate counts
    Load {
        /// Edge JSONL of {subject, relation, object, tier, organ}
        #[arg(long)]
        edges: PathBuf,
        /// Write the deduplicated, sorted edge list here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve the context subgraph around seed entities
    Query {
        /// Edge JSONL; omit to use the bundled demo graph
        #[arg(long)]
        edges: Option<PathBuf>,
        /// Organ scope (liver, pancreas, stomach, colon, esophagus)
        #[arg(long)]
        organ: String,
        /// Seed entity (repeatable)
        #[arg(long = "entity", required = true)]
        entities: Vec<String>,
        /// Hop budget from the seeds
        #[arg(long, default_value_t = 1)]
        hops: usize,
        /// Synonym map JSON of {"alias": "canonical"}
        #[arg(long)]
        synonyms: Option<PathBuf>,
        /// Emit edges as JSONL instead of rendered context lines
        #[arg(long)]
        jsonl: bool,
    },
}

#[derive(Subcommand, Debug)]
enum EngineCommand {
    /// Build question records from report cases
    Run(EngineRunArgs),
}

#[derive(Args, Debug)]
struct EngineRunArgs {
    /// Case JSONL of {patient_id, report_text, pathology_text}
    #[arg(long)]
    cases: PathBuf,
    /// Output directory (vqa.jsonl, traces.jsonl)
    #[arg(long)]
    out: PathBuf,
    /// Knowledge-graph edge JSONL; omit to use the bundled demo graph
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Calibration retries per reasoning phase
    #[arg(long, default_value_t = crate::engine::DEFAULT_MAX_CALIBRATION_RETRIES)]
    max_calibration_retries: u32,
    /// Re-reasoning loops granted by the consistency gate
    #[arg(long, default_value_t = crate::engine::DEFAULT_MAX_SUMMARIZER_RELOOPS)]
    max_summarizer_reloops: u32,
    #[command(flatten)]
    judge: JudgeOpts,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Text file with one patient id per line
    #[arg(long)]
    ids: PathBuf,
    /// Train fraction in (0, 1)
    #[arg(long)]
    ratio: f64,
    /// Shuffle seed
    #[arg(long)]
    seed: u64,
    /// Train id output (default: train_ids.txt next to --ids)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test id output (default: test_ids.txt next to --ids)
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RelabelArgs {
    /// Input label volume
    #[arg(long = "in")]
    input: PathBuf,
    /// Output label volume (native raw + sidecar)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RoiArgs {
    /// Input label volume (merged label space)
    #[arg(long = "in")]
    input: PathBuf,
    /// Organ name or synonym
    #[arg(long)]
    organ: String,
}

#[derive(Args, Debug)]
struct IirArgs {
    /// The question posed to the simulated model
    #[arg(long)]
    task: String,
    /// Scripted responses, JSONL of {text}, consumed one per round
    #[arg(long)]
    script: PathBuf,
    /// Label volume for per-organ bounding boxes
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Hard cap on rounds
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    max_rounds: usize,
    /// Write round traces here (JSONL) and print a run summary instead
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Scorecard JSONL produced by score-cot
    #[arg(long)]
    scores: PathBuf,
    /// Comma-separated grouping fields: model, task, organ
    #[arg(long)]
    group_by: Option<String>,
    /// Also write the table as CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Run configuration (JSON), for scoring weights
    #[arg(long)]
    config: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses argv and runs the selected subcommand, returning the process
/// exit code.
pub fn run_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", err.to_json());
            1
        }
    }
}

fn dispatch(command: Command) -> Result<(), DomainError> {
    match command {
        Command::ExtractTriples(args) => cmd_extract_triples(args),
        Command::ScoreCot(args) => cmd_score_cot(args),
        Command::EvalAccuracy(args) => cmd_eval_accuracy(args),
        Command::Kg(cmd) => cmd_kg(cmd),
        Command::Engine(EngineCommand::Run(args)) => cmd_engine_run(args),
        Command::Split(args) => cmd_split(args),
        Command::Relabel(args) => cmd_relabel(args),
        Command::Roi(args) => cmd_roi(args),
        Command::Iir(args) => cmd_iir(args),
        Command::Report(args) => cmd_report(args),
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TextRow {
    id: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CotRow {
    id: String,
    cot: CoTRecord,
    /// Triplets whose relation fell outside the lexicon and defaulted to
    /// the factual level.
    low_confidence: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    residual_text: String,
}

fn cmd_extract_triples(args: ExtractTriplesArgs) -> Result<(), DomainError> {
    let rows: Vec<TextRow> = read_jsonl(&args.input)?;
    let relations = RelationLexicon::builtin();
    let entities = EntityLexicon::builtin();
    let judge = if args.parse_only { None } else { Some(args.judge.load()?) };

    let mut out_rows = Vec::with_capacity(rows.len());
    let mut total_triples = 0usize;
    for row in &rows {
        let wrap = |e: DomainError| e.in_row(&row.id);
        let segmented = segment_cot(&row.text, DEFAULT_SUMMARY_MARKERS)
            .map_err(|e| wrap(e.into()))?;
        let list_text = match &judge {
            None => row.text.clone(),
            Some((cfg, client)) => {
                let prompt =
                    build_extraction_prompt(&segmented.reasoning_text).map_err(|e| wrap(e.into()))?;
                let req = cfg
                    .request_for(Role::Extractor, vec![Message::user(prompt)])
                    .map_err(|e| wrap(e.into()))?;
                client.complete(&req).map_err(|e| wrap(e.into()))?.text
            }
        };
        let doc = parse_triple_list(&list_text).map_err(|e| wrap(e.into()))?;
        let repaired: Vec<_> = doc
            .triples
            .iter()
            .map(|t| repair_slot_order(t, &relations, &entities).0)
            .collect();
        total_triples += repaired.len();
        let (chains, low_confidence) = chains_from_triplets(repaired, &relations);
        out_rows.push(CotRow {
            id: row.id.clone(),
            cot: segmented.with_chains(chains),
            low_confidence,
            residual_text: doc.residual_text,
        });
    }
    write_jsonl(&args.out, &out_rows)?;
    println!(
        "{}",
        serde_json::json!({ "rows": out_rows.len(), "triples": total_triples, "out": args.out })
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PredRow {
    id: String,
    model: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    cot: Option<CoTRecord>,
}

fn gt_index(path: &Path) -> Result<BTreeMap<String, VqaRecord>, DomainError> {
    let records: Vec<VqaRecord> = read_jsonl(path)?;
    validate_corpus(&records)?;
    Ok(records.into_iter().map(|r| (r.id.clone(), r)).collect())
}

fn pred_cot(row: &PredRow) -> Result<CoTRecord, DomainError> {
    if let Some(cot) = &row.cot {
        return Ok(cot.clone());
    }
    if let Some(text) = &row.text {
        return segment_cot(text, DEFAULT_SUMMARY_MARKERS).map_err(Into::into);
    }
    Err(DomainError::custom("score", "missing_prediction", "row has neither text nor cot"))
}

fn cmd_score_cot(args: ScoreCotArgs) -> Result<(), DomainError> {
    let gt = gt_index(&args.gt)?;
    let preds: Vec<PredRow> = read_jsonl(&args.pred)?;
    let (cfg, client) = args.judge.load()?;

    let mut records: Vec<ScorecardRecord> = Vec::with_capacity(preds.len());
    for pred in &preds {
        let wrap = |e: DomainError| e.in_row(&pred.id);
        let gt_record = gt.get(&pred.id).ok_or_else(|| {
            DomainError::custom("score", "unknown_sample", format!("no ground truth for id {}", pred.id))
        })?;
        let gt_cot = gt_record.cot_gt.as_ref().ok_or_else(|| {
            DomainError::custom(
                "score",
                "missing_ground_truth_chain",
                format!("record {} carries no reasoning chain", pred.id),
            )
        })?;
        let prompt =
            build_scoring_prompt(gt_cot, &pred_cot(pred).map_err(wrap)?).map_err(|e| wrap(e.into()))?;
        let req = cfg
            .request_for(Role::Scorer, vec![Message::user(prompt)])
            .map_err(|e| wrap(e.into()))?;
        let resp = client.complete(&req).map_err(|e| wrap(e.into()))?;
        let card = parse_scorecard(&resp.text).map_err(|e| wrap(e.into()))?;
        let record = ScorecardRecord::from_scorecard(
            &pred.id,
            &pred.model,
            gt_record.task.name(),
            gt_record.organ.name(),
            &card,
        )
        .map_err(|e| wrap(e.into()))?;
        records.push(record);
    }
    write_jsonl(&args.out, &records)?;

    let per_model = aggregate_scores(&records, &[GroupField::Model], &cfg.weights)?;
    let models: BTreeMap<&str, f64> = per_model
        .rows
        .iter()
        .map(|row| (row.key[0].as_str(), row.cot_e))
        .collect();
    let overall = medcot_core::rubric::cot_e(&records, &cfg.weights)?;
    println!(
        "{}",
        serde_json::json!({
            "samples": records.len(),
            "cot_e": overall,
            "cot_e_per_model": models,
            "out": args.out,
        })
    );
    Ok(())
}

fn cmd_eval_accuracy(args: EvalAccuracyArgs) -> Result<(), DomainError> {
    let gt = gt_index(&args.gt)?;
    let preds: Vec<PredRow> = read_jsonl(&args.pred)?;
    let needs_judge = {
        // Pure multiple-choice corpora grade without any backend.
        preds.iter().any(|p| {
            gt.get(&p.id)
                .map(|r| r.format == AnswerFormat::OpenEnded)
                .unwrap_or(true)
        })
    };
    let loaded = if needs_judge { Some(args.judge.load()?) } else { None };

    let mut records: Vec<VerdictRecord> = Vec::with_capacity(preds.len());
    for pred in &preds {
        let wrap = |e: DomainError| e.in_row(&pred.id);
        let gt_record = gt.get(&pred.id).ok_or_else(|| {
            DomainError::custom("accuracy", "unknown_sample", format!("no ground truth for id {}", pred.id))
        })?;
        let answer = pred.text.as_deref().ok_or_else(|| {
            DomainError::custom("accuracy", "missing_prediction", "row has no text field").in_row(&pred.id)
        })?;
        let verdict = match gt_record.format {
            AnswerFormat::MultipleChoice => {
                match_choice(&pred.id, answer, &gt_record.answer_gt, &gt_record.options)
                    .map_err(|e| wrap(e.into()))?
            }
            AnswerFormat::OpenEnded => {
                let (cfg, client) = loaded.as_ref().expect("judge loaded for open-ended");
                let prompt = build_semantic_prompt(&gt_record.question, &gt_record.answer_gt, answer)
                    .map_err(|e| wrap(e.into()))?;
                let req = cfg
                    .request_for(Role::SemanticJudge, vec![Message::user(prompt)])
                    .map_err(|e| wrap(e.into()))?;
                let resp = client.complete(&req).map_err(|e| wrap(e.into()))?;
                parse_verdict(&pred.id, &resp.text).map_err(|e| wrap(e.into()))?
            }
        };
        records.push(VerdictRecord {
            sample_id: verdict.sample_id,
            model: pred.model.clone(),
            task: gt_record.task.name().to_owned(),
            subtask: gt_record.subtask.clone(),
            organ: gt_record.organ.name().to_owned(),
            correct: verdict.correct,
            question_type: verdict.question_type,
            rationale: verdict.rationale,
        });
    }
    write_jsonl(&args.out, &records)?;

    let table = summary_table(&records)?;
    if let Some(path) = &args.summary {
        std::fs::write(path, table.to_csv())?;
    }
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_kg(cmd: KgCommand) -> Result<(), DomainError> {
    match cmd {
        KgCommand::Load { edges, out } => {
            let text = std::fs::read_to_string(&edges)?;
            let load = KnowledgeGraph::from_jsonl(&text)?;
            if let Some(out) = &out {
                std::fs::write(out, load.graph.to_jsonl())?;
            }
            println!(
                "{}",
                serde_json::json!({ "edges": load.graph.len(), "deduped": load.deduped })
            );
            Ok(())
        }
        KgCommand::Query { edges, organ, entities, hops, synonyms, jsonl } => {
            let graph = match &edges {
                Some(path) => KnowledgeGraph::from_jsonl(&std::fs::read_to_string(path)?)?.graph,
                None => KnowledgeGraph::builtin_demo(),
            };
            let organ = Organ::parse(&organ).ok_or_else(|| {
                DomainError::custom(
                    "kg",
                    "unknown_organ",
                    format!("organ {organ:?} is not one of liver, pancreas, stomach, colon, esophagus"),
                )
            })?;
            let synonyms = match &synonyms {
                Some(path) => SynonymMap::from_json(&std::fs::read_to_string(path)?)?,
                None => SynonymMap::default(),
            };
            let seeds: Vec<&str> = entities.iter().map(String::as_str).collect();
            let hits = graph.query(&seeds, organ, hops, &synonyms);
            if jsonl {
                for edge in &hits {
                    println!("{}", serde_json::to_string(edge).expect("edge serializes"));
                }
            } else {
                print!("{}", KnowledgeGraph::render_context(&hits));
            }
            Ok(())
        }
    }
}

#[derive(Debug, Deserialize)]
struct CaseRow {
    patient_id: String,
    report_text: String,
    #[serde(default)]
    pathology_text: String,
}

fn cmd_engine_run(args: EngineRunArgs) -> Result<(), DomainError> {
    let cases: Vec<CaseRow> = read_jsonl(&args.cases)?;
    let (run, client) = args.judge.load()?;
    let kg = match &args.kg {
        Some(path) => KnowledgeGraph::from_jsonl(&std::fs::read_to_string(path)?)?.graph,
        None => KnowledgeGraph::builtin_demo(),
    };
    let mut cfg = EngineConfig::new(&run, &client, &kg);
    cfg.max_calibration_retries = args.max_calibration_retries;
    cfg.max_summarizer_reloops = args.max_summarizer_reloops;

    let mut all_records: Vec<VqaRecord> = Vec::new();
    let mut traces: Vec<EngineTrace> = Vec::new();
    let mut done = 0usize;
    for case in &cases {
        let case_text = if case.pathology_text.trim().is_empty() {
            case.report_text.clone()
        } else {
            format!("{}\n\nPathology report:\n{}", case.report_text, case.pathology_text)
        };
        match extract_structured_features(&case_text, &run, &client) {
            Ok((report, extract_step)) => {
                let mut outcome =
                    run_case(&case.patient_id, &report, &cfg).map_err(|e| DomainError::from(e).in_row(&case.patient_id))?;
                outcome.trace.steps.insert(0, extract_step);
                if outcome.trace.final_state() == EngineState::Done {
                    done += 1;
                }
                all_records.extend(outcome.records);
                traces.push(outcome.trace);
            }
            Err(e) => {
                // Extraction failures close the trace instead of aborting
                // the whole batch.
                traces.push(EngineTrace {
                    patient_id: case.patient_id.clone(),
                    steps: vec![TraceStep {
                        state: EngineState::Failed,
                        role: Some(Role::Extractor),
                        key: None,
                        outcome: e.to_string(),
                        strategy: None,
                    }],
                    final_outcome: format!("failed: {e}"),
                    ..EngineTrace::default()
                });
            }
        }
    }
    validate_corpus(&all_records)?;

    std::fs::create_dir_all(&args.out)?;
    let vqa_path = args.out.join("vqa.jsonl");
    let trace_path = args.out.join("traces.jsonl");
    write_jsonl(&vqa_path, &all_records)?;
    write_jsonl(&trace_path, &traces)?;
    println!(
        "{}",
        serde_json::json!({
            "cases": cases.len(),
            "done": done,
            "failed": cases.len() - done,
            "records": all_records.len(),
            "vqa": vqa_path,
            "traces": trace_path,
        })
    );
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<(), DomainError> {
    let text = std::fs::read_to_string(&args.ids)?;
    let ids: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let split = split_patients(ids, args.ratio, args.seed)?;

    let sibling = |name: &str| {
        args.ids
            .parent()
            .map(|d| d.join(name))
            .unwrap_or_else(|| PathBuf::from(name))
    };
    let train_path = args.train.clone().unwrap_or_else(|| sibling("train_ids.txt"));
    let test_path = args.test.clone().unwrap_or_else(|| sibling("test_ids.txt"));
    std::fs::write(&train_path, split.train.join("\n") + "\n")?;
    std::fs::write(&test_path, split.test.join("\n") + "\n")?;
    println!(
        "{}",
        serde_json::json!({
            "train": split.train.len(),
            "test": split.test.len(),
            "train_path": train_path,
            "test_path": test_path,
        })
    );
    Ok(())
}

fn cmd_relabel(args: RelabelArgs) -> Result<(), DomainError> {
    let vol = read_volume(&args.input)?;
    let merged = vol.remap(&RemapTable::builtin())?;
    write_volume(&merged, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "dims": merged.dims(),
            "labels_in": vol.histogram().len(),
            "labels_out": merged.histogram().len(),
            "out": args.out,
        })
    );
    Ok(())
}

fn cmd_roi(args: RoiArgs) -> Result<(), DomainError> {
    let vol = read_volume(&args.input)?;
    let (label, _name) = match_organ(&args.organ)?;
    let roi = vol.roi(label)?;
    println!("{}", serde_json::to_string(&roi).expect("roi serializes"));
    Ok(())
}

fn cmd_iir(args: IirArgs) -> Result<(), DomainError> {
    #[derive(Deserialize)]
    struct ScriptRow {
        text: String,
    }
    let script: Vec<ScriptRow> = read_jsonl(&args.script)?;
    let volume = match &args.volume {
        Some(path) => Some(read_volume(path)?),
        None => None,
    };
    let lexicon = OrganLexicon::builtin();
    let cfg = IirConfig { max_rounds: args.max_rounds };

    let mut responses = script.into_iter().map(|r| r.text);
    let run = run_iir(&args.task, &lexicon, &cfg, volume.as_ref(), |_, _| {
        // An exhausted script answers silently, which mentions no organ
        // and lets the loop terminate.
        responses.next().unwrap_or_default()
    })?;

    if let Some(out) = &args.out {
        write_jsonl(out, &run.rounds)?;
        println!(
            "{}",
            serde_json::json!({
                "rounds": run.rounds.len(),
                "termination": run.termination,
                "visited": run.visited(),
                "final_response": run.final_response(),
                "out": out,
            })
        );
    } else {
        for round in &run.rounds {
            println!("{}", serde_json::to_string(round).expect("round serializes"));
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), DomainError> {
    let records: Vec<ScorecardRecord> = read_jsonl(&args.scores)?;
    let weights = match &args.config {
        Some(path) => RunConfig::from_path(path)?.weights,
        None => Default::default(),
    };
    let mut fields = Vec::new();
    if let Some(spec) = &args.group_by {
        for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let field = GroupField::parse(name).ok_or_else(|| {
                DomainError::custom(
                    "rubric",
                    "unknown_group_field",
                    format!("group field {name:?} is not one of model, task, organ"),
                )
            })?;
            fields.push(field);
        }
    }
    let table = aggregate_scores(&records, &fields, &weights)?;
    if let Some(path) = &args.csv {
        std::fs::write(path, table.to_csv())?;
    }
    print!("{}", table.render_text());
    Ok(())
}
