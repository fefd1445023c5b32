//! Answer correctness: deterministic option matching, the semantic-judge
//! protocol for open-ended answers, and accuracy roll-ups.
//!
//! Multiple-choice answers are graded without any model in the loop:
//! predictions are normalized and matched against the option list, and
//! only a genuinely ambiguous prediction (one that matches two different
//! options) is an error — an unmatched prediction is simply wrong.
//! Open-ended answers go to a judge model that must reply with a
//! `VERDICT: correct|incorrect` line, parsed here.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rubric::{push_csv_row, round2};

/// Errors from answer grading.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AccuracyError {
    #[error("sample {sample_id}: prediction matches multiple options: {detail}")]
    AmbiguousPrediction { sample_id: String, detail: String },
    #[error("sample {sample_id}: ground-truth answer is not among the options")]
    GroundTruthNotInOptions { sample_id: String },
    #[error("sample {sample_id}: option list is empty")]
    NoOptions { sample_id: String },
    #[error("sample {sample_id}: judge output has no VERDICT line")]
    NoVerdictLine { sample_id: String },
    #[error("sample {sample_id}: unrecognized verdict {raw:?}")]
    MalformedVerdict { sample_id: String, raw: String },
    #[error("prompt input is empty")]
    EmptyInput,
    #[error("cannot aggregate an empty corpus")]
    EmptyCorpus,
}

/// The grading outcome for one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub sample_id: String,
    pub correct: bool,
    /// `multiple-choice` for option matching; for judged answers, the
    /// question type the judge reported (shape, density, ...).
    pub question_type: String,
    pub rationale: String,
}

/// Case-folds and strips punctuation: every non-alphanumeric char becomes
/// a space and whitespace runs collapse. Both sides of a comparison go
/// through this, so `(B).` and `b` meet in the middle.
fn norm_answer(raw: &str) -> String {
    let mut out = String::new();
    let mut pending_space = false;
    for ch in raw.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for low in ch.to_lowercase() {
                out.push(low);
            }
        } else {
            pending_space = true;
        }
    }
    out
}

/// Strips a leading option label (`A.`, `(a)`, `B:` ...) when it agrees
/// with the option's position; otherwise returns the option unchanged.
fn option_core(option: &str, letter: char) -> &str {
    let trimmed = option.trim();
    let unparen = trimmed.strip_prefix('(').unwrap_or(trimmed);
    let mut chars = unparen.chars();
    match chars.next() {
        Some(first) if first.eq_ignore_ascii_case(&letter) => {
            let rest = chars.as_str();
            let core = rest.trim_start_matches([')', '.', ':', '-', ' ', '\t']);
            // Require an explicit delimiter so an option like "Antrum"
            // does not lose its first letter for position A.
            if core.len() < rest.len() && !core.is_empty() {
                core
            } else if core.is_empty() && !trimmed.is_empty() {
                trimmed
            } else {
                trimmed
            }
        }
        _ => trimmed,
    }
}

fn option_letter(index: usize) -> char {
    (b'a' + (index % 26) as u8) as char
}

/// Grades a multiple-choice prediction against the option list.
///
/// A prediction matches an option when, after normalization, it equals
/// the full option text, the option text without its label, the bare
/// option letter, or letter-plus-text. No match grades as incorrect;
/// matching two *different* options is [`AccuracyError::AmbiguousPrediction`].
/// The ground truth must be one of the options.
pub fn match_choice(
    sample_id: &str,
    prediction: &str,
    ground_truth: &str,
    options: &[String],
) -> Result<Verdict, AccuracyError> {
    if options.is_empty() {
        return Err(AccuracyError::NoOptions {
            sample_id: sample_id.to_owned(),
        });
    }
    let gt_index = options
        .iter()
        .position(|o| o.trim() == ground_truth.trim())
        .ok_or_else(|| AccuracyError::GroundTruthNotInOptions {
            sample_id: sample_id.to_owned(),
        })?;
    let cand = norm_answer(prediction);
    let mut matched: Vec<usize> = Vec::new();
    for (i, option) in options.iter().enumerate() {
        let letter = option_letter(i);
        let core = norm_answer(option_core(option, letter));
        let full = norm_answer(option);
        let labeled = if core.is_empty() {
            String::from(letter)
        } else {
            format!("{letter} {core}")
        };
        let hit = !cand.is_empty()
            && (cand == full
                || cand == core
                || cand == String::from(letter)
                || cand == labeled);
        if hit {
            matched.push(i);
        }
    }
    match matched.as_slice() {
        [] => Ok(Verdict {
            sample_id: sample_id.to_owned(),
            correct: false,
            question_type: "multiple-choice".to_owned(),
            rationale: if cand.is_empty() {
                "empty prediction".to_owned()
            } else {
                format!("prediction {prediction:?} matched no option")
            },
        }),
        [only] => Ok(Verdict {
            sample_id: sample_id.to_owned(),
            correct: *only == gt_index,
            question_type: "multiple-choice".to_owned(),
            rationale: format!(
                "prediction matched option {}; ground truth is option {}",
                option_letter(*only).to_ascii_uppercase(),
                option_letter(gt_index).to_ascii_uppercase()
            ),
        }),
        many => Err(AccuracyError::AmbiguousPrediction {
            sample_id: sample_id.to_owned(),
            detail: many
                .iter()
                .map(|i| option_letter(*i).to_ascii_uppercase().to_string())
                .collect::<Vec<_>>()
                .join(", "),
        }),
    }
}

/// Builds the judge request for an open-ended answer.
///
/// The judge is told to classify the question type, name the clinical
/// focus, then decide whether the essential medical meaning and main
/// clinical finding are preserved — wording differences alone must not
/// fail an answer — and reply with `QUESTION TYPE:` and `VERDICT:` lines.
pub fn build_semantic_prompt(
    question: &str,
    ground_truth: &str,
    prediction: &str,
) -> Result<String, AccuracyError> {
    if question.trim().is_empty() || ground_truth.trim().is_empty() {
        return Err(AccuracyError::EmptyInput);
    }
    Ok(format!(
        "You are a medical answer verifier for CT tumor questions. First classify \
the question into one of: shape, boundary, density, count, TNM stage, other. \
Then identify the clinical focus of the question. Finally decide whether the \
prediction preserves the essential medical meaning and main clinical finding of \
the reference answer; differences in wording, order, or style do not matter.\n\
\n\
Question:\n{}\n\
\n\
Reference answer:\n{}\n\
\n\
Prediction:\n{}\n\
\n\
End your reply with exactly these two lines:\n\
QUESTION TYPE: <one of shape, boundary, density, count, TNM stage, other>\n\
VERDICT: correct or incorrect\n",
        question.trim(),
        ground_truth.trim(),
        prediction.trim()
    ))
}

/// Extracts the verdict (and reported question type) from judge output.
///
/// The first `VERDICT:` line decides; anything after it, including a
/// judge restating its verdict, stays in the rationale untouched.
/// Anything other than correct/incorrect on the deciding line is a
/// typed error rather than a silent guess.
pub fn parse_verdict(sample_id: &str, judge_text: &str) -> Result<Verdict, AccuracyError> {
    let mut verdict: Option<(usize, bool)> = None;
    let mut question_type: Option<String> = None;
    for (lineno, line) in judge_text.lines().enumerate() {
        let trimmed = line.trim();
        let upper = trimmed.to_uppercase();
        if verdict.is_none() {
            if let Some(rest) = upper.strip_prefix("VERDICT:") {
                let value = rest.trim().trim_matches(['.', '!', '"', '\'']).to_lowercase();
                match value.as_str() {
                    "correct" => verdict = Some((lineno, true)),
                    "incorrect" => verdict = Some((lineno, false)),
                    _ => {
                        return Err(AccuracyError::MalformedVerdict {
                            sample_id: sample_id.to_owned(),
                            raw: trimmed.to_owned(),
                        })
                    }
                }
                continue;
            }
        }
        if question_type.is_none() && upper.starts_with("QUESTION TYPE:") {
            let value = trimmed["QUESTION TYPE:".len()..].trim();
            if !value.is_empty() {
                question_type = Some(value.to_lowercase());
            }
        }
    }
    let (lineno, correct) = verdict.ok_or_else(|| AccuracyError::NoVerdictLine {
        sample_id: sample_id.to_owned(),
    })?;
    let question_type = question_type.unwrap_or_else(|| "open-ended".to_owned());
    let rationale: String = judge_text
        .lines()
        .enumerate()
        .filter(|(i, _)| *i != lineno)
        .map(|(_, l)| l)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_owned();
    Ok(Verdict {
        sample_id: sample_id.to_owned(),
        correct,
        question_type,
        rationale,
    })
}

/// One graded sample with its grouping metadata, as persisted to verdict
/// files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub sample_id: String,
    pub model: String,
    pub task: String,
    pub subtask: String,
    pub organ: String,
    pub correct: bool,
    #[serde(default)]
    pub question_type: String,
    #[serde(default)]
    pub rationale: String,
}

/// Fields an accuracy report can group by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccGroupField {
    Model,
    Task,
    Subtask,
    Organ,
}

impl AccGroupField {
    pub fn parse(name: &str) -> Option<AccGroupField> {
        match name.trim().to_ascii_lowercase().as_str() {
            "model" => Some(AccGroupField::Model),
            "task" => Some(AccGroupField::Task),
            "subtask" => Some(AccGroupField::Subtask),
            "organ" => Some(AccGroupField::Organ),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AccGroupField::Model => "model",
            AccGroupField::Task => "task",
            AccGroupField::Subtask => "subtask",
            AccGroupField::Organ => "organ",
        }
    }

    fn key_of<'a>(self, record: &'a VerdictRecord) -> &'a str {
        match self {
            AccGroupField::Model => &record.model,
            AccGroupField::Task => &record.task,
            AccGroupField::Subtask => &record.subtask,
            AccGroupField::Organ => &record.organ,
        }
    }
}

/// One accuracy row: group key, counts, and percent accuracy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub key: Vec<String>,
    pub n: usize,
    pub correct: usize,
    /// Percent, rounded to two decimals.
    pub accuracy: f64,
}

/// A grouped accuracy report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyTable {
    pub group_fields: Vec<String>,
    pub rows: Vec<AccuracyRow>,
}

/// Groups verdicts and computes percent accuracy per group, rows sorted
/// by key. An empty `group_by` yields one corpus-wide row.
pub fn aggregate_accuracy(
    records: &[VerdictRecord],
    group_by: &[AccGroupField],
) -> Result<AccuracyTable, AccuracyError> {
    if records.is_empty() {
        return Err(AccuracyError::EmptyCorpus);
    }
    let mut groups: BTreeMap<Vec<String>, (usize, usize)> = BTreeMap::new();
    for record in records {
        let key: Vec<String> = group_by
            .iter()
            .map(|f| f.key_of(record).to_owned())
            .collect();
        let entry = groups.entry(key).or_insert((0, 0));
        entry.0 += 1;
        entry.1 += usize::from(record.correct);
    }
    Ok(AccuracyTable {
        group_fields: group_by.iter().map(|f| f.name().to_owned()).collect(),
        rows: groups
            .into_iter()
            .map(|(key, (n, correct))| AccuracyRow {
                key,
                n,
                correct,
                accuracy: round2(100.0 * correct as f64 / n as f64),
            })
            .collect(),
    })
}

impl AccuracyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = self.group_fields.clone();
        header.extend(["n", "correct", "accuracy"].map(String::from));
        push_csv_row(&mut out, &header);
        for row in &self.rows {
            let mut fields = row.key.clone();
            fields.push(row.n.to_string());
            fields.push(row.correct.to_string());
            fields.push(format!("{:.2}", row.accuracy));
            push_csv_row(&mut out, &fields);
        }
        out
    }
}

/// The twelve benchmark columns in presentation order: position questions,
/// lesion-attribute questions, staging questions, then report grading.
pub const SUBTASK_ORDER: [(&str, &str); 12] = [
    ("Localization", "organ_position"),
    ("Localization", "tumor_position"),
    ("LesionAttribute", "segment_localization"),
    ("LesionAttribute", "shape"),
    ("LesionAttribute", "boundary"),
    ("LesionAttribute", "density"),
    ("LesionAttribute", "count"),
    ("LesionAttribute", "others"),
    ("TnmPrediction", "tumor_stage"),
    ("TnmPrediction", "node_stage"),
    ("TnmPrediction", "metastasis"),
    ("CotReport", "cot_report"),
];

/// One model's row across the twelve benchmark columns.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    /// Percent accuracy per column of [`SUBTASK_ORDER`]; `None` when the
    /// model has no samples for that column.
    pub cells: Vec<Option<f64>>,
    /// Unweighted mean over the present columns.
    pub avg: f64,
}

/// The per-model benchmark table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryTable {
    pub columns: Vec<String>,
    pub rows: Vec<SummaryRow>,
    pub notes: Vec<String>,
}

/// Builds the per-model benchmark table: one column per subtask in
/// canonical order and an `avg` column that is the unweighted mean of the
/// subtask accuracies. Missing columns are noted and excluded from the
/// mean, never imputed as zero.
pub fn summary_table(records: &[VerdictRecord]) -> Result<SummaryTable, AccuracyError> {
    if records.is_empty() {
        return Err(AccuracyError::EmptyCorpus);
    }
    let mut per_cell: BTreeMap<(String, &str), (usize, usize)> = BTreeMap::new();
    let mut models: Vec<String> = Vec::new();
    for record in records {
        if !models.contains(&record.model) {
            models.push(record.model.clone());
        }
        if let Some((_, subtask)) = SUBTASK_ORDER
            .iter()
            .find(|(task, subtask)| *task == record.task && *subtask == record.subtask)
        {
            let entry = per_cell
                .entry((record.model.clone(), subtask))
                .or_insert((0, 0));
            entry.0 += 1;
            entry.1 += usize::from(record.correct);
        }
    }
    models.sort();
    let mut notes = Vec::new();
    let mut rows = Vec::new();
    for model in models {
        let mut cells = Vec::with_capacity(SUBTASK_ORDER.len());
        let mut present = Vec::new();
        for (_, subtask) in SUBTASK_ORDER {
            match per_cell.get(&(model.clone(), subtask)) {
                Some((n, correct)) => {
                    let acc = round2(100.0 * *correct as f64 / *n as f64);
                    cells.push(Some(acc));
                    present.push(acc);
                }
                None => {
                    cells.push(None);
                    notes.push(format!("{model}: no samples for {subtask}"));
                }
            }
        }
        let avg = round2(present.iter().sum::<f64>() / present.len() as f64);
        rows.push(SummaryRow { model, cells, avg });
    }
    Ok(SummaryTable {
        columns: SUBTASK_ORDER.iter().map(|(_, s)| (*s).to_owned()).collect(),
        rows,
        notes,
    })
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = alloc::vec![String::from("model")];
        header.extend(self.columns.iter().cloned());
        header.push(String::from("avg"));
        push_csv_row(&mut out, &header);
        for row in &self.rows {
            let mut fields = alloc::vec![row.model.clone()];
            for cell in &row.cells {
                fields.push(match cell {
                    Some(v) => format!("{v:.2}"),
                    None => String::new(),
                });
            }
            fields.push(format!("{:.2}", row.avg));
            push_csv_row(&mut out, &fields);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn opts(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn matches_full_text_bare_letter_and_labeled_forms() {
        let options = opts(&["A. Right upper abdomen", "B. Left lower abdomen"]);
        let gt = "A. Right upper abdomen";
        for pred in [
            "A. Right upper abdomen",
            "a. right upper abdomen",
            "A",
            "a",
            "(A)",
            "A.",
            "Right upper abdomen",
            "right UPPER abdomen.",
        ] {
            let v = match_choice("s1", pred, gt, &options).unwrap();
            assert!(v.correct, "pred {pred:?} should be correct");
        }
        for pred in ["B", "Left lower abdomen", "b. left lower abdomen"] {
            let v = match_choice("s1", pred, gt, &options).unwrap();
            assert!(!v.correct, "pred {pred:?} should be incorrect");
        }
    }

    #[test]
    fn unlabeled_options_accept_synthesized_labels() {
        let options = opts(&["Round", "Irregular", "Lobulated"]);
        let v = match_choice("s2", "b", "Irregular", &options).unwrap();
        assert!(v.correct);
        let v = match_choice("s2", "B. Irregular", "Irregular", &options).unwrap();
        assert!(v.correct);
        let v = match_choice("s2", "irregular", "Irregular", &options).unwrap();
        assert!(v.correct);
    }

    #[test]
    fn unmatched_prediction_is_incorrect_not_an_error() {
        let options = opts(&["A. One", "B. Two"]);
        let v = match_choice("s3", "the answer is probably A", "A. One", &options).unwrap();
        assert!(!v.correct);
        assert!(v.rationale.contains("matched no option"));
        let v = match_choice("s3", "E", "A. One", &options).unwrap();
        assert!(!v.correct);
        let v = match_choice("s3", "...", "A. One", &options).unwrap();
        assert!(!v.correct);
        assert_eq!(v.rationale, "empty prediction");
    }

    #[test]
    fn ambiguous_predictions_are_typed_errors() {
        let options = opts(&["A. red", "red"]);
        let err = match_choice("s4", "red", "red", &options).unwrap_err();
        assert!(matches!(err, AccuracyError::AmbiguousPrediction { .. }));
    }

    #[test]
    fn ground_truth_must_be_an_option() {
        let options = opts(&["A. One", "B. Two"]);
        assert_eq!(
            match_choice("s5", "A", "C. Three", &options),
            Err(AccuracyError::GroundTruthNotInOptions { sample_id: "s5".into() })
        );
        assert_eq!(
            match_choice("s5", "A", "A", &[]),
            Err(AccuracyError::NoOptions { sample_id: "s5".into() })
        );
    }

    #[test]
    fn option_core_strips_only_positional_labels() {
        assert_eq!(option_core("A. Right flank", 'a'), "Right flank");
        assert_eq!(option_core("(b) mass", 'b'), "mass");
        assert_eq!(option_core("C: three", 'c'), "three");
        // Leading letter that is a real word stays intact.
        assert_eq!(option_core("Antrum", 'a'), "Antrum");
        assert_eq!(option_core("B", 'b'), "B");
    }

    #[test]
    fn verdict_parsing_reads_first_verdict_and_question_type() {
        let text = "QUESTION TYPE: density\nThe prediction mentions hypodensity, matching.\nVERDICT: incorrect\nA restated conclusion changes nothing.\nVERDICT: Correct.";
        let v = parse_verdict("s6", text).unwrap();
        assert!(!v.correct, "the first verdict line decides");
        assert_eq!(v.question_type, "density");
        // Everything but the deciding line is rationale, restatements included.
        assert!(v.rationale.contains("A restated conclusion"));
        assert!(v.rationale.contains("VERDICT: Correct"));
        assert!(!v.rationale.contains("VERDICT: incorrect"));
    }

    #[test]
    fn verdict_errors_are_typed() {
        assert_eq!(
            parse_verdict("s7", "no conclusion here"),
            Err(AccuracyError::NoVerdictLine { sample_id: "s7".into() })
        );
        assert!(matches!(
            parse_verdict("s7", "VERDICT: mostly correct"),
            Err(AccuracyError::MalformedVerdict { .. })
        ));
    }

    #[test]
    fn semantic_prompt_carries_protocol_and_inputs() {
        let p = build_semantic_prompt("What is the density?", "hypodense", "low attenuation").unwrap();
        assert!(p.contains("essential medical meaning and main clinical finding"));
        assert!(p.contains("shape, boundary, density, count, TNM stage, other"));
        assert!(p.contains("QUESTION TYPE:"));
        assert!(p.contains("VERDICT: correct or incorrect"));
        assert!(p.contains("hypodense"));
        assert!(p.contains("low attenuation"));
        assert_eq!(
            build_semantic_prompt(" ", "x", "y"),
            Err(AccuracyError::EmptyInput)
        );
    }

    fn verdict_rec(model: &str, task: &str, subtask: &str, organ: &str, correct: bool) -> VerdictRecord {
        VerdictRecord {
            sample_id: format!("{model}-{subtask}-{correct}"),
            model: model.to_owned(),
            task: task.to_owned(),
            subtask: subtask.to_owned(),
            organ: organ.to_owned(),
            correct,
            question_type: String::new(),
            rationale: String::new(),
        }
    }

    #[test]
    fn grouped_accuracy_counts_and_rounds() {
        let records = vec![
            verdict_rec("m1", "Localization", "organ_position", "liver", true),
            verdict_rec("m1", "Localization", "organ_position", "colon", true),
            verdict_rec("m1", "Localization", "tumor_position", "liver", false),
            verdict_rec("m2", "Localization", "organ_position", "liver", true),
        ];
        let table = aggregate_accuracy(&records, &[AccGroupField::Model]).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].key, vec!["m1".to_owned()]);
        assert_eq!(table.rows[0].n, 3);
        assert_eq!(table.rows[0].correct, 2);
        assert_eq!(table.rows[0].accuracy, 66.67);
        let csv = table.to_csv();
        assert!(csv.starts_with("model,n,correct,accuracy\n"));
        assert!(csv.contains("m1,3,2,66.67\n"));
        assert!(aggregate_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn summary_table_orders_columns_and_averages_unweighted() {
        let mut records = Vec::new();
        for (task, subtask) in SUBTASK_ORDER {
            records.push(verdict_rec("m1", task, subtask, "liver", true));
        }
        // m2: organ_position at 50% (2 of 4), everything else perfect.
        for (task, subtask) in SUBTASK_ORDER {
            records.push(verdict_rec("m2", task, subtask, "liver", true));
        }
        for i in 0..3 {
            let mut r = verdict_rec("m2", "Localization", "organ_position", "liver", i == 0);
            r.sample_id = format!("m2-extra-{i}");
            records.push(r);
        }
        let table = summary_table(&records).unwrap();
        assert_eq!(table.columns[0], "organ_position");
        assert_eq!(table.columns[11], "cot_report");
        assert_eq!(table.rows[0].model, "m1");
        assert_eq!(table.rows[0].avg, 100.0);
        let m2 = &table.rows[1];
        assert_eq!(m2.cells[0], Some(50.0)); // 2 of 4 correct
        assert_eq!(m2.avg, round2((50.0 + 11.0 * 100.0) / 12.0));
        assert!(table.notes.is_empty());
        let csv = table.to_csv();
        assert!(csv.starts_with("model,organ_position,tumor_position,segment_localization,"));
    }

    #[test]
    fn summary_table_notes_missing_columns_instead_of_zeroing() {
        let records = vec![verdict_rec("m1", "Localization", "organ_position", "liver", true)];
        let table = summary_table(&records).unwrap();
        assert_eq!(table.rows[0].cells[0], Some(100.0));
        assert_eq!(table.rows[0].cells[1], None);
        assert_eq!(table.rows[0].avg, 100.0);
        assert_eq!(table.notes.len(), 11);
    }
}
