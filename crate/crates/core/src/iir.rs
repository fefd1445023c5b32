//! Iterative re-prompting that steers attention to one organ per round.
//!
//! A first round shows the model the whole scan plus the task text. Every
//! organ the response mentions joins a FIFO queue; each later round pops one
//! organ and re-asks the same task with the prior answer, an attention cue,
//! and a view cropped to that organ's region (with its bounding box when a
//! label volume is on hand). The loop stops when the queue drains or a
//! round budget is hit, whichever comes first.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{self, LabelVolume, Roi};

/// Sentence stem prepended to the focused organ name in later rounds.
pub const ATTENTION_PREFIX: &str = "The question requires greater attention to ";

/// Default cap on total rounds, including the first.
pub const DEFAULT_MAX_ROUNDS: usize = 8;

/// One element of a round's prompt, in presentation order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptPart {
    /// The full-volume rendering of the scan.
    GlobalVisual,
    /// The unchanged task text.
    TaskText { text: String },
    /// The model's answer from the named earlier round.
    PriorResponse { round: usize, text: String },
    /// The attention cue naming the focused organ.
    AttentionText { organ: String },
    /// A rendering cropped to the focused organ's region. The box is
    /// present when a label volume was supplied and contains the organ;
    /// without one the loop runs in pure protocol mode.
    LocalVisual { organ: String, roi: Option<Roi> },
}

/// Why a run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The organ queue drained: no response introduced an unseen organ.
    NoNewOrgans,
    /// The round budget was exhausted with organs still queued.
    MaxRounds,
}

/// Errors from the re-prompting loop.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum IirError {
    #[error("task text is empty")]
    EmptyTask,
    #[error("max_rounds must be at least 1")]
    ZeroRounds,
}

/// Tunables for [`run_iir`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IirConfig {
    /// Hard cap on rounds, including the first. Must be at least 1.
    pub max_rounds: usize,
}

impl Default for IirConfig {
    fn default() -> Self {
        IirConfig { max_rounds: DEFAULT_MAX_ROUNDS }
    }
}

/// Record of a single round: what was asked, what came back, and which
/// organs the response newly introduced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// 1-based round number.
    pub round: usize,
    /// Organ focused this round; `None` for the opening round.
    pub focus: Option<String>,
    /// Prompt parts presented, in order.
    pub parts: Vec<PromptPart>,
    /// The model's response text.
    pub response: String,
    /// Organs first mentioned in this response, in mention order.
    pub new_organs: Vec<String>,
}

/// A completed run: every round in order plus the stop reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IirRun {
    pub rounds: Vec<RoundTrace>,
    pub termination: Termination,
}

impl IirRun {
    /// The last response produced, which stands as the run's answer.
    pub fn final_response(&self) -> &str {
        self.rounds
            .last()
            .map(|r| r.response.as_str())
            .unwrap_or_default()
    }

    /// Organs that were focused, in focus (pop) order. Pairwise distinct
    /// by construction: an organ is focused at most once per run.
    pub fn visited(&self) -> Vec<&str> {
        self.rounds.iter().filter_map(|r| r.focus.as_deref()).collect()
    }
}

/// The attention cue for one organ: the fixed stem plus the organ name.
pub fn attention_text(organ: &str) -> String {
    format!("{ATTENTION_PREFIX}{organ}")
}

/// Prompt for the opening round: the whole scan and the task, nothing else.
pub fn first_round_parts(task: &str) -> Vec<PromptPart> {
    alloc::vec![
        PromptPart::GlobalVisual,
        PromptPart::TaskText { text: task.to_string() },
    ]
}

/// Prompt for a focused round: scan, task, the previous answer, the
/// attention cue, and the cropped organ view, in that order.
pub fn later_round_parts(
    task: &str,
    prior_round: usize,
    prior_text: &str,
    organ: &str,
    roi: Option<Roi>,
) -> Vec<PromptPart> {
    alloc::vec![
        PromptPart::GlobalVisual,
        PromptPart::TaskText { text: task.to_string() },
        PromptPart::PriorResponse { round: prior_round, text: prior_text.to_string() },
        PromptPart::AttentionText { organ: organ.to_string() },
        PromptPart::LocalVisual { organ: organ.to_string(), roi },
    ]
}

/// Flattens prompt parts into the text actually sent to a model, with
/// image slots rendered as bracketed placeholders.
pub fn render_parts(parts: &[PromptPart]) -> String {
    let mut out = String::new();
    for part in parts {
        match part {
            PromptPart::GlobalVisual => out.push_str("[image: full scan]"),
            PromptPart::TaskText { text } => out.push_str(text),
            PromptPart::PriorResponse { round, text } => {
                out.push_str(&format!("Previous answer (round {round}): {text}"));
            }
            PromptPart::AttentionText { organ } => out.push_str(&attention_text(organ)),
            PromptPart::LocalVisual { organ, roi } => match roi {
                Some(r) => out.push_str(&format!(
                    "[image: {organ} region, box h{:?} w{:?} d{:?}, {} voxels]",
                    r.bbox.h, r.bbox.w, r.bbox.d, r.voxel_count
                )),
                None => out.push_str(&format!("[image: {organ} region]")),
            },
        }
        out.push('\n');
    }
    out
}

/// Detects organ mentions in free text by whole-word phrase matching.
///
/// Phrases are matched case-insensitively on word boundaries, longest
/// phrase first at each position, so `left kidney` never double-counts as
/// a bare `kidney` mention and `delivery` never matches `liver`. Each
/// match yields a canonical organ name that [`labels::match_organ`]
/// resolves back to a label.
pub struct OrganLexicon {
    /// `(phrase as word sequence, canonical name)` pairs.
    phrases: Vec<(Vec<String>, String)>,
}

impl OrganLexicon {
    /// Lexicon over the built-in label vocabulary and its synonyms.
    ///
    /// Canonical names are in space-separated form (`kidney left`), which
    /// [`labels::match_organ`] accepts unchanged.
    pub fn builtin() -> OrganLexicon {
        let mut entries: Vec<(String, String)> = Vec::new();
        for name in labels::builtin_label_names() {
            if name == "background" {
                continue;
            }
            let display = name.replace('_', " ");
            entries.push((display.clone(), display));
        }
        for (alias, canonical) in labels::synonym_pairs() {
            entries.push((alias.replace('_', " "), canonical.replace('_', " ")));
        }
        OrganLexicon::from_entries(entries)
    }

    /// Lexicon from explicit `(phrase, canonical)` pairs.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, String)>) -> OrganLexicon {
        let phrases = entries
            .into_iter()
            .map(|(phrase, canonical)| (tokenize(&phrase), canonical))
            .filter(|(words, _)| !words.is_empty())
            .collect();
        OrganLexicon { phrases }
    }

    /// Number of phrases the lexicon recognizes.
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Canonical names of organs mentioned in `text`, deduplicated,
    /// in order of first mention.
    pub fn find_mentions(&self, text: &str) -> Vec<String> {
        let words = tokenize(text);
        let mut found: Vec<String> = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let mut best: Option<(usize, &str)> = None;
            for (phrase, canonical) in &self.phrases {
                let n = phrase.len();
                if i + n > words.len() {
                    continue;
                }
                let hit = phrase.iter().zip(&words[i..i + n]).all(|(p, w)| p == w);
                if hit && best.is_none_or(|(bn, _)| n > bn) {
                    best = Some((n, canonical));
                }
            }
            match best {
                Some((n, canonical)) => {
                    if !found.iter().any(|f| f == canonical) {
                        found.push(canonical.to_string());
                    }
                    i += n;
                }
                None => i += 1,
            }
        }
        found
    }
}

/// Organs a response asks to look at next: mentions in first-mention
/// order, minus any organ already handled.
pub fn extract_target_organs(
    response: &str,
    lexicon: &OrganLexicon,
    visited: &BTreeSet<String>,
) -> Vec<String> {
    lexicon
        .find_mentions(response)
        .into_iter()
        .filter(|organ| !visited.contains(organ))
        .collect()
}

/// Lowercased alphanumeric words of `text`, in order.
fn tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for low in ch.to_lowercase() {
                cur.push(low);
            }
        } else if !cur.is_empty() {
            words.push(core::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Runs the re-prompting loop to completion.
///
/// `respond` is called once per round with the 1-based round number and
/// the prompt parts, and returns the model's response. Each response is
/// scanned for organ mentions; organs never seen before join the queue,
/// and each later round focuses exactly one dequeued organ. When a
/// `volume` is supplied, the focused organ's label is looked up and its
/// region box rides along in the `LocalVisual` part (absent labels leave
/// the box empty rather than failing the run). The loop stops with
/// [`Termination::NoNewOrgans`] when the queue drains, or
/// [`Termination::MaxRounds`] when `cfg.max_rounds` rounds have run with
/// organs still waiting. An organ is focused at most once per run.
pub fn run_iir<F>(
    task: &str,
    lexicon: &OrganLexicon,
    cfg: &IirConfig,
    volume: Option<&LabelVolume>,
    mut respond: F,
) -> Result<IirRun, IirError>
where
    F: FnMut(usize, &[PromptPart]) -> String,
{
    let task = task.trim();
    if task.is_empty() {
        return Err(IirError::EmptyTask);
    }
    if cfg.max_rounds == 0 {
        return Err(IirError::ZeroRounds);
    }

    let mut queue: VecDeque<String> = VecDeque::new();
    let mut enqueued: BTreeSet<String> = BTreeSet::new();
    let mut rounds: Vec<RoundTrace> = Vec::new();

    loop {
        let round = rounds.len() + 1;
        let focus = if round == 1 {
            None
        } else {
            // Later rounds only start while the queue is nonempty.
            queue.pop_front()
        };
        let parts = match &focus {
            None => first_round_parts(task),
            Some(organ) => {
                let prior = rounds.last().expect("later rounds follow a prior round");
                let roi = volume.and_then(|vol| {
                    labels::match_organ(organ)
                        .ok()
                        .and_then(|(label, _)| vol.roi(label).ok())
                });
                later_round_parts(task, prior.round, &prior.response, organ, roi)
            }
        };
        let response = respond(round, &parts);
        let new_organs = extract_target_organs(&response, lexicon, &enqueued);
        for organ in &new_organs {
            enqueued.insert(organ.clone());
            queue.push_back(organ.clone());
        }
        rounds.push(RoundTrace { round, focus, parts, response, new_organs });

        if queue.is_empty() {
            return Ok(IirRun { rounds, termination: Termination::NoNewOrgans });
        }
        if rounds.len() >= cfg.max_rounds {
            return Ok(IirRun { rounds, termination: Termination::MaxRounds });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Bbox;
    use alloc::borrow::ToOwned;
    use alloc::vec;

    fn lex(entries: &[(&str, &str)]) -> OrganLexicon {
        OrganLexicon::from_entries(
            entries.iter().map(|(p, c)| ((*p).to_owned(), (*c).to_owned())),
        )
    }

    #[test]
    fn attention_text_is_prefix_plus_organ() {
        assert_eq!(
            attention_text("liver"),
            "The question requires greater attention to liver"
        );
    }

    #[test]
    fn first_round_has_exactly_scan_and_task() {
        let parts = first_round_parts("Where is the tumor?");
        assert_eq!(
            parts,
            vec![
                PromptPart::GlobalVisual,
                PromptPart::TaskText { text: "Where is the tumor?".to_owned() },
            ]
        );
    }

    #[test]
    fn later_round_has_exactly_five_parts_in_order() {
        let parts =
            later_round_parts("Where is the tumor?", 2, "In the liver.", "liver", None);
        assert_eq!(
            parts,
            vec![
                PromptPart::GlobalVisual,
                PromptPart::TaskText { text: "Where is the tumor?".to_owned() },
                PromptPart::PriorResponse { round: 2, text: "In the liver.".to_owned() },
                PromptPart::AttentionText { organ: "liver".to_owned() },
                PromptPart::LocalVisual { organ: "liver".to_owned(), roi: None },
            ]
        );
    }

    #[test]
    fn render_includes_cue_and_placeholders() {
        let text = render_parts(&later_round_parts("Task.", 1, "Prior.", "pancreas", None));
        assert!(text.contains("[image: full scan]"));
        assert!(text.contains("Task."));
        assert!(text.contains("Previous answer (round 1): Prior."));
        assert!(text.contains("The question requires greater attention to pancreas"));
        assert!(text.contains("[image: pancreas region]"));
    }

    #[test]
    fn builtin_lexicon_finds_word_bounded_mentions() {
        let lex = OrganLexicon::builtin();
        assert_eq!(lex.find_mentions("The Liver is enlarged."), vec!["liver"]);
        // Substrings inside words are not mentions.
        assert!(lex.find_mentions("delivery of the sliver").is_empty());
        // Synonyms canonicalize; longest phrase wins over its suffix.
        assert_eq!(lex.find_mentions("left kidney cyst"), vec!["kidney left"]);
        // Repeats collapse to one mention.
        assert_eq!(lex.find_mentions("liver, liver, liver"), vec!["liver"]);
        // Mention order is first appearance.
        assert_eq!(
            lex.find_mentions("pancreas abuts the stomach near the liver"),
            vec!["pancreas", "stomach", "liver"]
        );
        // Background is not an organ.
        assert!(lex.find_mentions("background noise").is_empty());
    }

    #[test]
    fn target_extraction_orders_mentions_and_skips_visited() {
        let lexicon = OrganLexicon::builtin();
        let response =
            "The splenomegaly suggests checking the spleen and liver for spread.";
        let none = BTreeSet::new();
        assert_eq!(
            extract_target_organs(response, &lexicon, &none),
            vec!["spleen", "liver"]
        );
        let visited: BTreeSet<String> = ["spleen".to_owned()].into();
        assert_eq!(extract_target_organs(response, &lexicon, &visited), vec!["liver"]);
        let both: BTreeSet<String> = ["spleen".to_owned(), "liver".to_owned()].into();
        assert!(extract_target_organs(response, &lexicon, &both).is_empty());
        assert!(extract_target_organs("no organ here", &lexicon, &none).is_empty());
    }

    #[test]
    fn builtin_mentions_resolve_back_to_labels() {
        let lexicon = OrganLexicon::builtin();
        for text in ["left kidney", "colon", "urinary bladder", "inferior vena cava"] {
            for organ in lexicon.find_mentions(text) {
                labels::match_organ(&organ).expect("mention resolves to a label");
            }
        }
        assert_eq!(
            labels::match_organ("colon").unwrap().1,
            "colorectum",
            "colon canonicalizes through the synonym table"
        );
    }

    #[test]
    fn empty_task_and_zero_budget_are_rejected() {
        let lexicon = lex(&[("liver", "liver")]);
        let cfg = IirConfig::default();
        let err = run_iir("  ", &lexicon, &cfg, None, |_, _| String::new()).unwrap_err();
        assert_eq!(err, IirError::EmptyTask);
        let err = run_iir("Task", &lexicon, &IirConfig { max_rounds: 0 }, None, |_, _| {
            String::new()
        })
        .unwrap_err();
        assert_eq!(err, IirError::ZeroRounds);
    }

    #[test]
    fn no_mentions_means_single_round() {
        let lexicon = lex(&[("liver", "liver")]);
        let run = run_iir("Task", &lexicon, &IirConfig::default(), None, |_, _| {
            "Nothing of note.".to_owned()
        })
        .unwrap();
        assert_eq!(run.rounds.len(), 1);
        assert_eq!(run.termination, Termination::NoNewOrgans);
        assert_eq!(run.rounds[0].focus, None);
        assert!(run.visited().is_empty());
        assert_eq!(run.final_response(), "Nothing of note.");
    }

    #[test]
    fn fifo_focus_order_and_clean_drain() {
        let lexicon = lex(&[("liver", "liver"), ("pancreas", "pancreas"), ("spleen", "spleen")]);
        // Round 1 mentions liver then pancreas; the liver round adds
        // spleen; later rounds add nothing, so the queue drains.
        let run = run_iir("Task", &lexicon, &IirConfig::default(), None, |round, parts| {
            match round {
                1 => "see the liver and the pancreas".to_owned(),
                2 => {
                    assert!(parts.iter().any(|p| matches!(
                        p,
                        PromptPart::AttentionText { organ } if organ == "liver"
                    )));
                    "also the spleen".to_owned()
                }
                _ => "no change".to_owned(),
            }
        })
        .unwrap();
        assert_eq!(run.termination, Termination::NoNewOrgans);
        assert_eq!(run.visited(), vec!["liver", "pancreas", "spleen"]);
        assert_eq!(run.rounds[0].new_organs, vec!["liver", "pancreas"]);
        assert_eq!(run.rounds[1].new_organs, vec!["spleen"]);
        assert!(run.rounds[2].new_organs.is_empty());
    }

    #[test]
    fn volume_attaches_region_boxes_to_focused_rounds() {
        // A 4x4x4 volume with liver (label 5) in a 2x1x2 block.
        let mut voxels = vec![0u16; 64];
        for (h, w, d) in [(1, 2, 1), (1, 2, 2), (2, 2, 1), (2, 2, 2)] {
            voxels[h * 16 + w * 4 + d] = 5;
        }
        let vol = LabelVolume::new([4, 4, 4], voxels, None).unwrap();
        let lexicon = OrganLexicon::builtin();
        let run = run_iir("Task", &lexicon, &IirConfig::default(), Some(&vol), |round, _| {
            match round {
                1 => "liver and spleen".to_owned(),
                _ => "done".to_owned(),
            }
        })
        .unwrap();
        assert_eq!(run.visited(), vec!["liver", "spleen"]);
        let liver_round = &run.rounds[1];
        let Some(PromptPart::LocalVisual { roi: Some(roi), .. }) = liver_round.parts.last()
        else {
            panic!("liver round carries a region box");
        };
        assert_eq!(roi.label, 5);
        assert_eq!(roi.bbox, Bbox { h: [1, 2], w: [2, 2], d: [1, 2] });
        assert_eq!(roi.voxel_count, 4);
        // Spleen is absent from the volume: box stays empty, run goes on.
        let Some(PromptPart::LocalVisual { roi: None, .. }) = run.rounds[2].parts.last()
        else {
            panic!("absent organ leaves the box empty");
        };
    }

    #[test]
    fn round_budget_stops_a_never_draining_queue() {
        let lexicon = OrganLexicon::builtin();
        let feed = [
            "liver and stomach", "pancreas", "spleen", "duodenum", "gallbladder",
            "esophagus", "colon", "small bowel", "trachea", "aorta",
        ];
        let run = run_iir("Task", &lexicon, &IirConfig::default(), None, |round, _| {
            feed[(round - 1) % feed.len()].to_owned()
        })
        .unwrap();
        assert_eq!(run.rounds.len(), DEFAULT_MAX_ROUNDS);
        assert_eq!(run.termination, Termination::MaxRounds);
    }

    #[test]
    fn an_organ_is_focused_at_most_once() {
        let lexicon = lex(&[("liver", "liver"), ("spleen", "spleen")]);
        // Every response re-mentions both organs; neither may be re-focused.
        let run = run_iir("Task", &lexicon, &IirConfig { max_rounds: 6 }, None, |_, _| {
            "liver and spleen again".to_owned()
        })
        .unwrap();
        assert_eq!(run.rounds.len(), 3);
        assert_eq!(run.termination, Termination::NoNewOrgans);
        assert_eq!(run.visited(), vec!["liver", "spleen"]);
    }

    #[test]
    fn prompt_parts_round_trip_through_json() {
        let parts = later_round_parts("T", 3, "P", "liver", None);
        let json = serde_json::to_string(&parts).unwrap();
        let back: Vec<PromptPart> = serde_json::from_str(&json).unwrap();
        assert_eq!(parts, back);
        assert!(json.contains("\"kind\":\"attention_text\""));
    }

    proptest::proptest! {
        #[test]
        fn loop_always_terminates_within_budget(
            responses in proptest::collection::vec(
                proptest::sample::select(alloc::vec![
                    "liver", "the liver and stomach", "pancreas near spleen",
                    "no finding", "colon wall", "esophagus", "duodenum and aorta",
                    "", "left kidney", "stomach stomach stomach",
                ]),
                1..6,
            ),
            max_rounds in 1usize..10,
        ) {
            let lexicon = OrganLexicon::builtin();
            let cfg = IirConfig { max_rounds };
            let run = run_iir("Task", &lexicon, &cfg, None, |round, _| {
                responses[(round - 1) % responses.len()].to_owned()
            })
            .unwrap();

            proptest::prop_assert!(!run.rounds.is_empty());
            proptest::prop_assert!(run.rounds.len() <= max_rounds);
            if run.termination == Termination::MaxRounds {
                proptest::prop_assert_eq!(run.rounds.len(), max_rounds);
            }
            // Round numbering is dense and 1-based; shapes alternate 2/5.
            for (i, r) in run.rounds.iter().enumerate() {
                proptest::prop_assert_eq!(r.round, i + 1);
                let want = if i == 0 { 2 } else { 5 };
                proptest::prop_assert_eq!(r.parts.len(), want);
                proptest::prop_assert_eq!(r.focus.is_none(), i == 0);
            }
            // No organ is focused twice.
            let mut seen = BTreeSet::new();
            for r in &run.rounds {
                if let Some(f) = &r.focus {
                    proptest::prop_assert!(seen.insert(f.clone()));
                }
            }
        }
    }
}
