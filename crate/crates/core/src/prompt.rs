//! Zero-shot prompt templates for the structured-rationale format and the
//! two free-text baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{DocumentPair, FeatureKey, FINAL_SCORE_KEY, OUTPUT_KEY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// Structured ten-key rationale.
    Cave,
    /// Chain-of-thought baseline.
    Cot,
    /// Variable-guided baseline.
    Promptav,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Cave, PromptKind::Cot, PromptKind::Promptav];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Cave => "cave",
            PromptKind::Cot => "cot",
            PromptKind::Promptav => "promptav",
        }
    }

    /// Whether responses are structured rationales (as opposed to free text
    /// carrying a confidence score).
    pub fn is_structured(self) -> bool {
        matches!(self, PromptKind::Cave)
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cave" => Ok(PromptKind::Cave),
            "cot" => Ok(PromptKind::Cot),
            "promptav" => Ok(PromptKind::Promptav),
            other => Err(format!("unknown prompt kind {other:?} (cave|cot|promptav)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub pair_id: String,
    pub text: String,
}

const TASK: &str = "Task: On a scale of 0 to 1, with 0 indicating low confidence and 1 indicating high confidence, please provide a general assessment of the likelihood that Text 1 and Text 2 were written by the same author. Your answer should reflect a moderate level of strictness in scoring.";

const VARIABLES_INTRO: &str = "Here are some relevant variables to this problem.";

const COT_TRIGGER: &str = "Let's think step by step.";

const PROMPTAV_PLAN: &str = "First step: Understand the problem, extracting relevant variables and devise a plan to solve the problem. Then, carry out the plan and solve the problem step by step. Finally, show the confidence score";

fn variable_list() -> String {
    FeatureKey::ALL
        .iter()
        .enumerate()
        .map(|(i, k)| format!("{}. {}{}\n", i + 1, k.as_str(), k.prompt_hint()))
        .collect()
}

/// Keys the structured prompt asks for, in dictionary order. The output key
/// is introduced separately by the instruction text.
pub fn dictionary_keys() -> Vec<&'static str> {
    FeatureKey::ALL
        .iter()
        .map(|k| k.as_str())
        .chain([FINAL_SCORE_KEY])
        .collect()
}

fn format_instruction() -> String {
    let keys = dictionary_keys()
        .iter()
        .map(|k| format!("'{k}'"))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "Provide the answer in a Python JSON format. Use the following keys for your dictionary: {keys}. \
Apart from the '{FINAL_SCORE_KEY}', everything else must have a text value; also, the text should include a concluding YES/NO/MAYBE about whether the two texts are similar or not with respect to the key at hand. \
Finally, provide an '{OUTPUT_KEY}' key in your dictionary, which says YES if the two texts are written by the same author, and NO otherwise."
    )
}

/// Instruction block of `kind`, without the document slots.
pub fn instructions(kind: PromptKind) -> String {
    match kind {
        PromptKind::Cave => format!(
            "{TASK} {VARIABLES_INTRO}\n{}{}",
            variable_list(),
            format_instruction()
        ),
        PromptKind::Cot => format!("{TASK} {COT_TRIGGER}"),
        PromptKind::Promptav => format!(
            "{TASK} {VARIABLES_INTRO}\n{}{PROMPTAV_PLAN}",
            variable_list()
        ),
    }
}

/// Renders the prompt for one pair. Documents are inserted verbatim.
pub fn build_prompt(kind: PromptKind, pair: &DocumentPair) -> RenderedPrompt {
    let text = format!(
        "{}\n\nText1: {}\n\nText2: {}\n",
        instructions(kind),
        pair.text1,
        pair.text2
    );
    RenderedPrompt {
        kind,
        pair_id: pair.pair_id.clone(),
        text,
    }
}
