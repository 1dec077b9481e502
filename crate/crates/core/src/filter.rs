//! Silver-rationale filtering: a response survives only if it parses, its
//! output matches the gold label, and it is fully consistent. Survivors are
//! exported as chat-format fine-tuning records.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ModelResponse;
use crate::model::{BinLabel, DocumentPair, RationaleRecord, TrainingExample};
use crate::parser::parse_rationale;
use crate::prompt::{build_prompt, PromptKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterStage {
    Format,
    Accuracy,
    Consistency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub pair_id: String,
    pub response_index: usize,
    pub passed: bool,
    pub failed_stage: Option<FilterStage>,
    pub detail: String,
}

/// Unmodified teacher text of every response, kept next to the export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAudit {
    pub pair_id: String,
    pub response_index: usize,
    pub passed: bool,
    pub raw_text: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutput {
    pub kept: Vec<TrainingExample>,
    pub decisions: Vec<FilterDecision>,
    pub audit: Vec<RawAudit>,
}

impl FilterOutput {
    pub fn pass_rate(&self) -> f64 {
        if self.decisions.is_empty() {
            0.0
        } else {
            self.kept.len() as f64 / self.decisions.len() as f64
        }
    }
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("response refers to unknown pair_id {0:?}")]
    UnknownPairId(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

/// Score and label agree, and intermediate labels lean the same way.
/// Deliberately independent of [`crate::metrics`].
fn fully_consistent(record: &RationaleRecord) -> Result<(), String> {
    let score = record.final_score().value();
    let (mut toward, mut against) = (0usize, 0usize);
    for label in record.intermediates() {
        use crate::model::TriLabel::*;
        match (record.output(), label) {
            (_, Maybe) => toward += 1,
            (BinLabel::Yes, Yes) | (BinLabel::No, No) => toward += 1,
            _ => against += 1,
        }
    }
    let score_ok = match record.output() {
        BinLabel::Yes => score >= 0.5,
        BinLabel::No => score <= 0.5,
    };
    let mut problems = Vec::new();
    if !score_ok {
        problems.push(format!(
            "final score {} disagrees with output {}",
            record.final_score().literal(),
            record.output()
        ));
    }
    if toward <= against {
        problems.push(format!(
            "intermediate labels {toward} toward vs {against} against output {}",
            record.output()
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// Applies format, accuracy and consistency filters in that order. Every
/// response gets exactly one decision naming its first failed stage.
pub fn filter_records(
    pairs: &[DocumentPair],
    responses: &[ModelResponse],
) -> Result<FilterOutput, FilterError> {
    let by_id: HashMap<&str, &DocumentPair> =
        pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let mut out = FilterOutput::default();
    for response in responses {
        let pair = by_id
            .get(response.pair_id.as_str())
            .ok_or_else(|| FilterError::UnknownPairId(response.pair_id.clone()))?;
        let (failed_stage, detail, record) = match parse_rationale(&response.text, &pair.pair_id) {
            Err(e) => (Some(FilterStage::Format), e.to_string(), None),
            Ok(record) if record.output() != pair.gold => (
                Some(FilterStage::Accuracy),
                format!("output {} but gold {}", record.output(), pair.gold),
                None,
            ),
            Ok(record) => match fully_consistent(&record) {
                Err(why) => (Some(FilterStage::Consistency), why, None),
                Ok(()) => (None, "kept".to_string(), Some(record)),
            },
        };
        if let Some(record) = record {
            out.kept.push(TrainingExample {
                pair_id: pair.pair_id.clone(),
                prompt_text: build_prompt(PromptKind::Cave, pair).text,
                response_text: record.to_canonical_json(),
                gold: pair.gold,
            });
        }
        out.audit.push(RawAudit {
            pair_id: response.pair_id.clone(),
            response_index: response.response_index,
            passed: failed_stage.is_none(),
            raw_text: response.text.clone(),
        });
        out.decisions.push(FilterDecision {
            pair_id: response.pair_id.clone(),
            response_index: response.response_index,
            passed: failed_stage.is_none(),
            failed_stage,
            detail,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: String,
    pub content: String,
}

/// One line of the exported training file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingLine {
    pub pair_id: String,
    pub messages: Vec<ChatTurn>,
    pub gold: BinLabel,
}

impl From<&TrainingExample> for TrainingLine {
    fn from(ex: &TrainingExample) -> Self {
        TrainingLine {
            pair_id: ex.pair_id.clone(),
            messages: vec![
                ChatTurn {
                    role: "user".into(),
                    content: ex.prompt_text.clone(),
                },
                ChatTurn {
                    role: "assistant".into(),
                    content: ex.response_text.clone(),
                },
            ],
            gold: ex.gold,
        }
    }
}

impl TrainingLine {
    pub fn into_example(self) -> Option<TrainingExample> {
        let mut prompt = None;
        let mut response = None;
        for turn in self.messages {
            match turn.role.as_str() {
                "user" => prompt = Some(turn.content),
                "assistant" => response = Some(turn.content),
                _ => {}
            }
        }
        Some(TrainingExample {
            pair_id: self.pair_id,
            prompt_text: prompt?,
            response_text: response?,
            gold: self.gold,
        })
    }
}

/// Writes one chat-format record per line; returns the count written.
pub fn export_training_jsonl(
    examples: &[TrainingExample],
    path: &Path,
) -> Result<usize, FilterError> {
    write_jsonl(path, examples.iter().map(TrainingLine::from))
}

pub fn read_training_jsonl(path: &Path) -> Result<Vec<TrainingLine>, FilterError> {
    read_jsonl(path)
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    items: impl IntoIterator<Item = T>,
) -> Result<usize, FilterError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut n = 0;
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|source| FilterError::Json {
            line: n + 1,
            source,
        })?;
        w.write_all(b"\n")?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, FilterError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| FilterError::Json {
                line: idx + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::model::{FeatureAnalysis, FeatureKey, FinalScore};

    fn pair(id: &str, gold: BinLabel) -> DocumentPair {
        DocumentPair::new(id, "alpha text", "beta text", gold, "t").unwrap()
    }

    fn response(id: &str, index: usize, text: String) -> ModelResponse {
        ModelResponse {
            pair_id: id.into(),
            response_index: index,
            text,
            latency: Duration::ZERO,
            endpoint_model: "m".into(),
            cached: false,
        }
    }

    fn rationale(labels: [&str; 8], score: &str, output: BinLabel) -> String {
        let features = FeatureKey::ALL
            .iter()
            .zip(labels)
            .map(|(&k, l)| FeatureAnalysis::new(k, format!("Observed. {l}")).unwrap())
            .collect();
        RationaleRecord::new("x", features, FinalScore::parse(score).unwrap(), output)
            .unwrap()
            .to_canonical_json()
    }

    #[test]
    fn stages_in_order() {
        let pairs = vec![pair("a", BinLabel::No), pair("b", BinLabel::Yes)];
        let no = rationale(["NO"; 8], "0.2", BinLabel::No);
        let inconsistent = rationale(["NO"; 8], "0.9", BinLabel::Yes);
        let responses = vec![
            response("a", 0, no.clone()),
            response("a", 1, "garbage".into()),
            response("b", 0, no),
            response("b", 1, inconsistent),
        ];
        let out = filter_records(&pairs, &responses).unwrap();
        let stages: Vec<_> = out.decisions.iter().map(|d| d.failed_stage).collect();
        assert_eq!(
            stages,
            [
                None,
                Some(FilterStage::Format),
                Some(FilterStage::Accuracy),
                Some(FilterStage::Consistency)
            ]
        );
        assert_eq!(out.kept.len(), 1);
        assert!(out.kept[0].prompt_text.contains("Text1: alpha text"));
        assert_eq!(out.audit[1].raw_text, "garbage");
        assert!(out
            .decisions
            .iter()
            .all(|d| d.passed == d.failed_stage.is_none()));
    }

    #[test]
    fn multiple_survivors_per_pair() {
        let pairs = vec![pair("a", BinLabel::No)];
        let text = rationale(["NO"; 8], "0.2", BinLabel::No);
        let responses = vec![response("a", 0, text.clone()), response("a", 1, text)];
        assert_eq!(filter_records(&pairs, &responses).unwrap().kept.len(), 2);
    }

    #[test]
    fn unknown_pair() {
        let err = filter_records(&[], &[response("zz", 0, String::new())]).unwrap_err();
        assert!(matches!(err, FilterError::UnknownPairId(id) if id == "zz"));
    }

    #[test]
    fn export_writes_chat_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        assert_eq!(export_training_jsonl(&[], &path).unwrap(), 0);
        assert_eq!(fs::read_to_string(&path).unwrap(), "");

        let ex = TrainingExample {
            pair_id: "a".into(),
            prompt_text: "P".into(),
            response_text: "R".into(),
            gold: BinLabel::Yes,
        };
        let n = export_training_jsonl(&[ex.clone(), ex.clone(), ex.clone()], &path).unwrap();
        assert_eq!(n, 3);
        let content = fs::read_to_string(&path).unwrap();
        assert!(content.ends_with('\n'));
        for line in content.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["messages"][0]["role"], "user");
            assert_eq!(v["messages"][1]["content"], "R");
            assert_eq!(v["gold"], "YES");
        }
        let back = read_training_jsonl(&path).unwrap();
        assert_eq!(back[0].clone().into_example().unwrap(), ex);
    }
}
