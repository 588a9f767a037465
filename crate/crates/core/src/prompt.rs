//! Composite prompts: context text, soft sensor tokens and the task instruction,
//! plus the byte-level token stream handed to the language model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::AlignedFeatures;
use crate::error::{Error, Result};
use crate::pressure::{PressureStats, SensorGeometry};
use crate::tensor::Tensor;

pub const SENSOR_OPEN: &str = "<sensor>";
pub const SENSOR_CLOSE: &str = "</sensor>";
pub const ANSWER_DELIMITER: &str = "assistant:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Description,
    Analysis,
    Correction,
    Question,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::Description,
        TaskType::Analysis,
        TaskType::Correction,
        TaskType::Question,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Description => "description",
            TaskType::Analysis => "analysis",
            TaskType::Correction => "correction",
            TaskType::Question => "question",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown task type {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub task_type: TaskType,
    pub text: String,
}

impl TaskInstruction {
    pub fn new(task_type: TaskType, text: impl Into<String>) -> Self {
        Self {
            task_type,
            text: text.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextLevel {
    Feature,
    Structure,
    Statistical,
    Semantic,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ContextPayload {
    Text(String),
    Features(AlignedFeatures),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextBlock {
    level: ContextLevel,
    payload: ContextPayload,
}

impl ContextBlock {
    pub fn text(level: ContextLevel, text: impl Into<String>) -> Result<Self> {
        if level == ContextLevel::Feature {
            return Err(Error::config("feature-level context carries embeddings, not text"));
        }
        Ok(Self {
            level,
            payload: ContextPayload::Text(text.into()),
        })
    }

    pub fn features(features: AlignedFeatures) -> Self {
        Self {
            level: ContextLevel::Feature,
            payload: ContextPayload::Features(features),
        }
    }

    pub fn level(&self) -> ContextLevel {
        self.level
    }

    pub fn payload(&self) -> &ContextPayload {
        &self.payload
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.payload {
            ContextPayload::Text(s) => Some(s),
            ContextPayload::Features(_) => None,
        }
    }
}

pub fn structure_text(g: &SensorGeometry) -> String {
    format!(
        "sensor grid {}x{}, pitch {:.1}mm, interval {:.1}ms, range {}-{}",
        g.rows, g.cols, g.spacing_mm, g.sampling_interval_ms, g.value_min, g.value_max
    )
}

pub fn stats_text(st: &PressureStats) -> String {
    format!(
        "pressure stats: max {:.4}, min {:.4}, mean {:.4}, var {:.4}",
        st.max, st.min, st.mean, st.variance
    )
}

pub fn build_structure_context(g: &SensorGeometry) -> ContextBlock {
    ContextBlock {
        level: ContextLevel::Structure,
        payload: ContextPayload::Text(structure_text(g)),
    }
}

pub fn build_stat_context(st: &PressureStats) -> ContextBlock {
    ContextBlock {
        level: ContextLevel::Statistical,
        payload: ContextPayload::Text(stats_text(st)),
    }
}

/// Backslash-escapes `\` and the sensor markers so user text cannot forge them.
pub fn escape_text(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace(SENSOR_OPEN, "\\<sensor>")
        .replace(SENSOR_CLOSE, "\\</sensor>")
}

pub fn unescape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some(n) => out.push(n),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Text(String),
    Soft(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositePrompt {
    pub segments: Vec<Segment>,
}

impl CompositePrompt {
    pub fn soft_token_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Soft(t) => t.rows(),
                Segment::Text(_) => 0,
            })
            .sum()
    }

    pub fn soft_segment_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Soft(_))).count()
    }

    /// Diagnostic dump; soft segments render as `[N soft tokens]`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Text(t) => out.push_str(t),
                Segment::Soft(t) => out.push_str(&format!("[{} soft tokens]", t.rows())),
            }
        }
        out
    }

    /// Stream length in tokens: text bytes plus soft rows.
    pub fn token_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.len(),
                Segment::Soft(t) => t.rows(),
            })
            .sum()
    }

    /// Replaces the rows of every soft segment, keeping the layout.
    pub fn with_soft_values(&self, values: &[Tensor]) -> Result<Self> {
        let mut it = values.iter();
        let mut segments = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            segments.push(match s {
                Segment::Soft(old) => {
                    let new = it.next().ok_or_else(|| Error::shape("too few soft segments supplied"))?;
                    if new.rows() != old.rows() {
                        return Err(Error::shape(format!(
                            "soft segment has {} rows, replacement has {}",
                            old.rows(),
                            new.rows()
                        )));
                    }
                    Segment::Soft(new.clone())
                }
                t => t.clone(),
            });
        }
        Ok(Self { segments })
    }
}

fn expect_text(block: &ContextBlock, level: ContextLevel) -> Result<&str> {
    if block.level != level {
        return Err(Error::config(format!("expected a {level:?} block, got {:?}", block.level)));
    }
    block
        .as_text()
        .ok_or_else(|| Error::config(format!("{level:?} block carries no text")))
}

/// Text segments before and after the soft features.
fn surround(structure: &str, stats: &str, instruction: &TaskInstruction) -> (Vec<Segment>, Vec<Segment>) {
    let head = vec![
        Segment::Text(format!("{structure}\n")),
        Segment::Text(format!("{stats}\n")),
        Segment::Text(SENSOR_OPEN.to_string()),
    ];
    let tail = vec![
        Segment::Text(format!("{SENSOR_CLOSE}\n")),
        Segment::Text(format!("[task: {}]\n", instruction.task_type)),
        Segment::Text(format!("{}\n", escape_text(&instruction.text))),
        Segment::Text(ANSWER_DELIMITER.to_string()),
    ];
    (head, tail)
}

pub fn assemble_prompt(
    features: &AlignedFeatures,
    structure: &ContextBlock,
    stats: &ContextBlock,
    instruction: &TaskInstruction,
) -> Result<CompositePrompt> {
    let s = expect_text(structure, ContextLevel::Structure)?;
    let st = expect_text(stats, ContextLevel::Statistical)?;
    let (mut segments, tail) = surround(s, st, instruction);
    segments.push(Segment::Soft(features.values.clone()));
    segments.extend(tail);
    Ok(CompositePrompt { segments })
}

/// Prompt without sensor tokens; the marker pair is kept so the layout matches.
pub fn assemble_text_prompt(
    structure: &ContextBlock,
    stats: &ContextBlock,
    instruction: &TaskInstruction,
) -> Result<CompositePrompt> {
    let s = expect_text(structure, ContextLevel::Structure)?;
    let st = expect_text(stats, ContextLevel::Statistical)?;
    let (mut segments, tail) = surround(s, st, instruction);
    segments.extend(tail);
    Ok(CompositePrompt { segments })
}

/// Collects blocks one at a time; `build` fails on any missing piece.
#[derive(Clone, Debug, Default)]
pub struct PromptBuilder {
    features: Option<AlignedFeatures>,
    structure: Option<ContextBlock>,
    stats: Option<ContextBlock>,
    instruction: Option<TaskInstruction>,
}

impl PromptBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn block(mut self, block: ContextBlock) -> Self {
        match (block.level, block.payload) {
            (_, ContextPayload::Features(f)) => self.features = Some(f),
            (ContextLevel::Structure, p) => {
                self.structure = Some(ContextBlock {
                    level: ContextLevel::Structure,
                    payload: p,
                })
            }
            (ContextLevel::Statistical, p) => {
                self.stats = Some(ContextBlock {
                    level: ContextLevel::Statistical,
                    payload: p,
                })
            }
            (ContextLevel::Semantic | ContextLevel::Feature, ContextPayload::Text(t)) => {
                let task_type = self.instruction.as_ref().map_or(TaskType::Description, |i| i.task_type);
                self.instruction = Some(TaskInstruction::new(task_type, t));
            }
        }
        self
    }

    pub fn instruction(mut self, instruction: TaskInstruction) -> Self {
        self.instruction = Some(instruction);
        self
    }

    pub fn build(&self) -> Result<CompositePrompt> {
        let missing = |what: &str| Error::config(format!("prompt is missing the {what} block"));
        let features = self.features.as_ref().ok_or_else(|| missing("feature"))?;
        let structure = self.structure.as_ref().ok_or_else(|| missing("structure"))?;
        let stats = self.stats.as_ref().ok_or_else(|| missing("statistical"))?;
        let instruction = self.instruction.as_ref().ok_or_else(|| missing("instruction"))?;
        assemble_prompt(features, structure, stats, instruction)
    }
}

/// Bytes as token ids; id 0 doubles as end-of-text.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = 256;
    pub const EOT: usize = 0;

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamItem {
    Hard(usize),
    /// Row `row` of the `segment`-th soft segment.
    Soft { segment: usize, row: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub items: Vec<StreamItem>,
    pub soft: Vec<Tensor>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn hard_ids(&self) -> Vec<usize> {
        self.items
            .iter()
            .filter_map(|i| match i {
                StreamItem::Hard(id) => Some(*id),
                StreamItem::Soft { .. } => None,
            })
            .collect()
    }

    pub fn soft_rows(&self) -> usize {
        self.items.iter().filter(|i| matches!(i, StreamItem::Soft { .. })).count()
    }
}

/// Flattens a prompt into positions `0..len`; fails when it exceeds `max_len`.
pub fn render_token_stream(p: &CompositePrompt, tokenizer: &ByteTokenizer, max_len: usize) -> Result<TokenStream> {
    let needed = p.token_len();
    if needed > max_len {
        return Err(Error::Length {
            what: "prompt".into(),
            needed,
            limit: max_len,
        });
    }
    let mut items = Vec::with_capacity(needed);
    let mut soft = Vec::new();
    for s in &p.segments {
        match s {
            Segment::Text(t) => items.extend(tokenizer.encode(t).into_iter().map(StreamItem::Hard)),
            Segment::Soft(t) => {
                let segment = soft.len();
                items.extend((0..t.rows()).map(|row| StreamItem::Soft { segment, row }));
                soft.push(t.clone());
            }
        }
    }
    Ok(TokenStream { items, soft })
}
