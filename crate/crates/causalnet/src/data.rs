//! Domain types shared by every stage: key frames, clips, and the
//! three-class composite label taxonomy.
//!
//! Frame indexes are 0-based everywhere inside the library. Annotation files
//! on disk are 1-based; the loader in [`crate::dataset`] converts at ingestion.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::FlowField;

/// A grayscale frame, row-major `(height, width)`, 8-bit.
pub type Frame = Array2<u8>;

/// Onset / apex / offset indexes of one clip, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFrames {
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
}

impl KeyFrames {
    pub fn new(onset: usize, apex: usize, offset: usize) -> Self {
        Self { onset, apex, offset }
    }

    /// True iff `onset <= apex <= offset < len`.
    pub fn is_valid(&self, sequence_len: usize) -> bool {
        self.onset <= self.apex && self.apex <= self.offset && self.offset < sequence_len
    }
}

/// Source dataset of a clip. Synthetic clips use [`DatasetId::Synth`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    Casme2,
    Samm,
    Smic,
    Synth,
}

impl DatasetId {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::Casme2 => "CASME2",
            DatasetId::Samm => "SAMM",
            DatasetId::Smic => "SMIC",
            DatasetId::Synth => "SYNTH",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CASME2" | "CASMEII" | "CASME_II" => Some(DatasetId::Casme2),
            "SAMM" => Some(DatasetId::Samm),
            "SMIC" => Some(DatasetId::Smic),
            "SYNTH" => Some(DatasetId::Synth),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Composite three-class label used by the composite database evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CompositeLabel {
    Negative,
    Positive,
    Surprise,
}

impl CompositeLabel {
    pub const ALL: [CompositeLabel; 3] =
        [CompositeLabel::Negative, CompositeLabel::Positive, CompositeLabel::Surprise];

    /// Stable class index used for confusion matrices and logits.
    pub fn index(&self) -> usize {
        match self {
            CompositeLabel::Negative => 0,
            CompositeLabel::Positive => 1,
            CompositeLabel::Surprise => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CompositeLabel::Negative => "negative",
            CompositeLabel::Positive => "positive",
            CompositeLabel::Surprise => "surprise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "negative" => Some(CompositeLabel::Negative),
            "positive" => Some(CompositeLabel::Positive),
            "surprise" => Some(CompositeLabel::Surprise),
            _ => None,
        }
    }
}

impl fmt::Display for CompositeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of mapping a raw emotion: a composite class, or excluded from the
/// three-class task (e.g. "others").
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappedLabel {
    Class(CompositeLabel),
    Excluded,
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("unknown raw emotion {0:?}: not present in the label mapping")]
    UnknownEmotion(String),
    #[error("label mapping line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Raw emotion vocabulary -> composite class table.
///
/// Shipped as an editable `raw_emotion=composite_class` config file; the
/// default table follows the common composite-evaluation convention
/// (negative: disgust, repression, anger, contempt, fear, sadness;
/// positive: happiness; surprise: surprise).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapping {
    table: BTreeMap<String, MappedLabel>,
}

/// Default table, also shipped at `configs/labels.txt`.
const DEFAULT_LABEL_TABLE: &str = include_str!("../../../configs/labels.txt");

impl LabelMapping {
    /// Parse a `raw_emotion=composite_class` table. `#` starts a comment,
    /// blank lines are ignored, keys are case-insensitive.
    pub fn parse(text: &str) -> Result<Self, LabelError> {
        let mut table = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| LabelError::Parse {
                line: line_no,
                message: format!("expected raw_emotion=composite_class, got {line:?}"),
            })?;
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim();
            let mapped = if value.eq_ignore_ascii_case("excluded") {
                MappedLabel::Excluded
            } else {
                MappedLabel::Class(CompositeLabel::parse(value).ok_or_else(|| {
                    LabelError::Parse {
                        line: line_no,
                        message: format!(
                            "unknown composite class {value:?} (expected negative, positive, surprise, or excluded)"
                        ),
                    }
                })?)
            };
            table.insert(key, mapped);
        }
        Ok(Self { table })
    }

    pub fn contains(&self, raw: &str) -> bool {
        self.table.contains_key(&raw.to_ascii_lowercase())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Default for LabelMapping {
    fn default() -> Self {
        Self::parse(DEFAULT_LABEL_TABLE).expect("embedded label table parses")
    }
}

/// Look up the composite class of a raw emotion string.
///
/// Pure lookup; an emotion absent from the table is an error naming the
/// offending string.
pub fn map_emotion(raw: &str, mapping: &LabelMapping) -> Result<MappedLabel, LabelError> {
    mapping
        .table
        .get(&raw.to_ascii_lowercase())
        .copied()
        .ok_or_else(|| LabelError::UnknownEmotion(raw.to_string()))
}

/// Flow pair supplied with a sample instead of frames: onset->apex and
/// apex->offset fields.
#[derive(Debug, Clone)]
pub struct PrecomputedFlows {
    pub onset_apex: FlowField,
    pub apex_offset: FlowField,
}

/// One micro-expression clip.
#[derive(Debug, Clone)]
pub struct MESample {
    /// Grayscale frame sequence; may be empty when `precomputed` is set.
    pub frames: Vec<Frame>,
    /// Flows supplied with the sample, bypassing the estimator.
    pub precomputed: Option<PrecomputedFlows>,
    pub keyframes: KeyFrames,
    pub subject_id: String,
    /// Distinguishes clips of the same subject; stable across runs.
    pub clip_id: String,
    pub dataset_id: DatasetId,
    /// Frames per second, positive.
    pub frame_rate: u32,
    pub raw_emotion: String,
    pub composite_label: CompositeLabel,
}

impl MESample {
    /// Number of frames the key-frame indexes are validated against.
    pub fn sequence_len(&self) -> usize {
        self.frames.len()
    }

    /// Stable identity of this clip inside a composite dataset.
    pub fn identity(&self) -> String {
        format!("{}/{}/{}", self.dataset_id, self.subject_id, self.clip_id)
    }
}

/// A violated sample invariant. Violations are data, not exceptions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ApexBeforeOnset,
    OffsetBeforeApex,
    OffsetOutOfRange { offset: usize, sequence_len: usize },
    NoFramesOrFlows,
    ZeroFrameRate,
    FrameShapeMismatch,
    FrameTooSmall { height: usize, width: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ApexBeforeOnset => write!(f, "apex < onset"),
            Violation::OffsetBeforeApex => write!(f, "offset < apex"),
            Violation::OffsetOutOfRange { offset, sequence_len } => {
                write!(f, "offset out of range: {offset} >= sequence length {sequence_len}")
            }
            Violation::NoFramesOrFlows => {
                write!(f, "sample has neither frames nor precomputed flows")
            }
            Violation::ZeroFrameRate => write!(f, "frame_rate must be positive"),
            Violation::FrameShapeMismatch => write!(f, "frames differ in shape"),
            Violation::FrameTooSmall { height, width } => {
                write!(f, "frame {height}x{width} smaller than 28x28")
            }
        }
    }
}

/// Check every sample invariant and return all violations (empty = ok).
pub fn validate_sample(sample: &MESample) -> Vec<Violation> {
    let mut violations = Vec::new();
    let kf = &sample.keyframes;
    if kf.apex < kf.onset {
        violations.push(Violation::ApexBeforeOnset);
    }
    if kf.offset < kf.apex {
        violations.push(Violation::OffsetBeforeApex);
    }
    if sample.frames.is_empty() {
        if sample.precomputed.is_none() {
            violations.push(Violation::NoFramesOrFlows);
        }
    } else {
        if kf.offset >= sample.frames.len() {
            violations.push(Violation::OffsetOutOfRange {
                offset: kf.offset,
                sequence_len: sample.frames.len(),
            });
        }
        let shape = sample.frames[0].dim();
        if sample.frames.iter().any(|fr| fr.dim() != shape) {
            violations.push(Violation::FrameShapeMismatch);
        }
        if shape.0 < 28 || shape.1 < 28 {
            violations.push(Violation::FrameTooSmall { height: shape.0, width: shape.1 });
        }
    }
    if sample.frame_rate == 0 {
        violations.push(Violation::ZeroFrameRate);
    }
    violations
}
