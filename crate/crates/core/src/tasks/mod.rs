//! Synthetic multimodal tasks over symbol grids and their metrics.
//!
//! An "image" is a `g × g` grid of symbol ids. Symbol 0 is empty
//! background; every other symbol is a (color, shape) pair. Objects are
//! solid axis-aligned rectangles of one symbol. Four task families mirror
//! the usual vision-language benchmarks: referring expressions (emit a box
//! as four coordinate tokens), captioning, entailment against the grid, and
//! closed-candidate question answering.

mod generate;
mod io;
mod metrics;
mod vocab;

pub use generate::{
    generate_dataset, generate_pretrain_dataset, generate_split, object_boxes, GridObject,
    PretrainMix,
};
pub use io::{read_dataset, write_dataset};
pub use metrics::{acc_at_05, accuracy, bleu4, corpus_bleu4, iou, parse_box};
pub use vocab::{Vocab, COLORS, SHAPES};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Symbols: 0 = empty, `1 + color * SHAPES.len() + shape` otherwise.
pub const IMAGE_VOCAB_SIZE: usize = 1 + COLORS.len() * SHAPES.len();

pub fn symbol_of(color: usize, shape: usize) -> usize {
    1 + color * SHAPES.len() + shape
}

/// (color, shape) of a non-empty symbol.
pub fn attributes_of(symbol: usize) -> Option<(usize, usize)> {
    if symbol == 0 || symbol >= IMAGE_VOCAB_SIZE {
        return None;
    }
    let s = symbol - 1;
    Some((s / SHAPES.len(), s % SHAPES.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Refer,
    Caption,
    Entail,
    Qa,
    /// Pretraining only: list every object with its box.
    GroundedCaption,
    /// Pretraining only: reproduce the query tokens.
    Copy,
    /// Pretraining only: restore the masked box of a grounded phrase.
    Denoise,
}

impl TaskKind {
    pub const DOWNSTREAM: [TaskKind; 4] =
        [TaskKind::Refer, TaskKind::Caption, TaskKind::Entail, TaskKind::Qa];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Refer => "refer",
            TaskKind::Caption => "caption",
            TaskKind::Entail => "entail",
            TaskKind::Qa => "qa",
            TaskKind::GroundedCaption => "grounded_caption",
            TaskKind::Copy => "copy",
            TaskKind::Denoise => "denoise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "refer" => Some(TaskKind::Refer),
            "caption" => Some(TaskKind::Caption),
            "entail" => Some(TaskKind::Entail),
            "qa" => Some(TaskKind::Qa),
            "grounded_caption" => Some(TaskKind::GroundedCaption),
            "copy" => Some(TaskKind::Copy),
            "denoise" => Some(TaskKind::Denoise),
            _ => None,
        }
    }

    /// Name of the evaluation metric reported for this task.
    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Refer => "acc@0.5",
            TaskKind::Caption | TaskKind::GroundedCaption => "bleu4",
            TaskKind::Entail | TaskKind::Qa | TaskKind::Copy | TaskKind::Denoise => "accuracy",
        }
    }

    fn tag(self) -> u64 {
        match self {
            TaskKind::Refer => 1,
            TaskKind::Caption => 2,
            TaskKind::Entail => 3,
            TaskKind::Qa => 4,
            TaskKind::GroundedCaption => 5,
            TaskKind::Copy => 6,
            TaskKind::Denoise => 7,
        }
    }
}

/// Axis-aligned box in grid units, `x` across columns and `y` down rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BoundingBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Option<Self> {
        (x1 <= x2 && y1 <= y2).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// One synthetic instance.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskSample {
    pub kind: TaskKind,
    pub grid_side: usize,
    /// Row-major `grid_side²` symbols.
    pub grid: Vec<usize>,
    pub text: Vec<usize>,
    /// Target tokens without BOS/EOS; never empty.
    pub target: Vec<usize>,
    /// Closed answer set (QA only).
    pub candidates: Option<Vec<Vec<usize>>>,
}

impl TaskSample {
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.kind.tag().to_le_bytes());
        h.update((self.grid_side as u64).to_le_bytes());
        for part in [&self.grid, &self.text, &self.target] {
            h.update((part.len() as u64).to_le_bytes());
            for t in part {
                h.update((*t as u64).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Decoder input (`BOS` + target) and labels (target + `EOS`).
    pub fn teacher_forcing(&self) -> (Vec<usize>, Vec<usize>) {
        let mut input = Vec::with_capacity(self.target.len() + 1);
        input.push(Vocab::BOS);
        input.extend_from_slice(&self.target);
        let mut labels = self.target.clone();
        labels.push(Vocab::EOS);
        (input, labels)
    }
}
