use std::collections::HashMap;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "star"];

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<mask>"];
const TASK_WORDS: [&str; 6] = ["find", "describe", "locate", "claim", "question", "copy"];
const HPOS: [&str; 3] = ["left", "center", "right"];
const VPOS: [&str; 3] = ["top", "middle", "bottom"];
const RELATIONS: [&str; 2] = ["above", "below"];
const QA_WORDS: [&str; 7] = ["what", "color", "shape", "how", "many", "is", "there"];
const NUMBERS: [&str; 4] = ["one", "two", "three", "four"];
const ANSWERS: [&str; 2] = ["yes", "no"];
const LABELS: [&str; 3] = ["true", "false", "unknown"];
const GLUE: [&str; 1] = ["and"];

/// Closed token vocabulary: specials, task words, attribute words, labels,
/// then `grid_side + 1` coordinate tokens `<0>..<g>`.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    grid_side: usize,
    coord_base: usize,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const SEP: usize = 3;
    pub const MASK: usize = 4;

    pub fn new(grid_side: usize) -> Self {
        let mut tokens: Vec<String> = Vec::new();
        for group in [
            &SPECIALS[..],
            &TASK_WORDS,
            &COLORS,
            &SHAPES,
            &HPOS,
            &VPOS,
            &RELATIONS,
            &QA_WORDS,
            &NUMBERS,
            &ANSWERS,
            &LABELS,
            &GLUE,
        ] {
            tokens.extend(group.iter().map(|s| s.to_string()));
        }
        let coord_base = tokens.len();
        tokens.extend((0..=grid_side).map(|i| format!("<{i}>")));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            grid_side,
            coord_base,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of a word known to be in the vocabulary.
    pub fn w(&self, token: &str) -> usize {
        self.id(token)
            .unwrap_or_else(|| panic!("token {token:?} not in vocabulary"))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn color(&self, c: usize) -> usize {
        self.w(COLORS[c])
    }

    pub fn shape(&self, s: usize) -> usize {
        self.w(SHAPES[s])
    }

    pub fn number(&self, n: usize) -> usize {
        self.w(NUMBERS[n - 1])
    }

    pub fn hpos(&self, i: usize) -> usize {
        self.w(HPOS[i])
    }

    pub fn vpos(&self, i: usize) -> usize {
        self.w(VPOS[i])
    }

    pub fn coord(&self, v: usize) -> usize {
        assert!(v <= self.grid_side, "coordinate {v} beyond grid");
        self.coord_base + v
    }

    /// Inverse of [`Vocab::coord`].
    pub fn coord_value(&self, id: usize) -> Option<usize> {
        (id >= self.coord_base && id <= self.coord_base + self.grid_side).then(|| id - self.coord_base)
    }

    /// Tokens that may appear in denoising strings (everything but specials).
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        SPECIALS.len()..self.tokens.len()
    }

    /// Single-token answers used as the QA candidate set.
    pub fn qa_candidates(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        out.extend((0..COLORS.len()).map(|c| vec![self.color(c)]));
        out.extend((0..SHAPES.len()).map(|s| vec![self.shape(s)]));
        out.extend((1..=NUMBERS.len()).map(|n| vec![self.number(n)]));
        out.extend(ANSWERS.iter().map(|a| vec![self.w(a)]));
        out
    }

    pub fn encode(&self, words: &str) -> Option<Vec<usize>> {
        words.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
