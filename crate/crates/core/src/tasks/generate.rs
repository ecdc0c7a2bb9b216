use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{symbol_of, BoundingBox, TaskKind, TaskSample, Vocab, COLORS, SHAPES};
use crate::error::{Error, Result};

const MAX_OBJECT_SIDE: usize = 3;
const PLACEMENT_TRIES: usize = 200;

/// A solid rectangle of one symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridObject {
    pub color: usize,
    pub shape: usize,
    pub bbox: BoundingBox,
}

impl GridObject {
    pub fn symbol(&self) -> usize {
        symbol_of(self.color, self.shape)
    }
}

/// Relative weights of the pretraining task families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainMix {
    pub caption: f64,
    pub grounded_caption: f64,
    pub copy: f64,
    pub denoise: f64,
}

impl Default for PretrainMix {
    fn default() -> Self {
        Self {
            caption: 1.0,
            grounded_caption: 1.0,
            copy: 1.0,
            denoise: 1.0,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-sample seed from (base seed, stream, kind, index).
fn sample_seed(seed: u64, stream: u64, kind: TaskKind, index: usize) -> u64 {
    let mut s = splitmix(seed);
    s = splitmix(s ^ stream.wrapping_mul(0xA24B_AED4_963E_E407));
    s = splitmix(s ^ kind.tag());
    splitmix(s ^ index as u64)
}

fn place_objects(rng: &mut impl Rng, g: usize, count: usize) -> Result<Vec<GridObject>> {
    let mut combos: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
        .collect();
    combos.shuffle(rng);
    let mut occupied = vec![false; g * g];
    let mut objects = Vec::with_capacity(count);
    for &(color, shape) in combos.iter().take(count) {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.gen_range(1..=MAX_OBJECT_SIDE.min(g));
            let h = rng.gen_range(1..=MAX_OBJECT_SIDE.min(g));
            let x = rng.gen_range(0..=g - w);
            let y = rng.gen_range(0..=g - h);
            let free = (y..y + h).all(|r| (x..x + w).all(|c| !occupied[r * g + c]));
            if free {
                for r in y..y + h {
                    for c in x..x + w {
                        occupied[r * g + c] = true;
                    }
                }
                objects.push(GridObject {
                    color,
                    shape,
                    bbox: BoundingBox {
                        x1: x,
                        y1: y,
                        x2: x + w,
                        y2: y + h,
                    },
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {count} objects on a {g}x{g} grid"
            )));
        }
    }
    // Raster order of the top-left corner keeps captions canonical.
    objects.sort_by_key(|o| (o.bbox.y1, o.bbox.x1));
    Ok(objects)
}

fn render(g: usize, objects: &[GridObject]) -> Vec<usize> {
    let mut grid = vec![0; g * g];
    for o in objects {
        for r in o.bbox.y1..o.bbox.y2 {
            for c in o.bbox.x1..o.bbox.x2 {
                grid[r * g + c] = o.symbol();
            }
        }
    }
    grid
}

/// Recover objects by scanning a rendered grid: one box per distinct symbol.
pub fn object_boxes(grid: &[usize], g: usize) -> Vec<(usize, BoundingBox)> {
    let mut found: Vec<(usize, BoundingBox)> = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let s = grid[r * g + c];
            if s == 0 {
                continue;
            }
            match found.iter_mut().find(|(sym, _)| *sym == s) {
                Some((_, b)) => {
                    b.x1 = b.x1.min(c);
                    b.y1 = b.y1.min(r);
                    b.x2 = b.x2.max(c + 1);
                    b.y2 = b.y2.max(r + 1);
                }
                None => found.push((
                    s,
                    BoundingBox {
                        x1: c,
                        y1: r,
                        x2: c + 1,
                        y2: r + 1,
                    },
                )),
            }
        }
    }
    found
}

fn position_words(vocab: &Vocab, b: &BoundingBox, g: usize) -> (usize, usize) {
    // Centers in half units so the buckets stay integral.
    let bucket = |twice_center: usize| ((3 * twice_center) / (2 * g)).min(2);
    (
        vocab.hpos(bucket(b.x1 + b.x2)),
        vocab.vpos(bucket(b.y1 + b.y2)),
    )
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Relation {
    Left,
    Right,
    Above,
    Below,
}

impl Relation {
    const ALL: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Above, Relation::Below];

    fn holds(self, a: &BoundingBox, b: &BoundingBox) -> bool {
        match self {
            Relation::Left => a.x2 <= b.x1,
            Relation::Right => a.x1 >= b.x2,
            Relation::Above => a.y2 <= b.y1,
            Relation::Below => a.y1 >= b.y2,
        }
    }

    fn opposite(self) -> Self {
        match self {
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    fn token(self, vocab: &Vocab) -> usize {
        vocab.w(match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Above => "above",
            Relation::Below => "below",
        })
    }
}

fn make_sample(kind: TaskKind, rng: &mut ChaCha8Rng, g: usize, vocab: &Vocab) -> Result<TaskSample> {
    let max_objects = 4;
    let count = match kind {
        TaskKind::Refer | TaskKind::Entail | TaskKind::Denoise => rng.gen_range(2..=max_objects),
        TaskKind::Caption | TaskKind::GroundedCaption => rng.gen_range(1..=2),
        TaskKind::Qa => rng.gen_range(1..=max_objects),
        TaskKind::Copy => rng.gen_range(1..=3),
    };
    let objects = place_objects(rng, g, count)?;
    let grid = render(g, &objects);
    let mut candidates = None;
    let (text, target) = match kind {
        TaskKind::Refer => {
            let o = objects[rng.gen_range(0..objects.len())];
            let text = vec![vocab.w("find"), vocab.color(o.color), vocab.shape(o.shape)];
            let b = o.bbox;
            let target = vec![vocab.coord(b.x1), vocab.coord(b.y1), vocab.coord(b.x2), vocab.coord(b.y2)];
            (text, target)
        }
        TaskKind::Caption => {
            let mut target = Vec::new();
            for (i, o) in objects.iter().enumerate() {
                if i > 0 {
                    target.push(vocab.w("and"));
                }
                let (hp, vp) = position_words(vocab, &o.bbox, g);
                target.extend([vocab.color(o.color), vocab.shape(o.shape), hp, vp]);
            }
            (vec![vocab.w("describe")], target)
        }
        TaskKind::GroundedCaption => {
            let mut target = Vec::new();
            for (i, o) in objects.iter().enumerate() {
                if i > 0 {
                    target.push(vocab.w("and"));
                }
                let b = o.bbox;
                target.extend([
                    vocab.color(o.color),
                    vocab.shape(o.shape),
                    vocab.coord(b.x1),
                    vocab.coord(b.y1),
                    vocab.coord(b.x2),
                    vocab.coord(b.y2),
                ]);
            }
            (vec![vocab.w("locate")], target)
        }
        TaskKind::Entail => {
            let ai = rng.gen_range(0..objects.len());
            let a = objects[ai];
            let label = rng.gen_range(0..3);
            let (other_color, other_shape, rel, answer) = if label == 2 {
                let present: HashSet<(usize, usize)> = objects.iter().map(|o| (o.color, o.shape)).collect();
                let absent: Vec<(usize, usize)> = (0..COLORS.len())
                    .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
                    .filter(|p| !present.contains(p))
                    .collect();
                let (c, s) = absent[rng.gen_range(0..absent.len())];
                let rel = Relation::ALL[rng.gen_range(0..4)];
                (c, s, rel, "unknown")
            } else {
                let others: Vec<&GridObject> =
                    objects.iter().enumerate().filter(|(i, _)| *i != ai).map(|(_, o)| o).collect();
                let b = *others[rng.gen_range(0..others.len())];
                let true_rels: Vec<Relation> =
                    Relation::ALL.iter().copied().filter(|r| r.holds(&a.bbox, &b.bbox)).collect();
                let truth = true_rels[rng.gen_range(0..true_rels.len())];
                if label == 0 {
                    (b.color, b.shape, truth, "true")
                } else {
                    (b.color, b.shape, truth.opposite(), "false")
                }
            };
            let text = vec![
                vocab.w("claim"),
                vocab.color(a.color),
                vocab.shape(a.shape),
                rel.token(vocab),
                vocab.color(other_color),
                vocab.shape(other_shape),
            ];
            (text, vec![vocab.w(answer)])
        }
        TaskKind::Qa => {
            candidates = Some(vocab.qa_candidates());
            let q = vocab.w("question");
            loop {
                match rng.gen_range(0..4) {
                    0 => {
                        let unique: Vec<&GridObject> = objects
                            .iter()
                            .filter(|o| objects.iter().filter(|p| p.shape == o.shape).count() == 1)
                            .collect();
                        if let Some(o) = unique.choose(rng) {
                            break (
                                vec![q, vocab.w("what"), vocab.w("color"), vocab.shape(o.shape)],
                                vec![vocab.color(o.color)],
                            );
                        }
                    }
                    1 => {
                        let unique: Vec<&GridObject> = objects
                            .iter()
                            .filter(|o| objects.iter().filter(|p| p.color == o.color).count() == 1)
                            .collect();
                        if let Some(o) = unique.choose(rng) {
                            break (
                                vec![q, vocab.w("what"), vocab.w("shape"), vocab.color(o.color)],
                                vec![vocab.shape(o.shape)],
                            );
                        }
                    }
                    2 => {
                        break (
                            vec![q, vocab.w("how"), vocab.w("many")],
                            vec![vocab.number(objects.len())],
                        )
                    }
                    _ => {
                        let (c, s, ans) = if rng.gen_bool(0.5) {
                            let o = objects[rng.gen_range(0..objects.len())];
                            (o.color, o.shape, "yes")
                        } else {
                            let c = rng.gen_range(0..COLORS.len());
                            let s = rng.gen_range(0..SHAPES.len());
                            let present = objects.iter().any(|o| o.color == c && o.shape == s);
                            (c, s, if present { "yes" } else { "no" })
                        };
                        break (
                            vec![q, vocab.w("is"), vocab.w("there"), vocab.color(c), vocab.shape(s)],
                            vec![vocab.w(ans)],
                        );
                    }
                }
            }
        }
        TaskKind::Copy => {
            let content = vocab.content_ids();
            let n = rng.gen_range(3..=7);
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(content.clone())).collect();
            let mut text = vec![vocab.w("copy")];
            text.extend_from_slice(&tokens);
            (text, tokens)
        }
        TaskKind::Denoise => {
            let o = objects[rng.gen_range(0..objects.len())];
            let (c, sh) = (vocab.color(o.color), vocab.shape(o.shape));
            let b = o.bbox;
            let text = vec![c, sh, Vocab::MASK, Vocab::MASK, Vocab::MASK, Vocab::MASK];
            let target = vec![c, sh, vocab.coord(b.x1), vocab.coord(b.y1), vocab.coord(b.x2), vocab.coord(b.y2)];
            (text, target)
        }
    };
    Ok(TaskSample {
        kind,
        grid_side: g,
        grid,
        text,
        target,
        candidates,
    })
}

fn generate_stream(kind: TaskKind, seed: u64, stream: u64, n: usize, g: usize) -> Result<Vec<TaskSample>> {
    let vocab = Vocab::new(g);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, stream, kind, i));
            make_sample(kind, &mut rng, g, &vocab)
        })
        .collect()
}

/// `n` samples of one task family, a pure function of its arguments.
pub fn generate_dataset(kind: TaskKind, seed: u64, n: usize, g: usize) -> Result<Vec<TaskSample>> {
    if n == 0 {
        return Err(Error::Generation("requested an empty dataset".into()));
    }
    generate_stream(kind, seed, 0, n, g)
}

/// Train and held-out splits from disjoint seed streams; held-out samples
/// that happen to coincide with a training sample are redrawn.
pub fn generate_split(
    kind: TaskKind,
    seed: u64,
    n_train: usize,
    n_eval: usize,
    g: usize,
) -> Result<(Vec<TaskSample>, Vec<TaskSample>)> {
    let train = generate_dataset(kind, seed, n_train, g)?;
    let seen: HashSet<[u8; 32]> = train.iter().map(TaskSample::content_hash).collect();
    let vocab = Vocab::new(g);
    let mut eval = Vec::with_capacity(n_eval);
    let mut index = 0;
    while eval.len() < n_eval {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 1, kind, index));
        index += 1;
        let s = make_sample(kind, &mut rng, g, &vocab)?;
        if !seen.contains(&s.content_hash()) {
            eval.push(s);
        }
        if index > 100 * (n_eval + 1) {
            return Err(Error::Generation(format!(
                "{}: could not draw {n_eval} held-out samples disjoint from training",
                kind.name()
            )));
        }
    }
    Ok((train, eval))
}

/// Multitask pretraining corpus on its own seed stream.
pub fn generate_pretrain_dataset(mix: &PretrainMix, seed: u64, n: usize, g: usize) -> Result<Vec<TaskSample>> {
    let weights = [
        (TaskKind::Caption, mix.caption),
        (TaskKind::GroundedCaption, mix.grounded_caption),
        (TaskKind::Copy, mix.copy),
        (TaskKind::Denoise, mix.denoise),
    ];
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if weights.iter().any(|w| w.1 < 0.0) || total <= 0.0 {
        return Err(Error::Config("pretrain mix weights must be >= 0 with a positive sum".into()));
    }
    let vocab = Vocab::new(g);
    let mut chooser = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5052_4554));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut pick = chooser.gen_range(0.0..total);
        let mut kind = weights[0].0;
        for (k, w) in weights {
            if pick < w {
                kind = k;
                break;
            }
            pick -= w;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 2, kind, i));
        out.push(make_sample(kind, &mut rng, g, &vocab)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_sensitive() {
        for kind in TaskKind::DOWNSTREAM {
            let a = generate_dataset(kind, 3, 20, 8).unwrap();
            let b = generate_dataset(kind, 3, 20, 8).unwrap();
            let c = generate_dataset(kind, 4, 20, 8).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn refer_targets_match_grid_scan() {
        let vocab = Vocab::new(8);
        for s in generate_dataset(TaskKind::Refer, 11, 300, 8).unwrap() {
            let color = (0..COLORS.len()).find(|&c| vocab.color(c) == s.text[1]).unwrap();
            let shape = (0..SHAPES.len()).find(|&k| vocab.shape(k) == s.text[2]).unwrap();
            let boxes = object_boxes(&s.grid, 8);
            let (_, b) = boxes.iter().find(|(sym, _)| *sym == symbol_of(color, shape)).unwrap();
            let coords: Vec<usize> = s.target.iter().map(|&t| vocab.coord_value(t).unwrap()).collect();
            assert_eq!(coords, vec![b.x1, b.y1, b.x2, b.y2]);
            assert!(coords[0] <= coords[2] && coords[1] <= coords[3]);
        }
    }

    #[test]
    fn entail_labels_are_consistent_with_grid() {
        let vocab = Vocab::new(8);
        let rels = ["left", "right", "above", "below"];
        for s in generate_dataset(TaskKind::Entail, 5, 300, 8).unwrap() {
            let boxes = object_boxes(&s.grid, 8);
            let find = |ct: usize, st: usize| {
                let c = (0..COLORS.len()).find(|&c| vocab.color(c) == ct).unwrap();
                let k = (0..SHAPES.len()).find(|&k| vocab.shape(k) == st).unwrap();
                boxes.iter().find(|(sym, _)| *sym == symbol_of(c, k)).map(|x| x.1)
            };
            let a = find(s.text[1], s.text[2]).expect("subject present");
            let rel = rels.iter().position(|r| vocab.w(r) == s.text[3]).unwrap();
            let label = vocab.token(s.target[0]).unwrap();
            match find(s.text[4], s.text[5]) {
                None => assert_eq!(label, "unknown"),
                Some(b) => {
                    let holds = Relation::ALL[rel].holds(&a, &b);
                    assert_eq!(label, if holds { "true" } else { "false" });
                }
            }
        }
    }

    #[test]
    fn qa_answers_are_candidates() {
        for s in generate_dataset(TaskKind::Qa, 9, 200, 8).unwrap() {
            let cands = s.candidates.as_ref().unwrap();
            assert!(cands.contains(&s.target));
        }
    }

    #[test]
    fn splits_never_share_a_sample() {
        let (train, eval) = generate_split(TaskKind::Qa, 1, 400, 200, 8).unwrap();
        let seen: HashSet<_> = train.iter().map(TaskSample::content_hash).collect();
        assert!(eval.iter().all(|s| !seen.contains(&s.content_hash())));
        assert_eq!(eval.len(), 200);
    }

    #[test]
    fn too_small_grid_is_an_error() {
        assert!(matches!(
            generate_dataset(TaskKind::Refer, 0, 5, 1),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn targets_fit_default_lengths() {
        let mix = PretrainMix::default();
        for s in generate_pretrain_dataset(&mix, 2, 300, 8).unwrap() {
            assert!(!s.target.is_empty());
            assert!(s.target.len() < 16, "{:?}", s.target);
            assert!(s.text.len() <= 8);
        }
    }
}
