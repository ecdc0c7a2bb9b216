use std::collections::HashMap;

use super::{BoundingBox, Vocab};
use crate::error::{Error, Result};

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.x2.min(b.x2).saturating_sub(a.x1.max(b.x1));
    let iy = a.y2.min(b.y2).saturating_sub(a.y1.max(b.y1));
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Read a predicted box from decoded tokens. Anything other than exactly
/// four coordinate tokens with ordered corners is malformed.
pub fn parse_box(tokens: &[usize], vocab: &Vocab) -> Option<BoundingBox> {
    if tokens.len() != 4 {
        return None;
    }
    let c: Option<Vec<usize>> = tokens.iter().map(|&t| vocab.coord_value(t)).collect();
    let c = c?;
    BoundingBox::new(c[0], c[1], c[2], c[3])
}

/// Fraction of predictions with IoU >= 0.5; `None` predictions are misses.
pub fn acc_at_05(preds: &[Option<BoundingBox>], golds: &[BoundingBox]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "acc@0.5: {} predictions for {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.is_some_and(|p| iou(&p, g) >= 0.5))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "accuracy: {} predictions for {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

#[derive(Default, Clone, Copy)]
struct BleuStats {
    matches: [usize; 4],
    totals: [usize; 4],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, candidate: &[usize], references: &[Vec<usize>]) {
        for n in 1..=4 {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            self.matches[n - 1] += cand
                .iter()
                .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            self.totals[n - 1] += candidate.len().saturating_sub(n - 1);
        }
        self.cand_len += candidate.len();
        // Closest reference length, shorter one on ties.
        self.ref_len += references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
            .unwrap_or(0);
    }

    fn score(&self) -> f64 {
        if self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_p: f64 = (0..4)
            .map(|i| (self.matches[i] as f64 / self.totals[i] as f64).ln())
            .sum::<f64>()
            / 4.0;
        let bp = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * log_p.exp()
    }
}

/// Sentence BLEU-4 with uniform weights and brevity penalty. Any n-gram
/// order without a match (including candidates shorter than four tokens)
/// scores 0.
pub fn bleu4(candidate: &[usize], references: &[Vec<usize>]) -> f64 {
    let mut s = BleuStats::default();
    s.add(candidate, references);
    s.score()
}

/// Corpus BLEU-4: clipped counts and lengths are pooled before combining.
pub fn corpus_bleu4(candidates: &[Vec<usize>], references: &[Vec<Vec<usize>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "bleu4: {} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut s = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        s.add(c, r);
    }
    Ok(s.score())
}
