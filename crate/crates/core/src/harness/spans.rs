use crate::corpus::{BioTag, TagKind};

/// Half-open token range `[start, end)` labeled with a slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub slot: String,
}

/// Decodes spans from a possibly malformed tag sequence. An `I-x` without a
/// live `x` span opens a new one.
pub fn spans_from_bio(tags: &[BioTag]) -> Vec<Span> {
    let mut spans: Vec<Span> = Vec::new();
    let mut live = false;
    for (i, tag) in tags.iter().enumerate() {
        match tag.kind() {
            TagKind::O => live = false,
            TagKind::I if live && spans.last().is_some_and(|s| s.slot == tag.slot()) => {
                spans.last_mut().expect("live span").end = i + 1;
            }
            TagKind::B | TagKind::I => {
                spans.push(Span {
                    start: i,
                    end: i + 1,
                    slot: tag.slot().to_string(),
                });
                live = true;
            }
        }
    }
    spans
}

/// Exact-match span counts, summed over sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpanCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn of_sentence(predicted: &[Span], gold: &[Span]) -> Self {
        let mut unmatched: Vec<&Span> = gold.iter().collect();
        let mut correct = 0;
        for p in predicted {
            if let Some(pos) = unmatched.iter().position(|g| *g == p) {
                unmatched.swap_remove(pos);
                correct += 1;
            }
        }
        SpanCounts {
            correct,
            predicted: predicted.len(),
            gold: gold.len(),
        }
    }

    pub fn add(&mut self, other: SpanCounts) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn scores(&self) -> Prf {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Prf::new(ratio(self.correct, self.predicted), ratio(self.correct, self.gold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

/// Micro-averaged span precision, recall and F1 over sentence pairs.
pub fn span_f1(predicted: &[Vec<Span>], gold: &[Vec<Span>]) -> Prf {
    let mut total = SpanCounts::default();
    for (p, g) in predicted.iter().zip(gold) {
        total.add(SpanCounts::of_sentence(p, g));
    }
    total.scores()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> Vec<BioTag> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    fn span(start: usize, end: usize, slot: &str) -> Span {
        Span {
            start,
            end,
            slot: slot.into(),
        }
    }

    #[test]
    fn decoding_examples() {
        assert_eq!(spans_from_bio(&tags("B-x I-x O")), vec![span(0, 2, "x")]);
        assert!(spans_from_bio(&tags("O O")).is_empty());
        assert_eq!(spans_from_bio(&tags("I-x B-x")), vec![span(0, 1, "x"), span(1, 2, "x")]);
        assert_eq!(
            spans_from_bio(&tags("B-x I-y I-y O I-x")),
            vec![span(0, 1, "x"), span(1, 3, "y"), span(4, 5, "x")]
        );
    }

    #[test]
    fn f1_examples() {
        let gold = vec![vec![span(0, 1, "x"), span(2, 4, "y")]];
        let s = span_f1(&gold, &gold);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = span_f1(&[vec![]], &gold);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let pred = vec![vec![span(0, 1, "x"), span(2, 3, "y")]];
        let s = span_f1(&pred, &gold);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }
}
