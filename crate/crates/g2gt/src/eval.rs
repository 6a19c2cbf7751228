use g2gt_core::graph::DepTree;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SentenceScore {
    pub tokens: usize,
    pub correct_heads: usize,
    pub correct_labeled: usize,
}

/// Attachment scores in percent. Every token counts, punctuation included.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub uas: f64,
    pub las: f64,
    pub tokens: usize,
    pub sentences: Vec<SentenceScore>,
}

impl EvalReport {
    pub fn is_perfect(&self) -> bool {
        self.sentences
            .iter()
            .all(|s| s.correct_labeled == s.tokens)
    }
}

pub fn evaluate(pred: &[DepTree], gold: &[DepTree]) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predicted sentences for {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let mut sentences = Vec::with_capacity(gold.len());
    for (k, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Data(format!(
                "sentence {}: {} predicted tokens, {} gold tokens",
                k + 1,
                p.len(),
                g.len()
            )));
        }
        let mut score = SentenceScore {
            tokens: g.len(),
            correct_heads: 0,
            correct_labeled: 0,
        };
        for i in 1..=g.len() {
            if p.head(i).is_some() && p.head(i) == g.head(i) {
                score.correct_heads += 1;
                if p.deprel(i) == g.deprel(i) {
                    score.correct_labeled += 1;
                }
            }
        }
        sentences.push(score);
    }
    let tokens: usize = sentences.iter().map(|s| s.tokens).sum();
    let pct = |c: usize| if tokens == 0 { 0.0 } else { 100.0 * c as f64 / tokens as f64 };
    Ok(EvalReport {
        uas: pct(sentences.iter().map(|s| s.correct_heads).sum()),
        las: pct(sentences.iter().map(|s| s.correct_labeled).sum()),
        tokens,
        sentences,
    })
}
