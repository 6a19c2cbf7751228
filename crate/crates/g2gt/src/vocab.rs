use std::collections::{BTreeSet, HashMap};

use g2gt_core::graph::RelationVocab;
use serde::{Deserialize, Serialize};

use crate::conllu::Sentence;

pub const UNK: usize = 0;
pub const PAD: usize = 1;
/// Token index of the virtual root prepended to every sentence.
pub const ROOT: usize = 2;

const SPECIALS: [&str; 3] = ["<unk>", "<pad>", "<root>"];

/// Word forms and dependency labels seen in training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabTables", into = "VocabTables")]
pub struct Vocab {
    forms: Vec<String>,
    deprels: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabTables {
    forms: Vec<String>,
    deprels: Vec<String>,
}

impl From<VocabTables> for Vocab {
    fn from(t: VocabTables) -> Self {
        Vocab::from_tables(t.forms, t.deprels)
    }
}

impl From<Vocab> for VocabTables {
    fn from(v: Vocab) -> Self {
        VocabTables {
            forms: v.forms,
            deprels: v.deprels,
        }
    }
}

impl Vocab {
    /// Forms in order of first appearance; labels sorted.
    pub fn build(corpus: &[Sentence]) -> Self {
        let mut forms: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut deprels = BTreeSet::new();
        for s in corpus {
            for f in &s.forms {
                if !SPECIALS.contains(&f.as_str()) && seen.insert(f) {
                    forms.push(f.clone());
                }
            }
            deprels.extend(s.tree.deprels().iter().cloned());
        }
        Self::from_tables(forms, deprels.into_iter().collect())
    }

    fn from_tables(forms: Vec<String>, deprels: Vec<String>) -> Self {
        let index = forms.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        Vocab {
            forms,
            deprels,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn lookup(&self, form: &str) -> usize {
        self.index.get(form).copied().unwrap_or(UNK)
    }

    pub fn form(&self, idx: usize) -> Option<&str> {
        self.forms.get(idx).map(String::as_str)
    }

    pub fn deprels(&self) -> &[String] {
        &self.deprels
    }

    /// Token indices with the root symbol at position 0.
    pub fn encode(&self, forms: &[String]) -> Vec<usize> {
        std::iter::once(ROOT)
            .chain(forms.iter().map(|f| self.lookup(f)))
            .collect()
    }

    pub fn relations(&self) -> RelationVocab {
        RelationVocab::dependency(self.deprels.iter().map(String::as_str))
    }
}
