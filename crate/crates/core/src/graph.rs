//! Labelled graphs over token positions, and their conversion to and from
//! dependency trees.
//!
//! Dependency graphs always include a virtual root at node 0, so a sentence of
//! `n` tokens becomes a graph over `n + 1` nodes. Each arc contributes two
//! cells: `(dependent, head)` carries `rel↑` and `(head, dependent)` carries
//! `rel↓`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// "No relation".
pub const NONE: usize = 0;
/// Relation label not in the vocabulary (dependency scheme only).
pub const UNK: usize = 1;
/// Coreference scheme: cell links the two ends of a mention span.
pub const MENTION: usize = 1;
/// Coreference scheme: cell links a mention to an antecedent.
pub const COREF: usize = 2;

const UP: &str = "↑";
const DOWN: &str = "↓";

/// How relation labels are laid out in a [`RelationVocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// `[NONE, UNK, r₁↑, r₁↓, r₂↑, r₂↓, …]`.
    LabeledBidirectional,
    /// `[NONE, MENTION, COREF]`.
    Coreference,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationVocab {
    scheme: Scheme,
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl RelationVocab {
    /// Builds the bidirectional vocabulary for the given dependency labels,
    /// in the order given (duplicates are dropped).
    pub fn dependency<'a, I: IntoIterator<Item = &'a str>>(deprels: I) -> Self {
        let mut labels = vec!["NONE".to_string(), "UNK".to_string()];
        let mut seen = BTreeMap::new();
        for rel in deprels {
            if seen.insert(rel.to_string(), ()).is_none() {
                labels.push(format!("{rel}{UP}"));
                labels.push(format!("{rel}{DOWN}"));
            }
        }
        Self::from_labels(Scheme::LabeledBidirectional, labels)
    }

    pub fn coreference() -> Self {
        Self::from_labels(
            Scheme::Coreference,
            vec!["NONE".into(), "MENTION".into(), "COREF".into()],
        )
    }

    fn from_labels(scheme: Scheme, labels: Vec<String>) -> Self {
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        RelationVocab {
            scheme,
            labels,
            index,
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> Option<&str> {
        self.labels.get(idx).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Dependency labels in vocabulary order.
    pub fn deprels(&self) -> impl Iterator<Item = &str> {
        self.up_labels().filter_map(move |i| self.deprel_of(i))
    }

    /// Index of `deprel↑`, or [`UNK`].
    pub fn up(&self, deprel: &str) -> usize {
        self.index_of(&format!("{deprel}{UP}")).unwrap_or(UNK)
    }

    /// Index of `deprel↓`, or [`UNK`].
    pub fn down(&self, deprel: &str) -> usize {
        self.index_of(&format!("{deprel}{DOWN}")).unwrap_or(UNK)
    }

    pub fn is_up(&self, idx: usize) -> bool {
        self.scheme == Scheme::LabeledBidirectional && idx >= 2 && idx < self.len() && idx % 2 == 0
    }

    pub fn is_down(&self, idx: usize) -> bool {
        self.scheme == Scheme::LabeledBidirectional && idx >= 2 && idx < self.len() && idx % 2 == 1
    }

    /// The dependency label an up/down relation index was built from.
    pub fn deprel_of(&self, idx: usize) -> Option<&str> {
        if !(self.is_up(idx) || self.is_down(idx)) {
            return None;
        }
        let l = &self.labels[idx];
        l.strip_suffix(UP).or_else(|| l.strip_suffix(DOWN))
    }

    /// Indices of all `↑` labels.
    pub fn up_labels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.is_up(i))
    }

    /// Maps a relation to its direction-only class: every `↑` label to the
    /// first `↑` index and every `↓` label to the first `↓` index. Used when
    /// graphs are fed back without dependency labels.
    pub fn collapse_direction(&self, idx: usize) -> usize {
        if self.is_up(idx) {
            2
        } else if self.is_down(idx) {
            3
        } else {
            idx
        }
    }
}

/// An `n×n` matrix of relation-label indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledGraph {
    n: usize,
    labels: Vec<usize>,
}

impl LabeledGraph {
    /// The all-NONE graph.
    pub fn empty(n: usize) -> Self {
        LabeledGraph {
            n,
            labels: vec![NONE; n * n],
        }
    }

    /// Validates that every entry is below `num_labels` and the diagonal is NONE.
    pub fn from_labels(n: usize, labels: Vec<usize>, num_labels: usize) -> Result<Self> {
        if labels.len() != n * n {
            return Err(Error::ShapeMismatch {
                op: "LabeledGraph",
                left: vec![n, n],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::OutOfRange {
                what: "label",
                index: bad,
                bound: num_labels,
            });
        }
        if let Some(i) = (0..n).find(|&i| labels[i * n + i] != NONE) {
            return Err(Error::InvalidArgument(format!(
                "diagonal entry ({i},{i}) must be NONE"
            )));
        }
        Ok(LabeledGraph { n, labels })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, label: usize) -> Result<()> {
        if i >= self.n || j >= self.n {
            return Err(Error::OutOfRange {
                what: "node",
                index: i.max(j),
                bound: self.n,
            });
        }
        if i == j && label != NONE {
            return Err(Error::InvalidArgument("diagonal entries must be NONE".into()));
        }
        self.labels[i * self.n + j] = label;
        Ok(())
    }

    /// Row-major label matrix.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(NONE)
    }

    pub fn count(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Relabels node `i` as `perm[i]`: `out[perm[i]][perm[j]] = self[i][j]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n)?;
        let mut labels = vec![NONE; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                labels[perm[i] * self.n + perm[j]] = self.get(i, j);
            }
        }
        Ok(LabeledGraph { n: self.n, labels })
    }

    /// Applies `f` to every label.
    pub fn map_labels(&self, f: impl Fn(usize) -> usize) -> Self {
        LabeledGraph {
            n: self.n,
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }

    /// True when every non-NONE entry satisfies `j <= i`.
    pub fn is_lower_triangular(&self) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| self.get(i, j) == NONE))
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::InvalidArgument("permutation length".into()));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Exact label-matrix equality.
pub fn graph_equals(a: &LabeledGraph, b: &LabeledGraph) -> Result<bool> {
    if a.n != b.n {
        return Err(Error::ShapeMismatch {
            op: "graph_equals",
            left: vec![a.n, a.n],
            right: vec![b.n, b.n],
        });
    }
    Ok(a.labels == b.labels)
}

/// One-hot encoding of the relation at `(i, j)`.
pub fn onehot_relation(graph: &LabeledGraph, i: usize, j: usize, num_labels: usize) -> Result<Vec<f64>> {
    if i >= graph.n || j >= graph.n {
        return Err(Error::OutOfRange {
            what: "node",
            index: i.max(j),
            bound: graph.n,
        });
    }
    let label = graph.get(i, j);
    if label >= num_labels {
        return Err(Error::OutOfRange {
            what: "label",
            index: label,
            bound: num_labels,
        });
    }
    let mut v = vec![0.0; num_labels];
    v[label] = 1.0;
    Ok(v)
}

/// A dependency tree over tokens `1..=n`; head 0 is the virtual root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepTree {
    heads: Vec<Option<usize>>,
    deprels: Vec<String>,
}

impl DepTree {
    pub fn new(heads: Vec<Option<usize>>, deprels: Vec<String>) -> Result<Self> {
        if heads.len() != deprels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} heads but {} labels",
                heads.len(),
                deprels.len()
            )));
        }
        let n = heads.len();
        for (i, h) in heads.iter().enumerate() {
            if let Some(h) = *h {
                if h > n {
                    return Err(Error::OutOfRange {
                        what: "head",
                        index: h,
                        bound: n + 1,
                    });
                }
                if h == i + 1 {
                    return Err(Error::NotATree(format!("token {} heads itself", i + 1)));
                }
            }
        }
        Ok(DepTree { heads, deprels })
    }

    /// A complete tree from plain head indices.
    pub fn from_heads(heads: &[usize], deprels: &[&str]) -> Result<Self> {
        Self::new(
            heads.iter().map(|&h| Some(h)).collect(),
            deprels.iter().map(|s| s.to_string()).collect(),
        )
    }

    /// A tree with no attachments.
    pub fn unattached(n: usize) -> Self {
        DepTree {
            heads: vec![None; n],
            deprels: vec![String::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Head of token `i` (1-based).
    pub fn head(&self, i: usize) -> Option<usize> {
        self.heads[i - 1]
    }

    /// Label of token `i` (1-based).
    pub fn deprel(&self, i: usize) -> &str {
        &self.deprels[i - 1]
    }

    pub fn heads(&self) -> &[Option<usize>] {
        &self.heads
    }

    pub fn deprels(&self) -> &[String] {
        &self.deprels
    }

    /// Number of tokens attached directly to the root.
    pub fn root_children(&self) -> usize {
        self.heads.iter().filter(|h| **h == Some(0)).count()
    }

    /// Checks that every token has a head and following heads from any token
    /// reaches the root. With `single_root`, exactly one token may attach to it.
    pub fn validate(&self, single_root: bool) -> Result<()> {
        let n = self.len();
        for (i, h) in self.heads.iter().enumerate() {
            if h.is_none() {
                return Err(Error::NotATree(format!("token {} has no head", i + 1)));
            }
        }
        // 0 = unvisited, 1 = on the current path, 2 = reaches root
        let mut state = vec![0u8; n + 1];
        state[0] = 2;
        for start in 1..=n {
            let mut path = Vec::new();
            let mut v = start;
            while state[v] == 0 {
                state[v] = 1;
                path.push(v);
                v = self.heads[v - 1].expect("checked");
            }
            if state[v] == 1 {
                return Err(Error::NotATree(format!("cycle through token {v}")));
            }
            for p in path {
                state[p] = 2;
            }
        }
        if single_root && n > 0 && self.root_children() != 1 {
            return Err(Error::NotATree(format!(
                "{} tokens attached to the root",
                self.root_children()
            )));
        }
        Ok(())
    }
}

/// Bidirectional labelled graph over `tree.len() + 1` nodes. Unattached
/// tokens contribute nothing; unknown labels map to [`UNK`].
pub fn dep_tree_to_graph(tree: &DepTree, vocab: &RelationVocab) -> Result<LabeledGraph> {
    if vocab.scheme() != Scheme::LabeledBidirectional {
        return Err(Error::InvalidArgument(
            "dependency graphs need the bidirectional relation scheme".into(),
        ));
    }
    let n = tree.len() + 1;
    let mut g = LabeledGraph::empty(n);
    for i in 1..n {
        if let Some(j) = tree.head(i) {
            let rel = tree.deprel(i);
            g.set(i, j, vocab.up(rel))?;
            g.set(j, i, vocab.down(rel))?;
        }
    }
    Ok(g)
}

/// Reads heads from the `↑` cells of each token row. Every token needs
/// exactly one, and the result must be an arborescence.
pub fn graph_to_dep_tree(graph: &LabeledGraph, vocab: &RelationVocab) -> Result<DepTree> {
    let n = graph.n();
    if n == 0 {
        return Err(Error::NotATree("graph has no root node".into()));
    }
    let mut heads = Vec::with_capacity(n - 1);
    let mut deprels = Vec::with_capacity(n - 1);
    for i in 1..n {
        let mut found = None;
        for j in 0..n {
            let l = graph.get(i, j);
            if vocab.is_up(l) {
                if found.is_some() {
                    return Err(Error::NotATree(format!("token {i} has several heads")));
                }
                found = Some((j, l));
            }
        }
        let (j, l) = found.ok_or_else(|| Error::NotATree(format!("token {i} has no head")))?;
        heads.push(Some(j));
        deprels.push(vocab.deprel_of(l).unwrap_or_default().to_string());
    }
    let tree = DepTree::new(heads, deprels)?;
    tree.validate(false)?;
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> RelationVocab {
        RelationVocab::dependency(["root", "det", "nsubj", "obj"])
    }

    /// Random arborescence: attach nodes in a shuffled order, each to a node
    /// already in the tree.
    fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> DepTree {
        let rels = ["root", "det", "nsubj", "obj"];
        let mut order: Vec<usize> = (1..=n).collect();
        order.shuffle(rng);
        let mut attached = vec![0usize];
        let mut heads = vec![0; n];
        for &v in &order {
            heads[v - 1] = attached[rng.random_range(0..attached.len())];
            attached.push(v);
        }
        let labels: Vec<&str> = (0..n).map(|_| rels[rng.random_range(0..rels.len())]).collect();
        DepTree::from_heads(&heads, &labels).unwrap()
    }

    #[test]
    fn vocab_layout() {
        let v = vocab();
        assert_eq!(v.label(NONE), Some("NONE"));
        assert_eq!(v.label(UNK), Some("UNK"));
        assert_eq!(v.len(), 10);
        assert_eq!(v.up("det"), 4);
        assert_eq!(v.down("det"), 5);
        assert_eq!(v.up("nope"), UNK);
        assert_eq!(v.deprel_of(5), Some("det"));
        assert_eq!(v.up_labels().collect::<Vec<_>>(), vec![2, 4, 6, 8]);
        assert_eq!(v.deprels().collect::<Vec<_>>(), vec!["root", "det", "nsubj", "obj"]);
        assert_eq!(v.collapse_direction(8), 2);
        assert_eq!(v.collapse_direction(7), 3);
        assert_eq!(v.collapse_direction(UNK), UNK);
    }

    #[test]
    fn single_token_sentence() {
        let v = vocab();
        let t = DepTree::from_heads(&[0], &["root"]).unwrap();
        let g = dep_tree_to_graph(&t, &v).unwrap();
        assert_eq!(g.n(), 2);
        assert_eq!(g.get(1, 0), v.up("root"));
        assert_eq!(g.get(0, 1), v.down("root"));
        assert_eq!(g.count(NONE), 2);
    }

    #[test]
    fn two_token_hand_construction() {
        // token 2 <- token 1 with "det"; token 1 is the root.
        let v = vocab();
        let t = DepTree::from_heads(&[0, 1], &["root", "det"]).unwrap();
        let g = dep_tree_to_graph(&t, &v).unwrap();
        assert_eq!(v.label(g.get(2, 1)), Some("det↑"));
        assert_eq!(v.label(g.get(1, 2)), Some("det↓"));
        assert_eq!(g.get(0, 2), NONE);
        assert_eq!(g.get(2, 0), NONE);
    }

    #[test]
    fn unattached_tree_is_empty_graph() {
        let g = dep_tree_to_graph(&DepTree::unattached(4), &vocab()).unwrap();
        assert_eq!(g, LabeledGraph::empty(5));
    }

    #[test]
    fn unknown_deprel_maps_to_unk() {
        let v = vocab();
        let t = DepTree::from_heads(&[0], &["weird"]).unwrap();
        let g = dep_tree_to_graph(&t, &v).unwrap();
        assert_eq!(g.get(1, 0), UNK);
        assert_eq!(g.get(0, 1), UNK);
    }

    #[test]
    fn all_none_graph_rejected() {
        let err = graph_to_dep_tree(&LabeledGraph::empty(3), &vocab());
        assert!(matches!(err, Err(Error::NotATree(_))));
    }

    #[test]
    fn multiple_heads_rejected() {
        let v = vocab();
        let mut g = LabeledGraph::empty(3);
        g.set(1, 0, v.up("root")).unwrap();
        g.set(2, 0, v.up("root")).unwrap();
        g.set(2, 1, v.up("det")).unwrap();
        assert!(matches!(graph_to_dep_tree(&g, &v), Err(Error::NotATree(_))));
    }

    #[test]
    fn cyclic_heads_rejected() {
        let v = vocab();
        let mut g = LabeledGraph::empty(3);
        g.set(1, 2, v.up("det")).unwrap();
        g.set(2, 1, v.up("det")).unwrap();
        assert!(matches!(graph_to_dep_tree(&g, &v), Err(Error::NotATree(_))));
    }

    #[test]
    fn random_trees_round_trip() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..=10);
            let t = random_tree(&mut rng, n);
            t.validate(false).unwrap();
            let back = graph_to_dep_tree(&dep_tree_to_graph(&t, &v).unwrap(), &v).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn graph_equality() {
        let v = vocab();
        let t = DepTree::from_heads(&[2, 0, 2], &["det", "root", "obj"]).unwrap();
        let a = dep_tree_to_graph(&t, &v).unwrap();
        let b = dep_tree_to_graph(&t.clone(), &v).unwrap();
        assert!(graph_equals(&a, &a).unwrap());
        assert!(graph_equals(&a, &b).unwrap());
        let mut c = a.clone();
        c.set(3, 2, v.up("det")).unwrap();
        assert!(!graph_equals(&a, &c).unwrap());
        assert!(graph_equals(&a, &LabeledGraph::empty(2)).is_err());
    }

    #[test]
    fn onehot_examples() {
        let mut g = LabeledGraph::empty(3);
        g.set(0, 1, 2).unwrap();
        assert_eq!(onehot_relation(&g, 0, 2, 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(onehot_relation(&g, 0, 1, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(onehot_relation(&g, 3, 0, 4).is_err());
    }

    #[test]
    fn onehots_sum_to_cell_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let l = rng.random_range(1..6);
            let labels = (0..n * n)
                .map(|k| if k / n == k % n { 0 } else { rng.random_range(0..l) })
                .collect();
            let g = LabeledGraph::from_labels(n, labels, l).unwrap();
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let v = onehot_relation(&g, i, j, l).unwrap();
                    assert_eq!(v.iter().sum::<f64>(), 1.0);
                    assert_eq!(v[g.get(i, j)], 1.0);
                    total += v.iter().sum::<f64>();
                }
            }
            assert_eq!(total, (n * n) as f64);
        }
    }

    #[test]
    fn from_labels_validates() {
        assert!(LabeledGraph::from_labels(2, vec![0, 3, 0, 0], 3).is_err());
        assert!(LabeledGraph::from_labels(2, vec![1, 0, 0, 0], 3).is_err());
        assert!(LabeledGraph::from_labels(2, vec![0, 0, 0], 3).is_err());
    }

    #[test]
    fn validate_detects_bad_trees() {
        assert!(DepTree::from_heads(&[1], &["x"]).is_err());
        assert!(DepTree::from_heads(&[5], &["x"]).is_err());
        let two_roots = DepTree::from_heads(&[0, 0], &["a", "b"]).unwrap();
        assert!(two_roots.validate(false).is_ok());
        assert!(two_roots.validate(true).is_err());
        assert!(DepTree::unattached(2).validate(false).is_err());
    }

    proptest! {
        #[test]
        fn permutation_relabels_consistently(seed in 0u64..10_000, n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = (0..n * n)
                .map(|k| if k / n == k % n { 0 } else { rng.random_range(0..5) })
                .collect();
            let g = LabeledGraph::from_labels(n, labels, 5).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let p = g.permute(&perm).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(p.get(perm[i], perm[j]), g.get(i, j));
                }
            }
        }

        #[test]
        fn round_trip_identity(seed in 0u64..100_000, n in 1usize..=10) {
            let v = vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(&mut rng, n);
            let back = graph_to_dep_tree(&dep_tree_to_graph(&t, &v).unwrap(), &v).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
