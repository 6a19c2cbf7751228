// Chu-Liu/Edmonds maximum spanning arborescence over a dense score matrix.
//
// Follows the recursive contraction formulation: pick the best incoming arc
// for every non-root node, and if those arcs form a cycle, contract it into a
// single node whose incoming arc scores are adjusted by the cycle arc they
// would replace, solve the smaller problem, then expand.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Maximum spanning arborescence.
///
/// `scores[dep][head]` (row-major, `n×n`) is the score of `head → dep`. Returns
/// the head of every node; the root's entry is `None`. Non-finite scores mark
/// forbidden arcs. With `single_root`, exactly one node attaches to `root`
/// (each candidate root child is tried and the best tree kept).
pub fn mst_decode(scores: &[f64], n: usize, root: usize, single_root: bool) -> Result<Vec<Option<usize>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("mst_decode on an empty graph".into()));
    }
    if scores.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "mst_decode",
            left: vec![n, n],
            right: vec![scores.len()],
        });
    }
    if root >= n {
        return Err(Error::OutOfRange {
            what: "root",
            index: root,
            bound: n,
        });
    }
    let heads = chu_liu_edmonds(scores, n, root)?;
    if !single_root || n <= 2 {
        return Ok(heads);
    }
    let root_children = heads.iter().filter(|h| **h == Some(root)).count();
    if root_children <= 1 {
        return Ok(heads);
    }

    let mut best: Option<(f64, Vec<Option<usize>>)> = None;
    for child in (0..n).filter(|&c| c != root) {
        let s = scores[child * n + root];
        if !s.is_finite() {
            continue;
        }
        let mut restricted = scores.to_vec();
        for dep in (0..n).filter(|&d| d != root && d != child) {
            restricted[dep * n + root] = f64::NEG_INFINITY;
        }
        let Ok(candidate) = chu_liu_edmonds(&restricted, n, root) else {
            continue;
        };
        let total = tree_score(scores, n, &candidate);
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, candidate));
        }
    }
    best.map(|(_, h)| h)
        .ok_or_else(|| Error::InvalidArgument("no single-root arborescence exists".into()))
}

/// Sum of `scores[dep][head]` over all arcs.
pub fn tree_score(scores: &[f64], n: usize, heads: &[Option<usize>]) -> f64 {
    heads
        .iter()
        .enumerate()
        .filter_map(|(d, h)| h.map(|h| scores[d * n + h]))
        .sum()
}

fn chu_liu_edmonds(scores: &[f64], n: usize, root: usize) -> Result<Vec<Option<usize>>> {
    // Working copy as weight[head][dep]; NEG_INFINITY marks no arc.
    let mut weight = vec![f64::NEG_INFINITY; n * n];
    for dep in 0..n {
        for head in 0..n {
            let s = scores[dep * n + head];
            if head != dep && dep != root && s.is_finite() {
                weight[head * n + dep] = s;
            }
        }
    }
    let parent = solve(&weight, n, root)?;
    Ok((0..n)
        .map(|v| if v == root { None } else { Some(parent[v]) })
        .collect())
}

/// Recursive step over a compacted graph of `m` nodes. `weight[h*m + d]`.
/// Returns the parent of every node (root's parent is itself).
fn solve(weight: &[f64], m: usize, root: usize) -> Result<Vec<usize>> {
    // best incoming arc
    let mut parent = vec![root; m];
    for d in 0..m {
        if d == root {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        let mut arg = None;
        for h in 0..m {
            let w = weight[h * m + d];
            if h != d && w > best {
                best = w;
                arg = Some(h);
            }
        }
        parent[d] = arg.ok_or_else(|| {
            Error::InvalidArgument("some node has no admissible incoming arc".into())
        })?;
    }

    let Some(cycle) = find_cycle(&parent, root) else {
        return Ok(parent);
    };

    // contract the cycle into a new node `c`
    let mut in_cycle = vec![false; m];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    let mut index = vec![usize::MAX; m];
    let mut count = 0;
    for v in 0..m {
        if !in_cycle[v] {
            index[v] = count;
            count += 1;
        }
    }
    let c = count;
    let mc = count + 1;
    for &v in &cycle {
        index[v] = c;
    }
    let cycle_score: f64 = cycle.iter().map(|&v| weight[parent[v] * m + v]).sum();

    let mut w2 = vec![f64::NEG_INFINITY; mc * mc];
    // which original arc realises each contracted arc
    let mut origin = vec![(usize::MAX, usize::MAX); mc * mc];
    for h in 0..m {
        for d in 0..m {
            let w = weight[h * m + d];
            if !w.is_finite() || h == d {
                continue;
            }
            let (hc, dc) = (index[h], index[d]);
            if hc == dc {
                continue;
            }
            let adjusted = if in_cycle[d] {
                w - weight[parent[d] * m + d] + cycle_score
            } else {
                w
            };
            if adjusted > w2[hc * mc + dc] {
                w2[hc * mc + dc] = adjusted;
                origin[hc * mc + dc] = (h, d);
            }
        }
    }
    let sub = solve(&w2, mc, index[root])?;

    // expand
    let mut result = parent.clone();
    for dc in 0..mc {
        if dc == index[root] {
            continue;
        }
        let (h, d) = origin[sub[dc] * mc + dc];
        result[d] = h;
    }
    Ok(result)
}

fn find_cycle(parent: &[usize], root: usize) -> Option<Vec<usize>> {
    let m = parent.len();
    let mut color = vec![0u8; m]; // 0 new, 1 on stack, 2 done
    color[root] = 2;
    for start in 0..m {
        let mut path = Vec::new();
        let mut v = start;
        while color[v] == 0 {
            color[v] = 1;
            path.push(v);
            v = parent[v];
        }
        if color[v] == 1 {
            let pos = path.iter().position(|&p| p == v).expect("on path");
            return Some(path[pos..].to_vec());
        }
        for p in path {
            color[p] = 2;
        }
    }
    None
}
