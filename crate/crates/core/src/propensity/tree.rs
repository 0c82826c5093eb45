//! Depth-limited regression trees with exact split search.

use std::fmt::Write as _;

/// Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: u8,
        threshold: f64,
        left: u8,
        right: u8,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

/// Node ids are stored as `u8`; a full tree of this depth has 255 nodes.
pub const MAX_TREE_DEPTH: usize = 7;

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf_index(&self, row: &[f64; 4]) -> usize {
        let mut idx = 0;
        loop {
            match self.nodes[idx] {
                Node::Leaf { .. } => return idx,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if row[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn node_value(&self, idx: usize) -> f64 {
        match self.nodes[idx] {
            Node::Leaf { value } => value,
            Node::Split { .. } => panic!("node {idx} is not a leaf"),
        }
    }

    pub fn predict(&self, row: &[f64; 4]) -> f64 {
        self.node_value(self.leaf_index(row))
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], idx: usize) -> usize {
            match nodes[idx] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + go(nodes, left as usize).max(go(nodes, right as usize))
                }
            }
        }
        go(&self.nodes, 0)
    }

    pub(crate) fn dump_into(&self, out: &mut String) {
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let _ = writeln!(
                        out,
                        "  node {i} split x{feature} <= {threshold:e} -> {left} {right}"
                    );
                }
                Node::Leaf { value } => {
                    let _ = writeln!(out, "  node {i} leaf {value:e}");
                }
            }
        }
    }
}

/// Covariates presorted per column, plus scratch space reused across trees.
pub(crate) struct SortedColumns {
    order: [Vec<u32>; 4],
    sorted: [Vec<f64>; 4],
    /// `1/c` for `c` in `0..=n`.
    reciprocal: Vec<f64>,
    // Per-tree working copies of `order`/`sorted`, partitioned node by node
    // so every node owns one contiguous range in each column.
    rows: [Vec<u32>; 4],
    values: [Vec<f64>; 4],
    scratch_rows: Vec<u32>,
    scratch_values: Vec<f64>,
    goes_left: Vec<bool>,
}

impl SortedColumns {
    pub(crate) fn new(rows: &[[f64; 4]]) -> Self {
        let n = rows.len();
        let order: [Vec<u32>; 4] = std::array::from_fn(|j| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| rows[a as usize][j].total_cmp(&rows[b as usize][j]));
            idx
        });
        let sorted =
            std::array::from_fn(|j| order[j].iter().map(|&i| rows[i as usize][j]).collect());
        Self {
            rows: order.clone(),
            values: std::array::from_fn(|_| vec![0.0; n]),
            order,
            sorted,
            reciprocal: (0..=n).map(|c| 1.0 / c as f64).collect(),
            scratch_rows: vec![0; 2 * n + 2],
            scratch_values: vec![0.0; 2 * n + 2],
            goes_left: vec![false; n],
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.order[0].len()
    }

    fn reset(&mut self) {
        for j in 0..4 {
            self.rows[j].copy_from_slice(&self.order[j]);
            self.values[j].copy_from_slice(&self.sorted[j]);
        }
    }
}

#[derive(Clone, Copy)]
struct GrowNode {
    start: usize,
    end: usize,
    sum_grad: f64,
    split: Option<Split>,
    /// A column whose range for this node is known to be partitioned.
    column: usize,
}

#[derive(Clone, Copy)]
struct Split {
    feature: usize,
    threshold: f64,
    /// Rows in the left child (a prefix of the node's range in `feature`).
    left_count: usize,
    left_sum: f64,
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    // Must separate lo (left) from hi (right) under `<=`.
    if mid >= hi || mid < lo {
        lo
    } else {
        mid
    }
}

/// Exact best split of one node: least-squares gain on `grad`, every
/// midpoint between consecutive distinct values, both children holding at
/// least `min_node_size` rows. Ties keep the first candidate found.
fn best_split(
    data: &SortedColumns,
    node: &GrowNode,
    grad: &[f64],
    min_node_size: usize,
) -> Option<Split> {
    let n = node.end - node.start;
    if n < 2 * min_node_size {
        return None;
    }
    let inv = &data.reciprocal;
    let total = node.sum_grad;
    let mut best: Option<Split> = None;
    let mut best_score = total * total * inv[n];
    for feature in 0..4 {
        let rows = &data.rows[feature][node.start..node.end];
        let values = &data.values[feature][node.start..node.end];
        let mut left = 0.0;
        for &r in &rows[..min_node_size] {
            left += grad[r as usize];
        }
        for p in min_node_size..=n - min_node_size {
            let (lo, hi) = (values[p - 1], values[p]);
            if hi > lo {
                let right = total - left;
                let score = left * left * inv[p] + right * right * inv[n - p];
                if score > best_score {
                    best_score = score;
                    best = Some(Split {
                        feature,
                        threshold: midpoint(lo, hi),
                        left_count: p,
                        left_sum: left,
                    });
                }
            }
            if p < n {
                left += grad[rows[p] as usize];
            }
        }
    }
    best
}

/// Stable partition of one node's range in every column other than the split
/// column, which is already ordered left-then-right.
fn partition(data: &mut SortedColumns, node: &GrowNode, split: &Split) {
    let range = node.start..node.end;
    for &r in &data.rows[split.feature][range.clone()][..split.left_count] {
        data.goes_left[r as usize] = true;
    }
    for &r in &data.rows[split.feature][range.clone()][split.left_count..] {
        data.goes_left[r as usize] = false;
    }
    let len = range.len();
    for j in (0..4).filter(|&j| j != split.feature) {
        let rows = &mut data.rows[j][range.clone()];
        let values = &mut data.values[j][range.clone()];
        let (left_rows, right_rows) = data.scratch_rows.split_at_mut(len + 1);
        let (left_values, right_values) = data.scratch_values.split_at_mut(len + 1);
        // Branch-free: write to both sides, advance one.
        let (mut l, mut r) = (0, 0);
        for (&row, &v) in rows.iter().zip(values.iter()) {
            let go = data.goes_left[row as usize];
            left_rows[l] = row;
            left_values[l] = v;
            right_rows[r] = row;
            right_values[r] = v;
            l += usize::from(go);
            r += usize::from(!go);
        }
        rows[..l].copy_from_slice(&left_rows[..l]);
        rows[l..].copy_from_slice(&right_rows[..r]);
        values[..l].copy_from_slice(&left_values[..l]);
        values[l..].copy_from_slice(&right_values[..r]);
    }
}

/// Grows one tree on `grad` with leaf values `sum(grad) / sum(hess)`.
/// On return `node_of[row]` holds each row's leaf.
pub(crate) fn grow_tree(
    data: &mut SortedColumns,
    grad: &[f64],
    hess: &[f64],
    max_depth: usize,
    min_node_size: usize,
    node_of: &mut [u8],
) -> Tree {
    debug_assert!(max_depth <= MAX_TREE_DEPTH);
    data.reset();
    let mut nodes = vec![GrowNode {
        start: 0,
        end: data.len(),
        sum_grad: grad.iter().sum(),
        split: None,
        column: 0,
    }];
    let mut frontier = vec![0usize];
    for depth in 0..max_depth {
        let last_level = depth + 1 == max_depth;
        let mut next = Vec::new();
        for &k in &frontier {
            let Some(split) = best_split(data, &nodes[k], grad, min_node_size) else {
                continue;
            };
            let node = nodes[k];
            // Children of the last level are leaves and only need the split column.
            if !last_level {
                partition(data, &node, &split);
            }
            nodes[k].split = Some(split);
            let mid = node.start + split.left_count;
            next.push(nodes.len());
            nodes.push(GrowNode {
                start: node.start,
                end: mid,
                sum_grad: split.left_sum,
                split: None,
                column: split.feature,
            });
            next.push(nodes.len());
            nodes.push(GrowNode {
                start: mid,
                end: node.end,
                sum_grad: node.sum_grad - split.left_sum,
                split: None,
                column: split.feature,
            });
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    let mut children = 1;
    let tree_nodes = nodes
        .iter()
        .enumerate()
        .map(|(idx, node)| match node.split {
            Some(split) => {
                let left = children;
                children += 2;
                Node::Split {
                    feature: split.feature as u8,
                    threshold: split.threshold,
                    left: left as u8,
                    right: (left + 1) as u8,
                }
            }
            None => {
                let (mut g, mut h) = (0.0, 0.0);
                for &r in &data.rows[node.column][node.start..node.end] {
                    let r = r as usize;
                    g += grad[r];
                    h += hess[r];
                    node_of[r] = idx as u8;
                }
                Node::Leaf {
                    value: if h > 0.0 { g / h } else { 0.0 },
                }
            }
        })
        .collect();
    Tree { nodes: tree_nodes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_best_stump(rows: &[[f64; 4]], grad: &[f64], min_node: usize) -> Option<(usize, f64)> {
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..4 {
            let mut vals: Vec<f64> = rows.iter().map(|r| r[f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = midpoint(w[0], w[1]);
                let (mut sl, mut nl, mut sr, mut nr) = (0.0, 0, 0.0, 0);
                for (r, g) in rows.iter().zip(grad) {
                    if r[f] <= thr {
                        sl += g;
                        nl += 1;
                    } else {
                        sr += g;
                        nr += 1;
                    }
                }
                if nl < min_node || nr < min_node {
                    continue;
                }
                let score = sl * sl * (1.0 / nl as f64) + sr * sr * (1.0 / nr as f64);
                if best.is_none_or(|b| score > b.0 + 1e-12) {
                    best = Some((score, f, thr));
                }
            }
        }
        best.map(|(_, f, thr)| (f, thr))
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (*seed >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn stump_matches_brute_force() {
        let mut seed = 7;
        for _ in 0..30 {
            let n = 40;
            let rows: Vec<[f64; 4]> = (0..n)
                .map(|_| std::array::from_fn(|_| (lcg(&mut seed) * 8.0).floor()))
                .collect();
            let grad: Vec<f64> = (0..n).map(|_| lcg(&mut seed) - 0.5).collect();
            let hess = vec![0.25; n];
            let mut data = SortedColumns::new(&rows);
            let mut node_of = vec![0u8; n];
            let tree = grow_tree(&mut data, &grad, &hess, 1, 5, &mut node_of);
            match (tree.nodes()[0], brute_best_stump(&rows, &grad, 5)) {
                (
                    Node::Split {
                        feature, threshold, ..
                    },
                    Some((f, thr)),
                ) => {
                    assert_eq!((feature as usize, threshold), (f, thr));
                }
                (Node::Leaf { .. }, None) => {}
                (got, want) => panic!("{got:?} vs {want:?}"),
            }
        }
    }

    #[test]
    fn training_partition_matches_traversal() {
        let mut seed = 11;
        let n = 300;
        let rows: Vec<[f64; 4]> = (0..n)
            .map(|_| std::array::from_fn(|_| lcg(&mut seed)))
            .collect();
        let grad: Vec<f64> = rows
            .iter()
            .map(|r| r[0] * r[1] - 0.25 + 0.1 * lcg(&mut seed))
            .collect();
        let hess = vec![0.2; n];
        let mut data = SortedColumns::new(&rows);
        let mut node_of = vec![0u8; n];
        let tree = grow_tree(&mut data, &grad, &hess, 3, 10, &mut node_of);
        assert!(tree.depth() <= 3 && tree.depth() >= 1);
        for (row, &leaf) in rows.iter().zip(&node_of) {
            assert_eq!(tree.leaf_index(row), leaf as usize);
        }
        // Leaf value is the Newton step over its rows.
        for (idx, node) in tree.nodes().iter().enumerate() {
            if let Node::Leaf { value } = node {
                let members: Vec<usize> = (0..n).filter(|&i| node_of[i] as usize == idx).collect();
                assert!(members.len() >= 10);
                let g: f64 = members.iter().map(|&i| grad[i]).sum();
                let h: f64 = members.iter().map(|&i| hess[i]).sum();
                assert!((value - g / h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_columns_give_a_leaf() {
        let rows = vec![[1.0, 2.0, 3.0, 4.0]; 50];
        let grad: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let mut data = SortedColumns::new(&rows);
        let mut node_of = vec![0u8; 50];
        let tree = grow_tree(&mut data, &grad, &[1.0; 50], 3, 10, &mut node_of);
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(tree.predict(&[9.0; 4]), grad.iter().sum::<f64>() / 50.0);
    }

    #[test]
    fn midpoint_separates_adjacent_floats() {
        let a: f64 = 1.0;
        let b = f64::from_bits(a.to_bits() + 1);
        let m = midpoint(a, b);
        assert!(a <= m && m < b);
        assert_eq!(midpoint(1.0, 3.0), 2.0);
    }
}
