//! Exhaustive fragment enumeration and the canonical fragment form.
//!
//! Canonical form: a bracketed rendering where a leaf token is written bare,
//! an internal node with some of its children kept is `(L c1 c2 ...)`, and an
//! internal node kept without any children (a frontier) is `(L)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::KernelError;
use crate::treebank::ConstituencyTree;

use super::KernelKind;

/// PTK enumeration is refused above this many nodes.
pub const PTK_MAX_NODES: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub canonical: String,
    pub kind: KernelKind,
    /// Number of distinct (root, node subset) occurrences in the source tree.
    pub occurrences: u64,
}

impl Fragment {
    /// The fragment as a tree; frontier nodes become childless nodes.
    pub fn tree(&self) -> ConstituencyTree {
        if self.canonical.starts_with('(') {
            ConstituencyTree::parse(&self.canonical).expect("canonical forms parse")
        } else {
            ConstituencyTree::leaf(self.canonical.clone())
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.tree().len()
    }
}

type Counts = BTreeMap<String, u64>;

fn leaf_form(tree: &ConstituencyTree, i: usize) -> String {
    tree.label(i).to_string()
}

fn frontier_form(tree: &ConstituencyTree, i: usize) -> String {
    format!("({})", tree.label(i))
}

fn full_form(tree: &ConstituencyTree, i: usize) -> String {
    if tree.is_leaf(i) {
        return leaf_form(tree, i);
    }
    let mut s = format!("({}", tree.label(i));
    for &c in tree.children(i) {
        s.push(' ');
        s.push_str(&full_form(tree, c));
    }
    s.push(')');
    s
}

/// All ordered combinations of one option per slot, rendered under `label`.
fn combine(label: &str, slots: &[Counts]) -> Counts {
    let mut acc: Vec<(String, u64)> = vec![(String::new(), 1)];
    for slot in slots {
        let mut next = Vec::with_capacity(acc.len() * slot.len());
        for (prefix, n) in &acc {
            for (form, m) in slot {
                next.push((format!("{prefix} {form}"), n * m));
            }
        }
        acc = next;
    }
    let mut out = Counts::new();
    for (body, n) in acc {
        *out.entry(format!("({label}{body})")).or_default() += n;
    }
    out
}

fn merge_into(dst: &mut Counts, src: Counts) {
    for (k, v) in src {
        *dst.entry(k).or_default() += v;
    }
}

/// Per-node fragment counts for fragments rooted at that node.
fn rooted_counts(tree: &ConstituencyTree, kind: KernelKind) -> Vec<Counts> {
    let n = tree.len();
    let mut rooted: Vec<Counts> = vec![Counts::new(); n];
    for i in (0..n).rev() {
        let children = tree.children(i);
        rooted[i] = match kind {
            KernelKind::Stk => {
                if tree.is_leaf(i) {
                    Counts::new()
                } else {
                    Counts::from([(full_form(tree, i), 1)])
                }
            }
            KernelKind::Sstk => {
                if tree.is_leaf(i) {
                    Counts::new()
                } else {
                    let slots: Vec<Counts> = children
                        .iter()
                        .map(|&c| {
                            if tree.is_leaf(c) {
                                Counts::from([(leaf_form(tree, c), 1)])
                            } else {
                                let mut opts = rooted[c].clone();
                                *opts.entry(frontier_form(tree, c)).or_default() += 1;
                                opts
                            }
                        })
                        .collect();
                    combine(tree.label(i), &slots)
                }
            }
            KernelKind::Ptk => {
                if tree.is_leaf(i) {
                    Counts::from([(leaf_form(tree, i), 1)])
                } else {
                    let mut out = Counts::from([(frontier_form(tree, i), 1)]);
                    let k = children.len();
                    for mask in 1u32..(1u32 << k) {
                        let slots: Vec<Counts> = (0..k)
                            .filter(|b| mask & (1 << b) != 0)
                            .map(|b| rooted[children[b]].clone())
                            .collect();
                        merge_into(&mut out, combine(tree.label(i), &slots));
                    }
                    out
                }
            }
        };
    }
    rooted
}

/// Canonical form → occurrence count over every fragment of `kind` in `tree`.
pub fn fragment_counts(
    tree: &ConstituencyTree,
    kind: KernelKind,
    max_nodes: usize,
) -> Result<BTreeMap<String, u64>, KernelError> {
    let cap = match kind {
        KernelKind::Ptk => max_nodes.min(PTK_MAX_NODES),
        KernelKind::Stk => usize::MAX,
        KernelKind::Sstk => max_nodes,
    };
    if tree.len() > cap {
        return Err(KernelError::TooLarge {
            kind: kind.name(),
            n_nodes: tree.len(),
            cap,
        });
    }
    let mut all = Counts::new();
    for c in rooted_counts(tree, kind) {
        merge_into(&mut all, c);
    }
    Ok(all)
}

/// Exhaustive, duplicate-free fragment list of `tree` sorted by canonical form.
pub fn enumerate_fragments(
    tree: &ConstituencyTree,
    kind: KernelKind,
    max_nodes: usize,
) -> Result<Vec<Fragment>, KernelError> {
    Ok(fragment_counts(tree, kind, max_nodes)?
        .into_iter()
        .map(|(canonical, occurrences)| Fragment {
            canonical,
            kind,
            occurrences,
        })
        .collect())
}

/// Number of matching fragment-occurrence pairs between two inventories.
pub fn common_fragment_pairs(x: &BTreeMap<String, u64>, z: &BTreeMap<String, u64>) -> u64 {
    let (small, large) = if x.len() <= z.len() { (x, z) } else { (z, x) };
    small
        .iter()
        .filter_map(|(k, a)| large.get(k).map(|b| a * b))
        .sum()
}

/// Canonical form of an arbitrary node subset of `tree`.
///
/// Each connected component is rendered from its top node; components are
/// joined with `" + "` in pre-order of their tops.
pub fn canonical_node_set(tree: &ConstituencyTree, selected: &[bool]) -> String {
    let mut parts = Vec::new();
    for i in 0..tree.len() {
        if !selected[i] {
            continue;
        }
        let top = tree.parent(i).is_none_or(|p| !selected[p]);
        if top {
            parts.push(render_selected(tree, i, selected));
        }
    }
    parts.join(" + ")
}

fn render_selected(tree: &ConstituencyTree, i: usize, selected: &[bool]) -> String {
    if tree.is_leaf(i) {
        return leaf_form(tree, i);
    }
    let kept: Vec<usize> = tree
        .children(i)
        .iter()
        .copied()
        .filter(|&c| selected[c])
        .collect();
    if kept.is_empty() {
        return frontier_form(tree, i);
    }
    let mut s = format!("({}", tree.label(i));
    for c in kept {
        s.push(' ');
        s.push_str(&render_selected(tree, c, selected));
    }
    s.push(')');
    s
}
