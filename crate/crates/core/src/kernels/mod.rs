//! Subtree (STK), subset-tree (SSTK) and partial-tree (PTK) kernels.
//!
//! All three share the form `K(x, z) = Σ_{n ∈ x} Σ_{m ∈ z} Δ(n, m)` and differ
//! in the fragment space `Δ` counts:
//!
//! * STK: complete subtrees rooted at internal nodes, `Δ = λ^|subtree|` on an
//!   exact match.
//! * SSTK: production-complete fragments that may stop at any internal node.
//!   `Δ = 0` on different productions, otherwise `λ Π (1 + Δ(children))`.
//! * PTK: any connected portion of a subtree, with the `λ`/`μ` child
//!   subsequence recursion.
//!
//! Node identity is the pair (label, is-leaf), so a token never matches a
//! syntactic category with the same spelling. At unit decay each kernel is
//! the number of matching fragment-occurrence pairs, which
//! [`enumerate_fragments`] reproduces by brute force.

mod fragment;
mod perceptron;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::KernelError;
use crate::numcore::Tensor;
use crate::treebank::ConstituencyTree;

pub use fragment::{
    canonical_node_set, common_fragment_pairs, enumerate_fragments, fragment_counts, Fragment,
    PTK_MAX_NODES,
};
pub use perceptron::{KernelPerceptron, LabeledTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Stk,
    Sstk,
    Ptk,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [KernelKind::Stk, KernelKind::Sstk, KernelKind::Ptk];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Stk => "stk",
            KernelKind::Sstk => "sstk",
            KernelKind::Ptk => "ptk",
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for KernelKind {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "stk" | "st" => Ok(KernelKind::Stk),
            "sstk" | "sst" => Ok(KernelKind::Sstk),
            "ptk" | "pt" => Ok(KernelKind::Ptk),
            other => Err(KernelError::Config(format!("unknown kernel '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub decay_lambda: f64,
    /// Vertical decay, used by PTK only.
    pub decay_mu: f64,
    pub normalized: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::Sstk,
            decay_lambda: 0.4,
            decay_mu: 0.4,
            normalized: true,
        }
    }
}

impl KernelConfig {
    pub fn new(kind: KernelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Unit decay, unnormalized: kernel values are fragment-pair counts.
    pub fn counting(kind: KernelKind) -> Self {
        Self {
            kind,
            decay_lambda: 1.0,
            decay_mu: 1.0,
            normalized: false,
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if !ok(self.decay_lambda) {
            return Err(KernelError::Config(format!(
                "decay_lambda {} outside (0, 1]",
                self.decay_lambda
            )));
        }
        if self.kind == KernelKind::Ptk && !ok(self.decay_mu) {
            return Err(KernelError::Config(format!(
                "decay_mu {} outside (0, 1]",
                self.decay_mu
            )));
        }
        Ok(())
    }
}

/// Tree kernel between `x` and `z`.
pub fn kernel(x: &ConstituencyTree, z: &ConstituencyTree, cfg: &KernelConfig) -> f64 {
    let k = raw_kernel(x, z, cfg);
    if !cfg.normalized {
        return k;
    }
    let kxx = raw_kernel(x, x, cfg);
    let kzz = raw_kernel(z, z, cfg);
    normalize(k, kxx, kzz)
}

fn normalize(k: f64, kxx: f64, kzz: f64) -> f64 {
    let denom = (kxx * kzz).sqrt();
    if denom > 0.0 {
        k / denom
    } else {
        0.0
    }
}

/// Unnormalized kernel value.
pub fn raw_kernel(x: &ConstituencyTree, z: &ConstituencyTree, cfg: &KernelConfig) -> f64 {
    match cfg.kind {
        KernelKind::Stk => subtree_kernel(x, z, cfg.decay_lambda),
        KernelKind::Sstk => subset_tree_kernel(x, z, cfg.decay_lambda),
        KernelKind::Ptk => partial_tree_kernel(x, z, cfg.decay_lambda, cfg.decay_mu),
    }
}

#[inline]
fn same_symbol(x: &ConstituencyTree, i: usize, z: &ConstituencyTree, j: usize) -> bool {
    x.is_leaf(i) == z.is_leaf(j) && x.label(i) == z.label(j)
}

/// Interns every complete subtree of `tree` into `table`, returning one id per node.
fn subtree_ids(
    tree: &ConstituencyTree,
    table: &mut HashMap<(String, bool, Vec<usize>), usize>,
) -> Vec<usize> {
    let mut ids = vec![0usize; tree.len()];
    for i in (0..tree.len()).rev() {
        let key = (
            tree.label(i).to_string(),
            tree.is_leaf(i),
            tree.children(i).iter().map(|&c| ids[c]).collect(),
        );
        let next = table.len();
        ids[i] = *table.entry(key).or_insert(next);
    }
    ids
}

fn subtree_kernel(x: &ConstituencyTree, z: &ConstituencyTree, lambda: f64) -> f64 {
    let mut table = HashMap::new();
    let xi = subtree_ids(x, &mut table);
    let zi = subtree_ids(z, &mut table);
    let mut z_by_id: HashMap<usize, usize> = HashMap::new();
    for j in z.internal_nodes() {
        *z_by_id.entry(zi[j]).or_default() += 1;
    }
    x.internal_nodes()
        .map(|i| {
            let count = z_by_id.get(&xi[i]).copied().unwrap_or(0);
            if count == 0 {
                0.0
            } else {
                count as f64 * lambda.powi(x.subtree_size(i) as i32)
            }
        })
        .sum()
}

fn same_production(x: &ConstituencyTree, i: usize, z: &ConstituencyTree, j: usize) -> bool {
    if x.is_leaf(i) || z.is_leaf(j) || x.label(i) != z.label(j) {
        return false;
    }
    let (cx, cz) = (x.children(i), z.children(j));
    cx.len() == cz.len() && cx.iter().zip(cz).all(|(&a, &b)| same_symbol(x, a, z, b))
}

fn subset_tree_kernel(x: &ConstituencyTree, z: &ConstituencyTree, lambda: f64) -> f64 {
    let (nx, nz) = (x.len(), z.len());
    let mut delta = vec![0.0f64; nx * nz];
    let mut total = 0.0;
    // children carry larger pre-order ids, so a reverse sweep sees them first
    for i in (0..nx).rev() {
        for j in (0..nz).rev() {
            if !same_production(x, i, z, j) {
                continue;
            }
            let prod: f64 = x
                .children(i)
                .iter()
                .zip(z.children(j))
                .map(|(&a, &b)| 1.0 + delta[a * nz + b])
                .product();
            let d = lambda * prod;
            delta[i * nz + j] = d;
            total += d;
        }
    }
    total
}

fn partial_tree_kernel(x: &ConstituencyTree, z: &ConstituencyTree, lambda: f64, mu: f64) -> f64 {
    let (nx, nz) = (x.len(), z.len());
    let mut delta = vec![0.0f64; nx * nz];
    let mut total = 0.0;
    let lambda2 = lambda * lambda;
    for i in (0..nx).rev() {
        for j in (0..nz).rev() {
            if !same_symbol(x, i, z, j) {
                continue;
            }
            let (cx, cz) = (x.children(i), z.children(j));
            let mut inner = lambda2;
            if !cx.is_empty() && !cz.is_empty() {
                let (a, b) = (cx.len(), cz.len());
                // e[p][q]: weighted sum over child subsequence pairs ending at (p, q)
                // g[p][q]: Σ_{p'<p, q'<q} e[p'][q'] λ^{(p-p') + (q-q')}
                let mut e = vec![0.0f64; a * b];
                let mut g = vec![0.0f64; (a + 1) * (b + 1)];
                for p in 0..a {
                    for q in 0..b {
                        if p > 0 && q > 0 {
                            g[p * (b + 1) + q] = lambda * g[(p - 1) * (b + 1) + q]
                                + lambda * g[p * (b + 1) + q - 1]
                                - lambda2 * g[(p - 1) * (b + 1) + q - 1]
                                + lambda2 * e[(p - 1) * b + q - 1];
                        }
                        let d = delta[cx[p] * nz + cz[q]];
                        if d != 0.0 {
                            e[p * b + q] = d * (lambda2 + g[p * (b + 1) + q]);
                        }
                    }
                }
                inner += e.iter().sum::<f64>();
            }
            let d = mu * inner;
            delta[i * nz + j] = d;
            total += d;
        }
    }
    total
}

/// Kernel matrix over `trees`. Entries of the upper triangle are computed in
/// parallel and assembled in index order.
pub fn gram(trees: &[ConstituencyTree], cfg: &KernelConfig) -> Tensor {
    let n = trees.len();
    let diag: Vec<f64> = trees.par_iter().map(|t| raw_kernel(t, t, cfg)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let k = if i == j {
                diag[i]
            } else {
                raw_kernel(&trees[i], &trees[j], cfg)
            };
            if cfg.normalized {
                normalize(k, diag[i], diag[j])
            } else {
                k
            }
        })
        .collect();
    let mut out = Tensor::zeros(n, n);
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        out.set(i, j, v);
        out.set(j, i, v);
    }
    out
}
