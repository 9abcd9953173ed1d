//! Penn-style bracketed constituency trees, vocabularies and their
//! adjacency-matrix view.
//!
//! Nodes are numbered in depth-first pre-order from the root with children
//! left to right; every matrix built from a tree uses that numbering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::TreebankError;
use crate::numcore::Tensor;

/// Default cap on nodes per tree.
pub const DEFAULT_MAX_NODES: usize = 256;
/// Reserved vocabulary entry for unseen labels.
pub const OOV: &str = "__OOV__";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreeNode {
    pub label: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Labeled ordered rooted tree. Internal nodes carry syntactic categories,
/// leaves carry tokens. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConstituencyTree {
    nodes: Vec<TreeNode>,
}

impl ConstituencyTree {
    pub fn leaf(label: impl Into<String>) -> Self {
        Self {
            nodes: vec![TreeNode {
                label: label.into(),
                parent: None,
                children: Vec::new(),
            }],
        }
    }

    /// Joins `children` under a new root labeled `label`.
    pub fn node(label: impl Into<String>, children: Vec<ConstituencyTree>) -> Self {
        let mut nodes = vec![TreeNode {
            label: label.into(),
            parent: None,
            children: Vec::new(),
        }];
        for child in children {
            let offset = nodes.len();
            nodes[0].children.push(offset);
            for (i, mut n) in child.nodes.into_iter().enumerate() {
                n.parent = Some(if i == 0 { 0 } else { n.parent.unwrap() + offset });
                for c in &mut n.children {
                    *c += offset;
                }
                nodes.push(n);
            }
        }
        Self { nodes }
    }

    pub fn parse(text: &str) -> Result<Self, TreebankError> {
        parse_bracketed(text)
    }

    pub fn render(&self) -> String {
        render_bracketed(self)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn label(&self, i: usize) -> &str {
        &self.nodes[i].label
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.nodes[i].children
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.nodes[i].parent
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.nodes[i].children.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.is_leaf(i))
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.is_leaf(i))
    }

    /// Number of nodes in the subtree rooted at `i`. Pre-order numbering
    /// makes that subtree the contiguous range `i..i + subtree_size(i)`.
    pub fn subtree_size(&self, i: usize) -> usize {
        let mut size = 1;
        let mut stack: Vec<usize> = self.children(i).to_vec();
        while let Some(c) = stack.pop() {
            size += 1;
            stack.extend_from_slice(self.children(c));
        }
        size
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.len()];
        for i in 1..self.len() {
            depth[i] = depth[self.parent(i).unwrap()] + 1;
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Checks parent/child consistency, single root, reachability and
    /// pre-order numbering.
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("empty tree".into());
        }
        if self.nodes[0].parent.is_some() {
            return Err("node 0 has a parent".into());
        }
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let p = n.parent.ok_or_else(|| format!("node {i} has no parent"))?;
            if !self.nodes[p].children.contains(&i) {
                return Err(format!("node {i} missing from children of {p}"));
            }
        }
        // iterative pre-order walk must reproduce 0..n exactly
        let mut order = Vec::with_capacity(self.len());
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if order.len() > self.len() {
                return Err("cycle detected".into());
            }
            order.push(i);
            stack.extend(self.children(i).iter().rev());
        }
        if order != (0..self.len()).collect::<Vec<_>>() {
            return Err("nodes are not in pre-order or not all reachable".into());
        }
        if self.nodes.iter().any(|n| n.label.is_empty()) {
            return Err("empty label".into());
        }
        Ok(())
    }

    pub fn check_size(&self, cap: usize) -> Result<(), TreebankError> {
        if self.len() > cap {
            return Err(TreebankError::TooLarge {
                n_nodes: self.len(),
                cap,
            });
        }
        Ok(())
    }

    /// Lowercases every leaf token.
    pub fn lowercase_leaves(&mut self) {
        for n in &mut self.nodes {
            if n.children.is_empty() {
                n.label = n.label.to_lowercase();
            }
        }
    }

    /// The subtree rooted at `i` as its own tree.
    pub fn subtree(&self, i: usize) -> ConstituencyTree {
        let children = self.children(i).iter().map(|&c| self.subtree(c)).collect();
        if self.is_leaf(i) {
            ConstituencyTree::leaf(self.label(i))
        } else {
            ConstituencyTree::node(self.label(i), children)
        }
    }
}

impl FromStr for ConstituencyTree {
    type Err = TreebankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_bracketed(s)
    }
}

impl fmt::Display for ConstituencyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_bracketed(self))
    }
}

/// Offsets are reported 1-based, so an unterminated input points one past its end.
fn parse_err(offset: usize, message: impl Into<String>) -> TreebankError {
    TreebankError::Parse {
        offset: offset + 1,
        message: message.into(),
    }
}

/// Parses a single bracketed s-expression such as `(S (NP (PRP it)) (VP (VBZ works)))`.
///
/// Bare tokens become leaves; `(X)` is a single childless node.
pub fn parse_bracketed(text: &str) -> Result<ConstituencyTree, TreebankError> {
    let bytes = text.as_bytes();
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut open: Vec<usize> = Vec::new();
    let mut awaiting_label = false;
    let mut root_closed = false;
    let mut pos = 0;

    while pos < bytes.len() {
        let b = bytes[pos];
        if b.is_ascii_whitespace() {
            pos += 1;
            continue;
        }
        match b {
            b'(' => {
                if awaiting_label {
                    return Err(parse_err(pos, "empty label"));
                }
                if root_closed || (open.is_empty() && !nodes.is_empty()) {
                    return Err(parse_err(pos, "multiple roots"));
                }
                let parent = open.last().copied();
                let id = nodes.len();
                if let Some(p) = parent {
                    nodes[p].children.push(id);
                }
                nodes.push(TreeNode {
                    label: String::new(),
                    parent,
                    children: Vec::new(),
                });
                open.push(id);
                awaiting_label = true;
                pos += 1;
            }
            b')' => {
                if awaiting_label {
                    return Err(parse_err(pos, "empty label"));
                }
                if open.pop().is_none() {
                    return Err(parse_err(pos, "unbalanced ')'"));
                }
                if open.is_empty() {
                    root_closed = true;
                }
                pos += 1;
            }
            _ => {
                let start = pos;
                while pos < bytes.len()
                    && !bytes[pos].is_ascii_whitespace()
                    && bytes[pos] != b'('
                    && bytes[pos] != b')'
                {
                    pos += 1;
                }
                let atom = &text[start..pos];
                if awaiting_label {
                    let top = *open.last().unwrap();
                    nodes[top].label = atom.to_string();
                    awaiting_label = false;
                } else if let Some(&top) = open.last() {
                    let id = nodes.len();
                    nodes[top].children.push(id);
                    nodes.push(TreeNode {
                        label: atom.to_string(),
                        parent: Some(top),
                        children: Vec::new(),
                    });
                } else if nodes.is_empty() {
                    return Err(parse_err(start, "expected '('"));
                } else {
                    return Err(parse_err(start, "multiple roots"));
                }
            }
        }
    }
    if !open.is_empty() {
        return Err(parse_err(
            bytes.len(),
            format!("unbalanced: {} unclosed '('", open.len()),
        ));
    }
    if nodes.is_empty() {
        return Err(parse_err(0, "empty input"));
    }
    Ok(ConstituencyTree { nodes })
}

/// Canonical single-space bracketed form. Non-root leaves are bare tokens;
/// a childless root renders as `(X)`.
pub fn render_bracketed(tree: &ConstituencyTree) -> String {
    let mut out = String::new();
    if tree.is_leaf(0) {
        out.push('(');
        out.push_str(tree.label(0));
        out.push(')');
        return out;
    }
    render_node(tree, 0, &mut out);
    out
}

fn render_node(tree: &ConstituencyTree, i: usize, out: &mut String) {
    if tree.is_leaf(i) {
        out.push_str(tree.label(i));
        return;
    }
    out.push('(');
    out.push_str(tree.label(i));
    for &c in tree.children(i) {
        out.push(' ');
        render_node(tree, c, out);
    }
    out.push(')');
}

/// Label-to-index maps for syntactic tags and leaf tokens. Index 0 of each
/// namespace is the out-of-vocabulary bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tags: BTreeMap<String, usize>,
    pub tokens: BTreeMap<String, usize>,
    #[serde(default)]
    pub lowercase_tokens: bool,
}

impl Vocabulary {
    pub fn build<'a>(
        trees: impl IntoIterator<Item = &'a ConstituencyTree>,
        lowercase_tokens: bool,
    ) -> Self {
        let mut tags = BTreeSet::new();
        let mut tokens = BTreeSet::new();
        for t in trees {
            for i in 0..t.len() {
                if t.is_leaf(i) {
                    tokens.insert(normalize_token(t.label(i), lowercase_tokens));
                } else {
                    tags.insert(t.label(i).to_string());
                }
            }
        }
        let index = |set: BTreeSet<String>| {
            let mut map = BTreeMap::new();
            map.insert(OOV.to_string(), 0);
            for (i, s) in set.into_iter().filter(|s| s != OOV).enumerate() {
                map.insert(s, i + 1);
            }
            map
        };
        Self {
            tags: index(tags),
            tokens: index(tokens),
            lowercase_tokens,
        }
    }

    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    /// Size of the joint feature space (tags followed by tokens).
    pub fn size(&self) -> usize {
        self.tags.len() + self.tokens.len()
    }

    pub fn tag_id(&self, tag: &str) -> usize {
        self.tags.get(tag).copied().unwrap_or(0)
    }

    pub fn token_id(&self, token: &str) -> usize {
        let key = normalize_token(token, self.lowercase_tokens);
        self.tokens.get(key.as_str()).copied().unwrap_or(0)
    }

    /// Joint feature index for node `i` of `tree`.
    pub fn feature_id(&self, tree: &ConstituencyTree, i: usize) -> usize {
        if tree.is_leaf(i) {
            self.n_tags() + self.token_id(tree.label(i))
        } else {
            self.tag_id(tree.label(i))
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("vocabulary serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn save(&self, path: &Path) -> Result<(), TreebankError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TreebankError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn normalize_token(token: &str, lowercase: bool) -> String {
    if lowercase {
        token.to_lowercase()
    } else {
        token.to_string()
    }
}

/// Adjacency view of a tree. `a_fwd[i][j] = 1` iff `j` is a child of `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeGraph {
    pub a_fwd: Tensor,
    pub a_bwd: Tensor,
    pub d_fwd: Vec<f64>,
    pub d_bwd: Vec<f64>,
    pub leaf_mask: Vec<f64>,
    pub feature_ids: Vec<usize>,
}

impl TreeGraph {
    /// Builds the view from a (possibly weighted) forward adjacency.
    /// Nodes whose forward degree is below `1e-9` count as leaves.
    pub fn from_forward(a_fwd: Tensor, feature_ids: Vec<usize>) -> Self {
        let a_bwd = a_fwd.transpose();
        let d_fwd = a_fwd.row_sums().into_data();
        let d_bwd = a_bwd.row_sums().into_data();
        let leaf_mask = d_fwd
            .iter()
            .map(|&d| if d.abs() < 1e-9 { 1.0 } else { 0.0 })
            .collect();
        Self {
            a_fwd,
            a_bwd,
            d_fwd,
            d_bwd,
            leaf_mask,
            feature_ids,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.a_fwd.rows()
    }

    pub fn edge_count(&self) -> f64 {
        self.a_fwd.sum()
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.leaf_mask[i] > 0.5
    }

    /// Undirected binary adjacency `a_fwd + a_bwd` without self-loops.
    pub fn symmetric_adjacency(&self) -> Tensor {
        self.a_fwd.add(&self.a_bwd).expect("square adjacency")
    }

    /// `D^-1/2 (A + I) D^-1/2` over the symmetrized adjacency.
    pub fn normalized_adjacency(&self) -> Tensor {
        normalize_with_self_loops(&self.symmetric_adjacency())
    }

    /// Children of `i` according to the forward adjacency.
    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&j| self.a_fwd.get(i, j) > 0.5)
            .collect()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        (0..self.n_nodes()).find(|&j| self.a_fwd.get(j, i) > 0.5)
    }
}

pub fn normalize_with_self_loops(a: &Tensor) -> Tensor {
    let n = a.rows();
    let with_loops = a.add(&Tensor::identity(n)).expect("square adjacency");
    let inv_sqrt: Vec<f64> = with_loops
        .row_sums()
        .data()
        .iter()
        .map(|d| 1.0 / d.sqrt())
        .collect();
    let mut out = with_loops;
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, out.get(i, j) * inv_sqrt[i] * inv_sqrt[j]);
        }
    }
    out
}

/// Graph view of `tree` with features looked up in `vocab`.
pub fn to_graph(tree: &ConstituencyTree, vocab: &Vocabulary) -> TreeGraph {
    let n = tree.len();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for &c in tree.children(i) {
            a.set(i, c, 1.0);
        }
    }
    let ids = (0..n).map(|i| vocab.feature_id(tree, i)).collect();
    TreeGraph::from_forward(a, ids)
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub label: String,
    pub tree: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: String,
    pub tree: ConstituencyTree,
}

impl Sample {
    pub fn to_record(&self) -> Record {
        Record {
            id: self.id.clone(),
            label: self.label.clone(),
            tree: self.tree.render(),
        }
    }
}

/// Reads a JSON-lines dataset, rejecting trees above `max_nodes`.
pub fn read_jsonl(
    reader: impl BufRead,
    max_nodes: usize,
    lowercase_tokens: bool,
) -> Result<Vec<Sample>, TreebankError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = |message: String| TreebankError::Dataset {
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| ctx(e.to_string()))?;
        let mut tree = parse_bracketed(&rec.tree).map_err(|e| ctx(e.to_string()))?;
        tree.check_size(max_nodes).map_err(|e| ctx(e.to_string()))?;
        if lowercase_tokens {
            tree.lowercase_leaves();
        }
        out.push(Sample {
            id: rec.id,
            label: rec.label,
            tree,
        });
    }
    Ok(out)
}

pub fn load_jsonl(
    path: &Path,
    max_nodes: usize,
    lowercase_tokens: bool,
) -> Result<Vec<Sample>, TreebankError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file), max_nodes, lowercase_tokens)
}

pub fn write_jsonl(mut writer: impl Write, samples: &[Sample]) -> Result<(), TreebankError> {
    for s in samples {
        serde_json::to_writer(&mut writer, &s.to_record())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// SHA-256 over the canonical JSON-lines encoding of `samples`.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, samples).expect("in-memory write");
    hex::encode(Sha256::digest(&buf))
}

/// Sorted distinct labels.
pub fn class_names(samples: &[Sample]) -> Vec<String> {
    samples
        .iter()
        .map(|s| s.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
