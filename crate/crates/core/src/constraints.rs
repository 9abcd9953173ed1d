//! Pooling regularizers that push every cluster of a soft assignment matrix
//! `P` (n nodes × k clusters) toward a kernel-valid tree fragment, plus the
//! two anti-degeneracy terms (overlap, minimum intensity).
//!
//! The ratio constraints are `max(0, 1 - num / (den + DENOM_FLOOR))` where
//! both terms are traces over all clusters:
//!
//! | constraint | numerator | denominator |
//! |---|---|---|
//! | contiguity | `Tr(Pᵀ (A→ - diag A) P)` | `Σ_c s_c (1 - 1/N_c)` |
//! | ST | `Tr(Pᵀ (A→ + diag(L) A←) P)` | `Σ_c Σ_i P_ic² (d→_i + L_i d←_i)` |
//! | SST | `Tr(Pᵀ M A→ M P)`, `M = diag(1-L)` | `Σ_c Σ_i (1-L_i) P_ic² d→ᴸ_i` |
//!
//! with `s_c = Σ_i P_ic²`, `N_c = #{i : P_ic² ≥ ε}` and `d→ᴸ` the number of
//! non-leaf children. When a denominator vanishes the constraint is 0 and the
//! affected clusters are flagged as degenerate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::NumError;
use crate::kernels::KernelKind;
use crate::numcore::{Tape, Tensor, Var, DENOM_FLOOR};
use crate::treebank::TreeGraph;

/// Denominators below this are treated as zero.
pub const DEGENERATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Contiguity,
    St,
    Sst,
    Overlap,
    Intensity,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 5] = [
        ConstraintKind::Contiguity,
        ConstraintKind::St,
        ConstraintKind::Sst,
        ConstraintKind::Overlap,
        ConstraintKind::Intensity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConstraintKind::Contiguity => "contiguity",
            ConstraintKind::St => "st",
            ConstraintKind::Sst => "sst",
            ConstraintKind::Overlap => "overlap",
            ConstraintKind::Intensity => "intensity",
        }
    }
}

impl std::fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolActivation {
    Softmax,
    Sigmoid,
}

impl PoolActivation {
    pub fn apply<'t>(self, logits: Var<'t>) -> Var<'t> {
        match self {
            PoolActivation::Softmax => logits.softmax_rows(),
            PoolActivation::Sigmoid => logits.sigmoid(),
        }
    }
}

/// Constraints enabled for one fragment definition and their thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSet {
    pub kinds: Vec<ConstraintKind>,
    /// Contiguity active-node threshold on `P_ic²`.
    pub epsilon: f64,
    /// Overlap threshold.
    pub delta: f64,
    /// Minimum-intensity coefficient.
    pub alpha: f64,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self::for_kernel(KernelKind::Sstk)
    }
}

impl ConstraintSet {
    pub fn for_kernel(kind: KernelKind) -> Self {
        use ConstraintKind::*;
        let kinds = match kind {
            KernelKind::Stk => vec![Contiguity, St, Overlap, Intensity],
            KernelKind::Sstk => vec![Contiguity, Sst, Overlap, Intensity],
            KernelKind::Ptk => vec![Contiguity, Overlap, Intensity],
        };
        Self {
            kinds,
            epsilon: 1e-4,
            delta: 0.3,
            alpha: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(format!("delta {} outside [0, 1]", self.delta));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.1) {
            return Err(format!("epsilon {} must be small and positive", self.epsilon));
        }
        Ok(())
    }
}

/// A soft assignment matrix together with the graph it pools.
#[derive(Debug, Clone)]
pub struct PoolingAssignment<'g> {
    pub p: Tensor,
    pub activation: PoolActivation,
    pub graph: &'g TreeGraph,
}

impl<'g> PoolingAssignment<'g> {
    pub fn new(p: Tensor, activation: PoolActivation, graph: &'g TreeGraph) -> Result<Self, String> {
        if p.rows() != graph.n_nodes() {
            return Err(format!(
                "assignment has {} rows for a graph of {} nodes",
                p.rows(),
                graph.n_nodes()
            ));
        }
        match activation {
            PoolActivation::Softmax => {
                for r in 0..p.rows() {
                    let s: f64 = p.row(r).iter().sum();
                    if (s - 1.0).abs() > 1e-6 {
                        return Err(format!("row {r} sums to {s}, expected 1"));
                    }
                }
            }
            PoolActivation::Sigmoid => {
                if p.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err("sigmoid assignment entries must lie in [0, 1]".into());
                }
            }
        }
        Ok(Self {
            p,
            activation,
            graph,
        })
    }

    /// Wraps an arbitrary non-negative matrix, e.g. a binary test column.
    pub fn raw(p: Tensor, graph: &'g TreeGraph) -> Self {
        Self {
            p,
            activation: PoolActivation::Sigmoid,
            graph,
        }
    }
}

/// A constraint recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapedConstraint<'t> {
    pub value: Var<'t>,
    pub degenerate_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintValue {
    pub value: f64,
    pub degenerate_columns: Vec<usize>,
}

impl ConstraintValue {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_columns.is_empty()
    }
}

fn ratio_constraint<'t>(
    tape: &'t Tape,
    num: Var<'t>,
    den: Var<'t>,
    per_column_den: &Tensor,
) -> Result<TapedConstraint<'t>, NumError> {
    let degenerate_columns = (0..per_column_den.cols())
        .filter(|&c| per_column_den.get(0, c) < DEGENERATE_TOL)
        .collect();
    let value = if den.item() < DEGENERATE_TOL {
        tape.scalar(0.0)
    } else {
        num.div(den.add_scalar(DENOM_FLOOR))?
            .scale(-1.0)
            .add_scalar(1.0)
            .relu()
    };
    Ok(TapedConstraint {
        value,
        degenerate_columns,
    })
}

/// `Tr(Pᵀ M P)`.
fn quadratic_trace<'t>(p: Var<'t>, m: &Tensor) -> Result<Var<'t>, NumError> {
    let m = p.tape().constant(m.clone());
    p.t().matmul(m.matmul(p)?)?.trace()
}

/// `Σ_c Σ_i w_i P_ic²`, returned with the per-column sums.
fn weighted_self_intensity<'t>(p: Var<'t>, weights: &[f64]) -> Result<(Var<'t>, Tensor), NumError> {
    let w = p.tape().constant(Tensor::column(weights));
    let cols = p.hadamard(p)?.scale_rows(w)?.col_sum();
    let per_col = cols.value();
    Ok((cols.sum(), per_col))
}

pub fn contiguity_taped<'t>(
    p: Var<'t>,
    graph: &TreeGraph,
    epsilon: f64,
) -> Result<TapedConstraint<'t>, NumError> {
    let tape = p.tape();
    let a = &graph.a_fwd;
    let mut off = a.clone();
    for i in 0..off.rows() {
        off.set(i, i, 0.0);
    }
    let num = quadratic_trace(p, &off)?;
    let pv = p.value();
    // 1 - 1/N_c per column; N_c is a count and carries no gradient
    let weights: Vec<f64> = (0..pv.cols())
        .map(|c| {
            let active = (0..pv.rows())
                .filter(|&i| pv.get(i, c) * pv.get(i, c) >= epsilon)
                .count();
            if active == 0 {
                0.0
            } else {
                1.0 - 1.0 / active as f64
            }
        })
        .collect();
    let self_int = p.hadamard(p)?.col_sum();
    let w = tape.constant(Tensor::from_vec(1, weights.len(), weights)?);
    let per_col = self_int.hadamard(w)?;
    let den = per_col.sum();
    ratio_constraint(tape, num, den, &per_col.value())
}

pub fn st_taped<'t>(p: Var<'t>, graph: &TreeGraph) -> Result<TapedConstraint<'t>, NumError> {
    let n = graph.n_nodes();
    let leaf = &graph.leaf_mask;
    let mut m = graph.a_fwd.clone();
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, m.get(i, j) + leaf[i] * graph.a_bwd.get(i, j));
        }
    }
    let num = quadratic_trace(p, &m)?;
    let weights: Vec<f64> = (0..n).map(|i| graph.d_fwd[i] + leaf[i] * graph.d_bwd[i]).collect();
    let (den, per_col) = weighted_self_intensity(p, &weights)?;
    ratio_constraint(p.tape(), num, den, &per_col)
}

pub fn sst_taped<'t>(p: Var<'t>, graph: &TreeGraph) -> Result<TapedConstraint<'t>, NumError> {
    let n = graph.n_nodes();
    let keep: Vec<f64> = graph.leaf_mask.iter().map(|l| 1.0 - l).collect();
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, keep[i] * graph.a_fwd.get(i, j) * keep[j]);
        }
    }
    let num = quadratic_trace(p, &m)?;
    let weights: Vec<f64> = (0..n)
        .map(|i| keep[i] * (0..n).map(|j| graph.a_fwd.get(i, j) * keep[j]).sum::<f64>())
        .collect();
    let (den, per_col) = weighted_self_intensity(p, &weights)?;
    ratio_constraint(p.tape(), num, den, &per_col)
}

pub fn overlap_taped<'t>(p: Var<'t>, delta: f64) -> Result<TapedConstraint<'t>, NumError> {
    let tape = p.tape();
    let k = p.shape().1;
    if k < 2 {
        return Ok(TapedConstraint {
            value: tape.scalar(0.0),
            degenerate_columns: Vec::new(),
        });
    }
    let gram = p.t().matmul(p)?;
    let eye = tape.constant(Tensor::identity(k));
    let mut off = Tensor::ones(k, k);
    for i in 0..k {
        off.set(i, i, 0.0);
    }
    let off = tape.constant(off);
    let total_self = gram.hadamard(eye)?.sum();
    let inv = tape
        .scalar(1.0)
        .div(total_self.add_scalar(DENOM_FLOOR))?;
    let ratio = gram.hadamard(off)?.mul_scalar_var(inv)?;
    let excess = ratio.add_scalar(-delta).relu().hadamard(off)?;
    Ok(TapedConstraint {
        value: excess.frobenius(),
        degenerate_columns: Vec::new(),
    })
}

pub fn intensity_taped<'t>(p: Var<'t>, alpha: f64) -> Result<TapedConstraint<'t>, NumError> {
    let (n, k) = p.shape();
    let threshold = alpha * n as f64 / k as f64;
    let self_int = p.hadamard(p)?.col_sum();
    let deficit = self_int.scale(-1.0).add_scalar(threshold).relu();
    Ok(TapedConstraint {
        value: deficit.frobenius(),
        degenerate_columns: Vec::new(),
    })
}

/// Records constraint `kind` for assignment `p` of `graph`.
pub fn evaluate_taped<'t>(
    kind: ConstraintKind,
    p: Var<'t>,
    graph: &TreeGraph,
    set: &ConstraintSet,
) -> Result<TapedConstraint<'t>, NumError> {
    match kind {
        ConstraintKind::Contiguity => contiguity_taped(p, graph, set.epsilon),
        ConstraintKind::St => st_taped(p, graph),
        ConstraintKind::Sst => sst_taped(p, graph),
        ConstraintKind::Overlap => overlap_taped(p, set.delta),
        ConstraintKind::Intensity => intensity_taped(p, set.alpha),
    }
}

fn on_fresh_tape(
    p: &Tensor,
    f: impl for<'t> Fn(Var<'t>) -> Result<TapedConstraint<'t>, NumError>,
) -> ConstraintValue {
    let tape = Tape::new();
    let pv = tape.constant(p.clone());
    let c = f(pv).expect("assignment shape matches graph");
    ConstraintValue {
        value: c.value.item(),
        degenerate_columns: c.degenerate_columns,
    }
}

pub fn contiguity(pa: &PoolingAssignment<'_>, epsilon: f64) -> ConstraintValue {
    on_fresh_tape(&pa.p, |p| contiguity_taped(p, pa.graph, epsilon))
}

pub fn st_constraint(pa: &PoolingAssignment<'_>) -> ConstraintValue {
    on_fresh_tape(&pa.p, |p| st_taped(p, pa.graph))
}

pub fn sst_constraint(pa: &PoolingAssignment<'_>) -> ConstraintValue {
    on_fresh_tape(&pa.p, |p| sst_taped(p, pa.graph))
}

pub fn overlap(pa: &PoolingAssignment<'_>, delta: f64) -> ConstraintValue {
    on_fresh_tape(&pa.p, |p| overlap_taped(p, delta))
}

pub fn min_intensity(pa: &PoolingAssignment<'_>, alpha: f64) -> ConstraintValue {
    on_fresh_tape(&pa.p, |p| intensity_taped(p, alpha))
}

pub fn evaluate(kind: ConstraintKind, pa: &PoolingAssignment<'_>, set: &ConstraintSet) -> ConstraintValue {
    on_fresh_tape(&pa.p, |p| evaluate_taped(kind, p, pa.graph, set))
}

/// Multipliers keyed by (pooling layer, constraint).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<LambdaEntry>", into = "Vec<LambdaEntry>")]
pub struct Lambdas(BTreeMap<(usize, ConstraintKind), f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub layer: usize,
    pub constraint: ConstraintKind,
    pub value: f64,
}

impl From<Vec<LambdaEntry>> for Lambdas {
    fn from(v: Vec<LambdaEntry>) -> Self {
        Self(v.into_iter().map(|e| ((e.layer, e.constraint), e.value)).collect())
    }
}

impl From<Lambdas> for Vec<LambdaEntry> {
    fn from(l: Lambdas) -> Self {
        l.0.into_iter()
            .map(|((layer, constraint), value)| LambdaEntry {
                layer,
                constraint,
                value,
            })
            .collect()
    }
}

impl Lambdas {
    /// Same value for every (layer, constraint) pair.
    pub fn uniform(layers: &[usize], kinds: &[ConstraintKind], value: f64) -> Self {
        let mut m = BTreeMap::new();
        for &l in layers {
            for &k in kinds {
                m.insert((l, k), value);
            }
        }
        Self(m)
    }

    pub fn get(&self, layer: usize, kind: ConstraintKind) -> f64 {
        self.0.get(&(layer, kind)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, layer: usize, kind: ConstraintKind, value: f64) {
        self.0.insert((layer, kind), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, ConstraintKind), &f64)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|(k, v)| (*k, v * factor)).collect())
    }
}

/// Raw constraint values of one pooling layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConstraints {
    pub layer: usize,
    pub values: BTreeMap<ConstraintKind, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub degenerate_columns: BTreeMap<ConstraintKind, Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub layers: Vec<LayerConstraints>,
    pub lambdas: Lambdas,
}

impl ConstraintReport {
    /// Mean of every raw constraint value in the report.
    pub fn mean_violation(&self) -> f64 {
        let vals: Vec<f64> = self
            .layers
            .iter()
            .flat_map(|l| l.values.values().copied())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn value(&self, layer: usize, kind: ConstraintKind) -> Option<f64> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .and_then(|l| l.values.get(&kind).copied())
    }

    pub fn has_degenerate(&self) -> bool {
        self.layers.iter().any(|l| !l.degenerate_columns.is_empty())
    }
}

/// Exact structural predicates for a binary node selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Connected,
    St,
    Sst,
}

impl OracleKind {
    pub const ALL: [OracleKind; 3] = [OracleKind::Connected, OracleKind::St, OracleKind::Sst];

    /// Soft constraints whose joint zero-set characterizes this predicate.
    pub fn constraints(self) -> &'static [ConstraintKind] {
        match self {
            OracleKind::Connected => &[ConstraintKind::Contiguity],
            OracleKind::St => &[ConstraintKind::Contiguity, ConstraintKind::St],
            OracleKind::Sst => &[ConstraintKind::Contiguity, ConstraintKind::Sst],
        }
    }
}

/// Combinatorial validity of `selected` on a tree graph (no floating point).
///
/// * CONNECTED: non-empty and the induced subgraph is connected.
/// * ST: the complete subtree of an internal node.
/// * SST: connected, and every non-leaf child of a selected non-leaf node is selected.
pub fn binary_validity_oracle(graph: &TreeGraph, selected: &[bool], kind: OracleKind) -> bool {
    let n = graph.n_nodes();
    let children: Vec<Vec<usize>> = (0..n).map(|i| graph.children(i)).collect();
    let mut parent = vec![None; n];
    for (i, cs) in children.iter().enumerate() {
        for &c in cs {
            parent[c] = Some(i);
        }
    }
    let tops: Vec<usize> = (0..n)
        .filter(|&i| selected[i] && parent[i].is_none_or(|p| !selected[p]))
        .collect();
    if tops.len() != 1 {
        return false;
    }
    match kind {
        OracleKind::Connected => true,
        OracleKind::St => {
            let root = tops[0];
            if children[root].is_empty() {
                return false;
            }
            let mut in_subtree = vec![false; n];
            let mut stack = vec![root];
            while let Some(i) = stack.pop() {
                in_subtree[i] = true;
                stack.extend_from_slice(&children[i]);
            }
            in_subtree == selected
        }
        OracleKind::Sst => (0..n)
            .filter(|&i| selected[i] && !children[i].is_empty())
            .all(|i| {
                children[i]
                    .iter()
                    .filter(|&&c| !children[c].is_empty())
                    .all(|&c| selected[c])
            }),
    }
}

/// Binary assignment with one column selecting `selected`.
pub fn binary_column(selected: &[bool]) -> Tensor {
    Tensor::column(
        &selected
            .iter()
            .map(|&s| if s { 1.0 } else { 0.0 })
            .collect::<Vec<_>>(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::{to_graph, ConstituencyTree, Vocabulary};

    fn graph(s: &str) -> TreeGraph {
        let t = ConstituencyTree::parse(s).unwrap();
        to_graph(&t, &Vocabulary::build([&t], false))
    }

    fn select(n: usize, ids: &[usize]) -> Vec<bool> {
        let mut v = vec![false; n];
        for &i in ids {
            v[i] = true;
        }
        v
    }

    fn col(g: &TreeGraph, ids: &[usize]) -> Tensor {
        binary_column(&select(g.n_nodes(), ids))
    }

    #[test]
    fn contiguity_on_chain() {
        // root -> a -> b
        let g = graph("(R (A b))");
        let connected = contiguity(&PoolingAssignment::raw(col(&g, &[0, 1]), &g), 1e-4);
        assert!(connected.value.abs() < 1e-9);
        let gap = contiguity(&PoolingAssignment::raw(col(&g, &[0, 2]), &g), 1e-4);
        assert!(gap.value > 0.5);
        let full = contiguity(&PoolingAssignment::raw(col(&g, &[0, 1, 2]), &g), 1e-4);
        assert!(full.value.abs() < 1e-9);
    }

    #[test]
    fn contiguity_empty_column_is_flagged() {
        let g = graph("(R (A b))");
        let c = contiguity(&PoolingAssignment::raw(Tensor::zeros(3, 1), &g), 1e-4);
        assert_eq!(c.value, 0.0);
        assert_eq!(c.degenerate_columns, vec![0]);
    }

    #[test]
    fn st_examples() {
        let g = graph("(S (A a) (B b))");
        let pa = |ids: &[usize]| PoolingAssignment::raw(col(&g, ids), &g);
        assert!(st_constraint(&pa(&[0, 1, 2, 3, 4])).value < 1e-9);
        assert!(st_constraint(&pa(&[0, 1, 3])).value > 0.0);
        let single_leaf = st_constraint(&pa(&[2]));
        assert!((single_leaf.value - 1.0).abs() < 1e-9);
        assert!(!single_leaf.is_degenerate());
    }

    #[test]
    fn sst_examples() {
        let g = graph("(S (A a) (B b))");
        let pa = |ids: &[usize]| PoolingAssignment::raw(col(&g, ids), &g);
        assert!(sst_constraint(&pa(&[0, 1, 3])).value < 1e-9);
        let leaves = sst_constraint(&pa(&[2, 4]));
        assert_eq!(leaves.value, 0.0);
        assert!(leaves.is_degenerate());

        let deeper = graph("(S (A (C c)) (B b))");
        // S=0 A=1 C=2 c=3 B=4 b=5; C missing under A
        let v = sst_constraint(&PoolingAssignment::raw(col(&deeper, &[0, 1, 4]), &deeper));
        assert!(v.value > 0.0);
    }

    #[test]
    fn overlap_identical_columns() {
        let g = graph("(S (A a) (B b))");
        let mut p = Tensor::zeros(5, 2);
        for i in 0..4 {
            p.set(i, 0, 1.0);
            p.set(i, 1, 1.0);
        }
        let pa = PoolingAssignment::raw(p, &g);
        let v = overlap(&pa, 0.3).value;
        assert!((v - (2.0f64 * 0.04).sqrt()).abs() < 1e-9, "{v}");
        assert_eq!(overlap(&pa, 1.0).value, 0.0);
    }

    #[test]
    fn overlap_disjoint_and_single_cluster() {
        let g = graph("(S (A a) (B b))");
        let mut p = Tensor::zeros(5, 2);
        for i in 0..5 {
            p.set(i, i % 2, 1.0);
        }
        for delta in [0.0, 0.3, 1.0] {
            assert_eq!(overlap(&PoolingAssignment::raw(p.clone(), &g), delta).value, 0.0);
        }
        assert_eq!(overlap(&PoolingAssignment::raw(Tensor::ones(5, 1), &g), 0.0).value, 0.0);
    }

    #[test]
    fn intensity_examples() {
        let g = graph("(S (A a) b)");
        // n=4, k=2, alpha=0.5 -> threshold 1.0; self-intensities [1.5, 0.2]
        let s2 = 0.2f64.sqrt();
        let p = Tensor::from_rows(&[
            vec![1.0, s2],
            vec![0.5f64.sqrt(), 0.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
        ]);
        let pa = PoolingAssignment::raw(p, &g);
        assert!((min_intensity(&pa, 0.5).value - 0.8).abs() < 1e-12);
        assert_eq!(min_intensity(&pa, 0.0).value, 0.0);
        let uniform = PoolingAssignment::raw(Tensor::filled(4, 2, 0.9), &g);
        // self-intensity 0.81 n per cluster >= alpha n / k for alpha <= 1
        assert_eq!(min_intensity(&uniform, 1.0).value, 0.0);
    }

    #[test]
    fn oracle_examples() {
        let g = graph("(S (A (C c)) (B b))");
        let n = g.n_nodes();
        let all = vec![true; n];
        for k in OracleKind::ALL {
            assert!(binary_validity_oracle(&g, &all, k));
        }
        // internal node A alone: its non-leaf child C is missing
        let a = select(n, &[1]);
        assert!(binary_validity_oracle(&g, &a, OracleKind::Connected));
        assert!(!binary_validity_oracle(&g, &a, OracleKind::St));
        assert!(!binary_validity_oracle(&g, &a, OracleKind::Sst));
        // pre-terminal B alone: all children are leaves
        let b = select(n, &[4]);
        assert!(binary_validity_oracle(&g, &b, OracleKind::Sst));
        assert!(!binary_validity_oracle(&g, &b, OracleKind::St));
        assert!(binary_validity_oracle(&g, &select(n, &[4, 5]), OracleKind::St));
        assert!(!binary_validity_oracle(&g, &select(n, &[2, 5]), OracleKind::Connected));
        assert!(!binary_validity_oracle(&g, &vec![false; n], OracleKind::Connected));
    }

    #[test]
    fn softmax_assignment_validation() {
        let g = graph("(S a b)");
        assert!(PoolingAssignment::new(Tensor::ones(3, 1), PoolActivation::Softmax, &g).is_ok());
        assert!(PoolingAssignment::new(Tensor::ones(3, 2), PoolActivation::Softmax, &g).is_err());
        assert!(PoolingAssignment::new(Tensor::ones(2, 1), PoolActivation::Sigmoid, &g).is_err());
    }

    #[test]
    fn lambdas_serialize_as_entries() {
        let l = Lambdas::uniform(&[0], &[ConstraintKind::Contiguity, ConstraintKind::Sst], 0.5);
        let json = serde_json::to_string(&l).unwrap();
        assert!(json.contains("\"constraint\":\"sst\""));
        let back: Lambdas = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);
    }
}
