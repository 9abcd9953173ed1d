//! Reading tree fragments back out of trained pooling assignments.
//!
//! A node is active in cluster `c` when `P_ic >= threshold`. Each non-empty
//! active set is rendered in the kernels' canonical fragment form and tagged
//! with the CONNECTED / ST / SST oracle verdicts. Occurrences are counted per
//! (sample, cluster) pair.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraints::{binary_validity_oracle, OracleKind};
use crate::error::{MetricsError, ModelError};
use crate::kernels::canonical_node_set;
use crate::model::{predict, Checkpoint};
use crate::numcore::Tensor;
use crate::treebank::{to_graph, ConstituencyTree, Sample, TreeGraph};

pub const DEFAULT_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validity {
    pub connected: bool,
    pub st: bool,
    pub sst: bool,
}

impl Validity {
    pub fn of(graph: &TreeGraph, selected: &[bool]) -> Self {
        Self {
            connected: binary_validity_oracle(graph, selected, OracleKind::Connected),
            st: binary_validity_oracle(graph, selected, OracleKind::St),
            sst: binary_validity_oracle(graph, selected, OracleKind::Sst),
        }
    }
}

/// Active node set of one cluster in one tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedSet {
    pub cluster: usize,
    pub nodes: Vec<usize>,
    pub canonical: String,
    pub mean_activation: f64,
    pub validity: Validity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub threshold: f64,
    /// Keep only the largest connected component of each active set.
    pub largest_component: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            largest_component: false,
        }
    }
}

/// Largest connected component of `selected` (ties: earliest top node).
fn largest_component(tree: &ConstituencyTree, selected: &[bool]) -> Vec<bool> {
    let mut best: Vec<bool> = vec![false; tree.len()];
    let mut best_size = 0;
    for top in 0..tree.len() {
        if !selected[top] || tree.parent(top).is_some_and(|p| selected[p]) {
            continue;
        }
        let mut comp = vec![false; tree.len()];
        let mut stack = vec![top];
        let mut size = 0;
        while let Some(i) = stack.pop() {
            comp[i] = true;
            size += 1;
            stack.extend(tree.children(i).iter().copied().filter(|&c| selected[c]));
        }
        if size > best_size {
            best_size = size;
            best = comp;
        }
    }
    best
}

/// One node set per cluster column of `assignment`; empty sets are dropped.
pub fn extract(
    assignment: &Tensor,
    tree: &ConstituencyTree,
    graph: &TreeGraph,
    opts: &ExtractOptions,
) -> Vec<ExtractedSet> {
    let n = tree.len();
    assert_eq!(assignment.rows(), n, "assignment rows must match tree nodes");
    (0..assignment.cols())
        .filter_map(|c| {
            let mut selected: Vec<bool> = (0..n).map(|i| assignment.get(i, c) >= opts.threshold).collect();
            if opts.largest_component {
                selected = largest_component(tree, &selected);
            }
            let nodes: Vec<usize> = (0..n).filter(|&i| selected[i]).collect();
            if nodes.is_empty() {
                return None;
            }
            let mean_activation =
                nodes.iter().map(|&i| assignment.get(i, c)).sum::<f64>() / nodes.len() as f64;
            Some(ExtractedSet {
                cluster: c,
                canonical: canonical_node_set(tree, &selected),
                validity: Validity::of(graph, &selected),
                nodes,
                mean_activation,
            })
        })
        .collect()
}

/// An extracted set together with the sample it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub sample_id: String,
    pub class: String,
    pub set: ExtractedSet,
}

/// Runs the model on every sample and extracts fragments from the first pooling layer.
pub fn extract_from_checkpoint(
    checkpoint: &Checkpoint,
    samples: &[Sample],
    opts: &ExtractOptions,
) -> Result<Vec<Occurrence>, ModelError> {
    let per_sample: Vec<Vec<Occurrence>> = samples
        .par_iter()
        .map(|s| {
            let graph = to_graph(&s.tree, &checkpoint.vocabulary);
            let pred = predict(&checkpoint.config, &checkpoint.params, &graph)?;
            Ok(extract(&pred.assignments[0], &s.tree, &graph, opts)
                .into_iter()
                .map(|set| Occurrence {
                    sample_id: s.id.clone(),
                    class: s.label.clone(),
                    set,
                })
                .collect())
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityCounts {
    pub connected: usize,
    pub st: usize,
    pub sst: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentRecord {
    pub canonical: String,
    pub class: String,
    /// Number of (sample, cluster) occurrences.
    pub frequency: usize,
    pub mean_activation: f64,
    pub sample_ids: Vec<String>,
    /// Occurrences passing each oracle.
    pub valid: ValidityCounts,
}

/// Groups occurrences by (class, canonical form), ordered by class, then
/// frequency descending, then canonical form.
pub fn aggregate(occurrences: &[Occurrence]) -> Vec<FragmentRecord> {
    struct Acc {
        frequency: usize,
        activation: f64,
        samples: BTreeSet<String>,
        valid: ValidityCounts,
    }
    let mut groups: BTreeMap<(&str, &str), Acc> = BTreeMap::new();
    for o in occurrences {
        let acc = groups
            .entry((o.class.as_str(), o.set.canonical.as_str()))
            .or_insert_with(|| Acc {
                frequency: 0,
                activation: 0.0,
                samples: BTreeSet::new(),
                valid: ValidityCounts::default(),
            });
        acc.frequency += 1;
        acc.activation += o.set.mean_activation;
        acc.samples.insert(o.sample_id.clone());
        acc.valid.connected += usize::from(o.set.validity.connected);
        acc.valid.st += usize::from(o.set.validity.st);
        acc.valid.sst += usize::from(o.set.validity.sst);
    }
    let mut records: Vec<FragmentRecord> = groups
        .into_iter()
        .map(|((class, canonical), a)| FragmentRecord {
            canonical: canonical.to_string(),
            class: class.to_string(),
            frequency: a.frequency,
            mean_activation: a.activation / a.frequency as f64,
            sample_ids: a.samples.into_iter().collect(),
            valid: a.valid,
        })
        .collect();
    records.sort_by(|a, b| {
        a.class
            .cmp(&b.class)
            .then(b.frequency.cmp(&a.frequency))
            .then(a.canonical.cmp(&b.canonical))
    });
    records
}

/// Per class, the records whose canonical form occurs for no other class,
/// ranked by frequency (descending) then canonical form.
pub fn class_unique(
    records: &[FragmentRecord],
    classes: &[String],
) -> Result<BTreeMap<String, Vec<FragmentRecord>>, MetricsError> {
    if classes.len() < 2 {
        return Err(MetricsError::Classes(classes.len()));
    }
    let mut owners: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        owners.entry(&r.canonical).or_default().insert(&r.class);
    }
    let mut out: BTreeMap<String, Vec<FragmentRecord>> =
        classes.iter().map(|c| (c.clone(), Vec::new())).collect();
    for r in records {
        if owners[r.canonical.as_str()].len() == 1 {
            if let Some(list) = out.get_mut(&r.class) {
                list.push(r.clone());
            }
        }
    }
    for list in out.values_mut() {
        list.sort_by(|a, b| b.frequency.cmp(&a.frequency).then(a.canonical.cmp(&b.canonical)));
    }
    Ok(out)
}

/// Share of occurrences passing each oracle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidityRates {
    pub occurrences: usize,
    pub connected: f64,
    pub st: f64,
    pub sst: f64,
}

pub fn validity_rates(records: &[FragmentRecord]) -> ValidityRates {
    let total: usize = records.iter().map(|r| r.frequency).sum();
    if total == 0 {
        return ValidityRates::default();
    }
    let rate = |f: fn(&ValidityCounts) -> usize| {
        records.iter().map(|r| f(&r.valid)).sum::<usize>() as f64 / total as f64
    };
    ValidityRates {
        occurrences: total,
        connected: rate(|v| v.connected),
        st: rate(|v| v.st),
        sst: rate(|v| v.sst),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentReport {
    pub threshold: f64,
    pub rates: ValidityRates,
    pub records: Vec<FragmentRecord>,
    pub class_unique: BTreeMap<String, Vec<FragmentRecord>>,
    /// SHA-256 of the text rendering.
    pub hash: String,
}

impl FragmentReport {
    pub fn build(records: Vec<FragmentRecord>, classes: &[String], threshold: f64, top: usize) -> Result<Self, MetricsError> {
        let unique = class_unique(&records, classes)?;
        let mut report = Self {
            threshold,
            rates: validity_rates(&records),
            records,
            class_unique: unique,
            hash: String::new(),
        };
        report.hash = hex::encode(Sha256::digest(report.render_text(top).as_bytes()));
        Ok(report)
    }

    /// Human-readable summary: stats plus the `top` class-unique fragments per class.
    pub fn render_text(&self, top: usize) -> String {
        let r = &self.rates;
        let mut out = format!(
            "# fragments (threshold {}): {} records, {} occurrences\n# valid: connected {:.3} st {:.3} sst {:.3}\n",
            self.threshold,
            self.records.len(),
            r.occurrences,
            r.connected,
            r.st,
            r.sst
        );
        for (class, list) in &self.class_unique {
            out.push_str(&format!("\n[{class}] {} class-unique\n", list.len()));
            for rec in list.iter().take(top) {
                out.push_str(&format!(
                    "{}\t{}\tconnected {}/{}\n",
                    rec.frequency, rec.canonical, rec.valid.connected, rec.frequency
                ));
            }
        }
        out
    }

    pub fn rank_in_class(&self, class: &str, canonical: &str) -> Option<usize> {
        self.class_unique
            .get(class)?
            .iter()
            .position(|r| r.canonical == canonical)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::Vocabulary;

    fn tree_graph(s: &str) -> (ConstituencyTree, TreeGraph) {
        let t = ConstituencyTree::parse(s).unwrap();
        let g = to_graph(&t, &Vocabulary::build([&t], false));
        (t, g)
    }

    #[test]
    fn binary_column_extracts_its_support() {
        let (t, g) = tree_graph("(S (A a) (B b))");
        let mut p = Tensor::zeros(5, 2);
        for i in [0, 1, 3] {
            p.set(i, 0, 1.0);
        }
        for thr in [0.1, 0.3, 0.9] {
            let sets = extract(&p, &t, &g, &ExtractOptions { threshold: thr, largest_component: false });
            assert_eq!(sets.len(), 1);
            assert_eq!(sets[0].nodes, vec![0, 1, 3]);
            assert_eq!(sets[0].canonical, "(S (A) (B))");
            assert!(sets[0].validity.sst && !sets[0].validity.st);
        }
    }

    #[test]
    fn below_threshold_yields_nothing() {
        let (t, g) = tree_graph("(S (A a) (B b))");
        let p = Tensor::filled(5, 3, 0.29);
        assert!(extract(&p, &t, &g, &ExtractOptions::default()).is_empty());
    }

    #[test]
    fn disconnected_sets_flagged_and_largest_component() {
        let (t, g) = tree_graph("(S (A a) (B b))");
        let mut p = Tensor::zeros(5, 1);
        for i in [1, 2, 4] {
            p.set(i, 0, 0.8);
        }
        let plain = extract(&p, &t, &g, &ExtractOptions::default());
        assert!(!plain[0].validity.connected);
        assert_eq!(plain[0].canonical, "(A a) + b");
        let lc = extract(&p, &t, &g, &ExtractOptions { threshold: 0.3, largest_component: true });
        assert_eq!(lc[0].canonical, "(A a)");
        assert!(lc[0].validity.st);
    }

    fn occ(class: &str, id: &str, canonical: &str) -> Occurrence {
        Occurrence {
            sample_id: id.into(),
            class: class.into(),
            set: ExtractedSet {
                cluster: 0,
                nodes: vec![0],
                canonical: canonical.into(),
                mean_activation: 0.5,
                validity: Validity {
                    connected: !canonical.contains(" + "),
                    st: false,
                    sst: false,
                },
            },
        }
    }

    fn classes() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn unique_fragments_and_ranking() {
        let occs = vec![
            occ("a", "1", "(X)"),
            occ("a", "2", "(Y y)"),
            occ("a", "3", "(Y y)"),
            occ("a", "3", "(Z)"),
            occ("b", "4", "(X)"),
            occ("b", "5", "(W + V)"),
        ];
        let recs = aggregate(&occs);
        let u = class_unique(&recs, &classes()).unwrap();
        let a: Vec<&str> = u["a"].iter().map(|r| r.canonical.as_str()).collect();
        assert_eq!(a, ["(Y y)", "(Z)"]);
        assert_eq!(u["a"][0].frequency, 2);
        assert_eq!(u["b"].len(), 1);
        assert!(class_unique(&recs, &["a".to_string()]).is_err());
        let rates = validity_rates(&recs);
        assert_eq!(rates.occurrences, 6);
        assert!((rates.connected - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn identical_inventories_have_no_unique_fragments() {
        let occs = vec![occ("a", "1", "(X)"), occ("b", "2", "(X)")];
        let u = class_unique(&aggregate(&occs), &classes()).unwrap();
        assert!(u.values().all(Vec::is_empty));
    }

    #[test]
    fn report_rendering_is_stable() {
        let empty = FragmentReport::build(Vec::new(), &classes(), 0.3, 5).unwrap();
        assert!(empty.render_text(5).starts_with("# fragments"));
        let recs = aggregate(&[occ("a", "1", "(Y y)")]);
        let r1 = FragmentReport::build(recs.clone(), &classes(), 0.3, 5).unwrap();
        let r2 = FragmentReport::build(recs, &classes(), 0.3, 5).unwrap();
        assert_eq!(r1.hash, r2.hash);
        assert!(r1.render_text(5).contains("1\t(Y y)\tconnected 1/1"));
        assert_eq!(r1.rank_in_class("a", "(Y y)"), Some(0));
    }
}
