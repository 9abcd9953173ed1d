//! Seeded synthetic data: a toy English constituency grammar with one
//! planted fragment per class, and small random trees for exhaustive suites.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TreebankError;
use crate::treebank::{ConstituencyTree, Sample};

/// One class of the planted corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedClass {
    pub label: String,
    /// Bracketed fragment planted into every tree of this class. Its root
    /// must be `NP` or `VP`, the two slots the grammar can host.
    pub pattern: String,
    /// Near-miss of the pattern inserted into trees of any class with
    /// probability `noise`.
    #[serde(default)]
    pub decoy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCorpusSpec {
    pub n_per_class: usize,
    pub classes: Vec<PlantedClass>,
    pub noise: f64,
    /// Clause / phrase recursion depth of the grammar. Patterns may be at
    /// most `max_depth + 2` edges deep.
    pub max_depth: usize,
    pub max_nodes: usize,
    pub seed: u64,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            n_per_class: 500,
            classes: vec![
                PlantedClass {
                    label: "claim".into(),
                    pattern: "(VP (MD should) (VB be))".into(),
                    decoy: Some("(VP (MD could) (VB be))".into()),
                },
                PlantedClass {
                    label: "premise".into(),
                    pattern: "(NP (PRP$ their) (NNS studies))".into(),
                    decoy: Some("(NP (PRP$ our) (NNS studies))".into()),
                },
            ],
            noise: 0.0,
            max_depth: 2,
            max_nodes: 64,
            seed: 0,
        }
    }
}

const DETS: &[&str] = &["the", "a", "this", "every"];
const NOUNS: &[&str] = &["data", "model", "policy", "result", "effect", "city", "law", "market"];
const ADJS: &[&str] = &["new", "large", "clear", "recent", "local"];
const PRONS: &[&str] = &["it", "we", "they", "she"];
const PREPS: &[&str] = &["in", "of", "for", "with"];
const VERBS_Z: &[&str] = &["shows", "needs", "changes", "supports"];
const VERBS_D: &[&str] = &["found", "reported", "reduced", "raised"];
const ADVS: &[&str] = &["often", "rarely", "today"];

fn pre(tag: &str, word: &str) -> ConstituencyTree {
    ConstituencyTree::node(tag, vec![ConstituencyTree::leaf(word)])
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("nonempty word list")
}

fn gen_np(rng: &mut ChaCha8Rng, depth: usize) -> ConstituencyTree {
    let choice = rng.random_range(0..if depth > 0 { 4 } else { 3 });
    match choice {
        0 => ConstituencyTree::node("NP", vec![pre("DT", pick(rng, DETS)), pre("NN", pick(rng, NOUNS))]),
        1 => ConstituencyTree::node("NP", vec![pre("PRP", pick(rng, PRONS))]),
        2 => ConstituencyTree::node(
            "NP",
            vec![
                pre("DT", pick(rng, DETS)),
                pre("JJ", pick(rng, ADJS)),
                pre("NN", pick(rng, NOUNS)),
            ],
        ),
        _ => {
            let head = gen_np(rng, depth - 1);
            let pp = gen_pp(rng, depth - 1);
            ConstituencyTree::node("NP", vec![head, pp])
        }
    }
}

fn gen_pp(rng: &mut ChaCha8Rng, depth: usize) -> ConstituencyTree {
    let prep = pre("IN", pick(rng, PREPS));
    ConstituencyTree::node("PP", vec![prep, gen_np(rng, depth)])
}

fn gen_vp(rng: &mut ChaCha8Rng, depth: usize) -> ConstituencyTree {
    let choice = rng.random_range(0..if depth > 0 { 4 } else { 3 });
    match choice {
        0 => ConstituencyTree::node("VP", vec![pre("VBZ", pick(rng, VERBS_Z)), gen_np(rng, depth)]),
        1 => ConstituencyTree::node(
            "VP",
            vec![pre("VBD", pick(rng, VERBS_D)), gen_np(rng, depth), gen_pp(rng, depth)],
        ),
        2 => ConstituencyTree::node(
            "VP",
            vec![
                pre("VBZ", pick(rng, VERBS_Z)),
                ConstituencyTree::node("ADVP", vec![pre("RB", pick(rng, ADVS))]),
            ],
        ),
        _ => {
            let sbar = ConstituencyTree::node("SBAR", vec![pre("IN", "that"), gen_s(rng, depth - 1)]);
            ConstituencyTree::node("VP", vec![pre("VBZ", pick(rng, VERBS_Z)), sbar])
        }
    }
}

fn gen_s(rng: &mut ChaCha8Rng, depth: usize) -> ConstituencyTree {
    ConstituencyTree::node("S", vec![gen_np(rng, depth), gen_vp(rng, depth)])
}

/// Rebuilds `tree` with the subtree at node `at` replaced by `with`.
pub fn replace_subtree(tree: &ConstituencyTree, at: usize, with: &ConstituencyTree) -> ConstituencyTree {
    fn go(tree: &ConstituencyTree, i: usize, at: usize, with: &ConstituencyTree) -> ConstituencyTree {
        if i == at {
            return with.clone();
        }
        if tree.is_leaf(i) {
            return ConstituencyTree::leaf(tree.label(i));
        }
        let children = tree.children(i).iter().map(|&c| go(tree, c, at, with)).collect();
        ConstituencyTree::node(tree.label(i), children)
    }
    go(tree, tree.root(), at, with)
}

/// Whether `pattern` occurs in `tree` as a production-complete fragment:
/// matching labels and leafness, with every expanded pattern node matching
/// the full child sequence.
pub fn contains_pattern(tree: &ConstituencyTree, pattern: &ConstituencyTree) -> bool {
    (0..tree.len()).any(|i| matches_at(tree, i, pattern, pattern.root()))
}

fn matches_at(tree: &ConstituencyTree, i: usize, pattern: &ConstituencyTree, j: usize) -> bool {
    if tree.label(i) != pattern.label(j) {
        return false;
    }
    let (tc, pc) = (tree.children(i), pattern.children(j));
    if pc.is_empty() {
        // a lone pattern node `(X)` matches any X; otherwise leaves match leaves
        return j == pattern.root() || tc.is_empty();
    }
    tc.len() == pc.len() && tc.iter().zip(pc).all(|(&a, &b)| matches_at(tree, a, pattern, b))
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("pattern {pattern}: {source}")]
    Pattern {
        pattern: String,
        source: TreebankError,
    },
    #[error("could not generate a valid tree for class {0} after many attempts")]
    Exhausted(String),
}

struct Planted {
    label: String,
    pattern: ConstituencyTree,
    decoy: Option<ConstituencyTree>,
}

fn parse_pattern(p: &str) -> Result<ConstituencyTree, SynthError> {
    ConstituencyTree::parse(p).map_err(|source| SynthError::Pattern {
        pattern: p.to_string(),
        source,
    })
}

impl SynthCorpusSpec {
    fn planted(&self) -> Result<Vec<Planted>, SynthError> {
        if self.classes.len() < 2 {
            return Err(SynthError::Spec("need at least two classes".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(SynthError::Spec(format!("noise {} outside [0, 1]", self.noise)));
        }
        let mut labels: Vec<&str> = self.classes.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.classes.len() {
            return Err(SynthError::Spec("class labels must be distinct".into()));
        }
        let mut out = Vec::new();
        for c in &self.classes {
            let pattern = parse_pattern(&c.pattern)?;
            let root = pattern.label(pattern.root()).to_string();
            if root != "NP" && root != "VP" {
                return Err(SynthError::Spec(format!(
                    "pattern {} must be rooted at NP or VP",
                    c.pattern
                )));
            }
            if pattern.depth() > self.max_depth + 2 {
                return Err(SynthError::Spec(format!(
                    "pattern {} (depth {}) is deeper than max_depth {} allows",
                    c.pattern,
                    pattern.depth(),
                    self.max_depth
                )));
            }
            let decoy = c.decoy.as_deref().map(parse_pattern).transpose()?;
            out.push(Planted {
                label: c.label.clone(),
                pattern,
                decoy,
            });
        }
        for (i, a) in out.iter().enumerate() {
            for (j, b) in out.iter().enumerate() {
                let decoy_hits = b.decoy.as_ref().is_some_and(|d| contains_pattern(d, &a.pattern));
                if (i != j && contains_pattern(&b.pattern, &a.pattern)) || decoy_hits {
                    return Err(SynthError::Spec(format!(
                        "pattern of {} occurs inside another class's pattern or a decoy",
                        a.label
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Generates the corpus, classes interleaved, ids `"{label}-{index}"`.
    pub fn generate(&self) -> Result<Vec<Sample>, SynthError> {
        let planted = self.planted()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.n_per_class * planted.len());
        for i in 0..self.n_per_class {
            for (ci, class) in planted.iter().enumerate() {
                let tree = self.one_tree(&mut rng, &planted, ci)?;
                out.push(Sample {
                    id: format!("{}-{i}", class.label),
                    label: class.label.clone(),
                    tree,
                });
            }
        }
        Ok(out)
    }

    fn one_tree(&self, rng: &mut ChaCha8Rng, planted: &[Planted], ci: usize) -> Result<ConstituencyTree, SynthError> {
        let own = &planted[ci];
        for _ in 0..1000 {
            let mut tree = gen_s(rng, self.max_depth);
            tree = insert_at_random_slot(rng, &tree, &own.pattern);
            if rng.random_bool(self.noise) {
                let decoys: Vec<&ConstituencyTree> = planted.iter().filter_map(|p| p.decoy.as_ref()).collect();
                if let Some(d) = decoys.choose(rng) {
                    // never overwrite the planted occurrence
                    let candidate = insert_at_random_slot(rng, &tree, d);
                    if contains_pattern(&candidate, &own.pattern) {
                        tree = candidate;
                    }
                }
            }
            let clean = planted
                .iter()
                .enumerate()
                .all(|(j, p)| j == ci || !contains_pattern(&tree, &p.pattern));
            if clean && contains_pattern(&tree, &own.pattern) && tree.len() <= self.max_nodes {
                return Ok(tree);
            }
        }
        Err(SynthError::Exhausted(own.label.clone()))
    }
}

fn insert_at_random_slot(rng: &mut ChaCha8Rng, tree: &ConstituencyTree, pattern: &ConstituencyTree) -> ConstituencyTree {
    let root_label = pattern.label(pattern.root());
    let slots: Vec<usize> = (1..tree.len()).filter(|&i| tree.label(i) == root_label && !tree.is_leaf(i)).collect();
    match slots.choose(rng) {
        Some(&at) => replace_subtree(tree, at, pattern),
        None => tree.clone(),
    }
}

/// Random ordered tree with exactly `n` nodes. Internal nodes draw labels
/// from `internal`, leaves from `leaves`.
pub fn random_tree(rng: &mut impl Rng, n: usize, internal: &[&str], leaves: &[&str]) -> ConstituencyTree {
    assert!(n >= 1);
    let mut children: Vec<Vec<usize>> = vec![Vec::new()];
    for id in 1..n {
        let parent = rng.random_range(0..id);
        children[parent].push(id);
        children.push(Vec::new());
    }
    // labels come from a second stream so the shape does not depend on the alphabets
    let mut label_rng = ChaCha8Rng::seed_from_u64(rng.random());
    build_labeled(0, &children, &mut |leaf| {
        let set = if leaf { leaves } else { internal };
        set[label_rng.random_range(0..set.len())].to_string()
    })
}

fn build_labeled(i: usize, children: &[Vec<usize>], label: &mut dyn FnMut(bool) -> String) -> ConstituencyTree {
    if children[i].is_empty() {
        return ConstituencyTree::leaf(label(true));
    }
    let own = label(false);
    let kids = children[i].iter().map(|&c| build_labeled(c, children, label)).collect();
    ConstituencyTree::node(own, kids)
}

/// `count` seeded random trees with sizes uniform in `min_nodes..=max_nodes`.
pub fn random_suite(
    seed: u64,
    count: usize,
    min_nodes: usize,
    max_nodes: usize,
    internal: &[&str],
    leaves: &[&str],
) -> Vec<ConstituencyTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(min_nodes..=max_nodes);
            random_tree(&mut rng, n, internal, leaves)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{enumerate_fragments, KernelKind};
    use crate::treebank::write_jsonl;

    fn small_spec(noise: f64) -> SynthCorpusSpec {
        SynthCorpusSpec {
            n_per_class: 20,
            noise,
            seed: 5,
            ..SynthCorpusSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let bytes = |s: &SynthCorpusSpec| {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &s.generate().unwrap()).unwrap();
            buf
        };
        assert_eq!(bytes(&small_spec(0.2)), bytes(&small_spec(0.2)));
        let mut other = small_spec(0.2);
        other.seed = 6;
        assert_ne!(bytes(&small_spec(0.2)), bytes(&other));
    }

    #[test]
    fn every_tree_has_its_pattern_and_no_other() {
        let spec = small_spec(0.5);
        let pats: Vec<ConstituencyTree> = spec
            .classes
            .iter()
            .map(|c| ConstituencyTree::parse(&c.pattern).unwrap())
            .collect();
        for s in spec.generate().unwrap() {
            for (c, p) in spec.classes.iter().zip(&pats) {
                assert_eq!(contains_pattern(&s.tree, p), c.label == s.label, "{}", s.tree);
            }
            assert!(s.tree.len() <= spec.max_nodes);
            s.tree.validate().unwrap();
        }
    }

    #[test]
    fn pattern_matcher_agrees_with_sst_enumeration() {
        // small trees keep the exhaustive enumeration cheap
        let spec = SynthCorpusSpec {
            max_nodes: 30,
            ..small_spec(0.3)
        };
        for c in &spec.classes {
            let p = ConstituencyTree::parse(&c.pattern).unwrap();
            let canon = p.render();
            for s in spec.generate().unwrap() {
                let found = enumerate_fragments(&s.tree, KernelKind::Sstk, 64)
                    .unwrap()
                    .iter()
                    .any(|f| f.canonical == canon);
                assert_eq!(found, contains_pattern(&s.tree, &p));
            }
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut s = small_spec(0.0);
        s.classes.truncate(1);
        assert!(s.generate().is_err());
        let mut s = small_spec(0.0);
        s.classes[0].pattern = "(ADJP (JJ big))".into();
        assert!(s.generate().is_err());
        let mut s = small_spec(0.0);
        s.max_depth = 0;
        s.classes[0].pattern = "(VP (VBZ a) (SBAR (IN b) (S (NP (PRP c)) (VP (VBZ d)))))".into();
        assert!(s.generate().is_err());
        let mut s = small_spec(0.0);
        s.noise = 1.5;
        assert!(s.generate().is_err());
    }

    #[test]
    fn random_trees_have_requested_sizes() {
        let suite = random_suite(1, 30, 2, 8, &["A", "B"], &["a", "b"]);
        assert_eq!(suite.len(), 30);
        for t in suite {
            assert!((2..=8).contains(&t.len()));
            t.validate().unwrap();
            for i in 0..t.len() {
                let expected: &[&str] = if t.is_leaf(i) { &["a", "b"] } else { &["A", "B"] };
                assert!(expected.contains(&t.label(i)));
            }
        }
    }
}
