use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcgnn_core::constraints::{self, PoolingAssignment};
use tcgnn_core::fragments::{class_unique, extract, ExtractOptions, FragmentRecord, ValidityCounts};
use tcgnn_core::kernels::{enumerate_fragments, kernel, KernelConfig};
use tcgnn_core::synth::random_tree;
use tcgnn_core::trainer::{split, SplitScheme};
use tcgnn_core::treebank::to_graph;
use tcgnn_core::{ConstituencyTree, ConstraintKind, ConstraintSet, KernelKind, Tensor, Vocabulary};

const INTERNAL: [&str; 4] = ["S", "NP", "VP", "PP"];
const LEAVES: [&str; 3] = ["a", "b", "c"];

fn tree(seed: u64, n: usize) -> ConstituencyTree {
    random_tree(&mut ChaCha8Rng::seed_from_u64(seed), n, &INTERNAL, &LEAVES)
}

fn matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn fragment_set(t: &ConstituencyTree, kind: KernelKind) -> BTreeSet<String> {
    enumerate_fragments(t, kind, 12).unwrap().into_iter().map(|f| f.canonical).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_inverts_render(seed in any::<u64>(), n in 1usize..30) {
        let t = tree(seed, n);
        let text = t.render();
        let back = ConstituencyTree::parse(&text).unwrap();
        prop_assert_eq!(back.render(), text);
        prop_assert_eq!(back.len(), n);
    }

    #[test]
    fn kernels_are_symmetric_and_nonnegative(a in any::<u64>(), b in any::<u64>(), n in 1usize..10, m in 1usize..10) {
        let (x, z) = (tree(a, n), tree(b, m));
        for kind in KernelKind::ALL {
            let cfg = KernelConfig::new(kind);
            let xz = kernel(&x, &z, &cfg);
            prop_assert!(xz >= 0.0);
            prop_assert!((xz - kernel(&z, &x, &cfg)).abs() <= 1e-12);
            prop_assert!(xz <= 1.0 + 1e-9, "normalized kernel above 1: {}", xz);
        }
    }

    #[test]
    fn fragment_spaces_are_nested(seed in any::<u64>(), n in 1usize..10) {
        let t = tree(seed, n);
        let st = fragment_set(&t, KernelKind::Stk);
        let sst = fragment_set(&t, KernelKind::Sstk);
        let pt = fragment_set(&t, KernelKind::Ptk);
        prop_assert!(st.is_subset(&sst));
        prop_assert!(sst.is_subset(&pt));
    }

    #[test]
    fn constraints_ignore_column_order_and_stay_in_range(seed in any::<u64>(), n in 2usize..12, k in 1usize..5) {
        let t = tree(seed, n);
        let vocab = Vocabulary::build([&t], false);
        let g = to_graph(&t, &vocab);
        let p = matrix(seed ^ 0x5eed, n, k);
        let perm: Vec<usize> = (0..k).rev().collect();
        let mut q = Tensor::zeros(n, k);
        for i in 0..n {
            for (c, &src) in perm.iter().enumerate() {
                q.set(i, c, p.get(i, src));
            }
        }
        let set = ConstraintSet { kinds: ConstraintKind::ALL.to_vec(), ..ConstraintSet::default() };
        let (pa, qa) = (PoolingAssignment::raw(p, &g), PoolingAssignment::raw(q, &g));
        for kind in ConstraintKind::ALL {
            let a = constraints::evaluate(kind, &pa, &set).value;
            let b = constraints::evaluate(kind, &qa, &set).value;
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{kind:?}: {a} vs {b}");
            prop_assert!(a >= 0.0);
            if matches!(kind, ConstraintKind::Contiguity | ConstraintKind::St | ConstraintKind::Sst) {
                prop_assert!(a <= 1.0 + 1e-12, "{kind:?} ratio above 1: {a}");
            }
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_nodes(seed in any::<u64>(), n in 1usize..15, k in 1usize..4, lo in 0.05f64..0.5, gap in 0.0f64..0.45) {
        let t = tree(seed, n);
        let vocab = Vocabulary::build([&t], false);
        let g = to_graph(&t, &vocab);
        let p = matrix(seed, n, k);
        let at = |threshold| extract(&p, &t, &g, &ExtractOptions { threshold, largest_component: false });
        let low = at(lo);
        for hi in at(lo + gap) {
            let base = low.iter().find(|s| s.cluster == hi.cluster).expect("cluster present at lower threshold");
            prop_assert!(hi.nodes.iter().all(|i| base.nodes.contains(i)));
            prop_assert!(hi.nodes.iter().all(|&i| i < n));
        }
    }

    // Aggregated records are unique per (fragment, class).
    #[test]
    fn class_unique_lists_are_disjoint(picks in proptest::collection::btree_set((0usize..6, 0usize..3), 1..18)) {
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let records: Vec<FragmentRecord> = picks
            .iter()
            .map(|&(f, c)| FragmentRecord {
                canonical: format!("(F{f})"),
                class: classes[c].clone(),
                frequency: 1,
                mean_activation: 0.5,
                sample_ids: vec![],
                valid: ValidityCounts::default(),
            })
            .collect();
        let out = class_unique(&records, &classes).unwrap();
        let mut seen = BTreeSet::new();
        for (class, list) in &out {
            for r in list {
                prop_assert!(seen.insert(r.canonical.clone()), "{} listed twice", r.canonical);
                prop_assert!(records.iter().filter(|x| x.canonical == r.canonical).all(|x| &x.class == class));
            }
        }
    }

    #[test]
    fn holdout_and_kfold_partition_the_samples(seed in any::<u64>(), n in 12usize..120, k in 3usize..6) {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let check = |train: &[usize], val: &[usize], test: &[usize]| {
            let mut all: Vec<usize> = train.iter().chain(val).chain(test).copied().collect();
            all.sort();
            all == (0..n).collect::<Vec<_>>()
        };
        let h = split(&labels, &SplitScheme::default(), seed).unwrap();
        prop_assert_eq!(h.len(), 1);
        prop_assert!(check(&h[0].train, &h[0].val, &h[0].test));
        let folds = split(&labels, &SplitScheme::KFold { k }, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut tests: Vec<usize> = Vec::new();
        for f in &folds {
            prop_assert!(check(&f.train, &f.val, &f.test));
            tests.extend(&f.test);
        }
        tests.sort();
        prop_assert_eq!(tests, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(&labels, &SplitScheme::KFold { k }, seed).unwrap(), folds);
        let two = SplitScheme::KFold { k: 2 };
        prop_assert!(split(&labels, &two, seed).is_err());
    }
}
