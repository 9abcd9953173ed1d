use nalgebra::DMatrix;

use tcgnn_core::kernels::{enumerate_fragments, gram, KernelConfig, KernelPerceptron, LabeledTree};
use tcgnn_core::model::{predict, Params};
use tcgnn_core::synth::{contains_pattern, random_suite, SynthCorpusSpec};
use tcgnn_core::treebank::to_graph;
use tcgnn_core::{verify, ConstituencyTree, KernelKind, ModelConfig, PoolActivation, Tensor, TreeGraph, Vocabulary};

#[test]
fn kernels_match_fragment_enumeration() {
    let r = verify::kernel_suite(7, 60, 10);
    for k in &r.kinds {
        assert_eq!(k.mismatches, 0, "{:?}: max diff {}", k.kind, k.max_abs_diff);
    }
}

#[test]
fn constraint_master_suite_has_no_mismatches() {
    let r = verify::constraint_suite(3, 50, 8);
    let total: usize = r.kinds.iter().map(|k| k.mismatches).sum();
    assert_eq!(total, 0, "examples: {:?}", r.examples);
}

#[test]
fn gram_matrices_are_positive_semidefinite() {
    let trees = random_suite(11, 30, 1, 12, &["S", "NP", "VP"], &["x", "y"]);
    for kind in KernelKind::ALL {
        let g = gram(&trees, &KernelConfig::new(kind));
        let m = DMatrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j));
        let eig = m.symmetric_eigen().eigenvalues;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min > -1e-9, "{kind:?}: smallest eigenvalue {min}");
    }
}

#[test]
fn planted_corpus_is_kernel_separable() {
    let samples = SynthCorpusSpec { n_per_class: 40, ..SynthCorpusSpec::default() }.generate().unwrap();
    let train: Vec<LabeledTree> = samples
        .iter()
        .map(|s| LabeledTree { tree: s.tree.clone(), label: s.label.clone() })
        .collect();
    let p = KernelPerceptron::train(&train, KernelConfig::new(KernelKind::Sstk), 10, 0).unwrap();
    assert_eq!(p.train_accuracy, 1.0, "after {} epochs", p.epochs_run);
}

#[test]
fn negatives_never_contain_the_other_pattern() {
    let spec = SynthCorpusSpec { n_per_class: 150, noise: 0.5, ..SynthCorpusSpec::default() };
    let samples = spec.generate().unwrap();
    for class in &spec.classes {
        let pattern = ConstituencyTree::parse(&class.pattern).unwrap();
        let canonical = pattern.render();
        for s in &samples {
            let st = enumerate_fragments(&s.tree, KernelKind::Stk, usize::MAX).unwrap();
            let found = st.iter().any(|f| f.canonical == canonical);
            assert_eq!(found, s.label == class.label, "{} in {}", canonical, s.tree.render());
            assert_eq!(contains_pattern(&s.tree, &pattern), s.label == class.label);
        }
    }
}

#[test]
fn every_differentiable_function_is_registered_and_checks_out() {
    for name in ["contiguity", "st", "sst", "overlap", "intensity", "gcn_layer", "softmax_pool", "sigmoid_pool", "cross_entropy", "full_loss"] {
        assert!(verify::GRADIENT_CHECKS.contains(&name), "{name} missing");
    }
    let r = verify::gradient_suite(&[100, 101, 102], 1e-5, 1e-4).unwrap();
    assert!(r.passed, "{:?}", r.entries.iter().filter(|e| !e.failed_seeds.is_empty()).collect::<Vec<_>>());
}

fn model_for(tree: &ConstituencyTree, activation: PoolActivation) -> (ModelConfig, Params, Vocabulary) {
    let vocab = Vocabulary::build([tree], false);
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: 6,
        hidden_dim: 6,
        mlp_hidden: 5,
        pool_ks: vec![3, 1],
        pooling_activation: activation,
        seed: 4,
        ..ModelConfig::default()
    };
    let params = Params::init(&cfg).unwrap();
    (cfg, params, vocab)
}

#[test]
fn forward_pass_is_node_permutation_equivariant() {
    let t = ConstituencyTree::parse("(S (NP (DT the) (NN cat)) (VP (VBZ sits) (PP (IN on) (NP (NN mat)))))").unwrap();
    let (cfg, params, vocab) = model_for(&t, PoolActivation::Sigmoid);
    let g = to_graph(&t, &vocab);
    let n = g.n_nodes();
    // new node j is old node perm[j]
    let perm: Vec<usize> = (0..n).rev().collect();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, g.a_fwd.get(perm[i], perm[j]));
        }
    }
    let h = TreeGraph::from_forward(a, perm.iter().map(|&j| g.feature_ids[j]).collect());
    let (p, q) = (predict(&cfg, &params, &g).unwrap(), predict(&cfg, &params, &h).unwrap());
    for (x, y) in p.probabilities.iter().zip(&q.probabilities) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    let (pa, qa) = (&p.assignments[0], &q.assignments[0]);
    for j in 0..n {
        for c in 0..pa.cols() {
            assert!((qa.get(j, c) - pa.get(perm[j], c)).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_pooling_conserves_total_intensity() {
    let t = ConstituencyTree::parse("(S (NP (PRP we)) (VP (MD should) (VB be)))").unwrap();
    let (cfg, params, vocab) = model_for(&t, PoolActivation::Softmax);
    let p = predict(&cfg, &params, &to_graph(&t, &vocab)).unwrap();
    let a = &p.assignments[0];
    let total: f64 = (0..a.rows()).flat_map(|i| (0..a.cols()).map(move |c| (i, c))).map(|(i, c)| a.get(i, c)).sum();
    assert!((total - t.len() as f64).abs() < 1e-9, "{total}");
    let last = p.assignments.last().unwrap();
    assert!(last.data().iter().all(|&v| (v - 1.0).abs() < 1e-12), "final k = 1 block must be all ones");
}
