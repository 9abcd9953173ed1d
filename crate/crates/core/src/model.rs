//! GCN + differentiable pooling classifier.
//!
//! Each block runs `gcn_layers_per_block[b]` GCN layers and then pools to
//! `pool_ks[b]` clusters. The last block pools to a single cluster, whose
//! embedding feeds a two-layer MLP head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{evaluate_taped, ConstraintReport, ConstraintSet, LayerConstraints, Lambdas};
use crate::error::{ModelError, NumError};
use crate::numcore::{Tape, Tensor, Var};
use crate::treebank::{TreeGraph, Vocabulary};

pub use crate::constraints::PoolActivation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// GCN layers before each pooling block.
    pub gcn_layers_per_block: Vec<usize>,
    /// Cluster counts per pooling block; the last one must be 1.
    pub pool_ks: Vec<usize>,
    pub pooling_activation: PoolActivation,
    pub mlp_hidden: usize,
    pub n_classes: usize,
    /// `None` trains plain GNN + DiffPool.
    pub constraint_set: Option<ConstraintSet>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1,
            embed_dim: 16,
            hidden_dim: 16,
            gcn_layers_per_block: vec![2, 1],
            pool_ks: vec![8, 1],
            pooling_activation: PoolActivation::Sigmoid,
            mlp_hidden: 16,
            n_classes: 2,
            constraint_set: Some(ConstraintSet::default()),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.pool_ks.is_empty() {
            return err("pool_ks is empty".into());
        }
        if *self.pool_ks.last().unwrap() != 1 {
            return err(format!("last pool_ks entry must be 1, got {:?}", self.pool_ks));
        }
        if self.gcn_layers_per_block.len() != self.pool_ks.len() {
            return err(format!(
                "gcn_layers_per_block has {} entries for {} pooling blocks",
                self.gcn_layers_per_block.len(),
                self.pool_ks.len()
            ));
        }
        if self.gcn_layers_per_block.contains(&0) {
            return err("every block needs at least one GCN layer".into());
        }
        if self.pool_ks.contains(&0) {
            return err("cluster counts must be >= 1".into());
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return err(format!("{name} must be >= 1"));
            }
        }
        if self.n_classes < 2 {
            return err(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if let Some(set) = &self.constraint_set {
            set.validate().map_err(ModelError::Config)?;
        }
        Ok(())
    }

    /// Pooling layers that receive fragment constraints (all but the final k=1 block).
    pub fn constrained_layers(&self) -> Vec<usize> {
        if self.constraint_set.is_none() {
            return Vec::new();
        }
        (0..self.pool_ks.len().saturating_sub(1)).collect()
    }

    /// Activation used by pooling block `b`; the final single-cluster block is always softmax.
    pub fn activation(&self, b: usize) -> PoolActivation {
        if b + 1 == self.pool_ks.len() {
            PoolActivation::Softmax
        } else {
            self.pooling_activation
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub embedding: Tensor,
    /// `gcn[b][l]` is the weight of layer `l` in block `b`.
    pub gcn: Vec<Vec<Tensor>>,
    pub pool: Vec<Tensor>,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, limit)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

impl Params {
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embedding = uniform(&mut rng, cfg.vocab_size, cfg.embed_dim, 0.1);
        let mut gcn = Vec::new();
        let mut pool = Vec::new();
        let mut in_dim = cfg.embed_dim;
        for (b, &layers) in cfg.gcn_layers_per_block.iter().enumerate() {
            let mut block = Vec::new();
            for _ in 0..layers {
                block.push(glorot(&mut rng, in_dim, cfg.hidden_dim));
                in_dim = cfg.hidden_dim;
            }
            gcn.push(block);
            pool.push(glorot(&mut rng, cfg.hidden_dim, cfg.pool_ks[b]));
        }
        Ok(Self {
            embedding,
            gcn,
            pool,
            mlp_w1: glorot(&mut rng, cfg.hidden_dim, cfg.mlp_hidden),
            mlp_b1: Tensor::zeros(1, cfg.mlp_hidden),
            mlp_w2: glorot(&mut rng, cfg.mlp_hidden, cfg.n_classes),
            mlp_b2: Tensor::zeros(1, cfg.n_classes),
        })
    }

    /// All tensors in a fixed order shared with [`Params::tensors_mut`] and [`ParamVars::all`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.embedding];
        v.extend(self.gcn.iter().flatten());
        v.extend(&self.pool);
        v.extend([&self.mlp_w1, &self.mlp_b1, &self.mlp_w2, &self.mlp_b2]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embedding];
        v.extend(self.gcn.iter_mut().flatten());
        v.extend(self.pool.iter_mut());
        v.extend([
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]);
        v
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Records every parameter as a trainable leaf.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            embedding: tape.var(self.embedding.clone()),
            gcn: self
                .gcn
                .iter()
                .map(|b| b.iter().map(|w| tape.var(w.clone())).collect())
                .collect(),
            pool: self.pool.iter().map(|w| tape.var(w.clone())).collect(),
            mlp_w1: tape.var(self.mlp_w1.clone()),
            mlp_b1: tape.var(self.mlp_b1.clone()),
            mlp_w2: tape.var(self.mlp_w2.clone()),
            mlp_b2: tape.var(self.mlp_b2.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    pub embedding: Var<'t>,
    pub gcn: Vec<Vec<Var<'t>>>,
    pub pool: Vec<Var<'t>>,
    pub mlp_w1: Var<'t>,
    pub mlp_b1: Var<'t>,
    pub mlp_w2: Var<'t>,
    pub mlp_b2: Var<'t>,
}

impl<'t> ParamVars<'t> {
    pub fn all(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.embedding];
        v.extend(self.gcn.iter().flatten().copied());
        v.extend(self.pool.iter().copied());
        v.extend([self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]);
        v
    }

    pub fn all_mut(&mut self) -> Vec<&mut Var<'t>> {
        let mut v = vec![&mut self.embedding];
        v.extend(self.gcn.iter_mut().flatten());
        v.extend(self.pool.iter_mut());
        v.extend([
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]);
        v
    }
}

/// `ReLU(Â H W)` for a normalized adjacency `Â`.
pub fn gcn_layer<'t>(h: Var<'t>, a_hat: Var<'t>, w: Var<'t>) -> Result<Var<'t>, NumError> {
    Ok(a_hat.matmul(h)?.matmul(w)?.relu())
}

/// `D^-1/2 (A + I) D^-1/2` recorded on the tape.
pub fn normalize_on_tape<'t>(a: Var<'t>) -> Result<Var<'t>, NumError> {
    let n = a.shape().0;
    let with_loops = a.add(a.tape().constant(Tensor::identity(n)))?;
    let inv_sqrt = with_loops.row_sum().powf(-0.5);
    with_loops.scale_rows(inv_sqrt)?.scale_cols(inv_sqrt.t())
}

/// One pooling step: `P = act(H W_p)`, `H̃ = PᵀH`, `Ã = PᵀAP`.
pub fn pool<'t>(
    h: Var<'t>,
    adj: Var<'t>,
    w_p: Var<'t>,
    activation: PoolActivation,
) -> Result<(Var<'t>, Var<'t>, Var<'t>), NumError> {
    let p = activation.apply(h.matmul(w_p)?);
    let pooled_h = p.t().matmul(h)?;
    let pooled_adj = p.t().matmul(adj.matmul(p)?)?;
    Ok((p, pooled_h, pooled_adj))
}

#[derive(Debug, Clone)]
pub struct BlockTrace<'t> {
    pub assignment: Var<'t>,
    pub activation: PoolActivation,
    pub pooled_h: Var<'t>,
    pub pooled_adj: Var<'t>,
    /// Directed graph the fragment constraints are evaluated on; `None` for unconstrained blocks.
    pub constraint_graph: Option<TreeGraph>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<'t> {
    pub blocks: Vec<BlockTrace<'t>>,
    pub tree_embedding: Var<'t>,
    pub logits: Var<'t>,
}

impl ForwardTrace<'_> {
    pub fn assignment_values(&self) -> Vec<Tensor> {
        self.blocks.iter().map(|b| b.assignment.value()).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.softmax_rows().value().into_data()
    }
}

pub fn forward<'t>(
    graph: &TreeGraph,
    cfg: &ModelConfig,
    params: &ParamVars<'t>,
) -> Result<ForwardTrace<'t>, ModelError> {
    let tape = params.embedding.tape();
    if let Some(&bad) = graph.feature_ids.iter().find(|&&f| f >= cfg.vocab_size) {
        return Err(ModelError::Config(format!(
            "feature id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let constrained = cfg.constrained_layers();
    let mut h = params.embedding.gather_rows(&graph.feature_ids)?;
    let mut adj = tape.constant(graph.symmetric_adjacency());
    let mut a_hat = tape.constant(graph.normalized_adjacency());
    let mut directed = graph.a_fwd.clone();
    let mut blocks = Vec::with_capacity(cfg.pool_ks.len());
    for b in 0..cfg.pool_ks.len() {
        if b > 0 {
            a_hat = normalize_on_tape(adj)?;
        }
        for &w in &params.gcn[b] {
            h = gcn_layer(h, a_hat, w)?;
        }
        let activation = cfg.activation(b);
        let (p, pooled_h, pooled_adj) = pool(h, adj, params.pool[b], activation)?;
        let constraint_graph = if constrained.contains(&b) {
            if b == 0 {
                Some(graph.clone())
            } else {
                let k_prev = directed.rows();
                Some(TreeGraph::from_forward(directed.clone(), vec![0; k_prev]))
            }
        } else {
            None
        };
        let pv = p.value();
        directed = pv.transpose().matmul(&directed.matmul(&pv)?)?;
        blocks.push(BlockTrace {
            assignment: p,
            activation,
            pooled_h,
            pooled_adj,
            constraint_graph,
        });
        h = pooled_h;
        adj = pooled_adj;
    }
    let hidden = h
        .matmul(params.mlp_w1)?
        .add(params.mlp_b1)?
        .relu();
    let logits = hidden.matmul(params.mlp_w2)?.add(params.mlp_b2)?;
    Ok(ForwardTrace {
        blocks,
        tree_embedding: h,
        logits,
    })
}

/// `CE + Σ λ C` over every constrained layer, with the raw constraint values.
///
/// Terms whose multiplier is exactly 0 are evaluated for the report but not
/// added, so an all-zero multiplier set gives the cross-entropy bit for bit.
pub fn total_loss<'t>(
    trace: &ForwardTrace<'t>,
    label: usize,
    constraint_set: Option<&ConstraintSet>,
    lambdas: &Lambdas,
) -> Result<(Var<'t>, ConstraintReport), ModelError> {
    for (&(layer, kind), &v) in lambdas.iter() {
        if v < 0.0 || !v.is_finite() {
            return Err(ModelError::NegativeLambda {
                key: format!("layer {layer} {kind}"),
                value: v,
            });
        }
    }
    let n_classes = trace.logits.shape().1;
    if label >= n_classes {
        return Err(ModelError::Label { label, n_classes });
    }
    let mut loss = trace.logits.cross_entropy(label)?;
    let mut report = ConstraintReport {
        layers: Vec::new(),
        lambdas: lambdas.clone(),
    };
    if let Some(set) = constraint_set {
        for (layer, block) in trace.blocks.iter().enumerate() {
            let Some(graph) = &block.constraint_graph else {
                continue;
            };
            let mut lc = LayerConstraints {
                layer,
                values: Default::default(),
                degenerate_columns: Default::default(),
            };
            for &kind in &set.kinds {
                let c = evaluate_taped(kind, block.assignment, graph, set)?;
                lc.values.insert(kind, c.value.item());
                if !c.degenerate_columns.is_empty() {
                    lc.degenerate_columns.insert(kind, c.degenerate_columns);
                }
                let lambda = lambdas.get(layer, kind);
                if lambda != 0.0 {
                    loss = loss.add(c.value.scale(lambda))?;
                }
            }
            report.layers.push(lc);
        }
    }
    Ok((loss, report))
}

/// Forward pass values for one graph, without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub assignments: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (JSON has no 128-bit integers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }
}

/// Everything needed to resume or evaluate a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub vocabulary_hash: String,
    pub class_names: Vec<String>,
    pub params: Params,
    pub lambdas: Lambdas,
    pub rng: RngState,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn predict(&self, graph: &TreeGraph) -> Result<Prediction, ModelError> {
        predict(&self.config, &self.params, graph)
    }
}

pub fn predict(cfg: &ModelConfig, params: &Params, graph: &TreeGraph) -> Result<Prediction, ModelError> {
    let tape = Tape::new();
    let vars = params.on_tape(&tape);
    let trace = forward(graph, cfg, &vars)?;
    let probabilities = trace.probabilities();
    let class = argmax(&probabilities);
    Ok(Prediction {
        class,
        probabilities,
        assignments: trace.assignment_values(),
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintKind;
    use crate::treebank::{to_graph, ConstituencyTree};

    fn setup(s: &str) -> (TreeGraph, ModelConfig) {
        let t = ConstituencyTree::parse(s).unwrap();
        let v = Vocabulary::build([&t], false);
        let cfg = ModelConfig {
            vocab_size: v.size(),
            embed_dim: 4,
            hidden_dim: 5,
            mlp_hidden: 3,
            pool_ks: vec![3, 1],
            seed: 11,
            ..ModelConfig::default()
        };
        (to_graph(&t, &v), cfg)
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.pool_ks = vec![4, 2];
        assert!(cfg.validate().is_err());
        cfg.pool_ks = vec![];
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            gcn_layers_per_block: vec![1],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_gcn_output() {
        let tape = Tape::new();
        let h = tape.var(Tensor::filled(3, 2, 0.7));
        let a = tape.constant(Tensor::identity(3));
        let w = tape.var(Tensor::zeros(2, 4));
        assert_eq!(gcn_layer(h, a, w).unwrap().value(), Tensor::zeros(3, 4));
    }

    #[test]
    fn isolated_node_gcn_is_relu_hw() {
        let tape = Tape::new();
        let a_hat = normalize_on_tape(tape.constant(Tensor::zeros(1, 1))).unwrap();
        assert_eq!(a_hat.value(), Tensor::identity(1));
        let h = tape.var(Tensor::from_rows(&[vec![1.0, -2.0]]));
        let w = tape.var(Tensor::from_rows(&[vec![1.0, 0.5], vec![1.0, -1.0]]));
        let out = gcn_layer(h, a_hat, w).unwrap().value();
        assert_eq!(out, Tensor::from_rows(&[vec![0.0, 2.5]]));
    }

    #[test]
    fn single_cluster_softmax_pool_sums_rows() {
        let tape = Tape::new();
        let h = tape.var(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let adj = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let w = tape.var(Tensor::from_rows(&[vec![0.3], vec![-0.2]]));
        let (p, ph, pa) = pool(h, adj, w, PoolActivation::Softmax).unwrap();
        assert_eq!(p.value(), Tensor::ones(2, 1));
        assert_eq!(ph.value(), Tensor::from_rows(&[vec![4.0, 6.0]]));
        assert_eq!(pa.value(), Tensor::scalar(2.0));
    }

    #[test]
    fn forward_shape_chain_and_determinism() {
        let (g, cfg) = setup("(S (NP (PRP it)) (VP (VBZ works)))");
        let params = Params::init(&cfg).unwrap();
        let run = || {
            let tape = Tape::new();
            let vars = params.on_tape(&tape);
            let tr = forward(&g, &cfg, &vars).unwrap();
            assert_eq!(tr.blocks[0].assignment.shape(), (7, 3));
            assert_eq!(tr.blocks[0].pooled_h.shape(), (3, 5));
            assert_eq!(tr.blocks[1].assignment.shape(), (3, 1));
            assert_eq!(tr.tree_embedding.shape(), (1, 5));
            assert_eq!(tr.logits.shape(), (1, 2));
            tr.logits.value()
        };
        let a = run();
        assert!(a.is_finite());
        assert_eq!(a, run());
        assert_eq!(Params::init(&cfg).unwrap(), params);
    }

    #[test]
    fn zero_lambdas_give_plain_cross_entropy() {
        let (g, cfg) = setup("(S (A a) (B b))");
        let params = Params::init(&cfg).unwrap();
        let tape = Tape::new();
        let vars = params.on_tape(&tape);
        let tr = forward(&g, &cfg, &vars).unwrap();
        let ce = tr.logits.cross_entropy(1).unwrap().item();
        let set = cfg.constraint_set.clone().unwrap();
        let lambdas = Lambdas::uniform(&[0], &set.kinds, 0.0);
        let (loss, report) = total_loss(&tr, 1, Some(&set), &lambdas).unwrap();
        assert_eq!(loss.item(), ce);
        assert_eq!(report.layers.len(), 1);
        assert_eq!(report.layers[0].values.len(), set.kinds.len());

        let one = Lambdas::uniform(&[0], &set.kinds, 1.0);
        let two = Lambdas::uniform(&[0], &set.kinds, 2.0);
        let r1 = total_loss(&tr, 1, Some(&set), &one).unwrap().0.item() - ce;
        let r2 = total_loss(&tr, 1, Some(&set), &two).unwrap().0.item() - ce;
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
    }

    #[test]
    fn negative_lambda_and_bad_label_rejected() {
        let (g, cfg) = setup("(S a)");
        let params = Params::init(&cfg).unwrap();
        let tape = Tape::new();
        let tr = forward(&g, &cfg, &params.on_tape(&tape)).unwrap();
        let mut l = Lambdas::default();
        l.set(0, ConstraintKind::Overlap, -0.1);
        assert!(matches!(
            total_loss(&tr, 0, cfg.constraint_set.as_ref(), &l),
            Err(ModelError::NegativeLambda { .. })
        ));
        assert!(matches!(
            total_loss(&tr, 5, None, &Lambdas::default()),
            Err(ModelError::Label { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trips_through_json() {
        let (g, cfg) = setup("(S (A a) (B b))");
        let t = ConstituencyTree::parse("(S (A a) (B b))").unwrap();
        let v = Vocabulary::build([&t], false);
        let ck = Checkpoint {
            vocabulary_hash: v.hash(),
            vocabulary: v,
            class_names: vec!["x".into(), "y".into()],
            params: Params::init(&cfg).unwrap(),
            config: cfg,
            lambdas: Lambdas::default(),
            rng: RngState::capture(3, &ChaCha8Rng::seed_from_u64(3)),
            epoch: 2,
        };
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.predict(&g).unwrap(), ck.predict(&g).unwrap());
    }
}
