//! Graph convolutional network predicting the next mandatory node to visit.
//!
//! Architecture: three graph-convolution blocks of width 100 (linear map,
//! batch normalization, ReLU, dropout while training), a flatten over node
//! rows, one fully connected layer down to `|𝒱|` logits, and a softmax. The
//! convolution propagates features with the symmetrically normalized
//! adjacency `D̃^{-1/2}(A+I)D̃^{-1/2}`. Training minimizes the negative
//! log-likelihood of the teacher's next-mandatory-node labels with Adam;
//! gradients are computed analytically by this module (no autodiff).
//!
//! Inference is recursive: predict the first mandatory node, re-encode the
//! sub-instance starting there, and repeat until the mandatory set is
//! exhausted. Chaining shortest paths through that predicted order yields a
//! feasible solution whose cost seeds branch-and-bound as an upper bound.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::graph::{ShortestPathTable, WeightedGraph};
use crate::linalg::Matrix;
use crate::planning::Instance;

/// Hidden width of every convolution layer.
pub const HIDDEN_WIDTH: usize = 100;
/// Number of convolution blocks.
pub const CONV_LAYERS: usize = 3;
/// Default Adam learning rate.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
/// Default dropout rate inside conv blocks during training.
pub const DEFAULT_DROPOUT: f64 = 0.1;
/// Moving-average decay for batch-norm running moments.
pub const BN_DECAY: f64 = 0.9;
/// Numerical floor inside batch-norm denominators.
pub const BN_EPS: f64 = 1e-5;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

const MODEL_MAGIC: &[u8; 4] = b"GCNP";
const MODEL_VERSION: u32 = 1;

/// `|𝒱|×3` binary node features of one instance (columns: start,
/// destination, mandatory membership).
pub type FeatureMatrix = Matrix;
/// `|𝒱|×|𝒱|` symmetric propagation matrix `D̃^{-1/2}(A+I)D̃^{-1/2}`.
pub type NormalizedAdjacency = Matrix;

#[derive(Debug, Error)]
pub enum GcnError {
    #[error("model is bound to graph {model:?} but the dataset references {dataset:?}")]
    GraphMismatch { model: String, dataset: String },
    #[error("instance {0} does not fit a graph with {1} nodes")]
    InvalidInstance(String, usize),
    #[error("model file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model file checksum mismatch")]
    Checksum,
    #[error("malformed model file: {0}")]
    Malformed(String),
}

/// Encodes an instance as per-node feature rows `[st, ed, my]`.
pub fn encode_instance(s: &Instance, n: usize) -> FeatureMatrix {
    assert!(s.is_valid_for(n), "instance out of range: {s}");
    let mut x = Matrix::zeros(n, 3);
    x.set(s.start(), 0, 1.0);
    x.set(s.dest(), 1, 1.0);
    for &m in s.mandatory() {
        x.set(m, 2, 1.0);
    }
    x
}

/// Symmetrically normalized adjacency with self-connections over the
/// *binary* adjacency pattern (edge weights do not enter propagation).
pub fn normalized_adjacency(g: &WeightedGraph) -> NormalizedAdjacency {
    let n = g.node_count();
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|v| 1.0 / ((g.degree(v) + 1) as f64).sqrt())
        .collect();
    let mut a = Matrix::zeros(n, n);
    for v in 0..n {
        a.set(v, v, inv_sqrt_deg[v] * inv_sqrt_deg[v]);
        for &(u, _) in g.neighbors(v) {
            a.set(v, u, inv_sqrt_deg[v] * inv_sqrt_deg[u]);
        }
    }
    a
}

/// One convolution block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `fan_in × 100` linear map applied after propagation.
    pub theta: Matrix,
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
}

impl ConvLayer {
    fn with_theta(theta: Matrix) -> Self {
        let w = theta.cols();
        Self {
            theta,
            bn_scale: vec![1.0; w],
            bn_shift: vec![0.0; w],
            bn_running_mean: vec![0.0; w],
            bn_running_var: vec![1.0; w],
        }
    }
}

/// The full network, bound to one graph size through the FC head.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub graph_id: String,
    pub conv: Vec<ConvLayer>,
    /// `(|𝒱|·100) × |𝒱|` head applied to the flattened node embeddings.
    pub fc_weight: Matrix,
    pub fc_bias: Vec<f64>,
    pub dropout: f64,
}

impl GcnModel {
    /// Seeded initialization: weights `U(±1/√fan_in)`, biases zero,
    /// batch-norm at identity.
    pub fn new(graph_id: &str, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let conv = vec![
            ConvLayer::with_theta(uniform(3, HIDDEN_WIDTH)),
            ConvLayer::with_theta(uniform(HIDDEN_WIDTH, HIDDEN_WIDTH)),
            ConvLayer::with_theta(uniform(HIDDEN_WIDTH, HIDDEN_WIDTH)),
        ];
        let fc_weight = uniform(n * HIDDEN_WIDTH, n);
        Self {
            graph_id: graph_id.to_string(),
            conv,
            fc_weight,
            fc_bias: vec![0.0; n],
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// All parameters zero (useful as a known-output stub: logits reduce to
    /// the FC bias, so predictions become index-based tie-breaks).
    pub fn zeroed(graph_id: &str, n: usize) -> Self {
        let mut m = Self::new(graph_id, n, 0);
        for layer in &mut m.conv {
            layer.theta = Matrix::zeros(layer.theta.rows(), layer.theta.cols());
            layer.bn_scale = vec![0.0; HIDDEN_WIDTH];
        }
        m.fc_weight = Matrix::zeros(n * HIDDEN_WIDTH, n);
        m.fc_bias = vec![0.0; n];
        m
    }

    /// Node count this model is bound to.
    pub fn node_count(&self) -> usize {
        self.fc_bias.len()
    }
}

/// Activations captured by a forward pass, consumed by [`GcnModel::backward`]
/// and by the running-moment update.
pub struct ForwardCache {
    batch: usize,
    train_mode: bool,
    /// Per layer: input `(B·n)×fan_in`, normalized activations, batch
    /// moments, pre-ReLU batch-norm output, dropout scales.
    layers: Vec<LayerCache>,
    /// `B×(n·100)` flattened final node embeddings.
    flat: Matrix,
    /// `B×|𝒱|` softmax outputs.
    pub probs: Matrix,
}

struct LayerCache {
    input: Matrix,
    x_hat: Matrix,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    bn_out: Matrix,
    dropout_scale: Vec<f64>,
    output: Matrix,
}

impl ForwardCache {
    /// Final conv-stack output `(B·n)×100` (before flatten and FC head).
    pub fn final_hidden(&self) -> &Matrix {
        &self.layers[CONV_LAYERS - 1].output
    }
}

/// Parameter gradients, same shapes as the model tensors.
pub struct Gradients {
    pub conv_theta: Vec<Matrix>,
    pub bn_scale: Vec<Vec<f64>>,
    pub bn_shift: Vec<Vec<f64>>,
    pub fc_weight: Matrix,
    pub fc_bias: Vec<f64>,
}

impl GcnModel {
    /// Evaluation-mode forward for one instance; returns `ŷ` over nodes.
    pub fn forward(&self, s: &Instance, adj: &NormalizedAdjacency) -> Vec<f64> {
        let (probs, _) = self.forward_batch(std::slice::from_ref(s), adj, false, None);
        probs.row(0).to_vec()
    }

    /// Forward pass over a batch of instances.
    ///
    /// `train` enables batch statistics and dropout (an RNG is then required
    /// whenever the dropout rate is nonzero). Running moments are *not*
    /// touched here; see [`GcnModel::update_running_moments`].
    pub fn forward_batch(
        &self,
        states: &[Instance],
        adj: &NormalizedAdjacency,
        train: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Matrix, ForwardCache) {
        let n = self.node_count();
        assert_eq!(adj.rows(), n, "adjacency does not match the model");
        assert!(!states.is_empty(), "empty batch");
        let b = states.len();
        let mut input = Matrix::zeros(b * n, 3);
        for (i, s) in states.iter().enumerate() {
            assert!(s.is_valid_for(n), "instance out of range: {s}");
            let x = encode_instance(s, n);
            input.as_mut_slice()[i * n * 3..(i + 1) * n * 3].copy_from_slice(x.as_slice());
        }

        let mut layers = Vec::with_capacity(CONV_LAYERS);
        let mut h = input;
        for layer in &self.conv {
            let width = layer.theta.cols();
            // Propagate then mix: Â·(H·θ), applied per sample block.
            let p = h.matmul(&layer.theta);
            let mut z = Matrix::zeros(b * n, width);
            for s in 0..b {
                let block = Matrix::from_vec(n, width, p.as_slice()[s * n * width..(s + 1) * n * width].to_vec());
                let zb = adj.matmul(&block);
                z.as_mut_slice()[s * n * width..(s + 1) * n * width]
                    .copy_from_slice(zb.as_slice());
            }

            let rows = b * n;
            let (mut mean, mut var) = (vec![0.0; width], vec![0.0; width]);
            if train {
                for r in 0..rows {
                    for (c, m) in mean.iter_mut().enumerate() {
                        *m += z.get(r, c);
                    }
                }
                for m in &mut mean {
                    *m /= rows as f64;
                }
                for r in 0..rows {
                    for (c, v) in var.iter_mut().enumerate() {
                        let d = z.get(r, c) - mean[c];
                        *v += d * d;
                    }
                }
                for v in &mut var {
                    *v /= rows as f64; // biased, matching the running update
                }
            } else {
                mean.copy_from_slice(&layer.bn_running_mean);
                var.copy_from_slice(&layer.bn_running_var);
            }

            let mut x_hat = Matrix::zeros(rows, width);
            let mut bn_out = Matrix::zeros(rows, width);
            for r in 0..rows {
                for c in 0..width {
                    let xh = (z.get(r, c) - mean[c]) / (var[c] + BN_EPS).sqrt();
                    x_hat.set(r, c, xh);
                    bn_out.set(r, c, layer.bn_scale[c] * xh + layer.bn_shift[c]);
                }
            }

            let apply_dropout = train && self.dropout > 0.0;
            let keep = 1.0 - self.dropout;
            let mut dropout_scale = Vec::new();
            if apply_dropout {
                let r = rng
                    .as_deref_mut()
                    .expect("training with dropout requires an RNG");
                dropout_scale = (0..rows * width)
                    .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
            }
            let mut output = Matrix::zeros(rows, width);
            for r in 0..rows {
                for c in 0..width {
                    let mut v = bn_out.get(r, c).max(0.0);
                    if apply_dropout {
                        v *= dropout_scale[r * width + c];
                    }
                    output.set(r, c, v);
                }
            }

            layers.push(LayerCache {
                input: h,
                x_hat,
                batch_mean: mean,
                batch_var: var,
                bn_out,
                dropout_scale,
                output: output.clone(),
            });
            h = output;
        }

        let flat = Matrix::from_vec(b, n * HIDDEN_WIDTH, h.as_slice().to_vec());
        let logits = flat.matmul(&self.fc_weight);
        let mut probs = Matrix::zeros(b, n);
        for r in 0..b {
            let row: Vec<f64> = (0..n)
                .map(|c| logits.get(r, c) + self.fc_bias[c])
                .collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                probs.set(r, c, e / sum);
            }
        }
        let cache = ForwardCache {
            batch: b,
            train_mode: train,
            layers,
            flat,
            probs: probs.clone(),
        };
        (probs, cache)
    }

    /// Analytic gradients of the mean NLL over the batch w.r.t. every
    /// parameter. Requires a cache produced with `train = true`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        labels: &[usize],
        adj: &NormalizedAdjacency,
    ) -> Gradients {
        assert!(cache.train_mode, "backward needs a training-mode forward");
        assert_eq!(labels.len(), cache.batch);
        let n = self.node_count();
        let b = cache.batch;

        // Softmax + NLL: d(logits) = (ŷ − one_hot) / batch.
        let mut dlogits = Matrix::zeros(b, n);
        for r in 0..b {
            for c in 0..n {
                let y = cache.probs.get(r, c);
                let target = if labels[r] == c { 1.0 } else { 0.0 };
                dlogits.set(r, c, (y - target) / b as f64);
            }
        }
        let fc_bias: Vec<f64> = (0..n).map(|c| (0..b).map(|r| dlogits.get(r, c)).sum()).collect();
        let fc_weight = cache.flat.transpose().matmul(&dlogits);
        let dflat = dlogits.matmul(&self.fc_weight.transpose());
        let mut dh = Matrix::from_vec(b * n, HIDDEN_WIDTH, dflat.as_slice().to_vec());

        let mut conv_theta = vec![Matrix::zeros(0, 0); CONV_LAYERS];
        let mut bn_scale = vec![Vec::new(); CONV_LAYERS];
        let mut bn_shift = vec![Vec::new(); CONV_LAYERS];
        for l in (0..CONV_LAYERS).rev() {
            let layer = &self.conv[l];
            let lc = &cache.layers[l];
            let width = layer.theta.cols();
            let rows = b * n;

            // Dropout and ReLU are elementwise gates.
            let mut dy = dh;
            if !lc.dropout_scale.is_empty() {
                for (i, v) in dy.as_mut_slice().iter_mut().enumerate() {
                    *v *= lc.dropout_scale[i];
                }
            }
            for r in 0..rows {
                for c in 0..width {
                    if lc.bn_out.get(r, c) <= 0.0 {
                        dy.set(r, c, 0.0);
                    }
                }
            }

            // Batch-norm backward over the batch×node axis, per column.
            let mut dgamma = vec![0.0; width];
            let mut dbeta = vec![0.0; width];
            let mut mean_dy = vec![0.0; width];
            let mut mean_dy_xhat = vec![0.0; width];
            for r in 0..rows {
                for c in 0..width {
                    let d = dy.get(r, c);
                    dgamma[c] += d * lc.x_hat.get(r, c);
                    dbeta[c] += d;
                }
            }
            for c in 0..width {
                mean_dy[c] = dbeta[c] / rows as f64;
                mean_dy_xhat[c] = dgamma[c] / rows as f64;
            }
            let mut dz = Matrix::zeros(rows, width);
            for r in 0..rows {
                for c in 0..width {
                    let inv_std = 1.0 / (lc.batch_var[c] + BN_EPS).sqrt();
                    let v = layer.bn_scale[c]
                        * inv_std
                        * (dy.get(r, c) - mean_dy[c] - lc.x_hat.get(r, c) * mean_dy_xhat[c]);
                    dz.set(r, c, v);
                }
            }

            // Z = Â·(input·θ) per block: dP = Â·dZ (Â symmetric), then
            // dθ = inputᵀ·dP and d(input) = dP·θᵀ.
            let mut dp = Matrix::zeros(rows, width);
            for s in 0..b {
                let block = Matrix::from_vec(
                    n,
                    width,
                    dz.as_slice()[s * n * width..(s + 1) * n * width].to_vec(),
                );
                let d = adj.matmul(&block);
                dp.as_mut_slice()[s * n * width..(s + 1) * n * width]
                    .copy_from_slice(d.as_slice());
            }
            conv_theta[l] = lc.input.transpose().matmul(&dp);
            bn_scale[l] = dgamma;
            bn_shift[l] = dbeta;
            dh = dp.matmul(&layer.theta.transpose());
        }

        Gradients {
            conv_theta,
            bn_scale,
            bn_shift,
            fc_weight,
            fc_bias,
        }
    }

    /// Folds the cached batch moments into the running moments:
    /// `running ← 0.9·running + 0.1·batch`.
    pub fn update_running_moments(&mut self, cache: &ForwardCache) {
        assert!(cache.train_mode, "eval forwards carry no batch moments");
        for (layer, lc) in self.conv.iter_mut().zip(&cache.layers) {
            for c in 0..layer.bn_running_mean.len() {
                layer.bn_running_mean[c] =
                    BN_DECAY * layer.bn_running_mean[c] + (1.0 - BN_DECAY) * lc.batch_mean[c];
                layer.bn_running_var[c] =
                    BN_DECAY * layer.bn_running_var[c] + (1.0 - BN_DECAY) * lc.batch_var[c];
            }
        }
    }
}

/// Negative log-likelihood of one probability vector at `label`.
pub fn nll_loss(y: &[f64], label: usize) -> f64 {
    -y[label].ln()
}

/// Mean NLL of a batch of probability rows.
pub fn batch_nll_loss(probs: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(probs.rows(), labels.len());
    labels
        .iter()
        .enumerate()
        .map(|(r, &l)| nll_loss(probs.row(r), l))
        .sum::<f64>()
        / labels.len() as f64
}

/// First-moment/second-moment state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Adam states for every tensor of a [`GcnModel`], plus the step counter.
pub struct AdamOptimizer {
    pub step: u64,
    theta: Vec<AdamState>,
    scale: Vec<AdamState>,
    shift: Vec<AdamState>,
    fc_weight: AdamState,
    fc_bias: AdamState,
}

impl AdamOptimizer {
    pub fn new(model: &GcnModel) -> Self {
        Self {
            step: 0,
            theta: model
                .conv
                .iter()
                .map(|l| AdamState::new(l.theta.as_slice().len()))
                .collect(),
            scale: model
                .conv
                .iter()
                .map(|l| AdamState::new(l.bn_scale.len()))
                .collect(),
            shift: model
                .conv
                .iter()
                .map(|l| AdamState::new(l.bn_shift.len()))
                .collect(),
            fc_weight: AdamState::new(model.fc_weight.as_slice().len()),
            fc_bias: AdamState::new(model.fc_bias.len()),
        }
    }
}

/// One Adam update on a flat tensor (defaults β₁ 0.9, β₂ 0.999, ε 1e-8).
/// `step` is the already-incremented global step count.
pub fn adam_update_slice(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    step: u64,
) {
    assert_eq!(params.len(), grads.len());
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

impl GcnModel {
    /// Applies one Adam step over every parameter tensor.
    pub fn adam_step(&mut self, grads: &Gradients, opt: &mut AdamOptimizer, lr: f64) {
        opt.step += 1;
        let step = opt.step;
        for (l, layer) in self.conv.iter_mut().enumerate() {
            adam_update_slice(
                layer.theta.as_mut_slice(),
                grads.conv_theta[l].as_slice(),
                &mut opt.theta[l],
                lr,
                step,
            );
            adam_update_slice(
                &mut layer.bn_scale,
                &grads.bn_scale[l],
                &mut opt.scale[l],
                lr,
                step,
            );
            adam_update_slice(
                &mut layer.bn_shift,
                &grads.bn_shift[l],
                &mut opt.shift[l],
                lr,
                step,
            );
        }
        adam_update_slice(
            self.fc_weight.as_mut_slice(),
            grads.fc_weight.as_slice(),
            &mut opt.fc_weight,
            lr,
            step,
        );
        adam_update_slice(
            &mut self.fc_bias,
            &grads.fc_bias,
            &mut opt.fc_bias,
            lr,
            step,
        );
    }
}

/// Minibatch training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
        }
    }
}

impl GcnModel {
    /// Minibatch NLL training with Adam; returns the per-epoch mean loss.
    ///
    /// Deterministic under `cfg.seed`: one RNG drives the per-epoch shuffle
    /// and the dropout draws in strict sequence.
    pub fn train(
        &mut self,
        dataset: &Dataset,
        adj: &NormalizedAdjacency,
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>, GcnError> {
        if dataset.graph_id != self.graph_id {
            return Err(GcnError::GraphMismatch {
                model: self.graph_id.clone(),
                dataset: dataset.graph_id.clone(),
            });
        }
        let n = self.node_count();
        for p in &dataset.pairs {
            if !p.state.is_valid_for(n) || p.label >= n {
                return Err(GcnError::InvalidInstance(p.state.to_string(), n));
            }
        }
        assert!(cfg.batch_size > 0, "batch size must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamOptimizer::new(self);
        let mut order: Vec<usize> = (0..dataset.pairs.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let states: Vec<Instance> = chunk
                    .iter()
                    .map(|&i| dataset.pairs[i].state.clone())
                    .collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| dataset.pairs[i].label).collect();
                let (probs, cache) = self.forward_batch(&states, adj, true, Some(&mut rng));
                loss_sum += batch_nll_loss(&probs, &labels) * labels.len() as f64;
                let grads = self.backward(&cache, &labels, adj);
                self.update_running_moments(&cache);
                self.adam_step(&grads, &mut opt, cfg.learning_rate);
            }
            curve.push(loss_sum / dataset.pairs.len() as f64);
        }
        Ok(curve)
    }

    /// Fraction of pairs whose restricted-argmax prediction hits the label.
    pub fn next_mandatory_accuracy(
        &self,
        pairs: &[crate::datagen::TrainingPair],
        adj: &NormalizedAdjacency,
    ) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let hits = pairs
            .iter()
            .filter(|p| self.predict_next_mandatory(&p.state, adj) == p.label)
            .count();
        hits as f64 / pairs.len() as f64
    }

    /// Most probable mandatory node of `s` (argmax of `ŷ` restricted to the
    /// mandatory set; ties take the lowest index). The unrestricted argmax
    /// is logged when it disagrees.
    pub fn predict_next_mandatory(&self, s: &Instance, adj: &NormalizedAdjacency) -> usize {
        assert!(
            !s.mandatory().is_empty(),
            "no mandatory nodes to predict in {s}"
        );
        let y = self.forward(s, adj);
        let best = *s
            .mandatory()
            .iter()
            .reduce(|a, b| if y[*b] > y[*a] { b } else { a })
            .unwrap();
        let unrestricted = (0..y.len())
            .reduce(|a, c| if y[c] > y[a] { c } else { a })
            .unwrap();
        if unrestricted != best {
            log::debug!(
                "unrestricted argmax {unrestricted} lies outside the mandatory set of {s}; using {best}"
            );
        }
        best
    }

    /// Full visiting order by recursive prediction on shrinking
    /// sub-instances.
    pub fn recursive_order(&self, s: &Instance, adj: &NormalizedAdjacency) -> Vec<usize> {
        let mut order = Vec::with_capacity(s.mandatory().len());
        let mut current = Instance::new(s.start(), s.dest(), s.mandatory().iter().copied());
        while !current.mandatory().is_empty() {
            let pick = self.predict_next_mandatory(&current, adj);
            order.push(pick);
            let rest: Vec<usize> = current
                .mandatory()
                .iter()
                .copied()
                .filter(|&m| m != pick)
                .collect();
            current = Instance::new(pick, current.dest(), rest);
        }
        order
    }

    /// Feasible solution from the predicted order: shortest paths chained
    /// through `start → m₁ → … → m_q → dest`. Always an upper bound on the
    /// optimum.
    pub fn probe_upper_bound(
        &self,
        s: &Instance,
        t: &ShortestPathTable,
        adj: &NormalizedAdjacency,
    ) -> (Vec<usize>, f64, Vec<usize>) {
        let order = self.recursive_order(s, adj);
        let (path, cost) = crate::bnb::order_to_path(s, &order, t)
            .expect("recursive order is a permutation of M by construction");
        (path, cost, order)
    }
}

// ---------------------------------------------------------------------------
// Model file format
// ---------------------------------------------------------------------------

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GcnError> {
        if self.pos + n > self.data.len() {
            return Err(GcnError::Malformed("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GcnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, GcnError> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl GcnModel {
    /// Serializes to the versioned binary format (magic `GCNP`, little
    /// endian payloads, trailing SHA-256 checksum).
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.node_count() as u32;
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        push_u32(&mut buf, MODEL_VERSION);
        push_u32(&mut buf, self.graph_id.len() as u32);
        buf.extend_from_slice(self.graph_id.as_bytes());
        push_u32(&mut buf, n);
        push_u32(&mut buf, HIDDEN_WIDTH as u32);
        push_u32(&mut buf, CONV_LAYERS as u32);
        push_f64s(&mut buf, &[self.dropout]);
        for layer in &self.conv {
            push_u32(&mut buf, layer.theta.rows() as u32);
            push_u32(&mut buf, layer.theta.cols() as u32);
            push_f64s(&mut buf, layer.theta.as_slice());
            push_f64s(&mut buf, &layer.bn_scale);
            push_f64s(&mut buf, &layer.bn_shift);
            push_f64s(&mut buf, &layer.bn_running_mean);
            push_f64s(&mut buf, &layer.bn_running_var);
        }
        push_u32(&mut buf, self.fc_weight.rows() as u32);
        push_u32(&mut buf, self.fc_weight.cols() as u32);
        push_f64s(&mut buf, self.fc_weight.as_slice());
        push_f64s(&mut buf, &self.fc_bias);
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, GcnError> {
        if data.len() < 4 + 32 {
            return Err(GcnError::Malformed("file too short".into()));
        }
        let (payload, checksum) = data.split_at(data.len() - 32);
        if Sha256::digest(payload).as_slice() != checksum {
            return Err(GcnError::Checksum);
        }
        let mut r = Reader {
            data: payload,
            pos: 0,
        };
        if r.take(4)? != MODEL_MAGIC {
            return Err(GcnError::BadMagic);
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(GcnError::UnsupportedVersion(version));
        }
        let id_len = r.u32()? as usize;
        let graph_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| GcnError::Malformed("graph id is not UTF-8".into()))?;
        let n = r.u32()? as usize;
        let width = r.u32()? as usize;
        let layers = r.u32()? as usize;
        if width != HIDDEN_WIDTH || layers != CONV_LAYERS {
            return Err(GcnError::Malformed(format!(
                "unsupported architecture {layers}×{width}"
            )));
        }
        let dropout = r.f64s(1)?[0];
        let mut conv = Vec::with_capacity(layers);
        for l in 0..layers {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let expect_rows = if l == 0 { 3 } else { HIDDEN_WIDTH };
            if rows != expect_rows || cols != HIDDEN_WIDTH {
                return Err(GcnError::Malformed(format!(
                    "conv layer {l} has shape {rows}×{cols}"
                )));
            }
            let theta = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?);
            conv.push(ConvLayer {
                theta,
                bn_scale: r.f64s(cols)?,
                bn_shift: r.f64s(cols)?,
                bn_running_mean: r.f64s(cols)?,
                bn_running_var: r.f64s(cols)?,
            });
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows != n * HIDDEN_WIDTH || cols != n {
            return Err(GcnError::Malformed(format!(
                "fc layer has shape {rows}×{cols}, expected {}×{n}",
                n * HIDDEN_WIDTH
            )));
        }
        let fc_weight = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?);
        let fc_bias = r.f64s(n)?;
        if r.pos != payload.len() {
            return Err(GcnError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            graph_id,
            conv,
            fc_weight,
            fc_bias,
            dropout,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), GcnError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GcnError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    /// Human-readable dump (one section per tensor) for debugging.
    pub fn export_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "# gcn model graph={} dropout={}", self.graph_id, self.dropout);
        let section = |name: &str, rows: usize, cols: usize, data: &[f64], out: &mut String| {
            let _ = writeln!(out, "[{name}] {rows}x{cols}");
            for r in 0..rows {
                let line: Vec<String> = (0..cols)
                    .map(|c| format!("{:.17e}", data[r * cols + c]))
                    .collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        };
        for (l, layer) in self.conv.iter().enumerate() {
            let t = &layer.theta;
            section(
                &format!("conv{}.theta", l + 1),
                t.rows(),
                t.cols(),
                t.as_slice(),
                &mut out,
            );
            for (nm, v) in [
                ("bn_scale", &layer.bn_scale),
                ("bn_shift", &layer.bn_shift),
                ("bn_running_mean", &layer.bn_running_mean),
                ("bn_running_var", &layer.bn_running_var),
            ] {
                section(&format!("conv{}.{nm}", l + 1), 1, v.len(), v, &mut out);
            }
        }
        section(
            "fc.weight",
            self.fc_weight.rows(),
            self.fc_weight.cols(),
            self.fc_weight.as_slice(),
            &mut out,
        );
        section("fc.bias", 1, self.fc_bias.len(), &self.fc_bias, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::TrainingPair;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::time::Duration;

    fn path_graph(n: usize) -> WeightedGraph {
        WeightedGraph::from_edges(n, (0..n - 1).map(|i| (i, i + 1, 1.0))).unwrap()
    }

    fn tiny_dataset(g: &WeightedGraph, id: &str) -> Dataset {
        crate::datagen::backwards_astar_generate(g, id, Duration::from_secs(30), 3, 0)
    }

    #[test]
    fn encoding_examples() {
        let x = encode_instance(&Instance::new(0, 3, [1, 2]), 4);
        assert_eq!(
            x.as_slice(),
            &[1., 0., 0., 0., 0., 1., 0., 0., 1., 0., 1., 0.]
        );
        let x = encode_instance(&Instance::new(2, 2, []), 4);
        assert_eq!(
            x.as_slice(),
            &[0., 0., 0., 0., 0., 0., 1., 1., 0., 0., 0., 0.]
        );
        let x = encode_instance(&Instance::new(1, 0, [3]), 4);
        assert_eq!(
            x.as_slice(),
            &[0., 1., 0., 1., 0., 0., 0., 0., 0., 0., 0., 1.]
        );
    }

    #[test]
    fn adjacency_normalization_examples() {
        let single = WeightedGraph::from_edges(1, []).unwrap();
        assert_eq!(normalized_adjacency(&single).as_slice(), &[1.0]);
        let pair = WeightedGraph::from_edges(2, [(0, 1, 3.5)]).unwrap();
        for &v in normalized_adjacency(&pair).as_slice() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
        let chain = normalized_adjacency(&path_graph(4));
        assert_abs_diff_eq!(chain.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(chain.get(0, 1), 1.0 / 6f64.sqrt(), epsilon = 1e-15);
        assert_eq!(chain.get(0, 2), 0.0);
        // Symmetry
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(chain.get(i, j), chain.get(j, i));
            }
        }
    }

    #[test]
    fn softmax_normalized_and_uniform_for_zero_model() {
        let g = path_graph(4);
        let adj = normalized_adjacency(&g);
        let zero = GcnModel::zeroed("p4", 4);
        let y = zero.forward(&Instance::new(0, 3, [1, 2]), &adj);
        for &v in &y {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
        let trained = GcnModel::new("p4", 4, 7);
        let y = trained.forward(&Instance::new(2, 0, [1]), &adj);
        assert_abs_diff_eq!(y.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn nll_examples() {
        assert_abs_diff_eq!(nll_loss(&[0.25; 4], 2), 4f64.ln(), epsilon = 1e-12);
        assert_eq!(nll_loss(&[0.0, 1.0], 1), 0.0);
        assert_abs_diff_eq!(nll_loss(&[0.5, 0.5], 0), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn conv_stack_is_equivariant_under_rotation() {
        // The 4-cycle maps to itself under v ↦ v+1 (mod 4); conv outputs
        // must permute accordingly (the FC head intentionally does not).
        let g = WeightedGraph::from_edges(
            4,
            [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 0, 1.0)],
        )
        .unwrap();
        let adj = normalized_adjacency(&g);
        let model = GcnModel::new("c4", 4, 3);
        let rot = |v: usize| (v + 1) % 4;
        let s = Instance::new(0, 2, [1]);
        let s_rot = Instance::new(rot(0), rot(2), [rot(1)]);
        let (_, cache) = model.forward_batch(std::slice::from_ref(&s), &adj, false, None);
        let (_, cache_rot) =
            model.forward_batch(std::slice::from_ref(&s_rot), &adj, false, None);
        let h = cache.final_hidden();
        let h_rot = cache_rot.final_hidden();
        for v in 0..4 {
            for c in 0..HIDDEN_WIDTH {
                assert_abs_diff_eq!(h_rot.get(rot(v), c), h.get(v, c), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn fc_bias_gradient_is_softmax_minus_onehot() {
        let g = path_graph(4);
        let adj = normalized_adjacency(&g);
        let mut model = GcnModel::new("p4", 4, 1);
        model.dropout = 0.0;
        let s = Instance::new(0, 3, [1, 2]);
        let (probs, cache) = model.forward_batch(std::slice::from_ref(&s), &adj, true, None);
        let grads = model.backward(&cache, &[1], &adj);
        for c in 0..4 {
            let expect = probs.get(0, c) - if c == 1 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(grads.fc_bias[c], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_a_spot_check() {
        // The full-parameter sweep lives in the acceptance suite; here a
        // subset of coordinates from every tensor family is verified.
        let g = path_graph(4);
        let adj = normalized_adjacency(&g);
        let mut model = GcnModel::new("p4", 4, 5);
        model.dropout = 0.0;
        let states = vec![Instance::new(0, 3, [1, 2]), Instance::new(2, 0, [1, 3])];
        let labels = vec![1usize, 3usize];
        let loss_of = |m: &GcnModel| {
            let (probs, _) = m.forward_batch(&states, &adj, true, None);
            batch_nll_loss(&probs, &labels)
        };
        let (_, cache) = model.forward_batch(&states, &adj, true, None);
        let grads = model.backward(&cache, &labels, &adj);
        let step = 1e-5;
        let check = |get: &mut dyn FnMut(&mut GcnModel) -> &mut f64, analytic: f64| {
            let mut m = model.clone();
            *get(&mut m) += step;
            let up = loss_of(&m);
            let mut m = model.clone();
            *get(&mut m) -= step;
            let down = loss_of(&m);
            let fd = (up - down) / (2.0 * step);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "analytic {analytic} vs finite difference {fd}"
            );
        };
        for (l, idx) in [(0usize, 5usize), (1, 123), (2, 4567)] {
            check(
                &mut |m| &mut m.conv[l].theta.as_mut_slice()[idx],
                grads.conv_theta[l].as_slice()[idx],
            );
            check(&mut |m| &mut m.conv[l].bn_scale[idx % 100], grads.bn_scale[l][idx % 100]);
            check(&mut |m| &mut m.conv[l].bn_shift[idx % 100], grads.bn_shift[l][idx % 100]);
        }
        for idx in [0usize, 333, 1500] {
            check(
                &mut |m| &mut m.fc_weight.as_mut_slice()[idx],
                grads.fc_weight.as_slice()[idx],
            );
        }
        check(&mut |m| &mut m.fc_bias[2], grads.fc_bias[2]);
    }

    #[test]
    fn adam_first_step_and_fixed_point() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adam_update_slice(&mut p, &[1.0], &mut st, 1e-3, 1);
        // Bias-corrected first step moves by ≈ lr irrespective of gradient scale.
        assert_abs_diff_eq!(p[0], 1.0 - 1e-3 / (1.0 + ADAM_EPS), epsilon = 1e-12);
        let mut q = vec![0.5];
        let mut st = AdamState::new(1);
        adam_update_slice(&mut q, &[0.0], &mut st, 1e-3, 1);
        assert_eq!(q[0], 0.5);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let g = path_graph(5);
        let adj = normalized_adjacency(&g);
        let data = tiny_dataset(&g, "p5");
        assert!(data.len() >= 10);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 4,
        };
        let mut m1 = GcnModel::new("p5", 5, 11);
        let curve1 = m1.train(&data, &adj, &cfg).unwrap();
        let mut m2 = GcnModel::new("p5", 5, 11);
        let curve2 = m2.train(&data, &adj, &cfg).unwrap();
        assert_eq!(curve1, curve2);
        assert_eq!(m1, m2);
        assert!(
            curve1.last().unwrap() < curve1.first().unwrap(),
            "loss did not improve: {curve1:?}"
        );
    }

    #[test]
    fn single_pair_is_memorized() {
        let g = path_graph(4);
        let adj = normalized_adjacency(&g);
        let data = Dataset {
            graph_id: "p4".into(),
            pairs: vec![TrainingPair {
                state: Instance::new(0, 3, [1, 2]),
                label: 1,
                cost: None,
            }],
            seed: 0,
            budget: Duration::ZERO,
            terminal_pair_counts: Vec::new(),
        };
        let mut model = GcnModel::new("p4", 4, 2);
        model.dropout = 0.0;
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 1e-2,
            seed: 1,
        };
        model.train(&data, &adj, &cfg).unwrap();
        assert_eq!(model.next_mandatory_accuracy(&data.pairs, &adj), 1.0);
    }

    #[test]
    fn train_rejects_foreign_datasets() {
        let g = path_graph(4);
        let adj = normalized_adjacency(&g);
        let mut model = GcnModel::new("p4", 4, 2);
        let mut data = tiny_dataset(&g, "other");
        assert!(matches!(
            model.train(&data, &adj, &TrainConfig::default()),
            Err(GcnError::GraphMismatch { .. })
        ));
        data.graph_id = "p4".into();
        data.pairs
            .iter_mut()
            .for_each(|p| p.label = 99);
        assert!(matches!(
            model.train(&data, &adj, &TrainConfig::default()),
            Err(GcnError::InvalidInstance(..))
        ));
    }

    #[test]
    fn prediction_tie_breaks_and_restriction() {
        let g = path_graph(4);
        let adj = normalized_adjacency(&g);
        let zero = GcnModel::zeroed("p4", 4);
        // Uniform probabilities: lowest mandatory index wins.
        assert_eq!(
            zero.predict_next_mandatory(&Instance::new(0, 3, [1, 2]), &adj),
            1
        );
        assert_eq!(
            zero.predict_next_mandatory(&Instance::new(0, 3, [2]), &adj),
            2
        );
    }

    #[test]
    fn stub_model_orders_by_bias_and_probe_concatenates() {
        let g = path_graph(4);
        let t = ShortestPathTable::compute(&g);
        let adj = normalized_adjacency(&g);
        let mut stub = GcnModel::zeroed("p4", 4);
        stub.fc_bias = vec![0.0, 1.0, 10.0, 0.0];
        let s = Instance::new(0, 3, [1, 2]);
        assert_eq!(stub.recursive_order(&s, &adj), vec![2, 1]);
        let (path, cost, order) = stub.probe_upper_bound(&s, &t, &adj);
        assert_eq!(order, vec![2, 1]);
        assert_eq!(cost, 5.0);
        assert_eq!(path, vec![0, 1, 2, 1, 2, 3]);
        crate::reference::validate_search_result(
            &s,
            &g,
            &crate::planning::SearchResult {
                path,
                cost,
                states_visited: 0,
                elapsed: Duration::ZERO,
            },
        )
        .unwrap();
    }

    #[test]
    fn probe_handles_empty_mandatory_sets() {
        let g = path_graph(4);
        let t = ShortestPathTable::compute(&g);
        let adj = normalized_adjacency(&g);
        let model = GcnModel::new("p4", 4, 9);
        let (path, cost, order) = model.probe_upper_bound(&Instance::new(0, 3, []), &t, &adj);
        assert!(order.is_empty());
        assert_eq!(path, vec![0, 1, 2, 3]);
        assert_eq!(cost, 3.0);
    }

    #[test]
    fn probe_upper_bounds_the_optimum() {
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..4 {
            let g = WeightedGraph::random_connected(8, 3.0, 300 + seed);
            let t = ShortestPathTable::compute(&g);
            let adj = normalized_adjacency(&g);
            let model = GcnModel::new("g", 8, seed);
            for _ in 0..25 {
                let mut nodes: Vec<usize> = (0..8).collect();
                nodes.shuffle(&mut rng);
                let k = rng.gen_range(0..=4);
                let s = Instance::new(nodes[0], nodes[1], nodes[2..2 + k].iter().copied());
                let (_, probe, _) = model.probe_upper_bound(&s, &t, &adj);
                let opt = crate::reference::optimal_cost_by_order_enumeration(&s, &t);
                assert!(probe >= opt - 1e-9, "probe {probe} beats optimum {opt}");
            }
        }
    }

    #[test]
    fn model_file_round_trip_and_corruption_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gcnp");
        let mut model = GcnModel::new("g22", 6, 123);
        model.fc_bias[3] = 0.25;
        model.save(&path).unwrap();
        let loaded = GcnModel::load(&path).unwrap();
        assert_eq!(model, loaded);

        let mut bytes = model.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(
            GcnModel::from_bytes(&bytes),
            Err(GcnError::Checksum)
        ));
        assert!(matches!(
            GcnModel::from_bytes(b"notamodel"),
            Err(GcnError::Malformed(_))
        ));
        let text = model.export_text();
        assert!(text.contains("[conv1.theta] 3x100"));
        assert!(text.contains("[fc.bias] 1x6"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn recursive_order_is_a_permutation(seed in 0u64..500) {
            use rand::prelude::*;
            let g = path_graph(6);
            let adj = normalized_adjacency(&g);
            let model = GcnModel::new("p6", 6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut nodes: Vec<usize> = (0..6).collect();
            nodes.shuffle(&mut rng);
            let k = rng.gen_range(0..=4);
            let s = Instance::new(nodes[0], nodes[1], nodes[2..2 + k].iter().copied());
            let mut order = model.recursive_order(&s, &adj);
            order.sort_unstable();
            prop_assert_eq!(order.as_slice(), s.mandatory());
        }
    }
}
