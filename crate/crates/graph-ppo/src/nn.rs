//! Graph-structured policy and value network.
//!
//! One network serves chains of every length. Per-node features pass through
//! two edge-conditioned convolution layers: a small MLP turns each edge's
//! features into a full weight matrix, each edge multiplies its source node's
//! features by that matrix, and incoming messages are mean-aggregated at the
//! target alongside a root (self) transform. A separate MLP embeds the
//! per-body global features, the embedding is broadcast back to the body's
//! nodes, and the concatenation feeds two heads: a per-node scalar action
//! mean and a mean-pooled per-body value. A single shared log standard
//! deviation parameter completes the Gaussian policy.
//!
//! Parameters live in a [`ParamStore`] with stable names and ordering, which
//! is what makes checkpoints reproducible byte for byte.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::env::GraphObservation;
use crate::error::{check_finite, Error, Result};

/// Version stamp written into checkpoints; bumped on layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Initial value of the shared log standard deviation.
pub const INIT_LOG_STD: f64 = -0.5;

/// Architecture hyperparameters.
///
/// The defaults give 4551 parameters; `PolicyNet::parameter_count` pins the
/// full census in tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub node_feature_dim: usize,
    pub edge_feature_dim: usize,
    /// Output channels of the two edge-conditioned convolutions.
    pub conv_channels: [usize; 2],
    /// Hidden width of the per-edge weight-generating MLP.
    pub edge_net_hidden: usize,
    pub global_in_dim: usize,
    pub global_hidden: usize,
    pub global_out_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            node_feature_dim: 2,
            edge_feature_dim: 2,
            conv_channels: [24, 16],
            edge_net_hidden: 2,
            global_in_dim: 4,
            global_hidden: 128,
            global_out_dim: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("node_feature_dim", self.node_feature_dim),
            ("edge_feature_dim", self.edge_feature_dim),
            ("conv_channels[0]", self.conv_channels[0]),
            ("conv_channels[1]", self.conv_channels[1]),
            ("edge_net_hidden", self.edge_net_hidden),
            ("global_in_dim", self.global_in_dim),
            ("global_hidden", self.global_hidden),
            ("global_out_dim", self.global_out_dim),
        ] {
            if v == 0 {
                return Err(Error::RejectedInput(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the concatenated node-plus-global representation.
    pub fn fused_dim(&self) -> usize {
        self.conv_channels[1] + self.global_out_dim
    }
}

/// Named parameters in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, t: Tensor) {
        debug_assert!(self.index_of(name).is_none(), "duplicate parameter {name}");
        self.entries.push((name.to_string(), t));
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Euclidean norm over every parameter's gradient.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients down so their joint norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for (_, t) in &mut self.entries {
                t.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }
}

/// Adam optimizer state: first and second moment estimates per parameter,
/// in the parameter store's order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update over every parameter, from the gradients
/// currently accumulated in the store.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::DimensionMismatch {
            expected: store.len(),
            got: state.m.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (_, tensor)) in store.entries.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        if m.len() != tensor.len() {
            return Err(Error::DimensionMismatch {
                expected: tensor.len(),
                got: m.len(),
            });
        }
        for j in 0..tensor.len() {
            let g = tensor.grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            tensor.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A batch of graph observations flattened for the network: nodes and edges
/// of all bodies concatenated, edge indices shifted so they stay local to
/// their body, and a graph id per node for pooling and broadcasting.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_graphs: usize,
    pub node_features: Vec<f64>,
    pub edge_src: Vec<usize>,
    pub edge_tgt: Vec<usize>,
    pub edge_features: Vec<f64>,
    pub node_graph_ids: Vec<usize>,
    /// `graph_offsets[g]..graph_offsets[g + 1]` are graph g's node indices.
    pub graph_offsets: Vec<usize>,
    pub global_features: Vec<f64>,
}

impl GraphBatch {
    pub fn from_observations(observations: &[GraphObservation]) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::RejectedInput("empty observation batch".into()));
        }
        let mut batch = GraphBatch {
            n_nodes: 0,
            n_edges: 0,
            n_graphs: observations.len(),
            node_features: Vec::new(),
            edge_src: Vec::new(),
            edge_tgt: Vec::new(),
            edge_features: Vec::new(),
            node_graph_ids: Vec::new(),
            graph_offsets: vec![0],
            global_features: Vec::new(),
        };
        for (g, obs) in observations.iter().enumerate() {
            let n = obs.node_features.len();
            if n == 0 {
                return Err(Error::RejectedInput(format!("observation {g} has no nodes")));
            }
            if obs.edges.len() != obs.edge_features.len() {
                return Err(Error::DimensionMismatch {
                    expected: obs.edges.len(),
                    got: obs.edge_features.len(),
                });
            }
            let base = batch.n_nodes;
            for f in &obs.node_features {
                check_finite(f, "node_features")?;
                batch.node_features.extend_from_slice(f);
            }
            for (e, &(src, tgt)) in obs.edges.iter().enumerate() {
                if src >= n || tgt >= n {
                    return Err(Error::RejectedInput(format!(
                        "observation {g} edge {e} ({src} -> {tgt}) exceeds {n} nodes"
                    )));
                }
                batch.edge_src.push(base + src);
                batch.edge_tgt.push(base + tgt);
            }
            for f in &obs.edge_features {
                check_finite(f, "edge_features")?;
                batch.edge_features.extend_from_slice(f);
            }
            check_finite(&obs.global_features, "global_features")?;
            batch.global_features.extend_from_slice(&obs.global_features);
            batch.node_graph_ids.extend((0..n).map(|_| g));
            batch.n_nodes += n;
            batch.n_edges += obs.edges.len();
            batch.graph_offsets.push(batch.n_nodes);
        }
        Ok(batch)
    }
}

/// Tape node ids produced by a forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `n_nodes x 1` per-node action means.
    pub action_mean: NodeId,
    /// `n_graphs x 1` per-body value estimates.
    pub values: NodeId,
    /// `1 x 1` shared log standard deviation.
    pub log_std: NodeId,
    /// Leaf id for every parameter, in store order, for grad accumulation.
    pub param_leaves: Vec<NodeId>,
}

/// The policy/value network: a parameter store plus the forward wiring.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    cfg: NetConfig,
    params: ParamStore,
}

/// Xavier-uniform bound for a weight matrix.
fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl PolicyNet {
    /// Builds a freshly initialized network. Weights are Xavier-uniform from
    /// the given seed, biases zero, the policy head scaled down so initial
    /// actions stay near zero, and the shared log standard deviation starts
    /// at [`INIT_LOG_STD`].
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        fn linear(
            params: &mut ParamStore,
            rng: &mut ChaCha8Rng,
            name: &str,
            fan_in: usize,
            fan_out: usize,
            weight_scale: f64,
        ) {
            let bound = xavier_bound(fan_in, fan_out);
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| weight_scale * rng.random_range(-bound..bound))
                .collect();
            params.push(
                &format!("{name}.weight"),
                Tensor::new(fan_in, fan_out, data).unwrap(),
            );
            params.push(&format!("{name}.bias"), Tensor::zeros(1, fan_out));
        }

        let [c1, c2] = cfg.conv_channels;
        let (nd, ed, hidden) = (cfg.node_feature_dim, cfg.edge_feature_dim, cfg.edge_net_hidden);
        linear(&mut params, &mut rng, "conv1.edge.l1", ed, hidden, 1.0);
        linear(&mut params, &mut rng, "conv1.edge.l2", hidden, nd * c1, 1.0);
        linear(&mut params, &mut rng, "conv1.root", nd, c1, 1.0);
        linear(&mut params, &mut rng, "conv2.edge.l1", ed, hidden, 1.0);
        linear(&mut params, &mut rng, "conv2.edge.l2", hidden, c1 * c2, 1.0);
        linear(&mut params, &mut rng, "conv2.root", c1, c2, 1.0);
        linear(&mut params, &mut rng, "global.l1", cfg.global_in_dim, cfg.global_hidden, 1.0);
        linear(&mut params, &mut rng, "global.l2", cfg.global_hidden, cfg.global_out_dim, 1.0);
        linear(&mut params, &mut rng, "policy", cfg.fused_dim(), 1, 0.01);
        linear(&mut params, &mut rng, "value", cfg.fused_dim(), 1, 1.0);
        params.push("log_std", Tensor::new(1, 1, vec![INIT_LOG_STD]).unwrap());

        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Current shared standard deviation.
    pub fn std(&self) -> f64 {
        self.params.get("log_std").unwrap().data[0].exp()
    }

    /// Runs the network on a batch, recording onto `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &GraphBatch) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        if batch.node_features.len() != batch.n_nodes * cfg.node_feature_dim {
            return Err(Error::DimensionMismatch {
                expected: batch.n_nodes * cfg.node_feature_dim,
                got: batch.node_features.len(),
            });
        }
        if batch.edge_features.len() != batch.n_edges * cfg.edge_feature_dim {
            return Err(Error::DimensionMismatch {
                expected: batch.n_edges * cfg.edge_feature_dim,
                got: batch.edge_features.len(),
            });
        }
        if batch.global_features.len() != batch.n_graphs * cfg.global_in_dim {
            return Err(Error::DimensionMismatch {
                expected: batch.n_graphs * cfg.global_in_dim,
                got: batch.global_features.len(),
            });
        }

        // Every parameter becomes a leaf up front, in store order.
        let mut param_leaves = Vec::with_capacity(self.params.len());
        for (_, tensor) in self.params.iter() {
            param_leaves.push(tensor.leaf(tape)?);
        }
        let lookup = |name: &str| -> NodeId {
            let idx = self
                .params
                .index_of(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}"));
            param_leaves[idx]
        };

        let nodes = tape.leaf(
            batch.n_nodes,
            cfg.node_feature_dim,
            batch.node_features.clone(),
        )?;
        let edges = tape.leaf(
            batch.n_edges,
            cfg.edge_feature_dim,
            batch.edge_features.clone(),
        )?;
        let globals = tape.leaf(
            batch.n_graphs,
            cfg.global_in_dim,
            batch.global_features.clone(),
        )?;

        let conv = |tape: &mut Tape, layer: &str, x: NodeId| -> Result<NodeId> {
            let h = tape.matmul(edges, lookup(&format!("{layer}.edge.l1.weight")))?;
            let h = tape.add_row_vec(h, lookup(&format!("{layer}.edge.l1.bias")))?;
            let h = tape.relu(h)?;
            let w = tape.matmul(h, lookup(&format!("{layer}.edge.l2.weight")))?;
            let w = tape.add_row_vec(w, lookup(&format!("{layer}.edge.l2.bias")))?;
            let x_src = tape.gather_rows(x, &batch.edge_src)?;
            let msgs = tape.edge_matvec(w, x_src)?;
            let agg = tape.segment_mean(msgs, &batch.edge_tgt, batch.n_nodes)?;
            let rooted = tape.matmul(x, lookup(&format!("{layer}.root.weight")))?;
            let mixed = tape.add(agg, rooted)?;
            let mixed = tape.add_row_vec(mixed, lookup(&format!("{layer}.root.bias")))?;
            tape.relu(mixed)
        };

        let x1 = conv(tape, "conv1", nodes)?;
        let x2 = conv(tape, "conv2", x1)?;

        let g = tape.matmul(globals, lookup("global.l1.weight"))?;
        let g = tape.add_row_vec(g, lookup("global.l1.bias"))?;
        let g = tape.relu(g)?;
        let g = tape.matmul(g, lookup("global.l2.weight"))?;
        let g = tape.add_row_vec(g, lookup("global.l2.bias"))?;

        let g_per_node = tape.gather_rows(g, &batch.node_graph_ids)?;
        let fused = tape.concat_cols(x2, g_per_node)?;

        let action_mean = tape.matmul(fused, lookup("policy.weight"))?;
        let action_mean = tape.add_row_vec(action_mean, lookup("policy.bias"))?;

        let pooled = tape.segment_mean(fused, &batch.node_graph_ids, batch.n_graphs)?;
        let values = tape.matmul(pooled, lookup("value.weight"))?;
        let values = tape.add_row_vec(values, lookup("value.bias"))?;

        let log_std = lookup("log_std");

        Ok(ForwardPass {
            action_mean,
            values,
            log_std,
            param_leaves,
        })
    }

    /// Adds the tape's gradients for this pass into the parameter store.
    pub fn accumulate_grads(&mut self, tape: &Tape, pass: &ForwardPass) -> Result<()> {
        if pass.param_leaves.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: pass.param_leaves.len(),
            });
        }
        for (i, (_, tensor)) in self.params.entries.iter_mut().enumerate() {
            tensor.accumulate_grad(tape, pass.param_leaves[i])?;
        }
        Ok(())
    }

    /// Convenience inference: action means and values for a batch, no tape
    /// kept around.
    pub fn infer(&self, batch: &GraphBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, batch)?;
        Ok((
            tape.value(pass.action_mean).to_vec(),
            tape.value(pass.values).to_vec(),
        ))
    }
}

/// Serialized parameter matrix.
#[derive(Debug, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Serialized Adam moments.
#[derive(Debug, Serialize, Deserialize)]
struct AdamSer {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Serialized deterministic RNG position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Word position as a decimal string; it can exceed what JSON numbers
    /// carry exactly.
    pub word_pos: String,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Schema(format!("rng seed must be 32 bytes, got {}", self.seed.len())))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Schema(format!("bad rng word position {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: NetConfig,
    params: Vec<NamedArray>,
    adam: Option<AdamSer>,
    rng: Option<RngSnapshot>,
    timestep: u64,
}

/// Everything needed to resume training from a snapshot.
#[derive(Debug)]
pub struct Checkpoint {
    pub net: PolicyNet,
    pub adam: Option<AdamState>,
    pub rng: Option<RngSnapshot>,
    pub timestep: u64,
}

/// Serializes network, optimizer, RNG position, and timestep to JSON bytes.
/// The byte stream is a pure function of the contents, so identical state
/// writes identical files.
pub fn save_checkpoint(
    net: &PolicyNet,
    adam: Option<&AdamState>,
    rng: Option<&RngSnapshot>,
    timestep: u64,
) -> Result<Vec<u8>> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: net.cfg.clone(),
        params: net
            .params
            .iter()
            .map(|(name, t)| NamedArray {
                name: name.to_string(),
                rows: t.rows,
                cols: t.cols,
                data: t.data.clone(),
            })
            .collect(),
        adam: adam.map(|a| AdamSer {
            step: a.step,
            m: a.m.clone(),
            v: a.v.clone(),
        }),
        rng: rng.cloned(),
        timestep,
    };
    let mut bytes = serde_json::to_vec_pretty(&file)
        .map_err(|e| Error::Schema(format!("checkpoint serialization failed: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Restores a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let file: CheckpointFile = serde_json::from_slice(bytes)
        .map_err(|e| Error::Schema(format!("checkpoint parse failed: {e}")))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    file.config.validate()?;
    // Build a scaffold with the right shapes, then overwrite every tensor.
    let mut net = PolicyNet::new(file.config.clone(), 0)?;
    if file.params.len() != net.params.len() {
        return Err(Error::Schema(format!(
            "checkpoint has {} parameters, expected {}",
            file.params.len(),
            net.params.len()
        )));
    }
    for arr in &file.params {
        let tensor = net
            .params
            .get_mut(&arr.name)
            .ok_or_else(|| Error::Schema(format!("unknown parameter {:?}", arr.name)))?;
        if tensor.rows != arr.rows || tensor.cols != arr.cols {
            return Err(Error::Schema(format!(
                "parameter {:?} has shape {}x{}, expected {}x{}",
                arr.name, arr.rows, arr.cols, tensor.rows, tensor.cols
            )));
        }
        if arr.data.len() != arr.rows * arr.cols {
            return Err(Error::Schema(format!(
                "parameter {:?} data length {} does not match shape",
                arr.name,
                arr.data.len()
            )));
        }
        check_finite(&arr.data, &arr.name)?;
        tensor.data.copy_from_slice(&arr.data);
        tensor.zero_grad();
    }
    let adam = match file.adam {
        None => None,
        Some(a) => {
            let mut state = AdamState::new(&net.params);
            if a.m.len() != state.m.len() || a.v.len() != state.v.len() {
                return Err(Error::Schema(
                    "optimizer state does not match parameter layout".into(),
                ));
            }
            for (slot, src) in state.m.iter_mut().zip(&a.m) {
                if slot.len() != src.len() {
                    return Err(Error::Schema(
                        "optimizer moment length does not match parameter".into(),
                    ));
                }
                slot.copy_from_slice(src);
            }
            for (slot, src) in state.v.iter_mut().zip(&a.v) {
                if slot.len() != src.len() {
                    return Err(Error::Schema(
                        "optimizer moment length does not match parameter".into(),
                    ));
                }
                slot.copy_from_slice(src);
            }
            state.step = a.step;
            Some(state)
        }
    };
    Ok(Checkpoint {
        net,
        adam,
        rng: file.rng,
        timestep: file.timestep,
    })
}
