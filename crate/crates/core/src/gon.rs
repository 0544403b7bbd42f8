//! The anomaly model: one network that plays both roles of an
//! adversarial pair. It scores an input window by how well it
//! reconstructs it, D(Z) = exp(-MSE(net(Z), Z)/tau), and it generates
//! "most normal" windows by second-order gradient ascent on log D
//! starting from the window itself.
//!
//! Architecture, per entity row (hosts first, then tasks):
//! - window rows and schedule rows get separate ReLU embeddings;
//! - host rows additionally pass through a small graph transformer:
//!   two learnable softmax mixtures over {worker-broker adjacency,
//!   broker clique, identity} are multiplied into one propagation
//!   matrix, followed by linear graph-conv rounds;
//! - every entity forms a query from its window embedding and a
//!   schedule context (tasks: their own row; hosts: the pooled mean),
//!   attends over the host embeddings, and the attention readout is
//!   decoded to a sigmoid reconstruction of the entity's window row.
//!
//! Sharing one parameter set between the scoring and generating roles
//! is what keeps the model at half the size of a duplicated pair.

use crate::autodiff::optim::{AdaHessianState, AdamState, CosineRestartSchedule};
use crate::autodiff::{grad_and_hessian_diag, NodeId, Tape};
use crate::error::{Error, Result};
use crate::federation::TopologyGraph;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Scores are clamped away from 0 and 1 so both log terms stay finite.
pub const SCORE_FLOOR: f64 = 1e-6;
pub const SCORE_CEIL: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GonConfig {
    /// Features per entity per step (n).
    pub n_features: usize,
    /// Window length in intervals (k).
    pub window_len: usize,
    /// Schedule one-hot width: the largest LEI size the model accepts.
    pub m_max: usize,
    /// Embedding width of every internal layer.
    pub width: usize,
    /// Graph-conv rounds after the input embedding.
    pub rounds: usize,
    /// Score temperature in D = exp(-MSE/tau).
    pub tau: f64,
    /// Base learning rate of the generation ascent.
    pub gen_lr: f64,
    /// Ascent iterations per generation call.
    pub gen_iters: usize,
    /// Cosine warm-restart period of the ascent schedule.
    pub gen_restart_period: u64,
    /// Rademacher samples for the Hessian diagonal estimate.
    pub hutchinson_samples: usize,
}

impl GonConfig {
    pub fn new(n_features: usize, window_len: usize, m_max: usize) -> Self {
        GonConfig {
            n_features,
            window_len,
            m_max,
            width: 128,
            rounds: 2,
            tau: 1.0,
            gen_lr: 0.05,
            gen_iters: 30,
            gen_restart_period: 10,
            hutchinson_samples: 1,
        }
    }

    /// Flattened window row width (n*k).
    pub fn input_width(&self) -> usize {
        self.n_features * self.window_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.window_len == 0 || self.m_max == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        if self.width < 2 || self.rounds == 0 {
            return Err(Error::contract("model needs width >= 2 and rounds >= 1"));
        }
        if self.tau <= 0.0 || self.gen_lr <= 0.0 {
            return Err(Error::contract("tau and gen_lr must be positive"));
        }
        if self.gen_restart_period == 0 || self.hutchinson_samples == 0 {
            return Err(Error::contract("restart period and hutchinson samples must be >= 1"));
        }
        Ok(())
    }

    /// Parameter tensor shapes, in storage order.
    fn shapes(&self) -> Vec<Vec<usize>> {
        let nk = self.input_width();
        let w = self.width;
        let mut shapes = vec![
            vec![nk, w],
            vec![w],
            vec![self.m_max, w],
            vec![w],
            vec![nk, w],
            vec![w],
            vec![1, 3],
            vec![1, 3],
        ];
        for _ in 0..self.rounds {
            shapes.push(vec![w, w]);
        }
        shapes.extend([
            vec![w, w],
            vec![w],
            vec![2 * w, w],
            vec![w],
            vec![3 * w, nk],
            vec![nk],
        ]);
        shapes
    }
}

// Parameter indices into the storage order of `GonConfig::shapes`.
const P_W_IN: usize = 0;
const P_B_IN: usize = 1;
const P_W_SCHED: usize = 2;
const P_B_SCHED: usize = 3;
const P_W_G0: usize = 4;
const P_B_G0: usize = 5;
const P_THETA1: usize = 6;
const P_THETA2: usize = 7;
const P_ROUNDS: usize = 8;

/// Host relations the model propagates over, with the raw adjacencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostGraph {
    pub adj_worker_broker: Tensor,
    pub adj_broker_broker: Tensor,
    pub n_hosts: usize,
}

impl HostGraph {
    pub fn new(adj_worker_broker: Tensor, adj_broker_broker: Tensor) -> Result<Self> {
        let n = adj_worker_broker.rows();
        for (name, a) in
            [("worker-broker", &adj_worker_broker), ("broker-broker", &adj_broker_broker)]
        {
            if a.shape() != [n, n] {
                return Err(Error::shape(
                    format!("square {name} adjacency ({n},{n})"),
                    format!("{:?}", a.shape()),
                ));
            }
        }
        Ok(HostGraph { adj_worker_broker, adj_broker_broker, n_hosts: n })
    }

    pub fn from_topology(g: &TopologyGraph) -> Result<Self> {
        HostGraph::new(g.adj_worker_broker.clone(), g.adj_broker_broker.clone())
    }

    /// Row-stochastic copies plus the identity; isolated rows fall back
    /// to self-loops so propagation never drops a host.
    fn normalized(&self) -> (Tensor, Tensor, Tensor) {
        let n = self.n_hosts;
        let norm = |a: &Tensor| {
            let mut out = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let s: f64 = (0..n).map(|j| a.get2(i, j)).sum();
                if s > 0.0 {
                    for j in 0..n {
                        out.set2(i, j, a.get2(i, j) / s);
                    }
                } else {
                    out.set2(i, i, 1.0);
                }
            }
            out
        };
        let mut eye = Tensor::zeros(&[n, n]);
        for i in 0..n {
            eye.set2(i, i, 1.0);
        }
        (norm(&self.adj_worker_broker), norm(&self.adj_broker_broker), eye)
    }
}

/// A training or scoring example: one window with its schedule context.
#[derive(Debug, Clone)]
pub struct GonSample {
    pub window: Tensor,
    pub schedule: Tensor,
    pub graph: HostGraph,
}

/// Result of the generation ascent.
#[derive(Debug, Clone)]
pub struct Generated {
    /// Best window found (highest score seen).
    pub z: Tensor,
    pub score: f64,
    pub iters: usize,
    /// Set when the ascent hit a numerical failure and stopped early;
    /// the best window seen so far is still returned.
    pub degraded: bool,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    cfg: GonConfig,
    params: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GonNetwork {
    cfg: GonConfig,
    params: Vec<Tensor>,
}

impl GonNetwork {
    pub fn new(cfg: GonConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x90_4e_u64.rotate_left(33));
        let params = cfg
            .shapes()
            .into_iter()
            .map(|shape| init_param(&shape, &mut rng))
            .collect();
        Ok(GonNetwork { cfg, params })
    }

    pub fn cfg(&self) -> &GonConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Raw parameter tensors in checkpoint order.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Adds `delta` to one parameter element; used by finite-difference
    /// probes. Indices are (tensor, flat element).
    pub fn nudge_param(&mut self, tensor: usize, elem: usize, delta: f64) -> Result<()> {
        let p = self
            .params
            .get_mut(tensor)
            .ok_or_else(|| Error::contract(format!("no parameter tensor {tensor}")))?;
        let data = p.data_mut();
        let v = data
            .get_mut(elem)
            .ok_or_else(|| Error::contract(format!("parameter {tensor} has no element {elem}")))?;
        *v += delta;
        Ok(())
    }

    /// Loss and its parameter gradients for one sample against a fixed
    /// generated window; gradient order matches [`Self::params`], with
    /// zeros for parameters the loss does not reach.
    pub fn loss_and_grads(
        &self,
        window: &Tensor,
        schedule: &Tensor,
        graph: &HostGraph,
        z_star: &Tensor,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check_inputs(window, schedule, graph)?;
        let mut tape = Tape::new();
        let pn = self.push_params(&mut tape, true);
        let loss = self.loss_node(&mut tape, &pn, window, schedule, graph, z_star)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        let out = pn
            .iter()
            .zip(&self.params)
            .map(|(&p, t)| match grads.wrt(p) {
                Some(g) => tape.value(g).clone(),
                None => Tensor::zeros(t.shape()),
            })
            .collect();
        Ok((value, out))
    }

    /// What a duplicated scorer/generator pair of this shape would cost.
    pub fn two_network_param_count(&self) -> usize {
        2 * self.param_count()
    }

    fn check_inputs(&self, window: &Tensor, schedule: &Tensor, graph: &HostGraph) -> Result<()> {
        let nk = self.cfg.input_width();
        if window.shape().len() != 2 || window.cols() != nk {
            return Err(Error::shape(
                format!("window (rows,{nk})"),
                format!("{:?}", window.shape()),
            ));
        }
        if window.rows() < graph.n_hosts || graph.n_hosts == 0 {
            return Err(Error::contract(format!(
                "window has {} rows for {} hosts",
                window.rows(),
                graph.n_hosts
            )));
        }
        if schedule.shape() != [window.rows(), self.cfg.m_max] {
            return Err(Error::shape(
                format!("schedule ({},{})", window.rows(), self.cfg.m_max),
                format!("{:?}", schedule.shape()),
            ));
        }
        Ok(())
    }

    fn push_params(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Builds the reconstruction head on the tape and returns its node.
    fn forward(
        &self,
        tape: &mut Tape,
        pn: &[NodeId],
        window: NodeId,
        schedule: NodeId,
        adj_wb: NodeId,
        adj_bb: NodeId,
        eye: NodeId,
        n_hosts: usize,
    ) -> Result<NodeId> {
        let w = self.cfg.width;
        let rows = tape.value(window).rows();
        let n_tasks = rows - n_hosts;
        let r = self.cfg.rounds;
        let i_h1 = P_ROUNDS + r;
        let (w_h1, b_h1) = (pn[i_h1], pn[i_h1 + 1]);
        let (w_q, b_q) = (pn[i_h1 + 2], pn[i_h1 + 3]);
        let (w_o, b_o) = (pn[i_h1 + 4], pn[i_h1 + 5]);

        // Entity embeddings.
        let e_w = {
            let x = tape.matmul(window, pn[P_W_IN])?;
            let x = tape.add_bias(x, pn[P_B_IN])?;
            tape.relu(x)
        };
        let e_s = {
            let x = tape.matmul(schedule, pn[P_W_SCHED])?;
            let x = tape.add_bias(x, pn[P_B_SCHED])?;
            tape.relu(x)
        };

        // Host graph propagation with the learned relation mixtures.
        let mix = |tape: &mut Tape, theta: NodeId| -> Result<NodeId> {
            let p = tape.softmax(theta)?;
            let mut acc: Option<NodeId> = None;
            for (slot, base) in [adj_wb, adj_bb, eye].into_iter().enumerate() {
                let weight = tape.slice_cols(p, slot, 1)?;
                let term = tape.scale_by(base, weight)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(acc.expect("three mixture terms"))
        };
        let a1 = mix(tape, pn[P_THETA1])?;
        let a2 = mix(tape, pn[P_THETA2])?;
        let a_tilde = tape.matmul(a1, a2)?;
        let host_rows = tape.slice_rows(window, 0, n_hosts)?;
        let mut e_h = {
            let x = tape.matmul(host_rows, pn[P_W_G0])?;
            let x = tape.add_bias(x, pn[P_B_G0])?;
            tape.tanh(x)
        };
        for q in 0..r {
            let prop = tape.matmul(a_tilde, e_h)?;
            e_h = tape.matmul(prop, pn[P_ROUNDS + q])?;
        }
        let e_h1 = {
            let x = tape.matmul(e_h, w_h1)?;
            let x = tape.add_bias(x, b_h1)?;
            tape.softmax(x)?
        };

        // Schedule context: hosts share the pooled mean, tasks keep
        // their own embedding row.
        let pooled = {
            let s = tape.sum_rows(e_s)?;
            tape.scale(s, 1.0 / rows as f64)
        };
        let ctx_hosts = tape.broadcast_rows(pooled, n_hosts)?;
        let ctx = if n_tasks == 0 {
            ctx_hosts
        } else {
            let ctx_tasks = tape.slice_rows(e_s, n_hosts, n_tasks)?;
            tape.concat_rows(&[ctx_hosts, ctx_tasks])?
        };

        // Attention readout over the host embeddings.
        let query = {
            let qin = tape.concat_cols(&[e_w, ctx])?;
            let x = tape.matmul(qin, w_q)?;
            tape.add_bias(x, b_q)?
        };
        let scores = {
            let kt = tape.transpose(e_h1)?;
            let raw = tape.matmul(query, kt)?;
            let scaled = tape.scale(raw, 1.0 / (w as f64).sqrt());
            tape.softmax(scaled)?
        };
        let readout = tape.matmul(scores, e_h1)?;

        let head_in = tape.concat_cols(&[e_w, ctx, readout])?;
        let out = tape.matmul(head_in, w_o)?;
        let out = tape.add_bias(out, b_o)?;
        Ok(tape.sigmoid(out))
    }

    fn push_graph(&self, tape: &mut Tape, graph: &HostGraph) -> (NodeId, NodeId, NodeId) {
        let (wb, bb, eye) = graph.normalized();
        (tape.constant(wb), tape.constant(bb), tape.constant(eye))
    }

    /// Reconstruction of every entity row, values in (0,1).
    pub fn reconstruct(
        &self,
        window: &Tensor,
        schedule: &Tensor,
        graph: &HostGraph,
    ) -> Result<Tensor> {
        self.check_inputs(window, schedule, graph)?;
        let mut tape = Tape::new();
        let pn = self.push_params(&mut tape, false);
        let (wb, bb, eye) = self.push_graph(&mut tape, graph);
        let wn = tape.constant(window.clone());
        let sn = tape.constant(schedule.clone());
        let out = self.forward(&mut tape, &pn, wn, sn, wb, bb, eye, graph.n_hosts)?;
        Ok(tape.value(out).clone())
    }

    /// D(window) = exp(-MSE(reconstruction, window)/tau), clamped into
    /// (0,1) so log D and log(1-D) both stay finite.
    pub fn score(&self, window: &Tensor, schedule: &Tensor, graph: &HostGraph) -> Result<f64> {
        let recon = self.reconstruct(window, schedule, graph)?;
        let mse = mean_squared_error(&recon, window)?;
        Ok(((-mse / self.cfg.tau).exp()).clamp(SCORE_FLOOR, SCORE_CEIL))
    }

    /// Second-order ascent of log D from Z = window: AdaHessian steps
    /// with a cosine warm-restart rate, iterates clamped to [0,1],
    /// best-scoring iterate returned.
    pub fn generate<R: Rng>(
        &self,
        window: &Tensor,
        schedule: &Tensor,
        graph: &HostGraph,
        rng: &mut R,
    ) -> Result<Generated> {
        self.check_inputs(window, schedule, graph)?;
        let mut z = window.clone();
        let mut best = z.clone();
        let mut best_score = self.score(&z, schedule, graph)?;
        if self.cfg.gen_iters == 0 {
            return Ok(Generated { z: best, score: best_score, iters: 0, degraded: false });
        }
        let mut opt = AdaHessianState::new(z.shape());
        let mut sched = CosineRestartSchedule::new(self.cfg.gen_lr, self.cfg.gen_restart_period)?;
        let mut degraded = false;
        let mut iters = 0;
        for _ in 0..self.cfg.gen_iters {
            let mut tape = Tape::new();
            let pn = self.push_params(&mut tape, false);
            let (wb, bb, eye) = self.push_graph(&mut tape, graph);
            let zn = tape.leaf(z.clone());
            let sn = tape.constant(schedule.clone());
            let out = self.forward(&mut tape, &pn, zn, sn, wb, bb, eye, graph.n_hosts)?;
            let mse = tape.mse(out, zn)?;
            let log_d = tape.scale(mse, -1.0 / self.cfg.tau);
            let cur = (tape.value(log_d).item()?.exp()).clamp(SCORE_FLOOR, SCORE_CEIL);
            if cur > best_score {
                best_score = cur;
                best = z.clone();
            }
            let step = grad_and_hessian_diag(
                &mut tape,
                log_d,
                zn,
                self.cfg.hutchinson_samples,
                rng,
            )
            .and_then(|(grad, hess)| opt.step(&mut z, &grad, &hess, sched.next(), 1.0));
            match step {
                Ok(()) => {}
                Err(Error::Numerical(_)) => {
                    degraded = true;
                    break;
                }
                Err(e) => return Err(e),
            }
            for v in z.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            iters += 1;
        }
        if !degraded {
            let final_score = self.score(&z, schedule, graph)?;
            if final_score > best_score {
                best_score = final_score;
                best = z;
            }
        }
        Ok(Generated { z: best, score: best_score, iters, degraded })
    }

    /// Adversarial loss of one example against a generated window:
    /// -[log D(window) + log(1 - D(z_star))].
    pub fn loss_against(
        &self,
        window: &Tensor,
        schedule: &Tensor,
        graph: &HostGraph,
        z_star: &Tensor,
    ) -> Result<f64> {
        self.check_inputs(window, schedule, graph)?;
        let mut tape = Tape::new();
        let pn = self.push_params(&mut tape, false);
        let loss = self.loss_node(&mut tape, &pn, window, schedule, graph, z_star)?;
        tape.value(loss).item()
    }

    fn loss_node(
        &self,
        tape: &mut Tape,
        pn: &[NodeId],
        window: &Tensor,
        schedule: &Tensor,
        graph: &HostGraph,
        z_star: &Tensor,
    ) -> Result<NodeId> {
        if z_star.shape() != window.shape() {
            return Err(Error::shape(
                format!("{:?}", window.shape()),
                format!("generated {:?}", z_star.shape()),
            ));
        }
        let (wb, bb, eye) = self.push_graph(tape, graph);
        let sn = tape.constant(schedule.clone());
        let score_of = |tape: &mut Tape, input: &Tensor| -> Result<NodeId> {
            let x = tape.constant(input.clone());
            let out = self.forward(tape, pn, x, sn, wb, bb, eye, graph.n_hosts)?;
            let mse = tape.mse(out, x)?;
            let log_d = tape.scale(mse, -1.0 / self.cfg.tau);
            let d = tape.exp(log_d);
            Ok(tape.clamp(d, SCORE_FLOOR, SCORE_CEIL))
        };
        let d_real = score_of(tape, window)?;
        let d_fake = score_of(tape, z_star)?;
        let t1 = tape.log(d_real);
        let one = tape.constant(Tensor::scalar(1.0));
        let gap = tape.sub(one, d_fake)?;
        let t2 = tape.log(gap);
        let s = tape.add(t1, t2)?;
        Ok(tape.scale(s, -1.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            cfg: self.cfg.clone(),
            params: self.params.clone(),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::from_checkpoint(ckpt)
    }

    fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.cfg.validate().map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
        let expected = ckpt.cfg.shapes();
        if ckpt.params.len() != expected.len() {
            return Err(Error::data(format!(
                "checkpoint has {} parameter tensors, expected {}",
                ckpt.params.len(),
                expected.len()
            )));
        }
        for (i, (p, want)) in ckpt.params.iter().zip(&expected).enumerate() {
            if p.shape() != want.as_slice() {
                return Err(Error::data(format!(
                    "checkpoint parameter {i} has shape {:?}, expected {:?}",
                    p.shape(),
                    want
                )));
            }
            if !p.all_finite() {
                return Err(Error::data(format!("checkpoint parameter {i} is not finite")));
            }
        }
        Ok(GonNetwork { cfg: ckpt.cfg, params: ckpt.params })
    }
}

impl Serialize for GonNetwork {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        Checkpoint { version: CHECKPOINT_VERSION, cfg: self.cfg.clone(), params: self.params.clone() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GonNetwork {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ckpt = Checkpoint::deserialize(d)?;
        GonNetwork::from_checkpoint(ckpt).map_err(serde::de::Error::custom)
    }
}

fn mean_squared_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let n = a.numel() as f64;
    let sum: f64 =
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / n)
}

fn init_param<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    match shape {
        // Biases and mixture logits start at zero (uniform mixture).
        [_] | [1, 3] => Tensor::zeros(shape),
        [fan_in, fan_out] => {
            let a = (6.0 / (*fan_in as f64 + *fan_out as f64)).sqrt();
            let data =
                (0..fan_in * fan_out).map(|_| a * (2.0 * rng.random::<f64>() - 1.0)).collect();
            Tensor::new(shape.to_vec(), data).expect("consistent shape")
        }
        other => unreachable!("unexpected parameter shape {other:?}"),
    }
}

/// Per-parameter Adam states for training the shared network.
#[derive(Debug, Clone)]
pub struct GonOptimizer {
    states: Vec<AdamState>,
}

impl GonOptimizer {
    pub fn new(net: &GonNetwork, lr: f64) -> Result<Self> {
        let states = net
            .params
            .iter()
            .map(|p| AdamState::new(p.shape(), lr))
            .collect::<Result<Vec<_>>>()?;
        Ok(GonOptimizer { states })
    }
}

/// One optimizer step on the mean adversarial loss of a minibatch.
/// Each sample generates its own counterexample first, so the same
/// parameters receive signal from both roles. Returns the mean loss.
pub fn train_minibatch<R: Rng>(
    net: &mut GonNetwork,
    opt: &mut GonOptimizer,
    samples: &[GonSample],
    rng: &mut R,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("training minibatch is empty"));
    }
    if opt.states.len() != net.params.len() {
        return Err(Error::contract("optimizer does not match the network"));
    }
    let mut grad_acc: Vec<Tensor> =
        net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut total_loss = 0.0;
    for sample in samples {
        let z_star = net.generate(&sample.window, &sample.schedule, &sample.graph, rng)?.z;
        let mut tape = Tape::new();
        let pn = net.push_params(&mut tape, true);
        let loss =
            net.loss_node(&mut tape, &pn, &sample.window, &sample.schedule, &sample.graph, &z_star)?;
        total_loss += tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        for (acc, &p) in grad_acc.iter_mut().zip(&pn) {
            if let Some(g) = grads.wrt(p) {
                *acc = acc.add(tape.value(g))?;
            }
        }
    }
    let scale = 1.0 / samples.len() as f64;
    for ((state, param), acc) in opt.states.iter_mut().zip(&mut net.params).zip(&grad_acc) {
        state.step(param, &acc.scale(scale))?;
    }
    Ok(total_loss * scale)
}

/// Single-sample, single-step refresh used after each remediation.
pub fn finetune<R: Rng>(
    net: &mut GonNetwork,
    opt: &mut GonOptimizer,
    sample: &GonSample,
    rng: &mut R,
) -> Result<f64> {
    train_minibatch(net, opt, std::slice::from_ref(sample), rng)
}

/// One optimizer step against an already generated counterexample, for
/// callers that produced `z_star` earlier in the same cycle.
pub fn finetune_with(
    net: &mut GonNetwork,
    opt: &mut GonOptimizer,
    sample: &GonSample,
    z_star: &Tensor,
) -> Result<f64> {
    if opt.states.len() != net.params.len() {
        return Err(Error::contract("optimizer does not match the network"));
    }
    let mut tape = Tape::new();
    let pn = net.push_params(&mut tape, true);
    let loss =
        net.loss_node(&mut tape, &pn, &sample.window, &sample.schedule, &sample.graph, z_star)?;
    let val = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    for ((state, param), &p) in opt.states.iter_mut().zip(&mut net.params).zip(&pn) {
        match grads.wrt(p) {
            Some(g) => {
                let g = tape.value(g).clone();
                state.step(param, &g)?;
            }
            None => {
                let zero = Tensor::zeros(param.shape());
                state.step(param, &zero)?;
            }
        }
    }
    Ok(val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> GonConfig {
        GonConfig {
            width: 8,
            rounds: 1,
            gen_iters: 5,
            gen_restart_period: 3,
            ..GonConfig::new(2, 2, 2)
        }
    }

    fn two_host_graph() -> HostGraph {
        let wb = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let bb = Tensor::zeros(&[2, 2]);
        HostGraph::new(wb, bb).unwrap()
    }

    fn window_rows(rows: &[[f64; 4]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::matrix(rows.len(), 4, data).unwrap()
    }

    fn schedule_rows(rows: &[[f64; 2]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::matrix(rows.len(), 2, data).unwrap()
    }

    #[test]
    fn output_shape_tracks_entity_count() {
        let net = GonNetwork::new(tiny_cfg(), 1).unwrap();
        let graph = two_host_graph();
        let hosts_only = window_rows(&[[0.1, 0.2, 0.3, 0.4], [0.5, 0.5, 0.5, 0.5]]);
        let s0 = schedule_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let out = net.reconstruct(&hosts_only, &s0, &graph).unwrap();
        assert_eq!(out.shape(), [2, 4]);
        let with_tasks = window_rows(&[
            [0.1, 0.2, 0.3, 0.4],
            [0.5, 0.5, 0.5, 0.5],
            [0.9, 0.1, 0.9, 0.1],
            [0.2, 0.8, 0.2, 0.8],
            [0.3, 0.3, 0.6, 0.6],
        ]);
        let s = schedule_rows(&[[1., 0.], [0., 1.], [1., 0.], [0., 1.], [1., 0.]]);
        let out = net.reconstruct(&with_tasks, &s, &graph).unwrap();
        assert_eq!(out.shape(), [5, 4]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn task_rows_permute_consistently() {
        let net = GonNetwork::new(tiny_cfg(), 2).unwrap();
        let graph = two_host_graph();
        let w = window_rows(&[
            [0.1, 0.2, 0.3, 0.4],
            [0.5, 0.5, 0.5, 0.5],
            [0.9, 0.1, 0.9, 0.1],
            [0.2, 0.8, 0.2, 0.8],
        ]);
        let s = schedule_rows(&[[1., 0.], [0., 1.], [1., 0.], [0., 1.]]);
        let w_swapped = window_rows(&[
            [0.1, 0.2, 0.3, 0.4],
            [0.5, 0.5, 0.5, 0.5],
            [0.2, 0.8, 0.2, 0.8],
            [0.9, 0.1, 0.9, 0.1],
        ]);
        let s_swapped = schedule_rows(&[[1., 0.], [0., 1.], [0., 1.], [1., 0.]]);
        let out = net.reconstruct(&w, &s, &graph).unwrap();
        let out_swapped = net.reconstruct(&w_swapped, &s_swapped, &graph).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(out.get2(2, j), out_swapped.get2(3, j), epsilon = 1e-12);
            assert_abs_diff_eq!(out.get2(3, j), out_swapped.get2(2, j), epsilon = 1e-12);
            // Host rows unaffected by the task permutation.
            assert_abs_diff_eq!(out.get2(0, j), out_swapped.get2(0, j), epsilon = 1e-12);
        }
    }

    #[test]
    fn score_is_clamped_and_deterministic() {
        let net = GonNetwork::new(tiny_cfg(), 3).unwrap();
        let graph = two_host_graph();
        let w = window_rows(&[[0.3, 0.7, 0.2, 0.9], [0.5, 0.1, 0.8, 0.4]]);
        let s = schedule_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let a = net.score(&w, &s, &graph).unwrap();
        let b = net.score(&w, &s, &graph).unwrap();
        assert_eq!(a, b);
        assert!((SCORE_FLOOR..=SCORE_CEIL).contains(&a));
    }

    #[test]
    fn loss_with_fake_equal_to_real_is_at_least_two_log_two() {
        // If Z* == W then D appears in both terms and
        // -[log d + log(1-d)] >= 2 ln 2 for any d in (0,1).
        let net = GonNetwork::new(tiny_cfg(), 4).unwrap();
        let graph = two_host_graph();
        let w = window_rows(&[[0.3, 0.7, 0.2, 0.9], [0.5, 0.1, 0.8, 0.4]]);
        let s = schedule_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let loss = net.loss_against(&w, &s, &graph, &w).unwrap();
        assert!(loss >= 2.0 * (2.0f64).ln() - 1e-9, "loss {loss}");
    }

    #[test]
    fn generation_no_op_at_zero_iters_and_improves_score() {
        let cfg = GonConfig { gen_iters: 0, ..tiny_cfg() };
        let net = GonNetwork::new(cfg, 5).unwrap();
        let graph = two_host_graph();
        let w = window_rows(&[[0.3, 0.7, 0.2, 0.9], [0.5, 0.1, 0.8, 0.4]]);
        let s = schedule_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let g = net.generate(&w, &s, &graph, &mut rng).unwrap();
        assert_eq!(g.z, w);
        assert_eq!(g.iters, 0);
        assert!(!g.degraded);

        let cfg = GonConfig { gen_iters: 25, gen_lr: 0.05, ..tiny_cfg() };
        let net = GonNetwork::new(cfg, 5).unwrap();
        let base = net.score(&w, &s, &graph).unwrap();
        let g = net.generate(&w, &s, &graph, &mut rng).unwrap();
        assert!(g.score >= base, "ascent never worsens the best seen");
        assert!(g.z.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn training_decays_loss_toward_floor() {
        // Fakes start at the real window and climb, so the loss never dips
        // under 2 ln 2; training on a repeated window must close the gap.
        let mut net = GonNetwork::new(tiny_cfg(), 6).unwrap();
        let graph = two_host_graph();
        let w = window_rows(&[[0.2, 0.8, 0.4, 0.6], [0.7, 0.3, 0.9, 0.1]]);
        let s = schedule_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let sample =
            GonSample { window: w.clone(), schedule: s.clone(), graph: graph.clone() };
        let mut opt = GonOptimizer::new(&net, 3e-3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let first = train_minibatch(&mut net, &mut opt, &[sample.clone(), sample.clone()], &mut rng)
            .unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = train_minibatch(&mut net, &mut opt, &[sample.clone(), sample.clone()], &mut rng)
                .unwrap();
        }
        let floor = 2.0 * (2.0f64).ln();
        assert!(last.is_finite() && first.is_finite());
        assert!(last >= floor - 1e-9, "loss {last} under floor");
        assert!(
            last - floor < 0.7 * (first - floor),
            "gap to floor barely moved: {first} -> {last}"
        );
    }

    #[test]
    fn finetune_takes_one_step() {
        let mut net = GonNetwork::new(tiny_cfg(), 7).unwrap();
        let graph = two_host_graph();
        let w = window_rows(&[[0.2, 0.8, 0.4, 0.6], [0.7, 0.3, 0.9, 0.1]]);
        let s = schedule_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let sample = GonSample { window: w, schedule: s, graph };
        let mut opt = GonOptimizer::new(&net, 1e-3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let before = net.params.clone();
        let loss = finetune(&mut net, &mut opt, &sample, &mut rng).unwrap();
        assert!(loss.is_finite());
        assert_ne!(before, net.params);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_behavior() {
        let net = GonNetwork::new(tiny_cfg(), 8).unwrap();
        let graph = two_host_graph();
        let w = window_rows(&[[0.3, 0.7, 0.2, 0.9], [0.5, 0.1, 0.8, 0.4]]);
        let s = schedule_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let path = std::env::temp_dir().join(format!("gon-ckpt-{}.json", std::process::id()));
        net.save(&path).unwrap();
        let loaded = GonNetwork::load(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(net, loaded);
        assert_eq!(
            net.score(&w, &s, &graph).unwrap(),
            loaded.score(&w, &s, &graph).unwrap()
        );
    }

    #[test]
    fn load_rejects_mismatched_shapes() {
        let net = GonNetwork::new(tiny_cfg(), 9).unwrap();
        let path = std::env::temp_dir().join(format!("gon-bad-{}.json", std::process::id()));
        let mut ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            cfg: net.cfg.clone(),
            params: net.params.clone(),
        };
        ckpt.params[0] = Tensor::zeros(&[1, 1]);
        let file = std::fs::File::create(&path).unwrap();
        serde_json::to_writer(file, &ckpt).unwrap();
        let err = GonNetwork::load(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn single_network_undercuts_duplicated_pair() {
        let net = GonNetwork::new(GonConfig::new(7, 5, 8), 10).unwrap();
        let single = net.param_count() as f64;
        let pair = net.two_network_param_count() as f64;
        assert!(single / pair <= 0.55);
        assert!(net.param_count() > 0);
    }
}
