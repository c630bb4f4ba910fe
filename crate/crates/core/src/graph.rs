//! A small reverse-mode differentiation engine over a static graph of
//! layer operations.
//!
//! Nodes are appended through builder methods that only accept already
//! existing node ids, so insertion order is always a topological order.
//! `forward` evaluates every node and caches activations; `backward` walks
//! the nodes in reverse and returns batch-mean gradients for every
//! parameter. Binary and latent parameters receive straight-through
//! pseudo-gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::binarize::{sign_binarize, ste_backward, SteConfig};
use crate::error::{Error, Result};
use crate::optimizers::{BinaryParam, LatentWeight};
use crate::ops::{
    add_bias_forward, channel_sum, class_targets, conv2d_backward, conv2d_forward, cross_entropy_grad, dense_backward,
    dense_forward, normalize_backward, normalize_forward, softmax_cross_entropy, squared_hinge, squared_hinge_grad,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Parameter {
    Real(Tensor),
    Binary(BinaryParam),
    Latent(LatentWeight),
}

impl Parameter {
    /// The tensor the forward pass sees.
    pub fn effective(&self) -> Tensor {
        match self {
            Parameter::Real(t) => t.clone(),
            Parameter::Binary(p) => p.weights().clone(),
            Parameter::Latent(p) => sign_binarize(p.latent()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Parameter::Real(t) => t.shape(),
            Parameter::Binary(p) => p.shape(),
            Parameter::Latent(p) => p.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_real(&self) -> bool {
        matches!(self, Parameter::Real(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Batch,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredHinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance for batch normalization at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Exponential moving average retention of the running statistics.
pub const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Weight(ParamId),
    /// `x [N, in]`, `w [out, in]` -> `[N, out]`.
    Dense { x: NodeId, w: NodeId },
    /// Adds `b [C]` along axis 1.
    AddBias { x: NodeId, b: NodeId },
    /// `x [N, C, H, W]`, `w [O, C, kh, kw]`, zero padding.
    Conv2d { x: NodeId, w: NodeId, stride: usize, padding: usize },
    Normalize {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        mode: NormMode,
        eps: f64,
        stats: Option<usize>,
    },
    Sign { x: NodeId, ste: SteConfig },
    Identity { x: NodeId },
    Flatten { x: NodeId },
    Square { x: NodeId },
    Sum { x: NodeId },
    Mse { pred: NodeId },
    Classify { logits: NodeId, kind: LossKind },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Weight(_) => "weight",
            Op::Dense { .. } => "dense",
            Op::AddBias { .. } => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Normalize { .. } => "normalize",
            Op::Sign { .. } => "sign",
            Op::Identity { .. } => "identity",
            Op::Flatten { .. } => "flatten",
            Op::Square { .. } => "square",
            Op::Sum { .. } => "sum",
            Op::Mse { .. } => "mse",
            Op::Classify { kind: LossKind::CrossEntropy, .. } => "softmax_cross_entropy",
            Op::Classify { kind: LossKind::SquaredHinge, .. } => "squared_hinge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub batch_size: usize,
}

/// Per-node side products of the forward pass needed by backward.
#[derive(Debug, Clone)]
enum Aux {
    None,
    Norm { x_hat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    Probs(Tensor),
    Targets(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Cache {
    values: Vec<Tensor>,
    aux: Vec<Aux>,
    labels: Tensor,
    batch: usize,
}

pub type Gradients = BTreeMap<ParamId, Tensor>;

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Op>,
    input_shape: Vec<usize>,
    params: Vec<(String, Parameter)>,
    running: Vec<RunningStats>,
    output: Option<NodeId>,
    logits: Option<NodeId>,
    mode: Mode,
    weight_ste: SteConfig,
    cache: Option<Cache>,
}

impl Graph {
    /// `input_shape` excludes the batch axis.
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            nodes: vec![Op::Input],
            input_shape: input_shape.to_vec(),
            params: Vec::new(),
            running: Vec::new(),
            output: None,
            logits: None,
            mode: Mode::Train,
            weight_ste: SteConfig::default(),
            cache: None,
        }
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn push(&mut self, op: Op) -> NodeId {
        let check = |id: &NodeId| assert!(id.0 < self.nodes.len(), "node {} does not exist", id.0);
        match &op {
            Op::Input | Op::Weight(_) => {}
            Op::Dense { x, w } | Op::Conv2d { x, w, .. } => {
                check(x);
                check(w)
            }
            Op::AddBias { x, b } => {
                check(x);
                check(b)
            }
            Op::Normalize { x, scale, shift, .. } => {
                check(x);
                check(scale);
                check(shift)
            }
            Op::Sign { x, .. }
            | Op::Identity { x }
            | Op::Flatten { x }
            | Op::Square { x }
            | Op::Sum { x }
            | Op::Mse { pred: x }
            | Op::Classify { logits: x, .. } => check(x),
        }
        self.nodes.push(op);
        self.cache = None;
        NodeId(self.nodes.len() - 1)
    }

    pub fn add_param(&mut self, name: impl Into<String>, p: Parameter) -> ParamId {
        self.params.push((name.into(), p));
        ParamId(self.params.len() - 1)
    }

    /// Registers a parameter and a node reading it.
    pub fn param(&mut self, name: impl Into<String>, p: Parameter) -> (ParamId, NodeId) {
        let id = self.add_param(name, p);
        (id, self.push(Op::Weight(id)))
    }

    pub fn weight(&mut self, id: ParamId) -> NodeId {
        assert!(id.0 < self.params.len(), "parameter {} does not exist", id.0);
        self.push(Op::Weight(id))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.push(Op::Dense { x, w })
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::AddBias { x, b })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> NodeId {
        assert!(stride > 0, "stride must be positive");
        self.push(Op::Conv2d { x, w, stride, padding })
    }

    pub fn normalize(&mut self, x: NodeId, scale: NodeId, shift: NodeId, mode: NormMode, eps: f64) -> NodeId {
        let stats = match mode {
            NormMode::Batch => {
                self.running.push(RunningStats { mean: Vec::new(), var: Vec::new() });
                Some(self.running.len() - 1)
            }
            NormMode::Layer => None,
        };
        self.push(Op::Normalize { x, scale, shift, mode, eps, stats })
    }

    pub fn sign(&mut self, x: NodeId, ste: SteConfig) -> NodeId {
        self.push(Op::Sign { x, ste })
    }

    pub fn identity(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Identity { x })
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square { x })
    }

    /// Sum of all elements; as an output it is a scalar loss.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x })
    }

    /// Mean squared error against the labels tensor, averaged over the batch
    /// and summed over features.
    pub fn mse(&mut self, pred: NodeId) -> NodeId {
        self.push(Op::Mse { pred })
    }

    pub fn classification_loss(&mut self, logits: NodeId, kind: LossKind) -> NodeId {
        self.logits = Some(logits);
        self.push(Op::Classify { logits, kind })
    }

    pub fn set_output(&mut self, node: NodeId) {
        assert!(node.0 < self.nodes.len());
        self.output = Some(node);
        self.cache = None;
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.cache = None;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Clip threshold applied to pseudo-gradients of binary and latent weights.
    pub fn set_weight_ste(&mut self, ste: SteConfig) {
        self.weight_ste = ste;
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &str, &Parameter)> {
        self.params.iter().enumerate().map(|(i, (n, p))| (ParamId(i), n.as_str(), p))
    }

    /// Number of scalar parameters across all tensors.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.len()).sum()
    }

    pub fn parameter(&self, id: ParamId) -> &Parameter {
        &self.params[id.0].1
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    /// Mutable access invalidates cached activations.
    pub fn parameter_mut(&mut self, id: ParamId) -> &mut Parameter {
        self.cache = None;
        &mut self.params[id.0].1
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::State(format!(
                "graph has {} batch-norm layers, state has {}",
                self.running.len(),
                stats.len()
            )));
        }
        self.running = stats;
        self.cache = None;
        Ok(())
    }

    /// Cached value of the classifier logits from the last forward pass.
    pub fn logits(&self) -> Option<&Tensor> {
        let cache = self.cache.as_ref()?;
        Some(&cache.values[self.logits?.0])
    }

    /// Evaluates the graph, caching activations for [`Graph::backward`].
    pub fn forward(&mut self, input: &Tensor, labels: &Tensor) -> Result<LossValue> {
        self.cache = None;
        let output = self.output.ok_or_else(|| Error::State("graph has no output node".into()))?;
        if input.rank() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![input.shape()[0]];
            expected.extend(&self.input_shape);
            return Err(Error::shape("node 0 (input)", &expected, input.shape()));
        }
        let batch = input.batch();
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for idx in 0..self.nodes.len() {
            let name = self.nodes[idx].name();
            let ctx = || format!("node {idx} ({name})");
            let (value, a) = self.eval_node(idx, &values, input, labels, batch).map_err(|e| match e {
                Error::Shape { expected, found, .. } => Error::Shape { context: ctx(), expected, found },
                other => other,
            })?;
            if !value.is_finite() {
                return Err(Error::NumericOverflow { context: ctx() });
            }
            values.push(value);
            aux.push(a);
        }
        let out = &values[output.0];
        if out.len() != 1 {
            return Err(Error::shape("output node", &[1], out.shape()));
        }
        let value = out[0];
        self.cache = Some(Cache {
            values,
            aux,
            labels: labels.clone(),
            batch,
        });
        Ok(LossValue { value, batch_size: batch })
    }

    fn eval_node(&mut self, idx: usize, values: &[Tensor], input: &Tensor, labels: &Tensor, batch: usize) -> Result<(Tensor, Aux)> {
        let v = |id: &NodeId| &values[id.0];
        let out = match self.nodes[idx].clone() {
            Op::Input => input.clone(),
            Op::Weight(id) => self.params[id.0].1.effective(),
            Op::Dense { x, w } => dense_forward(v(&x), v(&w))?,
            Op::AddBias { x, b } => add_bias_forward(v(&x), v(&b))?,
            Op::Conv2d { x, w, stride, padding } => conv2d_forward(v(&x), v(&w), stride, padding)?,
            Op::Normalize { x, scale, shift, mode, eps, stats } => {
                let train = self.mode == Mode::Train;
                let running = stats.map(|s| &mut self.running[s]);
                let (y, x_hat, inv_std, batch_stats) = normalize_forward(v(&x), v(&scale), v(&shift), mode, eps, train, running)?;
                return Ok((y, Aux::Norm { x_hat, inv_std, batch_stats }));
            }
            Op::Sign { x, .. } => sign_binarize(v(&x)),
            Op::Identity { x } => v(&x).clone(),
            Op::Flatten { x } => {
                let t = v(&x);
                let n = t.batch();
                t.clone().reshape(&[n, t.row_len()])?
            }
            Op::Square { x } => v(&x).map(|a| a * a),
            Op::Sum { x } => Tensor::scalar(v(&x).sum()),
            Op::Mse { pred } => {
                let p = v(&pred);
                labels.expect_shape(p.shape(), "mse labels")?;
                let s: f64 = p.data().iter().zip(labels.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                Tensor::scalar(s / batch as f64)
            }
            Op::Classify { logits, kind } => {
                let z = v(&logits);
                let targets = class_targets(labels, z)?;
                return Ok(match kind {
                    LossKind::CrossEntropy => {
                        let (loss, probs) = softmax_cross_entropy(z, &targets);
                        (Tensor::scalar(loss), Aux::Probs(probs))
                    }
                    LossKind::SquaredHinge => (Tensor::scalar(squared_hinge(z, &targets)), Aux::Targets(targets)),
                });
            }
        };
        Ok((out, Aux::None))
    }

    /// Batch-mean gradients for every parameter. Parameters that do not
    /// influence the output get zeros.
    pub fn backward(&self) -> Result<Gradients> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        let output = self.output.expect("forward checked the output node");
        let values = &cache.values;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        let mut param_grads: Gradients = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (_, p))| (ParamId(i), Tensor::zeros(p.shape())))
            .collect();

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(t) => t.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(up) = grads[idx].take() else { continue };
            match &self.nodes[idx] {
                Op::Input => {}
                Op::Weight(id) => {
                    let g = match &self.params[id.0].1 {
                        Parameter::Real(_) => up,
                        Parameter::Binary(p) => ste_backward(&up, p.weights(), self.ste_for_weights())?,
                        Parameter::Latent(p) => ste_backward(&up, p.latent(), self.ste_for_weights())?,
                    };
                    param_grads.get_mut(id).expect("registered").add_assign(&g);
                }
                Op::Dense { x, w } => {
                    let (gx, gw) = dense_backward(&values[x.0], &values[w.0], &up);
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::AddBias { x, b } => {
                    let gb = channel_sum(&up, values[b.0].len());
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[x.0], up);
                }
                Op::Conv2d { x, w, stride, padding } => {
                    let (gx, gw) = conv2d_backward(&values[x.0], &values[w.0], &up, *stride, *padding);
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::Normalize { x, scale, shift, mode, .. } => {
                    let Aux::Norm { x_hat, inv_std, batch_stats } = &cache.aux[idx] else { unreachable!() };
                    let (gx, gs, gb) = normalize_backward(&up, x_hat, inv_std, &values[scale.0], *mode, *batch_stats);
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[scale.0], gs);
                    accumulate(&mut grads[shift.0], gb);
                }
                Op::Sign { x, ste } => {
                    accumulate(&mut grads[x.0], ste_backward(&up, &values[x.0], *ste)?);
                }
                Op::Identity { x } => accumulate(&mut grads[x.0], up),
                Op::Flatten { x } => {
                    let shape = values[x.0].shape().to_vec();
                    accumulate(&mut grads[x.0], up.reshape(&shape)?);
                }
                Op::Square { x } => {
                    let g = values[x.0].zip_map(&up, |a, u| 2.0 * a * u)?;
                    accumulate(&mut grads[x.0], g);
                }
                Op::Sum { x } => {
                    let g = Tensor::full(values[x.0].shape(), up[0]);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Mse { pred } => {
                    let scale = 2.0 * up[0] / cache.batch as f64;
                    let g = values[pred.0].zip_map(&cache.labels, |p, y| scale * (p - y))?;
                    accumulate(&mut grads[pred.0], g);
                }
                Op::Classify { logits, kind } => {
                    let z = &values[logits.0];
                    let g = match (&cache.aux[idx], kind) {
                        (Aux::Probs(p), LossKind::CrossEntropy) => {
                            let targets = class_targets(&cache.labels, z)?;
                            cross_entropy_grad(p, &targets, up[0])
                        }
                        (Aux::Targets(t), LossKind::SquaredHinge) => squared_hinge_grad(z, t, up[0]),
                        _ => unreachable!(),
                    };
                    accumulate(&mut grads[logits.0], g);
                }
            }
        }
        Ok(param_grads)
    }

    fn ste_for_weights(&self) -> SteConfig {
        self.weight_ste
    }
}

/// Largest relative discrepancy between analytic gradients and central
/// finite differences with step `h`.
///
/// For each parameter tensor the error is `max|a - n| / max(max|a|, max|n|)`
/// (0 when both are identically zero); the result is the maximum over
/// parameters. Every parameter must be real-valued. Batch-norm running
/// statistics are restored afterwards.
pub fn grad_check(graph: &mut Graph, input: &Tensor, labels: &Tensor, h: f64) -> Result<f64> {
    if let Some((_, name, _)) = graph.params().find(|(_, _, p)| !p.is_real()) {
        return Err(Error::State(format!("grad_check needs real-valued parameters, `{name}` is binary")));
    }
    let saved = graph.running.clone();
    graph.forward(input, labels)?;
    let analytic = graph.backward()?;

    let mut worst = 0.0f64;
    for (id, a) in &analytic {
        let mut numeric = Tensor::zeros(a.shape());
        for i in 0..a.len() {
            let original = real_mut(graph, *id)[i];
            real_mut(graph, *id)[i] = original + h;
            let plus = graph.forward(input, labels)?.value;
            real_mut(graph, *id)[i] = original - h;
            let minus = graph.forward(input, labels)?.value;
            real_mut(graph, *id)[i] = original;
            numeric[i] = (plus - minus) / (2.0 * h);
        }
        let diff = a.zip_map(&numeric, |x, y| x - y)?.max_abs();
        let scale = a.max_abs().max(numeric.max_abs());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    graph.running = saved;
    graph.cache = None;
    Ok(worst)
}

fn real_mut(graph: &mut Graph, id: ParamId) -> &mut Tensor {
    match graph.parameter_mut(id) {
        Parameter::Real(t) => t,
        _ => unreachable!("checked by grad_check"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn dense_classifier(w: Tensor) -> Graph {
        let mut g = Graph::new(&[w.shape()[1]]);
        let (_, wn) = g.param("w", Parameter::Real(w));
        let x = g.input();
        let z = g.dense(x, wn);
        let l = g.classification_loss(z, LossKind::CrossEntropy);
        g.set_output(l);
        g
    }

    #[test]
    fn identity_dense_cross_entropy() {
        let mut g = dense_classifier(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss = g.forward(&x, &Tensor::from_vec(vec![0.0])).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss.value - expected).abs() < 1e-15);
        assert!((loss.value - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn zero_weights_give_log_two() {
        let mut g = dense_classifier(Tensor::zeros(&[2, 3]));
        let x = Tensor::new(vec![1, 3], vec![0.3, -2.0, 5.0]).unwrap();
        let loss = g.forward(&x, &Tensor::from_vec(vec![1.0])).unwrap();
        assert!((loss.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn repeated_samples_match_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = dense_classifier(uniform(&mut rng, &[3, 4]));
        let x = uniform(&mut rng, &[1, 4]);
        let single = g.forward(&x, &Tensor::from_vec(vec![2.0])).unwrap().value;
        let xk = x.select_rows(&[0; 6]);
        let batch = g.forward(&xk, &Tensor::from_vec(vec![2.0; 6])).unwrap().value;
        assert!((single - batch).abs() < 1e-14);
    }

    #[test]
    fn scalar_square_gradient() {
        let mut g = Graph::new(&[1]);
        let (id, w) = g.param("w", Parameter::Real(Tensor::scalar(3.0)));
        let sq = g.square(w);
        let out = g.sum(sq);
        g.set_output(out);
        let loss = g.forward(&Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(loss.value, 9.0);
        assert_eq!(g.backward().unwrap()[&id][0], 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut g = Graph::new(&[2]);
        let (id, _) = g.param("unused", Parameter::Real(Tensor::full(&[2, 2], 0.5)));
        let x = g.input();
        let sq = g.square(x);
        let out = g.sum(sq);
        g.set_output(out);
        g.forward(&Tensor::full(&[1, 2], 1.0), &Tensor::zeros(&[1])).unwrap();
        assert!(g.backward().unwrap()[&id].data().iter().all(|&v| v == 0.0));
        let x = Tensor::full(&[1, 2], 1.0);
        assert_eq!(grad_check(&mut g, &x, &Tensor::zeros(&[1]), 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let g = dense_classifier(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(), Err(Error::State(_))));
    }

    #[test]
    fn input_shape_mismatch_names_the_input_node() {
        let mut g = dense_classifier(Tensor::zeros(&[2, 3]));
        let err = g.forward(&Tensor::zeros(&[1, 4]), &Tensor::from_vec(vec![0.0])).unwrap_err();
        match err {
            Error::Shape { context, .. } => assert!(context.contains("input"), "{context}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inner_shape_mismatch_names_the_node() {
        let mut g = Graph::new(&[3]);
        let (_, w) = g.param("w", Parameter::Real(Tensor::zeros(&[2, 4])));
        let x = g.input();
        let z = g.dense(x, w);
        let l = g.classification_loss(z, LossKind::CrossEntropy);
        g.set_output(l);
        let err = g.forward(&Tensor::zeros(&[1, 3]), &Tensor::from_vec(vec![0.0])).unwrap_err();
        assert!(err.to_string().contains("node 2 (dense)"), "{err}");
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = dense_classifier(Tensor::full(&[2, 2], 1e308));
        let x = Tensor::full(&[1, 2], 1e10);
        let err = g.forward(&x, &Tensor::from_vec(vec![0.0])).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { .. }), "{err:?}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = dense_classifier(uniform(&mut rng, &[3, 5]));
        let x = uniform(&mut rng, &[4, 5]);
        let y = Tensor::from_vec(vec![0.0, 1.0, 2.0, 1.0]);
        let a = g.forward(&x, &y).unwrap().value;
        let b = g.forward(&x, &y).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn linear_regression_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new(&[3]);
        let (_, w) = g.param("w", Parameter::Real(uniform(&mut rng, &[2, 3])));
        let (_, b) = g.param("b", Parameter::Real(uniform(&mut rng, &[2])));
        let x = g.input();
        let z = g.dense(x, w);
        let z = g.add_bias(z, b);
        let l = g.mse(z);
        g.set_output(l);
        let x = uniform(&mut rng, &[5, 3]);
        let y = uniform(&mut rng, &[5, 2]);
        assert!(grad_check(&mut g, &x, &y, 1e-3).unwrap() < 1e-6);
    }

    #[test]
    fn dense_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = dense_classifier(uniform(&mut rng, &[4, 3]));
        let x = uniform(&mut rng, &[6, 3]);
        let y = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0, 1.0, 0.0]);
        assert!(grad_check(&mut g, &x, &y, 1e-3).unwrap() < 1e-4);
    }

    #[test]
    fn squared_hinge_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut g = Graph::new(&[3]);
        let (_, w) = g.param("w", Parameter::Real(uniform(&mut rng, &[4, 3])));
        let x = g.input();
        let z = g.dense(x, w);
        let l = g.classification_loss(z, LossKind::SquaredHinge);
        g.set_output(l);
        let x = uniform(&mut rng, &[6, 3]);
        let y = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0, 1.0, 0.0]);
        assert!(grad_check(&mut g, &x, &y, 1e-3).unwrap() < 1e-4);
    }

    fn conv_stack(mode: NormMode, rng: &mut ChaCha8Rng) -> Graph {
        let mut g = Graph::new(&[2, 5, 5]);
        let (_, k) = g.param("k", Parameter::Real(uniform(rng, &[3, 2, 3, 3])));
        let (_, s) = g.param("scale", Parameter::Real(uniform(rng, &[3])));
        let (_, t) = g.param("shift", Parameter::Real(uniform(rng, &[3])));
        let (_, w) = g.param("head", Parameter::Real(uniform(rng, &[4, 27])));
        let x = g.input();
        let c = g.conv2d(x, k, 2, 1);
        let n = g.normalize(c, s, t, mode, 1e-5);
        let f = g.flatten(n);
        let z = g.dense(f, w);
        let l = g.classification_loss(z, LossKind::CrossEntropy);
        g.set_output(l);
        g
    }

    #[test]
    fn conv_norm_stack_matches_finite_differences() {
        for mode in [NormMode::Batch, NormMode::Layer] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = conv_stack(mode, &mut rng);
            let x = uniform(&mut rng, &[4, 2, 5, 5]);
            let y = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]);
            let err = grad_check(&mut g, &x, &y, 1e-3).unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn grad_check_restores_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = conv_stack(NormMode::Batch, &mut rng);
        let before = g.running_stats().to_vec();
        let x = uniform(&mut rng, &[4, 2, 5, 5]);
        grad_check(&mut g, &x, &Tensor::from_vec(vec![0.0; 4]), 1e-3).unwrap();
        assert_eq!(g.running_stats(), &before[..]);
    }

    #[test]
    fn grad_check_rejects_binary_parameters() {
        let mut g = Graph::new(&[2]);
        let (_, w) = g.param("w", Parameter::Binary(BinaryParam::new(Tensor::full(&[2, 2], 1.0)).unwrap()));
        let x = g.input();
        let z = g.dense(x, w);
        let l = g.classification_loss(z, LossKind::CrossEntropy);
        g.set_output(l);
        assert!(grad_check(&mut g, &Tensor::zeros(&[1, 2]), &Tensor::from_vec(vec![0.0]), 1e-3).is_err());
    }

    #[test]
    fn latent_weight_gradient_is_masked_by_clip() {
        // Gradient w.r.t. the latent weights equals the gradient w.r.t. the
        // binarized weights wherever |w| <= t_clip, and exactly zero elsewhere.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let latent = Tensor::from_fn(&[3, 4], |_| rng.random_range(-2.0..2.0));
        let x = uniform(&mut rng, &[5, 4]);
        let y = Tensor::from_vec(vec![0.0, 1.0, 2.0, 1.0, 0.0]);

        let build = |p: Parameter| {
            let mut g = Graph::new(&[4]);
            let (id, w) = g.param("w", p);
            let xi = g.input();
            let z = g.dense(xi, w);
            let l = g.classification_loss(z, LossKind::CrossEntropy);
            g.set_output(l);
            (g, id)
        };
        let (mut real, rid) = build(Parameter::Real(sign_binarize(&latent)));
        real.forward(&x, &y).unwrap();
        let g_bin = real.backward().unwrap()[&rid].clone();

        let (mut lat, lid) = build(Parameter::Latent(LatentWeight::new(latent.clone())));
        lat.forward(&x, &y).unwrap();
        let g_lat = lat.backward().unwrap()[&lid].clone();
        for i in 0..latent.len() {
            if latent[i].abs() <= 1.0 {
                assert_eq!(g_lat[i], g_bin[i]);
            } else {
                assert_eq!(g_lat[i], 0.0);
            }
        }
    }

    #[test]
    fn sign_activation_uses_ste() {
        let mut g = Graph::new(&[3]);
        let (id, w) = g.param("w", Parameter::Real(Tensor::from_vec(vec![0.5, 2.0, -0.3])));
        let x = g.input();
        let _ = x;
        let s = g.sign(w, SteConfig::default());
        let out = g.sum(s);
        g.set_output(out);
        let loss = g.forward(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(loss.value, 1.0);
        assert_eq!(g.backward().unwrap()[&id].data(), &[1.0, 0.0, 1.0]);
    }
}
