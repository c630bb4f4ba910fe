//! Reference architectures.
//!
//! Both keep the first and last layers real-valued. Every hidden layer is a
//! binary weight layer followed by normalization and a sign activation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId, ParamId, Parameter};
use crate::optimizers::{BinaryParam, LatentWeight};
use crate::tensor::Tensor;

use super::config::{ExperimentConfig, ModelSpec};

/// RNG stream used for weight initialization.
pub const INIT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildOptions {
    /// Hold hidden weights as real tensors (for gradient checking).
    pub all_real: bool,
    /// Replace sign activations with identity.
    pub identity_activations: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub graph: Graph,
    /// Hidden weight parameters in layer order; π is reported per entry.
    pub binary_layers: Vec<ParamId>,
}

struct Builder<'a> {
    g: Graph,
    rng: ChaCha8Rng,
    cfg: &'a ExperimentConfig,
    opts: BuildOptions,
    binary_layers: Vec<ParamId>,
}

impl Builder<'_> {
    fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-limit..limit))
    }

    fn real(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> NodeId {
        let t = self.glorot(shape, fan_in, fan_out);
        self.g.param(name, Parameter::Real(t)).1
    }

    fn hidden(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> NodeId {
        let p = if self.opts.all_real {
            Parameter::Real(self.glorot(shape, fan_in, fan_out))
        } else if self.cfg.optimizer.is_flip() {
            Parameter::Binary(BinaryParam::random(shape, &mut self.rng))
        } else {
            Parameter::Latent(LatentWeight::new(self.glorot(shape, fan_in, fan_out)))
        };
        let (id, node) = self.g.param(name, p);
        self.binary_layers.push(id);
        node
    }

    /// Normalization with learnable per-channel scale and shift, then the activation.
    fn norm_act(&mut self, x: NodeId, name: &str, channels: usize) -> NodeId {
        let scale = self.g.param(format!("{name}.scale"), Parameter::Real(Tensor::full(&[channels], 1.0))).1;
        let shift = self.g.param(format!("{name}.shift"), Parameter::Real(Tensor::zeros(&[channels]))).1;
        let y = self.g.normalize(x, scale, shift, self.cfg.normalization, self.cfg.norm_eps);
        if self.opts.identity_activations {
            self.g.identity(y)
        } else {
            self.g.sign(y, self.cfg.activation_ste)
        }
    }
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    build_model_with(cfg, BuildOptions::default())
}

pub fn build_model_with(cfg: &ExperimentConfig, opts: BuildOptions) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let input_shape: Vec<usize> = match &cfg.model {
        ModelSpec::Mlp { layers } => vec![layers[0]],
        ModelSpec::SmallCnn { input_shape, .. } => input_shape.to_vec(),
    };
    let mut b = Builder {
        g: Graph::new(&input_shape),
        rng,
        cfg,
        opts,
        binary_layers: Vec::new(),
    };
    let mut x = b.g.input();
    let logits = match &cfg.model {
        ModelSpec::Mlp { layers } => {
            let last = layers.len() - 2;
            for (i, win) in layers.windows(2).enumerate() {
                let (fi, fo) = (win[0], win[1]);
                let name = format!("dense{i}");
                let w = if i == 0 || i == last {
                    b.real(format!("{name}.w"), &[fo, fi], fi, fo)
                } else {
                    b.hidden(format!("{name}.w"), &[fo, fi], fi, fo)
                };
                x = b.g.dense(x, w);
                if i != last {
                    x = b.norm_act(x, &format!("norm{i}"), fo);
                }
            }
            x
        }
        ModelSpec::SmallCnn {
            input_shape,
            channels,
            num_classes,
        } => {
            let [mut c, mut h, mut w] = *input_shape;
            for (i, &co) in channels.iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                let shape = [co, c, 3, 3];
                let name = format!("conv{i}.w");
                let k = if i == 0 {
                    b.real(name, &shape, c * 9, co * 9)
                } else {
                    b.hidden(name, &shape, c * 9, co * 9)
                };
                x = b.g.conv2d(x, k, stride, 1);
                x = b.norm_act(x, &format!("norm{i}"), co);
                c = co;
                h = (h + 2 - 3) / stride + 1;
                w = (w + 2 - 3) / stride + 1;
            }
            x = b.g.flatten(x);
            let features = c * h * w;
            let head = b.real("head.w".into(), &[*num_classes, features], features, *num_classes);
            b.g.dense(x, head)
        }
    };
    let loss = b.g.classification_loss(logits, cfg.loss);
    b.g.set_output(loss);
    b.g.set_weight_ste(cfg.ste);
    Ok(Model {
        graph: b.g,
        binary_layers: b.binary_layers,
    })
}
