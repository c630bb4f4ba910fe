//! The training loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Mode, NormMode, ParamId, Parameter};
use crate::optimizers::{
    adam_step, bop2nd_step, bop_step, latent_adam_step, latent_sgd_step, AdamConfig, AdamState, OptimizerConfig,
    StepReport,
};
use crate::telemetry::{emit_csv, flip_ratio, Split, TelemetryRecord};
use crate::tensor::Tensor;

use super::checkpoint::{checkpoint_load, checkpoint_save, TrainState};
use super::config::{serialize_config, ExperimentConfig, Hyper, ModelSpec, OptimizerKind, PiGranularity};
use super::dataset::{load_dataset, Dataset};
use super::model::{build_model, Model};

/// RNG stream used for minibatch shuffling.
pub const SHUFFLE_STREAM: u64 = 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bnck";

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Last validation record, or the last training record without a validation split.
    pub final_record: TelemetryRecord,
    pub records: Vec<TelemetryRecord>,
    pub output_dir: PathBuf,
}

/// Hash of everything that determines the trajectory except the epoch budget
/// and where outputs go.
pub fn config_fingerprint(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.epochs = 0;
    c.output_dir = PathBuf::new();
    let digest = Sha256::digest(serialize_config(&c).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads the dataset and fits its sample shape to the model input.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data = load_dataset(&cfg.dataset)?;
    let (shape, classes): (Vec<usize>, usize) = match &cfg.model {
        ModelSpec::Mlp { layers } => (vec![layers[0]], *layers.last().expect("validated")),
        ModelSpec::SmallCnn {
            input_shape,
            num_classes,
            ..
        } => (input_shape.to_vec(), *num_classes),
    };
    if data.num_classes > classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model outputs {classes}",
            data.num_classes
        )));
    }
    let mut data = data.reshape_samples(&shape)?;
    data.num_classes = classes;
    Ok(data.split(cfg.validation_fraction, cfg.seed))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|(i, &l)| argmax(logits.row(*i)) == l).count()
}

/// Flip counts of one step per hidden layer.
#[derive(Debug, Clone, Default)]
struct FlipTally {
    flips: Vec<u64>,
    totals: Vec<u64>,
}

impl FlipTally {
    fn new(layers: usize) -> Self {
        Self {
            flips: vec![0; layers],
            totals: vec![0; layers],
        }
    }

    fn add(&mut self, layer: usize, r: StepReport) {
        self.flips[layer] += r.flips;
        self.totals[layer] += r.total;
    }

    /// Per-layer and global log flip ratio of one step.
    fn pi(&self) -> Result<(Vec<f64>, f64)> {
        let per = self
            .flips
            .iter()
            .zip(&self.totals)
            .map(|(&f, &t)| if t == 0 { flip_ratio(0, 1) } else { flip_ratio(f, t) })
            .collect::<Result<Vec<_>>>()?;
        let (f, t): (u64, u64) = (self.flips.iter().sum(), self.totals.iter().sum());
        let global = if t == 0 { flip_ratio(0, 1)? } else { flip_ratio(f, t)? };
        Ok((per, global))
    }
}

/// Completed epochs, global step, shuffle RNG, records and schedule rows.
type Progress = (u64, u64, ChaCha8Rng, Vec<TelemetryRecord>, Vec<(u64, Vec<f64>)>);

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    model: Model,
    adam: BTreeMap<usize, AdamState>,
    layer_of: BTreeMap<ParamId, usize>,
}

impl Trainer<'_> {
    fn step(&mut self, x: &Tensor, labels: &[usize], hyper: &BTreeMap<Hyper, f64>, tally: &mut FlipTally) -> Result<(f64, usize)> {
        let g = &mut self.model.graph;
        g.set_mode(Mode::Train);
        let y = Tensor::from_vec(labels.iter().map(|&l| l as f64).collect());
        let loss = g.forward(x, &y)?;
        let hits = correct(g.logits().expect("classifier"), labels);
        let grads = g.backward()?;

        let lr = hyper[&Hyper::AdamLr];
        let adam_cfg = AdamConfig { alpha: lr, ..self.cfg.adam };
        let clip = self.cfg.latent_clip.then_some(self.cfg.ste.t_clip);
        for (id, grad) in grads {
            let layer = self.layer_of.get(&id).copied();
            let shape = g.parameter(id).shape().to_vec();
            let report = match g.parameter_mut(id) {
                Parameter::Real(w) => {
                    let grad = if self.cfg.l2 > 0.0 {
                        grad.zip_map(w, |gi, wi| gi + self.cfg.l2 * wi)?
                    } else {
                        grad
                    };
                    let state = self.adam.entry(id.0).or_insert_with(|| AdamState::new(&shape));
                    adam_step(w, &grad, state, &adam_cfg)?;
                    None
                }
                Parameter::Binary(p) => Some(match self.cfg.optimizer {
                    OptimizerKind::Bop => bop_step(p, &grad, hyper[&Hyper::Gamma], hyper[&Hyper::Tau])?,
                    kind => {
                        let oc = OptimizerConfig {
                            gamma: hyper[&Hyper::Gamma],
                            sigma: hyper[&Hyper::Sigma],
                            tau: hyper[&Hyper::Tau],
                            epsilon: self.cfg.epsilon,
                            bias_mode: kind.bias_mode(),
                            adam: adam_cfg,
                        };
                        bop2nd_step(p, &grad, &oc)?
                    }
                }),
                Parameter::Latent(p) => Some(match self.cfg.optimizer {
                    OptimizerKind::LatentSgd => latent_sgd_step(p, &grad, lr, clip)?,
                    _ => {
                        let state = self.adam.entry(id.0).or_insert_with(|| AdamState::new(&shape));
                        latent_adam_step(p, &grad, state, &adam_cfg, clip)?
                    }
                }),
            };
            if let (Some(r), Some(l)) = (report, layer) {
                tally.add(l, r);
            }
        }
        Ok((loss.value, hits))
    }

    fn evaluate(&mut self, data: &Dataset) -> Result<(f64, f64)> {
        let g = &mut self.model.graph;
        g.set_mode(Mode::Eval);
        let loss = g.forward(&data.inputs, &data.label_tensor())?;
        let hits = correct(g.logits().expect("classifier"), &data.labels);
        Ok((loss.value, hits as f64 / data.len() as f64))
    }

    fn state(&self, epoch: u64, global_step: u64, rng: &ChaCha8Rng, records: &[TelemetryRecord], sched: &[(u64, Vec<f64>)]) -> TrainState {
        TrainState {
            fingerprint: config_fingerprint(self.cfg),
            params: self.model.graph.params().map(|(_, n, p)| (n.to_string(), p.clone())).collect(),
            running: self.model.graph.running_stats().to_vec(),
            adam: self.adam.clone(),
            epoch,
            global_step,
            shuffle_rng: rng.clone(),
            records: records.to_vec(),
            schedule_rows: sched.to_vec(),
        }
    }

    fn restore(&mut self, state: TrainState) -> Result<Progress> {
        if state.fingerprint != config_fingerprint(self.cfg) {
            return Err(Error::State("checkpoint was written by a different configuration".into()));
        }
        let g = &mut self.model.graph;
        if state.params.len() != g.params().count() {
            return Err(Error::State("checkpoint parameter count does not match the model".into()));
        }
        for (i, (name, p)) in state.params.into_iter().enumerate() {
            let id = ParamId(i);
            if g.param_name(id) != name || g.parameter(id).shape() != p.shape() {
                return Err(Error::State(format!("checkpoint parameter `{name}` does not match the model")));
            }
            *g.parameter_mut(id) = p;
        }
        g.set_running_stats(state.running)?;
        self.adam = state.adam;
        Ok((state.epoch, state.global_step, state.shuffle_rng, state.records, state.schedule_rows))
    }
}

fn schedule_csv(cfg: &ExperimentConfig, rows: &[(u64, Vec<f64>)]) -> String {
    let mut s = String::from("epoch");
    for h in cfg.schedules.keys() {
        s.push(',');
        s.push_str(h.name());
    }
    s.push('\n');
    for (epoch, values) in rows {
        s.push_str(&epoch.to_string());
        for v in values {
            s.push_str(&format!(",{v:.16e}"));
        }
        s.push('\n');
    }
    s
}

fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    records: &[TelemetryRecord],
    sched: &[(u64, Vec<f64>)],
    state: Option<&TrainState>,
) -> Result<()> {
    emit_csv(records, &dir.join(METRICS_FILE))?;
    let sp = dir.join(SCHEDULE_FILE);
    fs::write(&sp, schedule_csv(cfg, sched)).map_err(|e| Error::io(&sp, e))?;
    if let Some(state) = state {
        checkpoint_save(state, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(())
}

fn at(epoch: u64, step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Experiment { .. } => e,
        e => Error::Experiment {
            epoch: epoch as usize,
            step: step as usize,
            source: Box::new(e),
        },
    }
}

/// Trains per `cfg`, writing metrics, schedule values and a checkpoint per
/// epoch into `cfg.output_dir`. With `resume`, continues from a checkpoint
/// written by the same configuration.
pub fn run_experiment(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunOutcome> {
    let (train, val) = prepare_data(cfg)?;
    let model = build_model(cfg)?;
    let layers = model.binary_layers.len();
    let layer_of = model.binary_layers.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut t = Trainer {
        cfg,
        model,
        adam: BTreeMap::new(),
        layer_of,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let (mut epoch, mut global_step, mut records, mut sched) = (0u64, 0u64, Vec::new(), Vec::new());
    if let Some(path) = resume {
        let state = checkpoint_load(path)?;
        (epoch, global_step, rng, records, sched) = t.restore(state)?;
    }
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let floor = flip_ratio(0, 1)?;
    if cfg.epochs == 0 && resume.is_none() {
        let (loss, top1) = t.evaluate(if val.is_empty() { &train } else { &val }).map_err(at(0, 0))?;
        records.push(TelemetryRecord {
            epoch: 0,
            step: 0,
            split: Split::Validation,
            loss,
            top1,
            per_layer_pi: vec![floor; layers],
            global_pi: floor,
        });
        write_outputs(&dir, cfg, &records, &sched, None)?;
    }

    let batch_norm = cfg.normalization == NormMode::Batch;
    while epoch < cfg.epochs as u64 {
        let hyper = cfg.hyper_at(epoch);
        sched.push((epoch, hyper.values().copied().collect()));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut pi_sum, mut global_pi_sum, mut steps) = (vec![0.0; layers], 0.0, 0usize);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // A trailing single sample carries no batch statistics.
            if batch_norm && chunk.len() < 2 {
                continue;
            }
            let batch = train.subset(chunk);
            let mut tally = FlipTally::new(layers);
            let (loss, h) = t
                .step(&batch.inputs, &batch.labels, &hyper, &mut tally)
                .map_err(at(epoch, global_step))?;
            global_step += 1;
            loss_sum += loss * chunk.len() as f64;
            hits += h;
            seen += chunk.len();
            let (per_layer_pi, global_pi) = tally.pi()?;
            for (acc, p) in pi_sum.iter_mut().zip(&per_layer_pi) {
                *acc += p;
            }
            global_pi_sum += global_pi;
            steps += 1;
            if cfg.pi_granularity == PiGranularity::Step {
                records.push(TelemetryRecord {
                    epoch: epoch + 1,
                    step: global_step,
                    split: Split::Train,
                    loss,
                    top1: h as f64 / chunk.len() as f64,
                    per_layer_pi,
                    global_pi,
                });
            }
        }
        // Epoch π is the mean of the per-step values.
        let (per_layer_pi, global_pi) = if steps == 0 {
            (vec![floor; layers], floor)
        } else {
            let n = steps as f64;
            (pi_sum.iter().map(|p| p / n).collect(), global_pi_sum / n)
        };
        if cfg.pi_granularity == PiGranularity::Epoch {
            let n = seen.max(1) as f64;
            records.push(TelemetryRecord {
                epoch: epoch + 1,
                step: global_step,
                split: Split::Train,
                loss: loss_sum / n,
                top1: hits as f64 / n,
                per_layer_pi: per_layer_pi.clone(),
                global_pi,
            });
        }
        if !val.is_empty() {
            let (loss, top1) = t.evaluate(&val).map_err(at(epoch, global_step))?;
            records.push(TelemetryRecord {
                epoch: epoch + 1,
                step: global_step,
                split: Split::Validation,
                loss,
                top1,
                per_layer_pi,
                global_pi,
            });
        }
        epoch += 1;
        let state = t.state(epoch, global_step, &rng, &records, &sched);
        write_outputs(&dir, cfg, &records, &sched, Some(&state))?;
    }

    let final_record = records
        .iter()
        .rev()
        .find(|r| r.split == Split::Validation)
        .or(records.last())
        .cloned()
        .ok_or_else(|| Error::State("run produced no telemetry".into()))?;
    Ok(RunOutcome {
        final_record,
        records,
        output_dir: dir,
    })
}
