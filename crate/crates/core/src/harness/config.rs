//! Experiment configuration.
//!
//! The file is TOML restricted to flat (optionally dotted) keys:
//!
//! ```toml
//! model = "mlp"
//! layers = [16, 64, 64, 2]
//! normalization = "batch"
//! optimizer = "bop2nd_unbiased"
//! dataset.kind = "synthetic_blobs"
//! dataset.seed = 7
//! schedule.gamma.kind = "polynomial"
//! schedule.gamma.base = 1e-5
//! schedule.gamma.end = 1e-8
//! schedule.gamma.total_epochs = 500
//! tau = 1e-6            # shorthand for a constant schedule
//! ```
//!
//! Validation collects every problem before reporting.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::binarize::SteConfig;
use crate::error::{Error, Result};
use crate::graph::{LossKind, NormMode};
use crate::optimizers::{AdamConfig, BiasMode};
use crate::schedulers::ScheduleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Hyper {
    Gamma,
    Sigma,
    Tau,
    AdamLr,
}

impl Hyper {
    pub const ALL: [Hyper; 4] = [Hyper::Gamma, Hyper::Sigma, Hyper::Tau, Hyper::AdamLr];

    pub fn name(self) -> &'static str {
        match self {
            Hyper::Gamma => "gamma",
            Hyper::Sigma => "sigma",
            Hyper::Tau => "tau",
            Hyper::AdamLr => "adam_lr",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.name() == s)
    }

    fn default_value(self) -> f64 {
        match self {
            Hyper::Gamma => 1e-7,
            Hyper::Sigma => 1e-3,
            Hyper::Tau => 1e-6,
            Hyper::AdamLr => 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Bop,
    Bop2ndBiased,
    Bop2ndUnbiased,
    LatentSgd,
    LatentAdam,
}

impl OptimizerKind {
    const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Bop,
        OptimizerKind::Bop2ndBiased,
        OptimizerKind::Bop2ndUnbiased,
        OptimizerKind::LatentSgd,
        OptimizerKind::LatentAdam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Bop => "bop",
            OptimizerKind::Bop2ndBiased => "bop2nd_biased",
            OptimizerKind::Bop2ndUnbiased => "bop2nd_unbiased",
            OptimizerKind::LatentSgd => "latent_sgd",
            OptimizerKind::LatentAdam => "latent_adam",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    /// Whether binary weights are held directly as signs (no latent weights).
    pub fn is_flip(self) -> bool {
        matches!(self, OptimizerKind::Bop | OptimizerKind::Bop2ndBiased | OptimizerKind::Bop2ndUnbiased)
    }

    pub fn bias_mode(self) -> BiasMode {
        match self {
            OptimizerKind::Bop2ndBiased => BiasMode::Biased,
            _ => BiasMode::Unbiased,
        }
    }

    pub fn applicable(self) -> &'static [Hyper] {
        match self {
            OptimizerKind::Bop => &[Hyper::Gamma, Hyper::Tau, Hyper::AdamLr],
            OptimizerKind::Bop2ndBiased | OptimizerKind::Bop2ndUnbiased => &Hyper::ALL,
            OptimizerKind::LatentSgd | OptimizerKind::LatentAdam => &[Hyper::AdamLr],
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// Layer widths, input first and classes last.
    Mlp { layers: Vec<usize> },
    SmallCnn {
        input_shape: [usize; 3],
        channels: Vec<usize>,
        num_classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    SyntheticBlobs { seed: u64, n: usize, classes: usize, dim: usize },
    TensorFile { path: PathBuf, labels: PathBuf, num_classes: Option<usize> },
    Csv { path: PathBuf, num_classes: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiGranularity {
    Epoch,
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub normalization: NormMode,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    /// Exactly the hyperparameters applicable to `optimizer`.
    pub schedules: BTreeMap<Hyper, ScheduleSpec>,
    pub epsilon: f64,
    /// `alpha` is ignored; the learning rate comes from the `adam_lr` schedule.
    pub adam: AdamConfig,
    pub ste: SteConfig,
    pub activation_ste: SteConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub validation_fraction: f64,
    pub output_dir: PathBuf,
    /// L2 penalty on real-valued parameters.
    pub l2: f64,
    pub norm_eps: f64,
    pub pi_granularity: PiGranularity,
    /// Clip latent weights to `[-t_clip, t_clip]` after each update.
    pub latent_clip: bool,
}

impl ExperimentConfig {
    pub fn schedule(&self, h: Hyper) -> Option<&ScheduleSpec> {
        self.schedules.get(&h)
    }

    /// Value of every scheduled hyperparameter at `epoch`.
    pub fn hyper_at(&self, epoch: u64) -> BTreeMap<Hyper, f64> {
        self.schedules.iter().map(|(h, s)| (*h, s.value(epoch))).collect()
    }
}

const TOP_KEYS: &[&str] = &[
    "model",
    "layers",
    "input_shape",
    "channels",
    "num_classes",
    "normalization",
    "optimizer",
    "loss",
    "epsilon",
    "t_clip",
    "activation_t_clip",
    "epochs",
    "batch_size",
    "seed",
    "validation_fraction",
    "output_dir",
    "l2",
    "norm_eps",
    "pi_granularity",
    "latent_clip",
    "adam",
    "dataset",
    "schedule",
    "gamma",
    "sigma",
    "tau",
    "adam_lr",
];

/// Typed accessors over a TOML table that record problems instead of
/// failing fast.
struct Reader<'a> {
    table: &'a Table,
    prefix: String,
    errors: &'a mut Vec<String>,
}

impl<'a> Reader<'a> {
    fn key(&self, k: &str) -> String {
        if self.prefix.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.prefix)
        }
    }

    fn check_keys(&mut self, allowed: &[&str]) {
        for k in self.table.keys() {
            if !allowed.contains(&k.as_str()) {
                let key = self.key(k);
                self.errors.push(format!("unknown key `{key}`"));
            }
        }
    }

    fn str(&mut self, k: &str) -> Option<&'a str> {
        match self.table.get(k)? {
            Value::String(s) => Some(s),
            _ => {
                let key = self.key(k);
                self.errors.push(format!("`{key}` must be a string"));
                None
            }
        }
    }

    fn float(&mut self, k: &str) -> Option<f64> {
        match self.table.get(k)? {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                let key = self.key(k);
                self.errors.push(format!("`{key}` must be a number"));
                None
            }
        }
    }

    fn int(&mut self, k: &str) -> Option<u64> {
        match self.table.get(k)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            _ => {
                let key = self.key(k);
                self.errors.push(format!("`{key}` must be a non-negative integer"));
                None
            }
        }
    }

    fn boolean(&mut self, k: &str) -> Option<bool> {
        match self.table.get(k)? {
            Value::Boolean(b) => Some(*b),
            _ => {
                let key = self.key(k);
                self.errors.push(format!("`{key}` must be true or false"));
                None
            }
        }
    }

    fn ints(&mut self, k: &str) -> Option<Vec<usize>> {
        let bad = |r: &mut Self| {
            let key = r.key(k);
            r.errors.push(format!("`{key}` must be an array of positive integers"));
            None
        };
        match self.table.get(k)? {
            Value::Array(a) => {
                let v: Option<Vec<usize>> = a
                    .iter()
                    .map(|x| match x {
                        Value::Integer(i) if *i > 0 => Some(*i as usize),
                        _ => None,
                    })
                    .collect();
                match v {
                    Some(v) => Some(v),
                    None => bad(self),
                }
            }
            _ => bad(self),
        }
    }

    fn sub(&mut self, k: &str) -> Option<Reader<'_>> {
        match self.table.get(k)? {
            Value::Table(t) => Some(Reader {
                table: t,
                prefix: self.key(k),
                errors: self.errors,
            }),
            _ => {
                let key = self.key(k);
                self.errors.push(format!("`{key}` must be a table of dotted keys"));
                None
            }
        }
    }
}

fn parse_schedule(r: &mut Reader<'_>) -> Option<ScheduleSpec> {
    let kind = r.str("kind").unwrap_or("constant");
    let base = r.float("base");
    let name = r.prefix.clone();
    if base.is_none() {
        r.errors.push(format!("`{name}.base` is required"));
    }
    let spec = match kind {
        "constant" => {
            r.check_keys(&["kind", "base"]);
            ScheduleSpec::Constant { base: base? }
        }
        "exponential_step" => {
            r.check_keys(&["kind", "base", "factor", "period_epochs"]);
            let factor = r.float("factor");
            let period = r.int("period_epochs");
            if factor.is_none() || period.is_none() {
                r.errors.push(format!("`{name}` needs `factor` and `period_epochs`"));
            }
            ScheduleSpec::ExponentialStep {
                base: base?,
                factor: factor?,
                period_epochs: period?,
            }
        }
        "polynomial" => {
            r.check_keys(&["kind", "base", "end", "total_epochs", "power"]);
            let end = r.float("end");
            let total = r.int("total_epochs");
            let power = r.float("power").unwrap_or(1.0);
            if end.is_none() || total.is_none() {
                r.errors.push(format!("`{name}` needs `end` and `total_epochs`"));
            }
            ScheduleSpec::Polynomial {
                base: base?,
                end: end?,
                total_epochs: total?,
                power,
            }
        }
        other => {
            r.errors.push(format!("`{name}.kind`: unknown schedule kind `{other}`"));
            return None;
        }
    };
    r.errors.extend(spec.violations(&name));
    Some(spec)
}

fn parse_dataset(r: &mut Reader<'_>) -> Option<DatasetSpec> {
    let Some(kind) = r.str("kind") else {
        r.errors.push("`dataset.kind` is required".into());
        return None;
    };
    match kind {
        "synthetic_blobs" => {
            r.check_keys(&["kind", "seed", "n", "classes", "dim"]);
            let seed = r.int("seed").unwrap_or(0);
            let n = r.int("n").unwrap_or(1000) as usize;
            let classes = r.int("classes").unwrap_or(2) as usize;
            let dim = r.int("dim").unwrap_or(16) as usize;
            if n == 0 || classes == 0 || dim == 0 {
                r.errors.push("`dataset`: n, classes and dim must be positive".into());
            }
            Some(DatasetSpec::SyntheticBlobs { seed, n, classes, dim })
        }
        "tensor_file" => {
            r.check_keys(&["kind", "path", "labels", "num_classes"]);
            let path = r.str("path").map(PathBuf::from);
            let labels = r.str("labels").map(PathBuf::from);
            let num_classes = r.int("num_classes").map(|c| c as usize);
            if path.is_none() || labels.is_none() {
                r.errors.push("`dataset`: tensor_file needs `path` and `labels`".into());
            }
            Some(DatasetSpec::TensorFile {
                path: path?,
                labels: labels?,
                num_classes,
            })
        }
        "csv" => {
            r.check_keys(&["kind", "path", "num_classes"]);
            let path = r.str("path").map(PathBuf::from);
            let num_classes = r.int("num_classes").map(|c| c as usize);
            if path.is_none() {
                r.errors.push("`dataset`: csv needs `path`".into());
            }
            Some(DatasetSpec::Csv { path: path?, num_classes })
        }
        other => {
            r.errors.push(format!("`dataset.kind`: unknown dataset kind `{other}`"));
            None
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
    let mut errors = Vec::new();
    let mut r = Reader {
        table: &table,
        prefix: String::new(),
        errors: &mut errors,
    };
    r.check_keys(TOP_KEYS);

    let opt_name = r.str("optimizer").unwrap_or("bop2nd_unbiased");
    let optimizer = OptimizerKind::from_name(opt_name).or_else(|| {
        r.errors.push(format!("unknown optimizer `{opt_name}`"));
        None
    });
    let normalization = match r.str("normalization").unwrap_or("batch") {
        "batch" => Some(NormMode::Batch),
        "layer" => Some(NormMode::Layer),
        other => {
            r.errors.push(format!("unknown normalization `{other}`"));
            None
        }
    };
    let loss = match r.str("loss").unwrap_or("cross_entropy") {
        "cross_entropy" => Some(LossKind::CrossEntropy),
        "squared_hinge" => Some(LossKind::SquaredHinge),
        other => {
            r.errors.push(format!("unknown loss `{other}`"));
            None
        }
    };
    let pi_granularity = match r.str("pi_granularity").unwrap_or("epoch") {
        "epoch" => Some(PiGranularity::Epoch),
        "step" => Some(PiGranularity::Step),
        other => {
            r.errors.push(format!("unknown pi_granularity `{other}`"));
            None
        }
    };

    let dataset = match r.sub("dataset") {
        Some(mut d) => parse_dataset(&mut d),
        None => {
            if !table.contains_key("dataset") {
                errors.push("`dataset.kind` is required".into());
            }
            None
        }
    };
    let mut r = Reader {
        table: &table,
        prefix: String::new(),
        errors: &mut errors,
    };

    let model = match r.str("model") {
        None => {
            r.errors.push("`model` is required".into());
            None
        }
        Some("mlp") => {
            let layers = r.ints("layers").or_else(|| match &dataset {
                Some(DatasetSpec::SyntheticBlobs { classes, dim, .. }) => Some(vec![*dim, 64, 64, *classes]),
                _ => {
                    r.errors.push("`layers` is required for mlp unless the dataset is synthetic".into());
                    None
                }
            });
            if let Some(l) = &layers {
                if l.len() < 2 {
                    r.errors.push("`layers` needs at least an input and an output width".into());
                }
            }
            layers.map(|layers| ModelSpec::Mlp { layers })
        }
        Some("small_cnn") => {
            let input = r.ints("input_shape");
            let channels = r.ints("channels").unwrap_or_else(|| vec![8, 16]);
            let classes = r.int("num_classes");
            match (input, classes) {
                (Some(i), Some(c)) if i.len() == 3 && c > 0 && !channels.is_empty() => Some(ModelSpec::SmallCnn {
                    input_shape: [i[0], i[1], i[2]],
                    channels,
                    num_classes: c as usize,
                }),
                _ => {
                    r.errors.push("small_cnn needs `input_shape = [C, H, W]`, non-empty `channels` and `num_classes`".into());
                    None
                }
            }
        }
        Some(other) => {
            r.errors.push(format!("unknown model `{other}`"));
            None
        }
    };

    let epsilon = r.float("epsilon").unwrap_or(1e-7);
    if !(epsilon > 0.0) {
        r.errors.push(format!("epsilon must be positive, got {epsilon}"));
    }
    let t_clip = r.float("t_clip").unwrap_or(1.0);
    let activation_t_clip = r.float("activation_t_clip").unwrap_or(t_clip);
    let ste = SteConfig::new(t_clip).map_err(|e| r.errors.push(e.to_string())).ok();
    let activation_ste = SteConfig::new(activation_t_clip).map_err(|e| r.errors.push(e.to_string())).ok();

    let epochs = r.int("epochs").unwrap_or(50) as usize;
    let batch_size = r.int("batch_size").unwrap_or(50) as usize;
    if batch_size == 0 {
        r.errors.push("batch_size must be positive".into());
    }
    if batch_size < 2 && normalization == Some(NormMode::Batch) {
        r.errors.push("batch_size must be at least 2 with batch normalization".into());
    }
    let seed = r.int("seed").unwrap_or(0);
    let validation_fraction = r.float("validation_fraction").unwrap_or(0.2);
    if !(0.0..1.0).contains(&validation_fraction) {
        r.errors.push(format!("validation_fraction must be in [0, 1), got {validation_fraction}"));
    }
    let output_dir = PathBuf::from(r.str("output_dir").unwrap_or("runs/default"));
    let l2 = r.float("l2").unwrap_or(0.0);
    if !(l2 >= 0.0) {
        r.errors.push(format!("l2 must be non-negative, got {l2}"));
    }
    let norm_eps = r.float("norm_eps").unwrap_or(1e-5);
    if !(norm_eps > 0.0) {
        r.errors.push(format!("norm_eps must be positive, got {norm_eps}"));
    }
    let latent_clip = r.boolean("latent_clip").unwrap_or(true);

    let mut adam = AdamConfig::default();
    if let Some(mut a) = r.sub("adam") {
        a.check_keys(&["beta1", "beta2", "eps"]);
        adam.beta1 = a.float("beta1").unwrap_or(adam.beta1);
        adam.beta2 = a.float("beta2").unwrap_or(adam.beta2);
        adam.eps = a.float("eps").unwrap_or(adam.eps);
    }
    if !(0.0..1.0).contains(&adam.beta1) || !(0.0..1.0).contains(&adam.beta2) || !(adam.eps > 0.0) {
        r.errors.push("adam: beta1, beta2 must be in [0, 1) and eps positive".into());
    }

    // Schedules: `name = value` shorthand or `schedule.name.*`.
    let mut given: BTreeMap<Hyper, ScheduleSpec> = BTreeMap::new();
    for h in Hyper::ALL {
        if let Some(v) = r.float(h.name()) {
            let spec = ScheduleSpec::constant(v);
            r.errors.extend(spec.violations(h.name()));
            given.insert(h, spec);
        }
    }
    if let Some(mut s) = r.sub("schedule") {
        let names: Vec<String> = s.table.keys().cloned().collect();
        for name in names {
            let Some(h) = Hyper::from_name(&name) else {
                s.errors.push(format!("unknown key `schedule.{name}`"));
                continue;
            };
            if given.contains_key(&h) {
                s.errors.push(format!("`{name}` given both as a value and as `schedule.{name}`"));
                continue;
            }
            if let Some(mut sub) = s.sub(&name) {
                if let Some(spec) = parse_schedule(&mut sub) {
                    given.insert(h, spec);
                }
            }
        }
    }
    let mut schedules = BTreeMap::new();
    if let Some(opt) = optimizer {
        for h in given.keys() {
            if !opt.applicable().contains(h) {
                errors.push(format!("{} not applicable to {}", h.name(), opt.name()));
            }
        }
        for &h in opt.applicable() {
            let spec = given.get(&h).copied().unwrap_or(ScheduleSpec::constant(h.default_value()));
            schedules.insert(h, spec);
        }
        if let Some(g) = schedules.get(&Hyper::Gamma) {
            if let Some(bad) = schedule_extremes(g).into_iter().find(|v| *v > 1.0) {
                errors.push(format!("gamma must stay within (0, 1], reaches {bad}"));
            }
        }
        if let Some(s) = schedules.get(&Hyper::Sigma) {
            if let Some(bad) = schedule_extremes(s).into_iter().find(|v| *v > 1.0) {
                errors.push(format!("sigma must stay within (0, 1], reaches {bad}"));
            }
        }
    }

    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    Ok(ExperimentConfig {
        model: model.expect("validated"),
        normalization: normalization.expect("validated"),
        optimizer: optimizer.expect("validated"),
        loss: loss.expect("validated"),
        schedules,
        epsilon,
        adam,
        ste: ste.expect("validated"),
        activation_ste: activation_ste.expect("validated"),
        epochs,
        batch_size,
        seed,
        dataset: dataset.expect("validated"),
        validation_fraction,
        output_dir,
        l2,
        norm_eps,
        pi_granularity: pi_granularity.expect("validated"),
        latent_clip,
    })
}

/// Start and end values; exponential schedules are unbounded so only the
/// base is checked for them.
fn schedule_extremes(s: &ScheduleSpec) -> Vec<f64> {
    match *s {
        ScheduleSpec::Polynomial { base, end, .. } => vec![base, end],
        other => vec![other.base()],
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn fmt_f64(x: f64) -> String {
    // `{:?}` always keeps a decimal point or exponent, so TOML reads a float.
    format!("{x:?}")
}

fn fmt_list(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn fmt_str(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

/// Writes a config that [`parse_config`] reads back to an equal value.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    match &cfg.model {
        ModelSpec::Mlp { layers } => {
            writeln!(s, "model = \"mlp\"\nlayers = {}", fmt_list(layers)).unwrap();
        }
        ModelSpec::SmallCnn {
            input_shape,
            channels,
            num_classes,
        } => {
            writeln!(
                s,
                "model = \"small_cnn\"\ninput_shape = {}\nchannels = {}\nnum_classes = {num_classes}",
                fmt_list(input_shape),
                fmt_list(channels)
            )
            .unwrap();
        }
    }
    let norm = match cfg.normalization {
        NormMode::Batch => "batch",
        NormMode::Layer => "layer",
    };
    let loss = match cfg.loss {
        LossKind::CrossEntropy => "cross_entropy",
        LossKind::SquaredHinge => "squared_hinge",
    };
    let pi = match cfg.pi_granularity {
        PiGranularity::Epoch => "epoch",
        PiGranularity::Step => "step",
    };
    writeln!(s, "normalization = \"{norm}\"").unwrap();
    writeln!(s, "optimizer = \"{}\"", cfg.optimizer.name()).unwrap();
    writeln!(s, "loss = \"{loss}\"").unwrap();
    writeln!(s, "epsilon = {}", fmt_f64(cfg.epsilon)).unwrap();
    writeln!(s, "t_clip = {}", fmt_f64(cfg.ste.t_clip)).unwrap();
    writeln!(s, "activation_t_clip = {}", fmt_f64(cfg.activation_ste.t_clip)).unwrap();
    writeln!(s, "epochs = {}", cfg.epochs).unwrap();
    writeln!(s, "batch_size = {}", cfg.batch_size).unwrap();
    writeln!(s, "seed = {}", cfg.seed).unwrap();
    writeln!(s, "validation_fraction = {}", fmt_f64(cfg.validation_fraction)).unwrap();
    writeln!(s, "output_dir = {}", fmt_str(&cfg.output_dir.to_string_lossy())).unwrap();
    writeln!(s, "l2 = {}", fmt_f64(cfg.l2)).unwrap();
    writeln!(s, "norm_eps = {}", fmt_f64(cfg.norm_eps)).unwrap();
    writeln!(s, "pi_granularity = \"{pi}\"").unwrap();
    writeln!(s, "latent_clip = {}", cfg.latent_clip).unwrap();
    writeln!(s, "adam.beta1 = {}", fmt_f64(cfg.adam.beta1)).unwrap();
    writeln!(s, "adam.beta2 = {}", fmt_f64(cfg.adam.beta2)).unwrap();
    writeln!(s, "adam.eps = {}", fmt_f64(cfg.adam.eps)).unwrap();
    match &cfg.dataset {
        DatasetSpec::SyntheticBlobs { seed, n, classes, dim } => {
            writeln!(
                s,
                "dataset.kind = \"synthetic_blobs\"\ndataset.seed = {seed}\ndataset.n = {n}\ndataset.classes = {classes}\ndataset.dim = {dim}"
            )
            .unwrap();
        }
        DatasetSpec::TensorFile { path, labels, num_classes } => {
            writeln!(s, "dataset.kind = \"tensor_file\"").unwrap();
            writeln!(s, "dataset.path = {}", fmt_str(&path.to_string_lossy())).unwrap();
            writeln!(s, "dataset.labels = {}", fmt_str(&labels.to_string_lossy())).unwrap();
            if let Some(c) = num_classes {
                writeln!(s, "dataset.num_classes = {c}").unwrap();
            }
        }
        DatasetSpec::Csv { path, num_classes } => {
            writeln!(s, "dataset.kind = \"csv\"").unwrap();
            writeln!(s, "dataset.path = {}", fmt_str(&path.to_string_lossy())).unwrap();
            if let Some(c) = num_classes {
                writeln!(s, "dataset.num_classes = {c}").unwrap();
            }
        }
    }
    for (h, spec) in &cfg.schedules {
        let p = format!("schedule.{}", h.name());
        match *spec {
            ScheduleSpec::Constant { base } => {
                writeln!(s, "{p}.kind = \"constant\"\n{p}.base = {}", fmt_f64(base)).unwrap();
            }
            ScheduleSpec::ExponentialStep {
                base,
                factor,
                period_epochs,
            } => {
                writeln!(
                    s,
                    "{p}.kind = \"exponential_step\"\n{p}.base = {}\n{p}.factor = {}\n{p}.period_epochs = {period_epochs}",
                    fmt_f64(base),
                    fmt_f64(factor)
                )
                .unwrap();
            }
            ScheduleSpec::Polynomial {
                base,
                end,
                total_epochs,
                power,
            } => {
                writeln!(
                    s,
                    "{p}.kind = \"polynomial\"\n{p}.base = {}\n{p}.end = {}\n{p}.total_epochs = {total_epochs}\n{p}.power = {}",
                    fmt_f64(base),
                    fmt_f64(end),
                    fmt_f64(power)
                )
                .unwrap();
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = "model = \"mlp\"\ndataset.kind = \"synthetic_blobs\"\n";

    #[test]
    fn minimal_config_resolves_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.optimizer, OptimizerKind::Bop2ndUnbiased);
        assert_eq!(cfg.schedule(Hyper::Gamma), Some(&ScheduleSpec::constant(1e-7)));
        assert_eq!(cfg.schedule(Hyper::Sigma), Some(&ScheduleSpec::constant(1e-3)));
        assert_eq!(cfg.schedule(Hyper::Tau), Some(&ScheduleSpec::constant(1e-6)));
        assert_eq!(cfg.schedule(Hyper::AdamLr), Some(&ScheduleSpec::constant(0.01)));
        assert_eq!(cfg.epsilon, 1e-7);
        assert_eq!((cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps), (0.9, 0.999, 1e-7));
        assert_eq!(cfg.ste.t_clip, 1.0);
        assert_eq!(cfg.activation_ste.t_clip, 1.0);
        assert_eq!(cfg.model, ModelSpec::Mlp { layers: vec![16, 64, 64, 2] });
        assert_eq!(cfg.loss, LossKind::CrossEntropy);
        assert_eq!(cfg.l2, 0.0);
    }

    #[test]
    fn sigma_is_rejected_for_bop() {
        let text = format!("{MINIMAL}optimizer = \"bop\"\nschedule.sigma.base = 1e-3\n");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("sigma not applicable to bop"), "{err}");
        let text = format!("{MINIMAL}optimizer = \"bop\"\nsigma = 1e-3\n");
        assert!(parse_config(&text).unwrap_err().to_string().contains("sigma not applicable to bop"));
    }

    #[test]
    fn bop_omits_sigma() {
        let cfg = parse_config(&format!("{MINIMAL}optimizer = \"bop\"\n")).unwrap();
        assert!(cfg.schedule(Hyper::Sigma).is_none());
        assert!(cfg.schedule(Hyper::Gamma).is_some());
    }

    #[test]
    fn every_violation_is_listed() {
        let text = "model = \"mlp\"\nfoo = 1\nbatch_size = 1\ngamma = -1.0\ndataset.kind = \"synthetic_blobs\"\noptimizer = \"nope\"\n";
        let Error::Config(errs) = parse_config(text).unwrap_err() else { panic!() };
        assert!(errs.iter().any(|e| e.contains("unknown key `foo`")));
        assert!(errs.iter().any(|e| e.contains("batch_size")));
        assert!(errs.iter().any(|e| e.contains("gamma")));
        assert!(errs.iter().any(|e| e.contains("unknown optimizer")));
    }

    #[test]
    fn missing_model_and_dataset() {
        let Error::Config(errs) = parse_config("").unwrap_err() else { panic!() };
        assert!(errs.iter().any(|e| e.contains("`model`")));
        assert!(errs.iter().any(|e| e.contains("dataset.kind")));
    }

    #[test]
    fn schedules_parse() {
        let text = format!(
            "{MINIMAL}schedule.gamma.kind = \"polynomial\"\nschedule.gamma.base = 1e-5\nschedule.gamma.end = 1e-8\nschedule.gamma.total_epochs = 500\n\
             schedule.tau.kind = \"exponential_step\"\nschedule.tau.base = 1e-6\nschedule.tau.factor = 10\nschedule.tau.period_epochs = 100\n"
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(
            cfg.schedule(Hyper::Gamma),
            Some(&ScheduleSpec::Polynomial { base: 1e-5, end: 1e-8, total_epochs: 500, power: 1.0 })
        );
        assert!((cfg.hyper_at(100)[&Hyper::Tau] / 1e-5 - 1.0).abs() < 1e-12);
        let bad = format!("{MINIMAL}schedule.gamma.kind = \"polynomial\"\nschedule.gamma.base = 1e-5\n");
        assert!(parse_config(&bad).is_err());
    }

    fn arb_schedule() -> impl Strategy<Value = ScheduleSpec> {
        prop_oneof![
            (1e-9f64..1.0).prop_map(ScheduleSpec::constant),
            (1e-9f64..1.0, 0.01f64..10.0, 1u64..200).prop_map(|(base, factor, period_epochs)| ScheduleSpec::ExponentialStep {
                base,
                factor,
                period_epochs
            }),
            (1e-9f64..1.0, 1e-9f64..1.0, 1u64..600, 0.5f64..3.0).prop_map(|(base, end, total_epochs, power)| {
                ScheduleSpec::Polynomial { base, end, total_epochs, power }
            }),
        ]
    }

    proptest! {
        #[test]
        fn serialize_round_trips(
            opt in 0usize..5,
            layer_mode in any::<bool>(),
            hinge in any::<bool>(),
            step_pi in any::<bool>(),
            epochs in 0usize..1000,
            batch in 2usize..512,
            seed in any::<u32>(),
            eps in 1e-12f64..1e-3,
            t_clip in 0.5f64..2.0,
            fraction in 0.0f64..0.9,
            l2 in 0.0f64..1e-3,
            scheds in prop::collection::vec(arb_schedule(), 4),
            cnn in any::<bool>(),
            csv in any::<bool>(),
        ) {
            let optimizer = OptimizerKind::ALL[opt];
            let schedules = optimizer.applicable().iter().zip(scheds).map(|(h, s)| (*h, s)).collect();
            let cfg = ExperimentConfig {
                model: if cnn {
                    ModelSpec::SmallCnn { input_shape: [3, 8, 8], channels: vec![4, 8], num_classes: 10 }
                } else {
                    ModelSpec::Mlp { layers: vec![16, 32, 2] }
                },
                normalization: if layer_mode { NormMode::Layer } else { NormMode::Batch },
                optimizer,
                loss: if hinge { LossKind::SquaredHinge } else { LossKind::CrossEntropy },
                schedules,
                epsilon: eps,
                adam: AdamConfig::default(),
                ste: SteConfig::new(t_clip).unwrap(),
                activation_ste: SteConfig::new(t_clip * 1.1).unwrap(),
                epochs,
                batch_size: batch,
                seed: seed as u64,
                dataset: if csv {
                    DatasetSpec::Csv { path: "data/x \"q\".csv".into(), num_classes: Some(3) }
                } else {
                    DatasetSpec::SyntheticBlobs { seed: 7, n: 100, classes: 2, dim: 16 }
                },
                validation_fraction: fraction,
                output_dir: "out/dir".into(),
                l2,
                norm_eps: 1e-5,
                pi_granularity: if step_pi { PiGranularity::Step } else { PiGranularity::Epoch },
                latent_clip: !hinge,
            };
            let text = serialize_config(&cfg);
            let back = parse_config(&text).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
