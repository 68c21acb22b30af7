//! Four-layer convolutional network over log-mel spectrograms.
//!
//! ```text
//! input [1 × n_mels × frames], standardized per clip
//!   4 × ( conv 5×5, pad 2 → ReLU → maxpool 2×2 )
//!   mean over time → flatten (channels × n_mels/16)
//!   dense(fc_hidden) → ReLU → dense(|heads|)
//!   sigmoid on event heads of a classification model, identity otherwise
//! ```
//!
//! All arithmetic is `f64`; parameters live in one flat vector so the
//! optimizer and checkpoint code see a single buffer.

mod checkpoint;
pub mod layers;
mod train;

use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::features::LogMelSpectrogram;
use crate::rng::rng_from;
use crate::weather::Variable;
use layers::{Tensor, KERNEL};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use train::{
    classification_f1, predict, train, train_with_validator, Adam, EarlyStopping, EpochRecord, Example, History,
    MetricDirection, TargetScaler, TrainConfig,
};

pub const DEFAULT_CONV_CHANNELS: [usize; 4] = [32, 32, 64, 64];
pub const DEFAULT_FC_HIDDEN: usize = 256;
/// Probabilities are clamped to `[ε, 1-ε]` inside the BCE.
pub const BCE_EPSILON: f64 = 1e-7;
/// Per-clip standardization variance floor.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Four 2×2 pools shrink each spatial axis by this factor.
pub const DOWNSAMPLE: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { loss: f64, epoch: usize, batch: usize },
    #[error("dataset problem: {0}")]
    Data(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            other => Err(NnError::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

/// Output non-linearity and loss of one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Sigmoid output, binary cross-entropy.
    Probability,
    /// Linear output on standardized targets, squared error.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_channels: [usize; 4],
    pub fc_hidden: usize,
    pub n_mels: usize,
    pub heads: Vec<Variable>,
    pub task: Task,
}

impl ModelConfig {
    /// One head for one variable.
    pub fn individual(variable: Variable, task: Task, n_mels: usize) -> Self {
        ModelConfig {
            conv_channels: DEFAULT_CONV_CHANNELS,
            fc_hidden: DEFAULT_FC_HIDDEN,
            n_mels,
            heads: vec![variable],
            task,
        }
    }

    /// All four variables. For classification, rain and wind are event heads
    /// and temperature/humidity are auxiliary regression heads.
    pub fn shared(task: Task, n_mels: usize) -> Self {
        ModelConfig {
            heads: Variable::ALL.to_vec(),
            ..Self::individual(Variable::Rain, task, n_mels)
        }
    }

    pub fn with_channels(mut self, channels: [usize; 4], fc_hidden: usize) -> Self {
        self.conv_channels = channels;
        self.fc_hidden = fc_hidden;
        self
    }

    pub fn head_kind(&self, i: usize) -> HeadKind {
        match self.task {
            Task::Classification if self.heads[i].is_event() => HeadKind::Probability,
            _ => HeadKind::Linear,
        }
    }

    pub fn head_kinds(&self) -> Vec<HeadKind> {
        (0..self.heads.len()).map(|i| self.head_kind(i)).collect()
    }

    pub fn is_shared(&self) -> bool {
        self.heads.len() > 1
    }

    /// Mel rows left after the four pools.
    pub fn pooled_mels(&self) -> usize {
        self.n_mels / DOWNSAMPLE
    }

    pub fn flat_features(&self) -> usize {
        self.conv_channels[3] * self.pooled_mels()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.heads.is_empty() {
            return Err(NnError::InvalidConfig("at least one head is required".into()));
        }
        let mut seen = self.heads.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.heads.len() {
            return Err(NnError::InvalidConfig("duplicate head".into()));
        }
        if self.conv_channels.contains(&0) || self.fc_hidden == 0 {
            return Err(NnError::InvalidConfig("layer widths must be positive".into()));
        }
        if self.n_mels < DOWNSAMPLE {
            return Err(NnError::InvalidConfig(format!(
                "n_mels {} is below the minimum {DOWNSAMPLE} for four pooling stages",
                self.n_mels
            )));
        }
        if self.task == Task::Classification && !self.heads.iter().any(|h| h.is_event()) {
            return Err(NnError::InvalidConfig("a classification model needs a rain or wind head".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    conv_w: [Range<usize>; 4],
    conv_b: [Range<usize>; 4],
    fc1_w: Range<usize>,
    fc1_b: Range<usize>,
    fc2_w: Range<usize>,
    fc2_b: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let mut conv_w: [Range<usize>; 4] = Default::default();
        let mut conv_b: [Range<usize>; 4] = Default::default();
        let mut cin = 1;
        for (l, &cout) in cfg.conv_channels.iter().enumerate() {
            conv_w[l] = take(cout * cin * KERNEL * KERNEL);
            conv_b[l] = take(cout);
            cin = cout;
        }
        let fc1_w = take(cfg.fc_hidden * cfg.flat_features());
        let fc1_b = take(cfg.fc_hidden);
        let fc2_w = take(cfg.heads.len() * cfg.fc_hidden);
        let fc2_b = take(cfg.heads.len());
        Layout {
            conv_w,
            conv_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            total: at,
        }
    }
}

/// Per-clip standardized network input, `[1 × n_mels × frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Input(pub Tensor);

impl Input {
    pub fn from_spectrogram(spec: &LogMelSpectrogram) -> Self {
        Self::standardize(spec.n_mels, spec.n_frames, &spec.values)
    }

    /// Zero mean, unit variance (variance floored at [`VARIANCE_FLOOR`]).
    pub fn standardize(h: usize, w: usize, values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
        Input(Tensor {
            c: 1,
            h,
            w,
            data: values.iter().map(|v| (v - mean) * inv).collect(),
        })
    }

    /// Wraps raw values without standardization.
    pub fn raw(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w);
        Input(Tensor { c: 1, h, w, data })
    }
}

struct ForwardCache {
    /// Input of each conv layer.
    conv_in: Vec<Tensor>,
    /// Post-ReLU output of each conv layer (pre-pool).
    conv_act: Vec<Tensor>,
    argmax: Vec<Vec<usize>>,
    pooled_last: (usize, usize, usize),
    feat: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

impl CnnModel {
    /// Kaiming fan-in Gaussian weights, zero biases; deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = rng_from(seed, &[0x1417]);
        let mut fill = |r: &Range<usize>, fan_in: usize, params: &mut [f64]| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[r.clone()] {
                *p = normal.sample(&mut rng);
            }
        };
        let mut cin = 1;
        for l in 0..4 {
            fill(&layout.conv_w[l], cin * KERNEL * KERNEL, &mut params);
            cin = config.conv_channels[l];
        }
        fill(&layout.fc1_w, config.flat_features(), &mut params);
        fill(&layout.fc2_w, config.fc_hidden, &mut params);
        Ok(CnnModel { config, params, layout })
    }

    /// Model with every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, NnError> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(CnnModel {
            params: vec![0.0; layout.total],
            config,
            layout,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, NnError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(NnError::Checkpoint(format!(
                "{} parameters for a configuration needing {}",
                params.len(),
                layout.total
            )));
        }
        Ok(CnnModel { config, params, layout })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn n_heads(&self) -> usize {
        self.config.heads.len()
    }

    /// Named parameter ranges in declaration order.
    pub fn param_groups(&self) -> Vec<(String, Range<usize>)> {
        let l = &self.layout;
        let mut g = Vec::new();
        for i in 0..4 {
            g.push((format!("conv{}.weight", i + 1), l.conv_w[i].clone()));
            g.push((format!("conv{}.bias", i + 1), l.conv_b[i].clone()));
        }
        g.push(("fc1.weight".into(), l.fc1_w.clone()));
        g.push(("fc1.bias".into(), l.fc1_b.clone()));
        g.push(("fc2.weight".into(), l.fc2_w.clone()));
        g.push(("fc2.bias".into(), l.fc2_b.clone()));
        g
    }

    fn check_input(&self, x: &Input) -> Result<(), NnError> {
        let t = &x.0;
        if t.c != 1 || t.h != self.config.n_mels {
            return Err(NnError::Shape(format!(
                "expected [1 × {} × frames], got [{} × {} × {}]",
                self.config.n_mels, t.c, t.h, t.w
            )));
        }
        if t.w < DOWNSAMPLE {
            return Err(NnError::Shape(format!("{} frames, need at least {DOWNSAMPLE}", t.w)));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Input) -> ForwardCache {
        let p = &self.params;
        let l = &self.layout;
        let mut conv_in = Vec::with_capacity(4);
        let mut conv_act = Vec::with_capacity(4);
        let mut argmax = Vec::with_capacity(4);
        let mut cur = x.0.clone();
        for i in 0..4 {
            let mut z = layers::conv_forward(&cur, &p[l.conv_w[i].clone()], &p[l.conv_b[i].clone()]);
            layers::relu_inplace(&mut z);
            let (pooled, arg) = layers::maxpool_forward(&z);
            conv_in.push(std::mem::replace(&mut cur, pooled));
            conv_act.push(z);
            argmax.push(arg);
        }
        let pooled_last = (cur.c, cur.h, cur.w);
        let feat = layers::temporal_mean(&cur);
        let mut hidden = layers::dense_forward(&feat, &p[l.fc1_w.clone()], &p[l.fc1_b.clone()]);
        for h in hidden.iter_mut() {
            *h = h.max(0.0);
        }
        let mut out = layers::dense_forward(&hidden, &p[l.fc2_w.clone()], &p[l.fc2_b.clone()]);
        for (i, o) in out.iter_mut().enumerate() {
            if self.config.head_kind(i) == HeadKind::Probability {
                *o = layers::sigmoid(*o);
            }
        }
        ForwardCache {
            conv_in,
            conv_act,
            argmax,
            pooled_last,
            feat,
            hidden,
            out,
        }
    }

    /// Head outputs for one input: probabilities or standardized values.
    pub fn forward_one(&self, x: &Input) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).out)
    }

    pub fn forward(&self, batch: &[Input], exec: Exec) -> Result<Vec<Vec<f64>>, NnError> {
        exec.try_map(batch, |x| self.forward_one(x))
    }

    /// Standardizes each spectrogram and runs the network.
    pub fn forward_spectrograms(&self, batch: &[&LogMelSpectrogram], exec: Exec) -> Result<Vec<Vec<f64>>, NnError> {
        exec.try_map(batch, |s| self.forward_one(&Input::from_spectrogram(s)))
    }

    /// Loss of one sample (mean over heads) and, when `grad` is given, adds
    /// `scale ·` its gradient into it.
    fn sample_loss_grad(&self, x: &Input, target: &[f64], scale: f64, grad: Option<&mut [f64]>) -> f64 {
        let cache = self.forward_cached(x);
        let n_heads = self.n_heads() as f64;
        let mut loss = 0.0;
        let mut d_out = vec![0.0; self.n_heads()];
        for (i, (&y, &t)) in cache.out.iter().zip(target).enumerate() {
            match self.config.head_kind(i) {
                HeadKind::Probability => {
                    let pc = y.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                    loss += -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
                    // d/dz of BCE∘clamp∘sigmoid; zero where the clamp is active
                    if y > BCE_EPSILON && y < 1.0 - BCE_EPSILON {
                        d_out[i] = y - t;
                    }
                }
                HeadKind::Linear => {
                    loss += (y - t) * (y - t);
                    d_out[i] = 2.0 * (y - t);
                }
            }
        }
        let Some(grad) = grad else {
            return loss / n_heads;
        };
        let s = scale / n_heads;
        for d in d_out.iter_mut() {
            *d *= s;
        }
        let p = &self.params;
        let l = &self.layout;
        let d_hidden = {
            let (gw, rest) = grad[l.fc2_w.start..l.fc2_b.end].split_at_mut(l.fc2_w.len());
            layers::dense_backward(&cache.hidden, &p[l.fc2_w.clone()], &d_out, gw, rest)
        };
        let d_hidden: Vec<f64> = d_hidden
            .iter()
            .zip(&cache.hidden)
            .map(|(&g, &h)| if h > 0.0 { g } else { 0.0 })
            .collect();
        let d_feat = {
            let (gw, rest) = grad[l.fc1_w.start..l.fc1_b.end].split_at_mut(l.fc1_w.len());
            layers::dense_backward(&cache.feat, &p[l.fc1_w.clone()], &d_hidden, gw, rest)
        };
        let mut g = layers::temporal_mean_backward(cache.pooled_last, &d_feat);
        for i in (0..4).rev() {
            let act = &cache.conv_act[i];
            let mut d_act = layers::maxpool_backward((act.c, act.h, act.w), &cache.argmax[i], &g);
            layers::relu_backward_inplace(act, &mut d_act);
            let (gw, gb) = grad[l.conv_w[i].start..l.conv_b[i].end].split_at_mut(l.conv_w[i].len());
            g = layers::conv_backward(&cache.conv_in[i], &p[l.conv_w[i].clone()], &d_act, gw, gb);
        }
        loss / n_heads
    }

    /// Mean loss over batch and heads.
    pub fn loss(&self, batch: &[Input], targets: &[Vec<f64>], exec: Exec) -> Result<f64, NnError> {
        self.check_batch(batch, targets)?;
        let idx: Vec<usize> = (0..batch.len()).collect();
        let losses = exec.map(&idx, |&i| self.sample_loss_grad(&batch[i], &targets[i], 0.0, None));
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }

    /// Mean loss and its exact gradient with respect to every parameter.
    /// Probability heads take 0/1 targets; linear heads take standardized
    /// targets. Per-sample gradients are summed in batch order, so the
    /// result is identical for every [`Exec`] mode.
    pub fn loss_and_gradient(&self, batch: &[Input], targets: &[Vec<f64>], exec: Exec) -> Result<(f64, Vec<f64>), NnError> {
        self.check_batch(batch, targets)?;
        let scale = 1.0 / batch.len() as f64;
        let idx: Vec<usize> = (0..batch.len()).collect();
        let parts = exec.map(&idx, |&i| {
            let mut g = vec![0.0; self.n_params()];
            let l = self.sample_loss_grad(&batch[i], &targets[i], scale, Some(&mut g));
            (l, g)
        });
        let mut grad = vec![0.0; self.n_params()];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((loss * scale, grad))
    }

    fn check_batch(&self, batch: &[Input], targets: &[Vec<f64>]) -> Result<(), NnError> {
        if batch.is_empty() || batch.len() != targets.len() {
            return Err(NnError::Shape(format!("{} inputs vs {} targets", batch.len(), targets.len())));
        }
        for (x, t) in batch.iter().zip(targets) {
            self.check_input(x)?;
            if t.len() != self.n_heads() {
                return Err(NnError::Shape(format!("{} targets for {} heads", t.len(), self.n_heads())));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over all entries, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(task: Task, heads: Vec<Variable>) -> ModelConfig {
        ModelConfig {
            conv_channels: [2, 2, 2, 2],
            fc_hidden: 4,
            n_mels: 16,
            heads,
            task,
        }
    }

    fn random_input(h: usize, w: usize, seed: u64) -> Input {
        let mut r = rng_from(seed, &[]);
        Input::raw(h, w, (0..h * w).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let cfg = tiny(Task::Classification, vec![Variable::Rain]);
        let a = CnnModel::init(cfg.clone(), 1).unwrap();
        assert_eq!(a, CnnModel::init(cfg.clone(), 1).unwrap());
        assert_ne!(a.params, CnnModel::init(cfg, 2).unwrap().params);
        for (name, r) in a.param_groups() {
            if name.ends_with("bias") {
                assert!(a.params[r].iter().all(|&b| b == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Task::Classification, vec![]);
        assert!(c.validate().is_err());
        c.heads = vec![Variable::Temperature];
        assert!(c.validate().is_err());
        c.task = Task::Regression;
        assert!(c.validate().is_ok());
        c.n_mels = 8;
        assert!(c.validate().is_err());
        let shared = ModelConfig::shared(Task::Classification, 128);
        assert_eq!(
            shared.head_kinds(),
            vec![HeadKind::Probability, HeadKind::Probability, HeadKind::Linear, HeadKind::Linear]
        );
        assert_eq!(ModelConfig::shared(Task::Regression, 128).head_kinds(), vec![HeadKind::Linear; 4]);
    }

    #[test]
    fn zero_model_outputs_one_half() {
        let m = CnnModel::zeros(ModelConfig::shared(Task::Classification, 32).with_channels([2, 2, 2, 2], 3)).unwrap();
        let out = m.forward_one(&Input::raw(32, 40, vec![0.0; 32 * 40])).unwrap();
        assert_eq!(out[0], 0.5);
        assert_eq!(out[1], 0.5);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::shared(Task::Classification, 128);
        assert_eq!(cfg.pooled_mels(), 8);
        assert_eq!(cfg.flat_features(), 512);
        let m = CnnModel::zeros(cfg).unwrap();
        let cache = m.forward_cached(&Input::raw(128, 433, vec![0.0; 128 * 433]));
        assert_eq!(cache.pooled_last, (64, 8, 27));
        assert_eq!(cache.feat.len(), 512);
        assert_eq!(cache.hidden.len(), 256);
        assert_eq!(cache.out.len(), 4);
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = CnnModel::init(tiny(Task::Regression, vec![Variable::Rain]), 0).unwrap();
        assert!(matches!(m.forward_one(&Input::raw(17, 20, vec![0.0; 340])), Err(NnError::Shape(_))));
        assert!(matches!(m.forward_one(&Input::raw(16, 8, vec![0.0; 128])), Err(NnError::Shape(_))));
    }

    #[test]
    fn batch_independence() {
        let m = CnnModel::init(tiny(Task::Classification, vec![Variable::Rain, Variable::Wind]), 3).unwrap();
        let xs: Vec<Input> = (0..4).map(|i| random_input(16, 20, i)).collect();
        let all = m.forward(&xs, Exec::Parallel).unwrap();
        let one = m.forward(&xs[2..3], Exec::Sequential).unwrap();
        assert_eq!(all[2], one[0]);
    }

    #[test]
    fn loss_examples() {
        assert!((bce_loss(&[0.5], &[1.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(&[0.5], &[0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]) <= 1e-6);
        assert!((bce_loss(&[0.9, 0.1], &[1.0, 0.0]) - -(0.9f64.ln())).abs() < 1e-12);
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(mse_loss(&[1.0, -1.0], &[0.0, 0.0]), 1.0);
        let (p, t) = ([0.3, -1.2, 2.0], [1.0, 0.5, -0.25]);
        let c = 3.0;
        let ps: Vec<f64> = p.iter().map(|x| x * c).collect();
        let ts: Vec<f64> = t.iter().map(|x| x * c).collect();
        assert!((mse_loss(&ps, &ts) - c * c * mse_loss(&p, &t)).abs() < 1e-12);
    }

    fn fd_check(cfg: ModelConfig, targets: Vec<Vec<f64>>) {
        let mut m = CnnModel::init(cfg, 11).unwrap();
        let mut r = rng_from(12, &[]);
        for (name, range) in m.param_groups() {
            if name.ends_with("bias") {
                for p in &mut m.params[range] {
                    *p = r.random::<f64>() * 0.2 - 0.1;
                }
            }
        }
        let xs: Vec<Input> = (0..targets.len() as u64).map(|i| random_input(16, 20, 100 + i)).collect();
        let (_, g) = m.loss_and_gradient(&xs, &targets, Exec::Sequential).unwrap();
        let h = 1e-5;
        for i in 0..m.n_params() {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let lp = m.loss(&xs, &targets, Exec::Sequential).unwrap();
            m.params[i] = orig - h;
            let lm = m.loss(&xs, &targets, Exec::Sequential).unwrap();
            m.params[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} numeric {num} rel {rel}", g[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_classification() {
        fd_check(
            tiny(Task::Classification, vec![Variable::Rain, Variable::Wind, Variable::Temperature]),
            vec![vec![1.0, 0.0, 0.3], vec![0.0, 1.0, -1.2]],
        );
    }

    #[test]
    fn gradient_matches_finite_differences_regression() {
        fd_check(tiny(Task::Regression, vec![Variable::Rain]), vec![vec![0.7], vec![-0.4], vec![1.5]]);
    }

    #[test]
    fn zero_loss_has_zero_gradient() {
        let m = CnnModel::init(tiny(Task::Regression, vec![Variable::Rain, Variable::Wind]), 5).unwrap();
        let xs: Vec<Input> = (0..3).map(|i| random_input(16, 20, i)).collect();
        let targets = m.forward(&xs, Exec::Sequential).unwrap();
        let (loss, g) = m.loss_and_gradient(&xs, &targets, Exec::Sequential).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_sample_keeps_gradient() {
        let m = CnnModel::init(tiny(Task::Classification, vec![Variable::Rain]), 6).unwrap();
        let x = random_input(16, 20, 9);
        let (_, g1) = m.loss_and_gradient(&[x.clone()], &[vec![1.0]], Exec::Sequential).unwrap();
        let (_, g2) = m.loss_and_gradient(&[x.clone(), x], &[vec![1.0], vec![1.0]], Exec::Sequential).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn loss_invariant_to_order_and_exec() {
        let m = CnnModel::init(tiny(Task::Classification, vec![Variable::Rain]), 7).unwrap();
        let xs: Vec<Input> = (0..5).map(|i| random_input(16, 20, i)).collect();
        let ts: Vec<Vec<f64>> = (0..5).map(|i| vec![(i % 2) as f64]).collect();
        let a = m.loss(&xs, &ts, Exec::Sequential).unwrap();
        let mut xr = xs.clone();
        let mut tr = ts.clone();
        xr.reverse();
        tr.reverse();
        let b = m.loss(&xr, &tr, Exec::Sequential).unwrap();
        assert!((a - b).abs() < 1e-15);
        let (la, ga) = m.loss_and_gradient(&xs, &ts, Exec::Sequential).unwrap();
        let (lb, gb) = m.loss_and_gradient(&xs, &ts, Exec::Parallel).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn standardization() {
        let x = Input::standardize(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = x.0.data.iter().sum::<f64>() / 4.0;
        let var: f64 = x.0.data.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15 && (var - 1.0).abs() < 1e-12);
        let flat = Input::standardize(2, 2, &[3.0; 4]);
        assert!(flat.0.data.iter().all(|&v| v == 0.0));
    }
}
