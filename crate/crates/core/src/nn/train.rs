//! Adam, the epoch loop with patience-based early stopping, target scaling
//! and prediction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CnnModel, Checkpoint, HeadKind, Input, NnError};
use crate::exec::Exec;
use crate::features::{augment, AugmentConfig, LogMelSpectrogram};
use crate::rng::rng_from;

const STREAM_SHUFFLE: u64 = 0x5348;
const STREAM_AUGMENT: u64 = 0x4155;

/// One training clip. Probability heads take 0/1 targets, linear heads take
/// targets in physical units.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub spec: &'a LogMelSpectrogram,
    pub target: &'a [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 1500,
            patience: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidTrainConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience >= self.max_epochs {
            return bad(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        self.augment
            .validate()
            .map_err(|e| NnError::InvalidTrainConfig(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricDirection {
    HigherIsBetter,
    LowerIsBetter,
}

impl MetricDirection {
    fn improves(self, new: f64, best: Option<f64>) -> bool {
        match best {
            None => !new.is_nan(),
            Some(b) => match self {
                MetricDirection::HigherIsBetter => new > b,
                MetricDirection::LowerIsBetter => new < b,
            },
        }
    }
}

/// Counts epochs since the last strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub direction: MetricDirection,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, direction: MetricDirection) -> Self {
        EarlyStopping {
            patience,
            direction,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's metric; returns whether it improved.
    pub fn observe(&mut self, metric: f64) -> bool {
        if self.direction.improves(metric, self.best) {
            self.best = Some(metric);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Per-head affine map between physical units and network space. Identity
/// for probability heads.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl TargetScaler {
    pub fn identity(n_heads: usize) -> Self {
        TargetScaler {
            means: vec![0.0; n_heads],
            stds: vec![1.0; n_heads],
        }
    }

    /// Training-set mean and population std of every linear head; a zero
    /// std is replaced by 1.
    pub fn fit(kinds: &[HeadKind], targets: &[&[f64]]) -> Self {
        let mut s = Self::identity(kinds.len());
        let n = targets.len() as f64;
        for (h, kind) in kinds.iter().enumerate() {
            if *kind != HeadKind::Linear || targets.is_empty() {
                continue;
            }
            let mean = targets.iter().map(|t| t[h]).sum::<f64>() / n;
            let var = targets.iter().map(|t| (t[h] - mean) * (t[h] - mean)).sum::<f64>() / n;
            s.means[h] = mean;
            s.stds[h] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        s
    }

    pub fn forward(&self, target: &[f64]) -> Vec<f64> {
        target
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(t, (m, s))| (t - m) / s)
            .collect()
    }

    pub fn inverse(&self, out: &[f64]) -> Vec<f64> {
        out.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(o, (m, s))| o * s + m)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.iter().rev().find(|r| r.improved)
    }

    /// `epoch,train_loss,val_metric,improved` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_metric,improved\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_metric, r.improved as u8));
        }
        s
    }
}

/// Mean F1 at a 0.5 cutoff over the probability heads.
pub fn classification_f1(kinds: &[HeadKind], outputs: &[Vec<f64>], targets: &[&[f64]]) -> f64 {
    let heads: Vec<usize> = (0..kinds.len()).filter(|&h| kinds[h] == HeadKind::Probability).collect();
    if heads.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &h in &heads {
        let preds: Vec<bool> = outputs.iter().map(|o| o[h] >= 0.5).collect();
        let labels: Vec<bool> = targets.iter().map(|t| t[h] >= 0.5).collect();
        total += crate::eval::Confusion::from_labels(&preds, &labels).f1();
    }
    total / heads.len() as f64
}

/// Trains with the built-in validation metric: mean F1 at 0.5 over the
/// probability heads when the model has any, otherwise MSE on standardized
/// targets.
pub fn train(
    model: CnnModel,
    train_set: &[Example<'_>],
    val_set: &[Example<'_>],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Checkpoint, History), NnError> {
    if val_set.is_empty() {
        return Err(NnError::Data("validation set is empty".into()));
    }
    let kinds = model.config.head_kinds();
    for (h, k) in kinds.iter().enumerate() {
        if *k == HeadKind::Probability && !val_set.iter().any(|e| e.target[h] >= 0.5) {
            return Err(NnError::Data(format!(
                "validation set has no positive for head {}",
                model.config.heads[h].name()
            )));
        }
    }
    let train_targets: Vec<&[f64]> = train_set.iter().map(|e| e.target).collect();
    let scaler = TargetScaler::fit(&kinds, &train_targets);
    let classify = kinds.contains(&HeadKind::Probability);
    let direction = if classify {
        MetricDirection::HigherIsBetter
    } else {
        MetricDirection::LowerIsBetter
    };
    let val_inputs: Vec<Input> = exec.map(val_set, |e| Input::from_spectrogram(e.spec));
    let val_targets: Vec<&[f64]> = val_set.iter().map(|e| e.target).collect();
    let val_scaled: Vec<Vec<f64>> = val_targets.iter().map(|t| scaler.forward(t)).collect();
    let validator = |m: &CnnModel| -> Result<f64, NnError> {
        let out = m.forward(&val_inputs, exec)?;
        if classify {
            Ok(classification_f1(&kinds, &out, &val_targets))
        } else {
            Ok(super::mse_loss(&out.concat(), &val_scaled.concat()))
        }
    };
    train_inner(model, train_set, scaler, cfg, exec, direction, validator)
}

/// Trains with a caller-supplied validation metric, evaluated once per
/// epoch on the updated model.
pub fn train_with_validator<F>(
    model: CnnModel,
    train_set: &[Example<'_>],
    cfg: &TrainConfig,
    exec: Exec,
    direction: MetricDirection,
    mut validator: F,
) -> Result<(Checkpoint, History), NnError>
where
    F: FnMut(usize, &CnnModel) -> f64,
{
    let kinds = model.config.head_kinds();
    let targets: Vec<&[f64]> = train_set.iter().map(|e| e.target).collect();
    let scaler = TargetScaler::fit(&kinds, &targets);
    let mut epoch = 0;
    train_inner(model, train_set, scaler, cfg, exec, direction, |m| {
        epoch += 1;
        Ok(validator(epoch, m))
    })
}

fn train_inner<F>(
    mut model: CnnModel,
    train_set: &[Example<'_>],
    scaler: TargetScaler,
    cfg: &TrainConfig,
    exec: Exec,
    direction: MetricDirection,
    mut validator: F,
) -> Result<(Checkpoint, History), NnError>
where
    F: FnMut(&CnnModel) -> Result<f64, NnError>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NnError::Data("training set is empty".into()));
    }
    for e in train_set {
        if e.target.len() != model.n_heads() {
            return Err(NnError::Shape(format!(
                "{} targets for {} heads",
                e.target.len(),
                model.n_heads()
            )));
        }
    }
    let scaled: Vec<Vec<f64>> = train_set.iter().map(|e| scaler.forward(e.target)).collect();
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience, direction);
    let mut history = History::default();
    let mut best = Checkpoint {
        config: model.config.clone(),
        params: model.params.clone(),
        scaler: scaler.clone(),
        seed: cfg.seed,
        epoch: 0,
        metric: f64::NAN,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_from(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Input> = exec.map(chunk, |&i| {
                let mut rng = rng_from(cfg.seed, &[STREAM_AUGMENT, epoch as u64, i as u64]);
                Input::from_spectrogram(&augment(train_set[i].spec, &cfg.augment, &mut rng))
            });
            let targets: Vec<Vec<f64>> = chunk.iter().map(|&i| scaled[i].clone()).collect();
            let (loss, grad) = model.loss_and_gradient(&inputs, &targets, exec)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFinite {
                    loss,
                    epoch,
                    batch: b + 1,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            adam.step(&mut model.params, &grad);
        }
        let metric = validator(&model)?;
        let improved = stopper.observe(metric);
        if improved {
            best.params.copy_from_slice(&model.params);
            best.epoch = epoch;
            best.metric = metric;
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_metric: metric,
            improved,
        });
        if stopper.should_stop() {
            break;
        }
    }
    Ok((best, history))
}

/// Per-clip head outputs: probabilities for probability heads, physical
/// units for linear heads.
pub fn predict(checkpoint: &Checkpoint, specs: &[&LogMelSpectrogram], exec: Exec) -> Result<Vec<Vec<f64>>, NnError> {
    let model = checkpoint.model()?;
    let out = model.forward_spectrograms(specs, exec)?;
    Ok(out.iter().map(|o| checkpoint.scaler.inverse(o)).collect())
}
