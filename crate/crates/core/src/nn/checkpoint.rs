//! Checkpoint file: `GWX1`, a `u32` LE metadata length, UTF-8 `key=value`
//! lines, then every parameter as a little-endian `f64` in layout order.

use std::collections::BTreeMap;
use std::path::Path;

use super::{CnnModel, ModelConfig, NnError, Task, TargetScaler};
use crate::weather::Variable;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GWX1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub scaler: TargetScaler,
    pub seed: u64,
    /// Epoch the parameters come from; 0 means untrained.
    pub epoch: usize,
    pub metric: f64,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>, NnError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|_| corrupt(format!("bad value {x:?} for {key}"))))
        .collect()
}

impl Checkpoint {
    pub fn untrained(model: &CnnModel, seed: u64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            params: model.params.clone(),
            scaler: TargetScaler::identity(model.n_heads()),
            seed,
            epoch: 0,
            metric: f64::NAN,
        }
    }

    pub fn model(&self) -> Result<CnnModel, NnError> {
        CnnModel::from_params(self.config.clone(), self.params.clone())
    }

    fn metadata(&self) -> String {
        let c = &self.config;
        let heads: Vec<&str> = c.heads.iter().map(|h| h.name()).collect();
        let mut s = String::new();
        for (k, v) in [
            ("task", c.task.name().to_string()),
            ("heads", heads.join(",")),
            ("conv_channels", join(&c.conv_channels)),
            ("fc_hidden", c.fc_hidden.to_string()),
            ("n_mels", c.n_mels.to_string()),
            ("seed", self.seed.to_string()),
            ("epoch", self.epoch.to_string()),
            ("metric", self.metric.to_string()),
            ("target_means", join(&self.scaler.means)),
            ("target_stds", join(&self.scaler.stds)),
            ("n_params", self.params.len().to_string()),
        ] {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.metadata();
        let mut out = Vec::with_capacity(8 + meta.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing GWX1 magic"));
        }
        let meta_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let meta_end = 8usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("metadata block runs past end of file"))?;
        let meta = std::str::from_utf8(&bytes[8..meta_end]).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("metadata line {line:?} has no '='")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| corrupt(format!("missing key {k}")));
        let one = |k: &str| -> Result<usize, NnError> { get(k)?.parse().map_err(|_| corrupt(format!("bad {k}"))) };

        let task: Task = get("task")?.parse()?;
        let heads: Vec<Variable> = get("heads")?
            .split(',')
            .map(|h| h.parse().map_err(|_| corrupt(format!("unknown head {h:?}"))))
            .collect::<Result<_, _>>()?;
        let channels: Vec<usize> = parse_list("conv_channels", get("conv_channels")?)?;
        let conv_channels: [usize; 4] = channels
            .try_into()
            .map_err(|_| corrupt("conv_channels must list 4 values"))?;
        let config = ModelConfig {
            conv_channels,
            fc_hidden: one("fc_hidden")?,
            n_mels: one("n_mels")?,
            heads,
            task,
        };
        let scaler = TargetScaler {
            means: parse_list("target_means", get("target_means")?)?,
            stds: parse_list("target_stds", get("target_stds")?)?,
        };
        if scaler.means.len() != config.heads.len() || scaler.stds.len() != config.heads.len() {
            return Err(corrupt("target scaling does not match head count"));
        }
        let n_params = one("n_params")?;
        let body = &bytes[meta_end..];
        if body.len() != n_params * 8 {
            return Err(corrupt(format!(
                "expected {} parameter bytes, found {}",
                n_params * 8,
                body.len()
            )));
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let ck = Checkpoint {
            seed: get("seed")?.parse().map_err(|_| corrupt("bad seed"))?,
            epoch: one("epoch")?,
            metric: get("metric")?.parse().map_err(|_| corrupt("bad metric"))?,
            config,
            params,
            scaler,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::shared(Task::Regression, 16).with_channels([2, 3, 2, 2], 5);
        let m = CnnModel::init(cfg, 9).unwrap();
        Checkpoint {
            scaler: TargetScaler {
                means: vec![0.1, 2.5, -3.0, 80.0],
                stds: vec![0.3, 1.0 / 3.0, 7.25, 12.5],
            },
            epoch: 17,
            metric: 0.123456789012345,
            ..Checkpoint::untrained(&m, 42)
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.scaler, ck.scaler);
        assert_eq!(back.metric.to_bits(), ck.metric.to_bits());
        assert!(back.params.iter().zip(&ck.params).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn nan_metric_survives() {
        let cfg = ModelConfig::individual(Variable::Wind, Task::Classification, 16).with_channels([1, 1, 1, 1], 2);
        let ck = Checkpoint::untrained(&CnnModel::init(cfg, 1).unwrap(), 1);
        assert!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap().metric.is_nan());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 0xff;
        bad[5] = 0xff;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(b"GWX").is_err());
    }
}
