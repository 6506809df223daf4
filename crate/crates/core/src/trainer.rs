//! Behavior cloning: per-step mean negative log-likelihood of demonstrated
//! actions, Adam, seeded epoch shuffling and a checksummed checkpoint file.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnv::Fnv1a;
use crate::policy::{ArchConfig, InputMode, Policy, PolicyError, PolicyParams};
use crate::seed;
use crate::taxonomy::{Granularity, Taxonomy};
use crate::trajectory::Trajectory;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGNAVCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f64" | "double" => Ok(Precision::F64),
            "f32" | "single" => Ok(Precision::F32),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mode: InputMode,
    pub granularity: Granularity,
    pub precision: Precision,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            mode: InputMode::Os,
            granularity: Granularity::Coarse,
            precision: Precision::F64,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let a = &self.adam;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(a.lr > 0.0 && a.lr.is_finite() && a.eps > 0.0 && a.eps.is_finite()) {
            return bad("learning rate and epsilon must be positive");
        }
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("episode {episode}: {source}")]
    Policy { episode: u64, source: PolicyError },
    #[error(transparent)]
    Arch(PolicyError),
    #[error("non-finite optimizer update at entry {0}")]
    NonFiniteUpdate(usize),
    #[error("parameter/gradient/state lengths differ")]
    Shape,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training log i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Adam moment estimates. `t` counts completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step with step index `t` (1-based). Parameters
/// and state are left untouched when any updated value would be non-finite.
pub fn adam_update(params: &mut [f64], grad: &[f64], state: &mut AdamState, t: u64, cfg: &AdamConfig) -> Result<(), TrainError> {
    if params.len() != grad.len() || state.m.len() != grad.len() || state.v.len() != grad.len() || t == 0 {
        return Err(TrainError::Shape);
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut next = Vec::with_capacity(params.len());
    for (i, &g) in grad.iter().enumerate() {
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let p = params[i] - cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        if !(m.is_finite() && v.is_finite() && p.is_finite()) {
            return Err(TrainError::NonFiniteUpdate(i));
        }
        next.push((m, v, p));
    }
    for (i, (m, v, p)) in next.into_iter().enumerate() {
        state.m[i] = m;
        state.v[i] = v;
        params[i] = p;
    }
    state.t = t;
    Ok(())
}

/// Per-step mean loss over the batch and its gradient. Per-trajectory sums
/// are reduced in batch order.
pub fn bc_loss(policy: &Policy, params: &PolicyParams, batch: &[&Trajectory], precision: Precision) -> Result<(f64, Vec<f64>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = params.values.len();
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    let mut steps = 0usize;
    let scratch32: Option<Vec<f32>> = (precision == Precision::F32).then(|| params.values.iter().map(|&v| v as f32).collect());
    let mut g32 = vec![0f32; if scratch32.is_some() { n } else { 0 }];
    for t in batch {
        let wrap = |source| TrainError::Policy {
            episode: t.meta.episode_id,
            source,
        };
        let loss = match &scratch32 {
            None => policy.loss_and_grad(&params.values, t, &mut grad).map_err(wrap)?,
            Some(p32) => {
                g32.iter_mut().for_each(|g| *g = 0.0);
                let l = policy.loss_and_grad(p32, t, &mut g32).map_err(wrap)?;
                for (g, &h) in grad.iter_mut().zip(&g32) {
                    *g += f64::from(h);
                }
                l
            }
        };
        total += loss;
        steps += t.len();
    }
    let scale = 1.0 / steps as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_sr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub mode: InputMode,
    pub granularity: Granularity,
    pub taxonomy_hash: u64,
    pub layout_hash: u64,
    pub n_params: usize,
    pub step: u64,
    pub epochs_done: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub adam: AdamState,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint checksum mismatch (corrupt or truncated file)")]
    Checksum,
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint layout hash {found:016x} does not match architecture {expected:016x}")]
    LayoutHash { found: u64, expected: u64 },
    #[error("checkpoint was trained with taxonomy {found:016x}, current taxonomy is {expected:016x}")]
    Taxonomy { found: u64, expected: u64 },
    #[error("checkpoint header: {0}")]
    Header(String),
}

impl Checkpoint {
    pub fn new(policy: &Policy, tax: &Taxonomy, params: &PolicyParams, adam: AdamState, epochs_done: usize, config: TrainConfig) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                arch: policy.arch().clone(),
                mode: policy.mode(),
                granularity: policy.granularity(),
                taxonomy_hash: tax.content_hash(),
                layout_hash: policy.layout_hash(),
                n_params: params.values.len(),
                step: adam.t,
                epochs_done,
                config,
            },
            params: params.values.clone(),
            adam,
        }
    }

    /// Rebuild the network this checkpoint was trained for and check that
    /// the stored parameters fit it.
    pub fn policy(&self, tax: &Taxonomy) -> Result<(Policy, PolicyParams), CheckpointError> {
        if self.header.taxonomy_hash != tax.content_hash() {
            return Err(CheckpointError::Taxonomy {
                found: self.header.taxonomy_hash,
                expected: tax.content_hash(),
            });
        }
        let policy = Policy::new(self.header.arch.clone(), self.header.mode, tax, self.header.granularity).map_err(|e| CheckpointError::Header(e.to_string()))?;
        self.check_compatible(&policy)?;
        let params = PolicyParams {
            layout: policy.layout().clone(),
            values: self.params.clone(),
        };
        Ok((policy, params))
    }

    pub fn check_compatible(&self, policy: &Policy) -> Result<(), CheckpointError> {
        if self.header.layout_hash != policy.layout_hash() || self.params.len() != policy.layout().total() {
            return Err(CheckpointError::LayoutHash {
                found: self.header.layout_hash,
                expected: policy.layout_hash(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let n = self.params.len();
        let mut out = Vec::with_capacity(24 + header.len() + 24 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for arr in [&self.params, &self.adam.m, &self.adam.v] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut h = Fnv1a::new();
        h.write(&out);
        out.extend_from_slice(&h.finish().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 24 {
            return Err(CheckpointError::Checksum);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut h = Fnv1a::new();
        h.write(body);
        if h.finish().to_le_bytes() != tail {
            return Err(CheckpointError::Checksum);
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let rest = &body[16..];
        if rest.len() < hlen {
            return Err(CheckpointError::Header("header length exceeds file".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&rest[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let floats = &rest[hlen..];
        let n = header.n_params;
        if floats.len() != 24 * n {
            return Err(CheckpointError::Header(format!("expected {} parameter bytes, found {}", 24 * n, floats.len())));
        }
        let mut arrays = floats
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect::<Vec<_>>();
        let v = arrays.split_off(2 * n);
        let m = arrays.split_off(n);
        Ok(Checkpoint {
            adam: AdamState { m, v, t: header.step },
            header,
            params: arrays,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

pub type EvalHook<'a> = Box<dyn FnMut(&Policy, &PolicyParams) -> f64 + 'a>;
pub type EpochHook<'a> = Box<dyn FnMut(&EpochLog) + 'a>;

/// Optional per-epoch hooks: held-out evaluation and log streaming.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub eval: Option<EvalHook<'a>>,
    pub on_epoch: Option<EpochHook<'a>>,
}

/// Fit a fresh network to `demos`. Deterministic in `(demos, cfg)`.
pub fn train(demos: &[Trajectory], cfg: &TrainConfig, tax: &Taxonomy, mut hooks: TrainHooks<'_>) -> Result<(Checkpoint, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let policy = Policy::new(cfg.arch.clone(), cfg.mode, tax, cfg.granularity).map_err(TrainError::Arch)?;
    for t in demos {
        policy.validate_trajectory(t).map_err(|source| TrainError::Policy {
            episode: t.meta.episode_id,
            source,
        })?;
    }
    let mut params = policy.init_params(cfg.seed);
    let mut adam = AdamState::new(params.len());
    let batch = cfg.batch_size.min(demos.len());
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..demos.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, 0xe90c_0000 + epoch as u64));
        let mut loss_sum = 0.0;
        let mut step_sum = 0usize;
        for chunk in order.chunks(batch) {
            let trajs: Vec<&Trajectory> = chunk.iter().map(|&i| &demos[i]).collect();
            let (loss, grad) = bc_loss(&policy, &params, &trajs, cfg.precision)?;
            let steps: usize = trajs.iter().map(|t| t.len()).sum();
            loss_sum += loss * steps as f64;
            step_sum += steps;
            let t = adam.t + 1;
            adam_update(&mut params.values, &grad, &mut adam, t, &cfg.adam)?;
        }
        let eval_sr = hooks.eval.as_mut().map(|f| f(&policy, &params));
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / step_sum as f64,
            wall_ms: started.elapsed().as_millis() as u64,
            eval_sr,
        };
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&log);
        }
        logs.push(log);
    }
    Ok((Checkpoint::new(&policy, tax, &params, adam, cfg.epochs, cfg.clone()), logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![0.3, -2.0, 5.0];
        let before = p.clone();
        let mut s = AdamState::new(3);
        adam_update(&mut p, &[0.0; 3], &mut s, 1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_sign() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.5, 0.1] {
            let mut p = vec![1.0];
            let mut s = AdamState::new(1);
            adam_update(&mut p, &[g], &mut s, 1, &cfg).unwrap();
            let expected = 1.0 - cfg.lr * g.signum();
            assert!((p[0] - expected).abs() <= cfg.lr * 1e-6, "g={g}: {}", p[0]);
        }
    }

    #[test]
    fn adam_minimizes_square() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut x = vec![1.0];
        let mut s = AdamState::new(1);
        let mut reached = None;
        for t in 1..=500 {
            let g = [2.0 * x[0]];
            adam_update(&mut x, &g, &mut s, t, &cfg).unwrap();
            if reached.is_none() && x[0].abs() < 1e-3 {
                reached = Some(t);
            }
        }
        assert!(reached.is_some(), "final x = {}", x[0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        let err = adam_update(&mut p, &[0.1, f64::NAN], &mut s, 1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteUpdate(1)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert!(matches!(adam_update(&mut p, &[0.1], &mut s, 1, &AdamConfig::default()), Err(TrainError::Shape)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.adam.beta1 = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_bytes_round_trip_and_corruption() {
        let tax = Taxonomy::desk_default();
        let policy = Policy::new(ArchConfig::default(), InputMode::Os, &tax, Granularity::Coarse).unwrap();
        let params = policy.init_params(1);
        let mut adam = AdamState::new(params.len());
        adam.m[3] = 0.25;
        adam.v[7] = 1e-9;
        adam.t = 12;
        let ck = Checkpoint::new(&policy, &tax, &params, adam, 2, TrainConfig::default());
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"SGNAVCKP");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 100]), Err(CheckpointError::Checksum)));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum)));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT...."), Err(CheckpointError::BadMagic)));

        let mut v2 = bytes[..bytes.len() - 8].to_vec();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        let mut h = Fnv1a::new();
        h.write(&v2);
        v2.extend_from_slice(&h.finish().to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version { found: 2, expected: 1 })));

        let other = Policy::new(
            ArchConfig {
                hidden_dim: 64,
                ..ArchConfig::default()
            },
            InputMode::Os,
            &tax,
            Granularity::Coarse,
        )
        .unwrap();
        assert!(matches!(back.check_compatible(&other), Err(CheckpointError::LayoutHash { .. })));
        let (p2, params2) = back.policy(&tax).unwrap();
        assert_eq!(p2.layout_hash(), policy.layout_hash());
        assert_eq!(params2.values, params.values);
    }
}
