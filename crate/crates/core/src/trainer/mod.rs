//! Pre-training optimization loop: AdamW with decoupled weight decay, cosine
//! schedule with linear warmup, global-norm gradient clipping, deterministic
//! shuffled epochs, and bit-exact checkpointing.
//!
//! Every stochastic choice derives from (seed, step, scene id), so resuming
//! from a checkpoint reproduces the remaining trace bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::codec::Vocabulary;
use crate::model::MQFormerConfig;
use crate::objectives::{encode_scene, total_loss, EncodedScene, LossBreakdown, ObjectiveConfig};
use crate::params::{GradStore, ParamStore};
use crate::rng::{mix, rng_for};
use crate::scene::{detection_seed, AblationFlags, Encoder, Scene};

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("NaN gradient in parameter {0}")]
    NaNGradient(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint magic (expected MQFC)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            warmup_ratio: 0.15,
            total_steps: 500,
            batch_size: 16,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(TrainError::BadConfig(format!("warmup_ratio {} not in (0, 1)", self.warmup_ratio)));
        }
        if self.peak_lr <= 0.0 {
            return Err(TrainError::BadConfig(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("total_steps and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to the peak over `round(warmup_ratio * total_steps)` steps,
/// then cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, config: &TrainConfig) -> f64 {
    let total = config.total_steps;
    let w = (config.warmup_ratio * total as f64).round() as usize;
    if step >= total {
        return 0.0;
    }
    if step < w {
        return config.peak_lr * step as f64 / w as f64;
    }
    let progress = (step - w) as f64 / (total - w) as f64;
    config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment estimates, stepped together with the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

/// Weight decay is decoupled and skipped for biases, layer-norm gains and
/// the contrastive temperature.
fn no_decay(name: &str) -> bool {
    name == "itc.temperature"
        || [".gain", ".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".b"]
            .iter()
            .any(|s| name.ends_with(s))
}

/// One decoupled-weight-decay update over every parameter with a gradient.
/// Aborts naming the parameter if its gradient contains NaN.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let names: Vec<String> = grads.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let g = grads.get(&name).unwrap();
        if g.iter().any(|v| v.is_nan()) {
            return Err(TrainError::NaNGradient(name));
        }
        let wd = if no_decay(&name) { 0.0 } else { config.weight_decay };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let data = &mut params.get_mut(&name).data;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for i in 0..g.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * (m_hat / (v_hat.sqrt() + config.eps) + wd * data[i]);
        }
    }
    Ok(())
}

/// Scales all gradients so the global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_gradients(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// The learnable contrastive temperature is projected back into its range
/// after each step.
pub fn clamp_temperature(params: &mut ParamStore) {
    if params.contains("itc.temperature") {
        let t = &mut params.get_mut("itc.temperature").data[0];
        *t = t.clamp(0.001, 1.0);
    }
}

/// One loss-trace record; the tab-separated rendering is the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLine {
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
}

impl TraceLine {
    pub fn render(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, l.l_itc, l.l_itm, l.l_icg, l.l_msp, l.total, self.lr
        )
    }
}

/// Mutable training state: parameters, optimizer moments, step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn fresh(params: ParamStore) -> TrainState {
        TrainState { params, adam: AdamState::default(), step: 0 }
    }
}

pub struct Trainer<'a> {
    pub tconfig: &'a TrainConfig,
    pub mconfig: &'a MQFormerConfig,
    pub oconfig: &'a ObjectiveConfig,
    pub vocab: &'a Vocabulary,
    pub encoder: &'a Encoder,
    pub flags: AblationFlags,
    /// Embedded in every checkpoint this run writes.
    pub config_snapshot: String,
}

impl Trainer<'_> {
    /// Scene index for each slot of each step: deterministic shuffled epochs.
    fn item_for_slot(&self, order_cache: &mut Vec<Vec<usize>>, n: usize, global: usize) -> usize {
        let epoch = global / n;
        while order_cache.len() <= epoch {
            let e = order_cache.len() as u64;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_for(&[self.tconfig.seed, 0xe90c, e]));
            order_cache.push(order);
        }
        order_cache[epoch][global % n]
    }

    /// Runs from `state.step` to `total_steps`, or to `until` when given
    /// (the schedule stays pinned to `total_steps`, so an early stop plus a
    /// resume reproduces an uninterrupted run). The per-step callback sees
    /// every trace line; periodic checkpoints honor `checkpoint_every`.
    /// On an optimizer abort a checkpoint is still written.
    pub fn train(
        &self,
        scenes: &[Scene],
        mut state: TrainState,
        until: Option<u64>,
        checkpoint_path: Option<&Path>,
        mut on_step: impl FnMut(&TraceLine),
    ) -> Result<(TrainState, Vec<TraceLine>), TrainError> {
        self.tconfig.validate()?;
        if scenes.is_empty() {
            return Err(TrainError::BadConfig("dataset is empty".into()));
        }
        let stop = until.unwrap_or(self.tconfig.total_steps as u64).min(self.tconfig.total_steps as u64);

        use rayon::prelude::*;
        let encoded: Vec<EncodedScene> = scenes
            .par_iter()
            .map(|s| {
                encode_scene(self.vocab, self.encoder, s, self.flags, detection_seed(self.tconfig.seed, &s.id))
            })
            .collect();

        let mut order_cache: Vec<Vec<usize>> = Vec::new();
        let mut trace = Vec::new();
        let b = self.tconfig.batch_size;
        while state.step < stop {
            let step = state.step as usize;
            let batch: Vec<EncodedScene> = (0..b)
                .map(|j| encoded[self.item_for_slot(&mut order_cache, encoded.len(), step * b + j)].clone())
                .collect();

            let step_seed = mix(&[self.tconfig.seed, 0x57e9, step as u64]);
            let (losses, mut grads) = total_loss(
                &state.params,
                self.mconfig,
                self.oconfig,
                self.vocab,
                &batch,
                step_seed,
                &|_| false,
                true,
            );

            let lr = cosine_lr(step, self.tconfig);
            // Clip radius zero means freeze: skip the update entirely.
            if self.tconfig.grad_clip > 0.0 {
                clip_gradients(&mut grads, self.tconfig.grad_clip);
                if let Err(e) = adamw_step(&mut state.params, &grads, &mut state.adam, lr, self.tconfig) {
                    if let Some(path) = checkpoint_path {
                        let _ = save_checkpoint(path, &self.to_checkpoint(&state));
                    }
                    return Err(e);
                }
                clamp_temperature(&mut state.params);
            }

            state.step += 1;
            let line = TraceLine { step: state.step, losses, lr };
            on_step(&line);
            trace.push(line);

            if let Some(path) = checkpoint_path {
                let every = self.tconfig.checkpoint_every;
                if every > 0 && (state.step as usize) % every == 0 {
                    save_checkpoint(path, &self.to_checkpoint(&state))?;
                }
            }
        }

        if let Some(path) = checkpoint_path {
            save_checkpoint(path, &self.to_checkpoint(&state))?;
        }
        Ok((state, trace))
    }

    pub fn to_checkpoint(&self, state: &TrainState) -> Checkpoint {
        Checkpoint {
            version: checkpoint::FORMAT_VERSION,
            config_text: self.config_snapshot.clone(),
            params: state.params.clone(),
            adam: state.adam.clone(),
            step: state.step,
            rng_state: rng_state_bytes(self.tconfig.seed, state.step),
        }
    }
}

/// Documents the position of the deterministic seed stream inside the
/// checkpoint; resuming only needs (seed, step), both stored.
pub fn rng_state_bytes(seed: u64, step: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, chunk) in out.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&mix(&[seed, step, i as u64]).to_le_bytes());
    }
    out
}
