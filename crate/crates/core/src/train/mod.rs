//! Run configuration, the optimizer, the training loop and checkpoints.

mod adam;
mod checkpoint;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Annotation, ObjectFeatureClip};
use crate::detector::{Thresholds, DEFAULT_ANCHOR_SCALES};
use crate::error::UaanError;
use crate::model::{clip_loss, LossValues, ModelConfig, UaanModel};
use crate::objectives::{EvidenceFn, LossWeights};
use crate::params::Parameters;
use crate::tensor::{Tape, Tensor};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;

/// Everything that determines a training run. Unknown keys are rejected so a
/// typo in a config file cannot silently fall back to a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Input feature width of the clips.
    pub feature_dim: usize,
    /// Embedding width `d`.
    pub width: usize,
    /// Number of ID classes `K`.
    pub classes: usize,
    pub evidence_fn: EvidenceFn,
    pub anchor_scales: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub thresholds: Thresholds,
    /// Manifest paths; relative paths resolve against the config file.
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_dim: 32,
            width: 64,
            classes: 3,
            evidence_fn: EvidenceFn::Softplus,
            anchor_scales: DEFAULT_ANCHOR_SCALES.to_vec(),
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 50,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            thresholds: Thresholds::default(),
            train_manifest: None,
            test_manifest: None,
        }
    }
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`, and resolves the
    /// manifest paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, UaanError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| UaanError::Contract(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_manifest, &mut cfg.test_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UaanError> {
        let bad = |m: String| Err(UaanError::Contract(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.width == 0 || self.feature_dim == 0 || self.classes == 0 {
            return bad(format!(
                "width {}, feature_dim {} and classes {} must be positive",
                self.width, self.feature_dim, self.classes
            ));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || self.adam.eps <= 0.0 {
            return bad(format!("bad adam settings {:?}", self.adam));
        }
        self.loss.validate().map_err(UaanError::Contract)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            width: self.width,
            classes: self.classes,
            evidence_fn: self.evidence_fn,
            anchor_scales: self.anchor_scales.clone(),
        }
    }

    /// SHA-256 of the settings that shape the trajectory. The epoch budget
    /// and data paths are left out so a run can be resumed for more epochs
    /// or from a moved dataset.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.epochs = 0;
        c.train_manifest = None;
        c.test_manifest = None;
        let json = serde_json::to_vec(&c).expect("config serialises");
        Sha256::digest(json).into()
    }
}

/// Mean loss components over the clips of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_ABS")]
    pub abs: f64,
    #[serde(rename = "L_Beta")]
    pub beta: f64,
    #[serde(rename = "L_reg")]
    pub reg: f64,
    #[serde(rename = "L_DIoU")]
    pub diou: f64,
    #[serde(rename = "L_final")]
    pub final_loss: f64,
    #[serde(rename = "L_actionness")]
    pub actionness: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

impl EpochLog {
    fn from_sum(epoch: usize, s: &LossValues, n: usize) -> Self {
        let n = n as f64;
        Self {
            epoch,
            abs: s.abs / n,
            beta: s.beta / n,
            reg: s.reg / n,
            diou: s.diou / n,
            final_loss: s.final_loss / n,
            actionness: s.actionness / n,
            total: s.total / n,
        }
    }
}

/// CSV text of a loss log, header included.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row).expect("log row serialises");
    }
    if log.is_empty() {
        w.write_record([
            "epoch",
            "L_ABS",
            "L_Beta",
            "L_reg",
            "L_DIoU",
            "L_final",
            "L_actionness",
            "L_total",
        ])
        .expect("header writes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

fn add_values(acc: &mut LossValues, v: &LossValues) {
    acc.abs += v.abs;
    acc.beta += v.beta;
    acc.reg += v.reg;
    acc.diou += v.diou;
    acc.actionness += v.actionness;
    acc.final_loss += v.final_loss;
    acc.total += v.total;
}

fn non_finite_value(v: &LossValues) -> Option<&'static str> {
    [
        ("L_ABS", v.abs),
        ("L_Beta", v.beta),
        ("L_reg", v.reg),
        ("L_DIoU", v.diou),
        ("L_actionness", v.actionness),
        ("L_final", v.final_loss),
    ]
    .into_iter()
    .find(|(_, x)| !x.is_finite())
    .map(|(name, _)| name)
}

/// Loss values and per-parameter gradients of the training objective on one
/// clip.
pub fn clip_gradients(
    model: &UaanModel,
    clip: &ObjectFeatureClip,
    ann: &Annotation,
    weights: &LossWeights,
) -> Result<(LossValues, Vec<Tensor>), UaanError> {
    let mut tape = Tape::new();
    let losses = clip_loss(&mut tape, model, clip, ann, weights)?;
    let values = losses.values(&tape);
    let grads = tape.backward(losses.total)?;
    let grads = model.params().iter().map(|p| p.grad(&tape, &grads)).collect();
    Ok((values, grads))
}

/// Training state that a checkpoint captures.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: UaanModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(config: &RunConfig) -> Result<Self, UaanError> {
        let model = UaanModel::new(config.model_config(), config.seed)?;
        let adam = AdamState::zeros_like(&model);
        Ok(Self { model, adam, epoch: 0 })
    }
}

fn check_data(config: &RunConfig, clips: &[(ObjectFeatureClip, Annotation)]) -> Result<(), UaanError> {
    if clips.is_empty() {
        return Err(UaanError::Contract("no training clips".into()));
    }
    for (clip, ann) in clips {
        if clip.feature_dim != config.feature_dim {
            return Err(UaanError::Contract(format!(
                "{}: feature width {} but config says {}",
                clip.video_id, clip.feature_dim, config.feature_dim
            )));
        }
        if ann.has_ood() {
            return Err(UaanError::Contract(format!(
                "{}: training data must not contain OOD segments",
                clip.video_id
            )));
        }
        ann.validate(clip.frames, config.classes)
            .map_err(|m| UaanError::Contract(format!("{}: {m}", clip.video_id)))?;
    }
    Ok(())
}

/// Trains until `config.epochs` epochs are complete, starting from `state`
/// (a fresh model or a resumed checkpoint). Each epoch visits the clips in a
/// shuffle seeded by `(seed, epoch)`; per-clip gradients are computed in
/// parallel and summed in batch order, so results do not depend on the
/// thread count. `on_epoch` sees each log row as it is produced.
pub fn train_from(
    config: &RunConfig,
    clips: &[(ObjectFeatureClip, Annotation)],
    mut state: TrainState,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainState, Vec<EpochLog>), UaanError> {
    config.validate()?;
    check_data(config, clips)?;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut sums = LossValues::default();
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| clip_gradients(&state.model, &clips[i].0, &clips[i].1, &config.loss))
                .collect();
            let mut grads: Option<Vec<Tensor>> = None;
            for (&i, r) in batch.iter().zip(results) {
                let wrap = |detail: String| UaanError::NonFiniteLoss { epoch, step, detail };
                let (values, g) = r.map_err(|e| match e {
                    UaanError::Tensor(t) => wrap(format!("clip {}: {t}", clips[i].0.video_id)),
                    other => other,
                })?;
                if let Some(name) = non_finite_value(&values) {
                    return Err(wrap(format!("clip {}: {name} is not finite", clips[i].0.video_id)));
                }
                add_values(&mut sums, &values);
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("batches are non-empty");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            let params = state.model.params();
            if let Some((p, _)) = params.iter().zip(&grads).find(|(_, g)| !g.is_finite()) {
                return Err(UaanError::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("gradient of {} is not finite", p.name()),
                });
            }
            adam_step(&mut state.model, &grads, &mut state.adam, config.learning_rate, &config.adam)?;
        }
        state.epoch = epoch;
        let row = EpochLog::from_sum(epoch, &sums, clips.len());
        on_epoch(&row);
        log.push(row);
    }
    Ok((state, log))
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(
    config: &RunConfig,
    clips: &[(ObjectFeatureClip, Annotation)],
) -> Result<(Checkpoint, Vec<EpochLog>), UaanError> {
    let (state, log) = train_from(config, clips, TrainState::fresh(config)?, |_| {})?;
    Ok((Checkpoint::new(config.clone(), state), log))
}
