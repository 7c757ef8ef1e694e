//! The optimization loop.
//!
//! All randomness is a pure function of `(seed, epoch, position)`: the
//! epoch's shuffle comes from `(seed, epoch)` and each sample's crop and
//! flip from `(seed, epoch, position in epoch)`. A checkpoint therefore only
//! needs the step counters, the parameters and the Adam moments for a
//! resumed run to continue bit for bit.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, Section};
use crate::objective::{LossWeights, Objective, PerceptualConfig, SsimConfig};
use crate::params::{decode_container, encode_container};
use crate::rain::{patch_window, sample_patch, splitmix64, Dataset};
use crate::tensor::{Real, Tensor};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::schedule::Schedule;

const TRAINER_SECTION: &str = "trainer";
const ADAM_SECTION: &str = "adam";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    /// Square training crop; `None` trains on whole images (which must then
    /// share one size).
    pub patch: Option<usize>,
    pub hflip: bool,
    pub seed: u64,
    /// Also fixes the number of epochs (`schedule.total_epochs`).
    pub schedule: Schedule,
    /// Stop after this many optimization steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub perceptual: PerceptualConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; off unless set.
    pub grad_clip: Option<f64>,
    /// Save `epoch_NNNN.ckpt` every this many epochs; 0 saves only the final
    /// checkpoint.
    pub checkpoint_every_epochs: usize,
    /// Length of the recent-loss ring buffer kept in the train state.
    pub history: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 3,
            patch: None,
            hflip: true,
            seed: 0,
            schedule: Schedule::default(),
            max_steps: None,
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
            perceptual: PerceptualConfig::default(),
            adam: AdamConfig::default(),
            grad_clip: None,
            checkpoint_every_epochs: 0,
            history: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(config_err!("batch must be at least 1"));
        }
        if self.patch == Some(0) {
            return Err(config_err!("patch must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(config_err!("grad_clip must be positive"));
        }
        self.schedule.validate()?;
        self.weights.validate()?;
        self.ssim.validate()
    }
}

/// Counters that locate the trainer in its run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimization steps completed.
    pub step: u64,
    pub epoch: usize,
    /// Batches completed within `epoch`.
    pub batch_in_epoch: u64,
    pub recent_losses: VecDeque<f64>,
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_mse: Option<f64>,
    pub loss_ssim: Option<f64>,
    pub loss_perp: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct SavedTrainer {
    config: TrainConfig,
    state: TrainState,
    adam_step: u64,
    adam: AdamConfig,
}

pub struct Trainer<'d, T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    objective: Objective<T>,
    config: TrainConfig,
    data: &'d Dataset,
    state: TrainState,
    steps_per_epoch: u64,
    order: (usize, Vec<usize>),
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(0x5348_5546 ^ epoch as u64)));
    idx.shuffle(&mut rng);
    idx
}

fn sample_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(epoch as u64)) ^ position as u64)
}

impl<'d, T: Real> Trainer<'d, T> {
    pub fn new(model: Model<T>, config: TrainConfig, data: &'d Dataset) -> Result<Self> {
        let adam = AdamState::new(model.params.values(), config.adam);
        Self::assemble(model, adam, config, data, TrainState::default())
    }

    fn assemble(model: Model<T>, adam: AdamState<T>, config: TrainConfig, data: &'d Dataset, state: TrainState) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(config_err!("training set is empty"));
        }
        if data.len() < config.batch {
            return Err(config_err!("batch {} exceeds the {} available pairs", config.batch, data.len()));
        }
        let steps_per_epoch = (data.len() / config.batch) as u64;
        let objective = Objective::new(config.weights, config.ssim.clone(), config.perceptual.build()?)?;
        let order = (state.epoch, epoch_order(config.seed, state.epoch, data.len()));
        Ok(Trainer { model, adam, objective, config, data, state, steps_per_epoch, order })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path, data: &'d Dataset) -> Result<Self> {
        let ckpt: Checkpoint<T> = load_checkpoint(path)?;
        let meta = ckpt.section(TRAINER_SECTION).ok_or_else(|| Error::format(path, "no trainer state in checkpoint"))?;
        let saved: SavedTrainer = serde_json::from_slice(meta).map_err(|e| Error::format(path, e.to_string()))?;
        let moments = ckpt.section(ADAM_SECTION).ok_or_else(|| Error::format(path, "no optimizer state in checkpoint"))?;
        let mut adam = AdamState::new(ckpt.model.params.values(), saved.adam);
        adam.step = saved.adam_step;
        let mut entries = decode_container::<T>(moments, path)?.into_iter();
        for (slot, prefix) in [(&mut adam.m, "m."), (&mut adam.v, "v.")] {
            for (i, t) in slot.iter_mut().enumerate() {
                let e = entries.next().ok_or_else(|| Error::format(path, "truncated optimizer state"))?;
                let want = format!("{prefix}{}", ckpt.model.params.names()[i]);
                if e.name != want || e.value.shape() != t.shape() {
                    return Err(Error::format(path, format!("optimizer entry `{}` does not match `{want}`", e.name)));
                }
                *t = e.value;
            }
        }
        Self::assemble(ckpt.model, adam, saved.config, data, saved.state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names = self.model.params.names();
        let m_names: Vec<String> = names.iter().map(|n| format!("m.{n}")).collect();
        let v_names: Vec<String> = names.iter().map(|n| format!("v.{n}")).collect();
        let moments = encode_container(
            m_names
                .iter()
                .map(String::as_str)
                .zip(&self.adam.m)
                .chain(v_names.iter().map(String::as_str).zip(&self.adam.v)),
        );
        let meta = SavedTrainer {
            config: self.config.clone(),
            state: self.state.clone(),
            adam_step: self.adam.step,
            adam: self.adam.config,
        };
        let sections = [
            Section { name: TRAINER_SECTION.into(), bytes: serde_json::to_vec(&meta).expect("trainer state serializes") },
            Section { name: ADAM_SECTION.into(), bytes: moments },
        ];
        save_checkpoint(path, &self.model, &sections)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        let planned = self.config.schedule.total_steps(self.steps_per_epoch);
        self.config.max_steps.map_or(planned, |m| m.min(planned))
    }

    /// Moves the stopping point, e.g. to continue a resumed run further than
    /// the run that wrote the checkpoint.
    pub fn set_max_steps(&mut self, max_steps: Option<u64>) {
        self.config.max_steps = max_steps;
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn batch(&mut self) -> Result<(Tensor<T>, Tensor<T>)> {
        let (epoch, b) = (self.state.epoch, self.state.batch_in_epoch as usize);
        if self.order.0 != epoch {
            self.order = (epoch, epoch_order(self.config.seed, epoch, self.data.len()));
        }
        let mut rainy = Vec::with_capacity(self.config.batch);
        let mut clean = Vec::with_capacity(self.config.batch);
        for j in 0..self.config.batch {
            let pos = b * self.config.batch + j;
            let pair = &self.data.pairs[self.order.1[pos]];
            let seed = sample_seed(self.config.seed, epoch, pos);
            let (r, c) = match self.config.patch {
                Some(patch) => sample_patch(&pair.rainy, &pair.clean, patch, seed, self.config.hflip)?,
                None => {
                    let (h, w) = (pair.rainy.height(), pair.rainy.width());
                    if self.config.hflip && patch_window(h, w, h.min(w), seed, true)?.flip {
                        (pair.rainy.flip_horizontal(), pair.clean.flip_horizontal())
                    } else {
                        (pair.rainy.clone(), pair.clean.clone())
                    }
                }
            };
            rainy.push(r.to_tensor());
            clean.push(c.to_tensor());
        }
        Ok((Tensor::cat_batch(&rainy)?, Tensor::cat_batch(&clean)?))
    }

    /// Runs one optimization step and returns its trace record.
    pub fn step(&mut self) -> Result<TraceRecord> {
        if self.is_finished() {
            return Err(config_err!("training already finished after {} steps", self.state.step));
        }
        let step = self.state.step;
        let lr = self.config.schedule.lr_at(step, self.steps_per_epoch);
        let (x, target) = self.batch()?;
        let (pred, cache) = self.model.forward_train(&x)?;
        let loss = self.objective.evaluate(&pred, &target)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("loss = {} (lr {lr:e})", loss.total) });
        }
        self.model.params.zero_grads();
        self.model.backward(&cache, &loss.grad)?;
        if !self.model.params.grads_finite() {
            let bad = self
                .model
                .params
                .ids()
                .find(|&id| !self.model.params.grad(id).is_finite())
                .map(|id| self.model.params.name(id).to_owned())
                .unwrap_or_default();
            return Err(Error::NonFinite { step, detail: format!("gradient of `{bad}` is not finite") });
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = self
                .model
                .params
                .grads()
                .iter()
                .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = T::lit(clip / norm);
                for id in self.model.params.ids().collect::<Vec<_>>() {
                    self.model.params.grad_mut(id).data_mut().iter_mut().for_each(|g| *g = *g * s);
                }
            }
        }
        let (values, grads) = self.model.params.split_mut();
        adam_step(values, grads, &mut self.adam, lr)?;

        let record = TraceRecord {
            step,
            epoch: self.state.epoch,
            lr,
            loss_total: loss.total,
            loss_mse: loss.mse,
            loss_ssim: loss.ssim,
            loss_perp: loss.perp,
        };
        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        if self.state.batch_in_epoch == self.steps_per_epoch {
            self.state.batch_in_epoch = 0;
            self.state.epoch += 1;
        }
        if self.config.history > 0 {
            if self.state.recent_losses.len() == self.config.history {
                self.state.recent_losses.pop_front();
            }
            self.state.recent_losses.push_back(loss.total);
        }
        Ok(record)
    }

    /// Runs up to `n` steps (fewer if training finishes first).
    pub fn run_steps(&mut self, n: u64) -> Result<Vec<TraceRecord>> {
        let mut out = Vec::new();
        while out.len() as u64 != n && !self.is_finished() {
            out.push(self.step()?);
        }
        Ok(out)
    }

    /// Trains to completion. With an output directory, appends every record
    /// to `trace.jsonl`, writes periodic `epoch_NNNN.ckpt` files and finally
    /// `last.ckpt`. `on_step` sees every record as it is produced.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_step: impl FnMut(&TraceRecord)) -> Result<Vec<TraceRecord>> {
        let mut trace = match out_dir {
            Some(dir) => Some(TraceWriter::open(&dir.join("trace.jsonl"))?),
            None => None,
        };
        let mut records = Vec::new();
        while !self.is_finished() {
            let epoch_before = self.state.epoch;
            let rec = self.step()?;
            if let Some(t) = trace.as_mut() {
                t.write(&rec)?;
            }
            on_step(&rec);
            records.push(rec);
            let every = self.config.checkpoint_every_epochs;
            if let Some(dir) = out_dir {
                if every > 0 && self.state.epoch != epoch_before && self.state.epoch % every == 0 {
                    if let Some(t) = trace.as_mut() {
                        t.flush()?;
                    }
                    self.save(&dir.join(format!("epoch_{:04}.ckpt", self.state.epoch)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            if let Some(t) = trace.as_mut() {
                t.flush()?;
            }
            self.save(&dir.join("last.ckpt"))?;
        }
        Ok(records)
    }
}

/// Append-only JSON-lines loss trace.
pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(TraceWriter { path: path.to_owned(), out: BufWriter::new(file) })
    }

    pub fn write(&mut self, rec: &TraceRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("trace record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
