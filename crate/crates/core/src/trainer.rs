//! Mini-batch training on the joint objective with per-epoch checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Catalog, Model};
use crate::responder::{draw_candidates, joint_loss, JointLossWeights, Sample};
use crate::tensor::{
    read_checkpoint, write_checkpoint, AdamW, AdamWConfig, Dtype, Gradients, Graph, LrSchedule, OptimizerState, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Negatives per recommendation.
    pub negatives: usize,
    pub weights: JointLossWeights,
    /// Gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 2,
            lr: 7e-4,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            negatives: 19,
            weights: JointLossWeights::default(),
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.negatives == 0 {
            return Err(Error::Config("at least one negative is required".into()));
        }
        Ok(())
    }
}

/// Mean loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub select: Option<f64>,
    pub rank: Option<f64>,
    pub lm: f64,
    pub total: f64,
    pub lr: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn clip(grads: &mut Gradients, max_norm: f64) {
    let n = grads.l2_norm();
    if n > max_norm {
        grads.scale(max_norm / n);
    }
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub seed: u64,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Items negatives are drawn from; the whole catalog when `None`.
    pub negative_pool: Option<Vec<crate::item_encoder::ItemId>>,
    /// Caller metadata stored with every checkpoint.
    pub run: serde_json::Value,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(
            &model.store,
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
            cfg.schedule,
        );
        Ok(Trainer {
            model,
            opt,
            cfg,
            seed,
            epoch: 0,
            negative_pool: None,
            run: serde_json::Value::Null,
        })
    }

    /// One pass over `samples` in a seed- and epoch-determined order.
    pub fn run_epoch(&mut self, samples: &[Sample], catalog: &Catalog) -> Result<Vec<StepLog>> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let ids = self.negative_pool.clone().unwrap_or_else(|| catalog.ids());
        let mut rng = epoch_rng(self.seed, self.epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut logs = Vec::with_capacity(order.len().div_ceil(self.cfg.batch_size));
        for batch in order.chunks(self.cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&self.model.store);
            let (mut sel, mut rnk, mut n_rec) = (0.0, 0.0, 0usize);
            let (mut lm, mut total) = (0.0, 0.0);
            for &i in batch {
                let s = &samples[i];
                let cands = draw_candidates(s, &ids, self.cfg.negatives, &mut rng)?;
                let mut g = Graph::new(&self.model.store);
                let (loss, v) = joint_loss(
                    &self.model,
                    &mut g,
                    s,
                    &cands,
                    catalog,
                    &self.cfg.weights,
                    Some(&mut rng),
                )?;
                if !v.total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss {} at step {}",
                        v.total, self.opt.state.step
                    )));
                }
                grads.add_assign(&g.backward(loss)?)?;
                if let (Some(a), Some(b)) = (v.select, v.rank) {
                    sel += a;
                    rnk += b;
                    n_rec += 1;
                }
                lm += v.lm;
                total += v.total;
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            if let Some(c) = self.cfg.clip_norm {
                clip(&mut grads, c);
            }
            let lr = self.opt.current_lr();
            self.opt.step(&mut self.model.store, &grads)?;
            let log = StepLog {
                epoch: self.epoch,
                step: self.opt.state.step,
                select: (n_rec > 0).then(|| sel / n_rec as f64),
                rank: (n_rec > 0).then(|| rnk / n_rec as f64),
                lm: lm / n,
                total: total / n,
                lr,
            };
            log::debug!("{log:?}");
            logs.push(log);
        }
        self.epoch += 1;
        Ok(logs)
    }

    /// Model parameters plus optimizer moments, step and epoch counter.
    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "epoch": self.epoch,
            "step": self.opt.state.step,
            "seed": self.seed,
            "train": self.cfg,
            "run": self.run,
        });
        let mut data = self.model.to_checkpoint(extra)?;
        for (id, name, _) in self.model.store.iter() {
            let i = id.index();
            data.tensors
                .push((format!("opt.m.{name}"), Dtype::F64, self.opt.state.m[i].clone()));
            data.tensors
                .push((format!("opt.v.{name}"), Dtype::F64, self.opt.state.v[i].clone()));
        }
        write_checkpoint(path, &data)
    }

    /// Restores a run saved by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let data = read_checkpoint(path)?;
        let model = Model::from_checkpoint(&data)?;
        let extra = &data.meta["extra"];
        let cfg: TrainConfig = serde_json::from_value(extra["train"].clone())
            .map_err(|e| Error::Format(format!("checkpoint has no training state: {e}")))?;
        let num = |k: &str| {
            extra[k]
                .as_u64()
                .ok_or_else(|| Error::Format(format!("checkpoint is missing `{k}`")))
        };
        let (epoch, step, seed) = (num("epoch")? as usize, num("step")?, num("seed")?);
        let mut m = Vec::with_capacity(model.store.len());
        let mut v = Vec::with_capacity(model.store.len());
        for (_, name, t) in model.store.iter() {
            let get = |kind: &str| -> Result<Tensor> {
                data.get(&format!("opt.{kind}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer state for {name}")))
            };
            let (mm, vv) = (get("m")?, get("v")?);
            if mm.shape() != t.shape() || vv.shape() != t.shape() {
                return Err(Error::Format(format!("optimizer state shape mismatch for {name}")));
            }
            m.push(mm);
            v.push(vv);
        }
        let opt = AdamW::with_state(
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
            cfg.schedule,
            OptimizerState { step, m, v },
        );
        Ok(Trainer {
            model,
            opt,
            cfg,
            seed,
            epoch,
            negative_pool: None,
            run: extra["run"].clone(),
        })
    }
}
