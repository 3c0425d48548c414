//! Deterministic training loop: per-image stage draws packed into one
//! mixed-resolution batch, AdamW, and an EMA shadow of the weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pack, Backbone, ModelConfig, PackItem};
use crate::data::{Checkpoint, Dataset, RngState};
use crate::error::{Error, Result};
use crate::flow::{sample_training_example, TrainingExample};
use crate::numerics::{AdamW, AdamWConfig, ParamSet};
use crate::schedule::StageSchedule;

/// Optimisation hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Images per step, taken cyclically from the dataset.
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub ema_decay: f64,
    /// Probability of replacing the class label with the null class.
    pub p_drop: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_steps: 2000,
            lr: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            ema_decay: 0.995,
            p_drop: 0.1,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad("p_drop must be in [0, 1]");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Outcome of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub loss: f64,
    /// Examples drawn per stage, indexed by stage.
    pub stage_counts: Vec<usize>,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,loss,stage_mix";

    /// `step,loss,stage_mix` with the mix written as `n0|n1|...`.
    pub fn csv_line(&self) -> String {
        let mix: Vec<String> = self.stage_counts.iter().map(usize::to_string).collect();
        format!("{},{:.17e},{}", self.step, self.loss, mix.join("|"))
    }
}

pub struct Trainer {
    backbone: Backbone,
    schedule: StageSchedule,
    config: TrainConfig,
    params: ParamSet,
    ema: ParamSet,
    optimizer: AdamW,
    step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh parameters drawn from stream 0 of `seed`; example draws use stream 1.
    pub fn new(model: ModelConfig, schedule: StageSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_compat(&model, &schedule)?;
        let backbone = Backbone::new(model)?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let params = backbone.init_params(&mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            optimizer: AdamW::new(config.optimizer(), &params),
            ema: params.clone(),
            backbone,
            schedule,
            config,
            params,
            step: 0,
            rng,
        })
    }

    /// Continues from a checkpoint; optimisation settings come from `config`.
    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_compat(&ck.model, &ck.schedule)?;
        let backbone = Backbone::new(ck.model)?;
        backbone.validate_params(&ck.params)?;
        let mut optimizer = ck.optimizer;
        optimizer.config = config.optimizer();
        Ok(Self {
            backbone,
            schedule: ck.schedule,
            config,
            params: ck.params,
            ema: ck.ema,
            optimizer,
            step: ck.step,
            rng: ck.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: *self.backbone.config(),
            schedule: self.schedule.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            ema: self.ema.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn schedule(&self) -> &StageSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn ema(&self) -> &ParamSet {
        &self.ema
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Indices of the dataset items used by the next step.
    pub fn next_indices(&self, dataset_len: usize) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        (0..b).map(|j| ((self.step * b + j) % dataset_len as u64) as usize).collect()
    }

    /// One optimisation step. Parameters are untouched when the loss or a gradient is non-finite.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepReport> {
        let examples = self.draw_examples(data)?;
        self.step_on(&examples)
    }

    /// Draws the next batch: one (stage, τ, noise, dropout) sample per selected image.
    pub fn draw_examples(&mut self, data: &Dataset) -> Result<Vec<TrainingExample>> {
        if data.is_empty() {
            return Err(Error::invalid("train: empty dataset"));
        }
        let model = self.backbone.config();
        let target = self.schedule.target_resolution();
        if data.dims() != Some((model.channels, target, target)) {
            return Err(Error::invalid(format!(
                "train: dataset images are {:?}, model expects ({}, {target}, {target})",
                data.dims(),
                model.channels
            )));
        }
        if let Some(&l) = data.labels().iter().find(|&&l| l >= model.num_classes) {
            return Err(Error::invalid(format!(
                "train: label {l} exceeds num_classes {}",
                model.num_classes
            )));
        }
        self.next_indices(data.len())
            .into_iter()
            .map(|i| {
                sample_training_example(
                    &data.images()[i],
                    data.labels()[i],
                    &self.schedule,
                    self.config.p_drop,
                    &mut self.rng,
                )
            })
            .collect()
    }

    /// Packs `examples`, then applies one AdamW update and the EMA update.
    pub fn step_on(&mut self, examples: &[TrainingExample]) -> Result<StepReport> {
        let mut stage_counts = vec![0; self.schedule.stages()];
        for ex in examples {
            *stage_counts
                .get_mut(ex.stage)
                .ok_or_else(|| Error::Schedule(format!("example stage {} out of range", ex.stage)))? += 1;
        }
        let items: Vec<PackItem> = examples
            .iter()
            .map(|e| PackItem {
                image: &e.x_t,
                t: e.t,
                class: e.class_label,
            })
            .collect();
        let batch = pack(&items, self.backbone.config().patch_size)?;
        let targets = batch.pack_images(&examples.iter().map(|e| &e.v_target).collect::<Vec<_>>())?;
        let step = self.step + 1;
        let (loss, grads) = self
            .backbone
            .loss_and_grads(&self.params, &batch, &targets)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                other => other,
            })?;
        self.optimizer.update(&mut self.params, &grads)?;
        self.ema.ema_update(&self.params, self.config.ema_decay)?;
        self.step = step;
        Ok(StepReport {
            step,
            loss,
            stage_counts,
        })
    }
}

fn check_compat(model: &ModelConfig, schedule: &StageSchedule) -> Result<()> {
    if model.patch_size != schedule.patch_size() {
        return Err(Error::Config(format!(
            "model patch size {} differs from schedule patch size {}",
            model.patch_size,
            schedule.patch_size()
        )));
    }
    if schedule.target_resolution() > model.max_resolution {
        return Err(Error::Config(format!(
            "target resolution {} exceeds model max_resolution {}",
            schedule.target_resolution(),
            model.max_resolution
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes_dataset;

    fn setup() -> (ModelConfig, StageSchedule, TrainConfig, Dataset) {
        let model = ModelConfig {
            hidden_dim: 16,
            depth: 1,
            heads: 2,
            patch_size: 2,
            num_classes: 4,
            max_resolution: 16,
            freq_dim: 8,
            ..ModelConfig::default()
        };
        let sched = StageSchedule::new(2, 16, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 3,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        (model, sched, cfg, gen_shapes_dataset(4, 16, 4, 3).unwrap())
    }

    #[test]
    fn batches_cycle_through_dataset() {
        let (m, s, c, data) = setup();
        let mut tr = Trainer::new(m, s, c).unwrap();
        assert_eq!(tr.next_indices(4), vec![0, 1, 2]);
        tr.train_step(&data).unwrap();
        assert_eq!(tr.next_indices(4), vec![3, 0, 1]);
    }

    #[test]
    fn step_reports_mix_and_csv() {
        let (m, s, c, data) = setup();
        let mut tr = Trainer::new(m, s, c).unwrap();
        let r = tr.train_step(&data).unwrap();
        assert_eq!(r.step, 1);
        assert_eq!(r.stage_counts.iter().sum::<usize>(), 3);
        let line = r.csv_line();
        assert!(line.starts_with("1,"));
        assert_eq!(line.split(',').count(), 3);
        assert!(line.rsplit(',').next().unwrap().contains('|'));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (m, s, c, data) = setup();
        let run = || {
            let mut tr = Trainer::new(m, s.clone(), c).unwrap();
            (0..3).map(|_| tr.train_step(&data).unwrap().loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let (m, s, c, _) = setup();
        let mut tr = Trainer::new(m, s, c).unwrap();
        let wrong = gen_shapes_dataset(2, 32, 4, 0).unwrap();
        assert!(tr.train_step(&wrong).is_err());
        assert_eq!(tr.step(), 0);
    }
}
