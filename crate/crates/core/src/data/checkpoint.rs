//! PXFC: model config, schedule, named parameter records, optimizer state,
//! EMA shadow, training step and rng position.
//!
//! Parameter data is written as 64-bit floats so a resumed run continues
//! bit-for-bit from where it stopped.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::codec::{Reader, Writer};
use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, ParamSet, Tensor};
use crate::schedule::StageSchedule;

const MAGIC: &[u8; 4] = b"PXFC";
const VERSION: u32 = 1;

/// Position of a ChaCha8 generator, enough to rebuild it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: StageSchedule,
    pub params: ParamSet,
    pub optimizer: AdamW,
    pub ema: ParamSet,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    /// Errors unless the stored configuration equals the expected one.
    pub fn ensure_matches(&self, model: &ModelConfig, schedule: &StageSchedule) -> Result<()> {
        if &self.model != model {
            return Err(Error::Config(format!(
                "checkpoint model config {:?} does not match requested {:?}",
                self.model, model
            )));
        }
        if &self.schedule != schedule {
            return Err(Error::Config(format!(
                "checkpoint schedule (S={}, target={}, patch={}) does not match requested (S={}, target={}, patch={})",
                self.schedule.stages(),
                self.schedule.target_resolution(),
                self.schedule.patch_size(),
                schedule.stages(),
                schedule.target_resolution(),
                schedule.patch_size()
            )));
        }
        Ok(())
    }
}

fn write_model(w: &mut Writer, c: &ModelConfig) {
    for v in [
        c.hidden_dim,
        c.depth,
        c.heads,
        c.patch_size,
        c.channels,
        c.num_classes,
        c.max_resolution,
        c.mlp_ratio,
        c.freq_dim,
    ] {
        w.usize(v);
    }
}

fn read_model(r: &mut Reader) -> Result<ModelConfig> {
    let mut f = || r.usize("model config");
    let c = ModelConfig {
        hidden_dim: f()?,
        depth: f()?,
        heads: f()?,
        patch_size: f()?,
        channels: f()?,
        num_classes: f()?,
        max_resolution: f()?,
        mlp_ratio: f()?,
        freq_dim: f()?,
    };
    c.validate()?;
    Ok(c)
}

fn write_params(w: &mut Writer, p: &ParamSet) {
    w.u32(p.len() as u32);
    for (name, t) in p.iter() {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.usize(d);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
}

/// Reads one parameter group, checking names and shapes against the model layout.
fn read_params(r: &mut Reader, layout: &[(String, Vec<usize>)], group: &str) -> Result<ParamSet> {
    let n = r.u32("parameter count")? as usize;
    if n != layout.len() {
        return Err(Error::Format(format!(
            "{group}: {n} parameter records, model expects {}",
            layout.len()
        )));
    }
    let mut out = ParamSet::new();
    for (exp_name, exp_shape) in layout {
        let name = r.str("parameter name")?;
        if &name != exp_name {
            return Err(Error::Format(format!("{group}: found parameter {name}, expected {exp_name}")));
        }
        let ndim = r.u32("parameter rank")? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("{group}: parameter {name} has rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| r.usize("parameter shape")).collect::<Result<Vec<_>>>()?;
        if &shape != exp_shape {
            return Err(Error::ParamShape {
                name,
                expected: exp_shape.clone(),
                found: shape,
            });
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "parameter data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    write_model(&mut w, &ck.model);
    w.usize(ck.schedule.stages());
    w.usize(ck.schedule.target_resolution());
    w.usize(ck.schedule.patch_size());

    let oc = &ck.optimizer.config;
    for v in [oc.lr, oc.beta1, oc.beta2, oc.eps, oc.weight_decay] {
        w.f64(v);
    }
    w.u64(ck.optimizer.step_count());
    w.u64(ck.step);
    w.bytes(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.u128(ck.rng.word_pos);

    write_params(&mut w, &ck.params);
    write_params(&mut w, ck.optimizer.first_moments());
    write_params(&mut w, ck.optimizer.second_moments());
    write_params(&mut w, &ck.ema);
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let model = read_model(&mut r)?;
    let stages = r.usize("schedule")?;
    let target = r.usize("schedule")?;
    let patch = r.usize("schedule")?;
    let schedule = StageSchedule::new(stages, target, patch)?;
    if patch != model.patch_size {
        return Err(Error::Config(format!(
            "checkpoint schedule patch size {patch} differs from model patch size {}",
            model.patch_size
        )));
    }

    let mut f = || r.f64("optimizer config");
    let oc = AdamWConfig {
        lr: f()?,
        beta1: f()?,
        beta2: f()?,
        eps: f()?,
        weight_decay: f()?,
    };
    let opt_step = r.u64("optimizer step")?;
    let step = r.u64("training step")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let word_pos = r.u128("rng position")?;

    let layout = Backbone::new(model)?.param_shapes();
    let params = read_params(&mut r, &layout, "params")?;
    let m = read_params(&mut r, &layout, "first moments")?;
    let v = read_params(&mut r, &layout, "second moments")?;
    let ema = read_params(&mut r, &layout, "ema")?;
    r.finish()?;

    Ok(Checkpoint {
        model,
        schedule,
        params,
        optimizer: AdamW::from_state(oc, opt_step, m, v)?,
        ema,
        step,
        rng: RngState { seed, stream, word_pos },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
