//! The velocity transformer: patch embedding, adaLN-Zero blocks with two-axis
//! rotary self-attention over packed sequences, and a linear patch head.

use std::rc::Rc;

use rand::Rng;

use super::config::ModelConfig;
use super::pack::PackedBatch;
use super::rope::rope_rotation;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{ParamSet, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Zeros,
    /// Xavier-uniform over `[fan_in, fan_out]`.
    Xavier,
    Normal(u32),
}

#[derive(Clone, Debug)]
struct BlockLayout {
    ada_w: usize,
    ada_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<(String, Vec<usize>, Init)>,
    patch_w: usize,
    patch_b: usize,
    time_mlp: [usize; 4],
    res_mlp: [usize; 4],
    class_table: usize,
    blocks: Vec<BlockLayout>,
    final_ada_w: usize,
    final_ada_b: usize,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push((name, shape, init));
            specs.len() - 1
        };
        let d = cfg.hidden_dim;
        // std 0.02 expressed in thousandths so Init stays Eq.
        let small = Init::Normal(20);

        let patch_w = add("patch.w".into(), vec![cfg.patch_dim(), d], Init::Xavier);
        let patch_b = add("patch.b".into(), vec![d], Init::Zeros);
        let mut mlp = |prefix: &str| {
            [
                add(format!("{prefix}.fc1.w"), vec![cfg.freq_dim, d], small),
                add(format!("{prefix}.fc1.b"), vec![d], Init::Zeros),
                add(format!("{prefix}.fc2.w"), vec![d, d], small),
                add(format!("{prefix}.fc2.b"), vec![d], Init::Zeros),
            ]
        };
        let time_mlp = mlp("time");
        let res_mlp = mlp("resolution");
        let class_table = add("class.table".into(), vec![cfg.num_classes + 1, d], small);
        let blocks = (0..cfg.depth)
            .map(|i| BlockLayout {
                ada_w: add(format!("blocks.{i}.ada.w"), vec![d, 6 * d], Init::Zeros),
                ada_b: add(format!("blocks.{i}.ada.b"), vec![6 * d], Init::Zeros),
                qkv_w: add(format!("blocks.{i}.attn.qkv.w"), vec![d, 3 * d], Init::Xavier),
                qkv_b: add(format!("blocks.{i}.attn.qkv.b"), vec![3 * d], Init::Zeros),
                proj_w: add(format!("blocks.{i}.attn.proj.w"), vec![d, d], Init::Xavier),
                proj_b: add(format!("blocks.{i}.attn.proj.b"), vec![d], Init::Zeros),
                fc1_w: add(format!("blocks.{i}.mlp.fc1.w"), vec![d, cfg.mlp_dim()], Init::Xavier),
                fc1_b: add(format!("blocks.{i}.mlp.fc1.b"), vec![cfg.mlp_dim()], Init::Zeros),
                fc2_w: add(format!("blocks.{i}.mlp.fc2.w"), vec![cfg.mlp_dim(), d], Init::Xavier),
                fc2_b: add(format!("blocks.{i}.mlp.fc2.b"), vec![d], Init::Zeros),
            })
            .collect();
        let final_ada_w = add("final.ada.w".into(), vec![d, 2 * d], Init::Zeros);
        let final_ada_b = add("final.ada.b".into(), vec![2 * d], Init::Zeros);
        let head_w = add("final.head.w".into(), vec![d, cfg.patch_dim()], Init::Zeros);
        let head_b = add("final.head.b".into(), vec![cfg.patch_dim()], Init::Zeros);
        Self {
            specs,
            patch_w,
            patch_b,
            time_mlp,
            res_mlp,
            class_table,
            blocks,
            final_ada_w,
            final_ada_b,
            head_w,
            head_b,
        }
    }
}

/// DiT-style sinusoidal features `[cos(v * f_i), sin(v * f_i)]`.
pub fn sinusoidal_embedding(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp());
    let args: Vec<f64> = freqs.map(|f| value * f).collect();
    args.iter().map(|a| a.cos()).chain(args.iter().map(|a| a.sin())).collect()
}

/// Velocity network `mu_theta`. Holds configuration and parameter layout;
/// weights live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Backbone {
    config: ModelConfig,
    layout: Layout,
}

impl Backbone {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            layout: Layout::new(&config),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout.specs.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect()
    }

    /// adaLN-Zero initialization: modulation and output head start at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut params = ParamSet::new();
        for (name, shape, init) in &self.layout.specs {
            let t = match *init {
                Init::Zeros => Tensor::zeros(shape.clone()),
                Init::Xavier => {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    Tensor::uniform(shape.clone(), -limit, limit, rng)
                }
                Init::Normal(milli) => Tensor::randn(shape.clone(), milli as f64 / 1000.0, rng),
            };
            params.push(name.clone(), t);
        }
        params
    }

    /// Adds `N(0, std^2)` noise to every parameter, zero-initialized ones included.
    /// Used to exercise all gradient paths in checks.
    pub fn perturb<R: Rng + ?Sized>(&self, params: &mut ParamSet, std: f64, rng: &mut R) {
        for t in params.tensors_mut() {
            let noise = Tensor::randn(t.shape().to_vec(), std, rng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        }
    }

    /// Verifies names and shapes against this configuration.
    pub fn validate_params(&self, params: &ParamSet) -> Result<()> {
        if params.len() != self.layout.specs.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                self.layout.specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pname, t)) in self.layout.specs.iter().zip(params.iter()) {
            if name != pname {
                return Err(Error::invalid(format!("expected parameter {name}, found {pname}")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Registers every parameter on `tape`, as gradient-tracking leaves or constants.
    pub fn register(&self, tape: &mut Tape, params: &ParamSet, requires_grad: bool) -> Result<Vec<Var>> {
        self.validate_params(params)?;
        Ok(params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect())
    }

    fn mlp(&self, tape: &mut Tape, w: &[Var], idx: [usize; 4], input: Var) -> Result<Var> {
        let h = tape.linear(input, w[idx[0]], Some(w[idx[1]]))?;
        let h = tape.silu(h);
        tape.linear(h, w[idx[2]], Some(w[idx[3]]))
    }

    /// Conditioning vectors `[B, hidden]` for `(t, grid extent, class)` triples,
    /// before the SiLU that feeds the modulation layers.
    pub fn conditioning_tape(&self, tape: &mut Tape, w: &[Var], conds: &[(f64, usize, Option<usize>)]) -> Result<Var> {
        let f = self.config.freq_dim;
        let mut tf = Vec::with_capacity(conds.len() * f);
        let mut rf = Vec::with_capacity(conds.len() * f);
        let mut idx = Vec::with_capacity(conds.len());
        for &(t, grid, class) in conds {
            tf.extend(sinusoidal_embedding(TIME_SCALE * t, f));
            rf.extend(sinusoidal_embedding(grid as f64, f));
            idx.push(match class {
                Some(c) if c >= self.config.num_classes => {
                    return Err(Error::invalid(format!(
                        "class {c} out of range for {} classes",
                        self.config.num_classes
                    )))
                }
                Some(c) => c,
                None => self.config.num_classes,
            });
        }
        let b = conds.len();
        let tf = tape.constant(Tensor::new(vec![b, f], tf)?);
        let rf = tape.constant(Tensor::new(vec![b, f], rf)?);
        let te = self.mlp(tape, w, self.layout.time_mlp, tf)?;
        let re = self.mlp(tape, w, self.layout.res_mlp, rf)?;
        let ce = tape.gather_rows(w[self.layout.class_table], &idx)?;
        let c = tape.add(te, re)?;
        tape.add(c, ce)
    }

    /// Conditioning vector for one `(t, grid extent, class)` triple.
    pub fn embed_conditioning(&self, params: &ParamSet, t: f64, grid: usize, class: Option<usize>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let w = self.register(&mut tape, params, false)?;
        let c = self.conditioning_tape(&mut tape, &w, &[(t, grid, class)])?;
        Ok(tape.value(c).data().to_vec())
    }

    /// Predicted velocity rows `[N, p*p*C]` for a packed batch.
    pub fn forward_tape(&self, tape: &mut Tape, w: &[Var], batch: &PackedBatch) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        if batch.patch_size() != cfg.patch_size || batch.channels() != cfg.channels {
            return Err(Error::invalid(format!(
                "batch packed with patch {} / {} channels, model expects {} / {}",
                batch.patch_size(),
                batch.channels(),
                cfg.patch_size,
                cfg.channels
            )));
        }
        if let Some(s) = batch.sequences().iter().find(|s| s.resolution > cfg.max_resolution) {
            return Err(Error::invalid(format!(
                "sequence resolution {} exceeds max_resolution {}",
                s.resolution, cfg.max_resolution
            )));
        }
        if !batch.patches().is_finite() {
            return Err(Error::NonFinite("forward: input patches".into()));
        }
        let lens = batch.lens();
        let l = &self.layout;

        let input = tape.constant(batch.patches().clone());
        let mut x = tape.linear(input, w[l.patch_w], Some(w[l.patch_b]))?;

        let conds: Vec<_> = batch.sequences().iter().map(|s| (s.t, s.grid_h, s.class)).collect();
        let c = self.conditioning_tape(tape, w, &conds)?;
        let c = tape.silu(c);
        let rot = Rc::new(rope_rotation(&batch.positions(), cfg.head_dim())?);

        for (bi, blk) in l.blocks.iter().enumerate() {
            let m = tape.linear(c, w[blk.ada_w], Some(w[blk.ada_b]))?;
            let chunk: Vec<Var> = (0..6).map(|k| tape.slice_cols(m, k * d, d)).collect::<Result<_>>()?;
            let (shift_a, scale_a, gate_a, shift_m, scale_m, gate_m) =
                (chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5]);

            let h = tape.layer_norm(x, LN_EPS)?;
            let h = tape.modulate(h, shift_a, scale_a, lens.clone())?;
            let qkv = tape.linear(h, w[blk.qkv_w], Some(w[blk.qkv_b]))?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let v = tape.slice_cols(qkv, 2 * d, d)?;
            let q = tape.rotate_pairs(q, rot.clone())?;
            let k = tape.rotate_pairs(k, rot.clone())?;
            let a = tape.segment_attention(q, k, v, lens.clone(), cfg.heads)?;
            let a = tape.linear(a, w[blk.proj_w], Some(w[blk.proj_b]))?;
            x = tape.gated_add(x, a, gate_a, lens.clone())?;

            let h = tape.layer_norm(x, LN_EPS)?;
            let h = tape.modulate(h, shift_m, scale_m, lens.clone())?;
            let h = tape.linear(h, w[blk.fc1_w], Some(w[blk.fc1_b]))?;
            let h = tape.gelu(h);
            let h = tape.linear(h, w[blk.fc2_w], Some(w[blk.fc2_b]))?;
            x = tape.gated_add(x, h, gate_m, lens.clone())?;

            if !tape.value(x).is_finite() {
                return Err(Error::NonFinite(format!("activations after block {bi}")));
            }
        }

        let m = tape.linear(c, w[l.final_ada_w], Some(w[l.final_ada_b]))?;
        let shift = tape.slice_cols(m, 0, d)?;
        let scale = tape.slice_cols(m, d, d)?;
        let h = tape.layer_norm(x, LN_EPS)?;
        let h = tape.modulate(h, shift, scale, lens)?;
        let out = tape.linear(h, w[l.head_w], Some(w[l.head_b]))?;
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite("output head".into()));
        }
        Ok(out)
    }

    /// Velocity images, one per packed sequence.
    pub fn predict(&self, params: &ParamSet, batch: &PackedBatch) -> Result<Vec<Image>> {
        let mut tape = Tape::new();
        let w = self.register(&mut tape, params, false)?;
        let out = self.forward_tape(&mut tape, &w, batch)?;
        batch.unpack(tape.value(out))
    }

    /// Loss on `targets` (rows aligned with the batch) without gradients.
    pub fn loss(&self, params: &ParamSet, batch: &PackedBatch, targets: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let w = self.register(&mut tape, params, false)?;
        let out = self.forward_tape(&mut tape, &w, batch)?;
        let tgt = tape.constant(targets.clone());
        let loss = tape.segment_mse(out, tgt, batch.lens())?;
        tape.value(loss).item()
    }

    /// Per-sequence-averaged MSE and its gradient for every parameter.
    pub fn loss_and_grads(&self, params: &ParamSet, batch: &PackedBatch, targets: &Tensor) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let w = self.register(&mut tape, params, true)?;
        let out = self.forward_tape(&mut tape, &w, batch)?;
        let tgt = tape.constant(targets.clone());
        let loss = tape.segment_mse(out, tgt, batch.lens())?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss = {value}")));
        }
        tape.backward(loss)?;
        let grads = w
            .iter()
            .zip(params.tensors())
            .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::pack::{pack, PackItem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            depth: 1,
            heads: 2,
            patch_size: 2,
            channels: 3,
            num_classes: 4,
            max_resolution: 8,
            mlp_ratio: 2,
            freq_dim: 8,
        }
    }

    #[test]
    fn zero_init_predicts_zero() {
        let model = Backbone::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = model.init_params(&mut rng);
        let img = Image::randn(3, 8, 8, &mut rng);
        let batch = pack(&[PackItem { image: &img, t: 0.3, class: Some(1) }], 2).unwrap();
        let v = model.predict(&params, &batch).unwrap();
        assert_eq!(v[0].dims(), (3, 8, 8));
        assert!(v[0].values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn conditioning_distinguishes_inputs() {
        let model = Backbone::new(tiny()).unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let base = model.embed_conditioning(&params, 0.5, 4, Some(2)).unwrap();
        assert_ne!(base, model.embed_conditioning(&params, 0.5, 2, Some(2)).unwrap());
        assert_ne!(
            model.embed_conditioning(&params, 0.0, 4, Some(2)).unwrap(),
            model.embed_conditioning(&params, 1.0, 4, Some(2)).unwrap()
        );
        assert!(model.embed_conditioning(&params, 0.5, 4, Some(4)).is_err());
    }

    #[test]
    fn null_class_uses_last_table_row() {
        let model = Backbone::new(tiny()).unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let with_null = model.embed_conditioning(&params, 0.2, 4, None).unwrap();
        let with_zero = model.embed_conditioning(&params, 0.2, 4, Some(0)).unwrap();
        let table = params.by_name("class.table").unwrap();
        let d = 16;
        let null_row = &table.data()[4 * d..5 * d];
        let zero_row = &table.data()[..d];
        for j in 0..d {
            let diff = with_null[j] - with_zero[j];
            assert!((diff - (null_row[j] - zero_row[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.heads = 3;
        assert!(Backbone::new(cfg).is_err());
        let mut cfg = tiny();
        cfg.hidden_dim = 12;
        cfg.heads = 2; // head_dim 6 is not a multiple of 4
        assert!(Backbone::new(cfg).is_err());
    }

    #[test]
    fn validate_params_names_offender() {
        let model = Backbone::new(tiny()).unwrap();
        let other = Backbone::new(ModelConfig { hidden_dim: 32, ..tiny() }).unwrap();
        let params = other.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let err = model.validate_params(&params).unwrap_err();
        assert!(matches!(err, Error::ParamShape { ref name, .. } if name == "patch.w"), "{err}");
    }
}
