//! Alternating adversarial training: per step, D1 descends the negation of
//! its objective, then D2, then the generator and both embedding modules
//! jointly descend the generator objective. Fake images for the D updates
//! are detached; the G step regenerates them so batch-norm statistics track
//! the current generator.

use std::path::Path;

use ndarray::{Array2, Array4, Axis, s};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DatasetRecord, MassImage, Taxonomy};
use crate::imageops::resize_bilinear;
use crate::losses::{
    d_loss_logit_grads, d_objective_batch, g_loss_logit_grads, g_objective_batch,
    l1_logit_free_grad, sigmoid_scores, LossWeights,
};
use crate::networks::{concat_channels, one_hot_batch, split_heads, NetConfig, Networks, ParamGroup};
use crate::nn::{Adam, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite {quantity} at epoch {epoch}, step {step}")]
    NonFinite {
        quantity: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] crate::networks::NetworkError),
    #[error("checkpoint write failed for {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub vflip: bool,
    pub crop: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            crop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub augment: AugmentFlags,
    pub beta1: f64,
    pub beta2: f64,
    /// Run every parallel section on one thread; required for bitwise
    /// reproducibility guarantees.
    pub single_thread: bool,
    /// Disabling this freezes the discriminators and drops the adversarial
    /// and label terms from the generator objective, leaving a plain L1
    /// autoencoder.
    pub adversarial: bool,
}

impl Default for TrainConfig {
    /// Reference-scale settings (841-image dataset regime).
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 512,
            epochs: 8000,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            augment: AugmentFlags::default(),
            beta1: 0.9,
            beta2: 0.999,
            single_thread: false,
            adversarial: true,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a small synthetic dataset on a workstation CPU.
    pub fn desk_scale() -> Self {
        Self {
            batch_size: 64,
            epochs: 500,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Contract("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Contract("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Contract("epochs must be >= 1".into()));
        }
        self.loss_weights
            .validate()
            .map_err(|e| TrainError::Contract(e.to_string()))?;
        Ok(())
    }

    /// Applies `key = value` lines; unknown keys are errors naming the key.
    /// Blank lines and `#` comments are allowed.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| {
                    TrainError::Config(format!("line {}: expected 'key = value'", lineno + 1))
                })?;
            let key = key.trim();
            let value = value.trim();
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|e| TrainError::Config(format!("{key}: {e}")))
            };
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|e| TrainError::Config(format!("{key}: {e}")))
            };
            let parse_bool = |v: &str| match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(TrainError::Config(format!(
                    "{key}: expected true/false, got '{other}'"
                ))),
            };
            match key {
                "learning_rate" => self.learning_rate = parse_f64(value)?,
                "batch_size" => self.batch_size = parse_usize(value)?,
                "epochs" => self.epochs = parse_usize(value)?,
                "lambda1" => self.loss_weights.lambda1 = parse_f64(value)?,
                "lambda2" => self.loss_weights.lambda2 = parse_f64(value)?,
                "lambda3" => self.loss_weights.lambda3 = parse_f64(value)?,
                "lambda4" => self.loss_weights.lambda4 = parse_f64(value)?,
                "seed" => {
                    self.seed = value
                        .parse::<u64>()
                        .map_err(|e| TrainError::Config(format!("{key}: {e}")))?
                }
                "checkpoint_every" => self.checkpoint_every = parse_usize(value)?,
                "hflip" => self.augment.hflip = parse_bool(value)?,
                "vflip" => self.augment.vflip = parse_bool(value)?,
                "crop" => self.augment.crop = parse_bool(value)?,
                "beta1" => self.beta1 = parse_f64(value)?,
                "beta2" => self.beta2 = parse_f64(value)?,
                "single_thread" => self.single_thread = parse_bool(value)?,
                "adversarial" => self.adversarial = parse_bool(value)?,
                other => {
                    return Err(TrainError::Config(format!("unknown config key '{other}'")))
                }
            }
        }
        Ok(())
    }
}

/// All learnable state: network parameters (with their Adam moments),
/// per-group step counters, the epoch/step counters, and the training rng.
#[derive(Debug, Clone)]
pub struct ModelState<F> {
    pub taxonomy: Taxonomy,
    pub nets: Networks<F>,
    pub epoch: usize,
    pub global_step: usize,
    /// Adam step counters for (D1, D2, G).
    pub opt_steps: [u64; 3],
    pub rng: ChaCha8Rng,
}

impl<F: Scalar> ModelState<F> {
    pub fn init(taxonomy: Taxonomy, net_config: NetConfig, seed: u64) -> Result<Self, TrainError> {
        if net_config.margin_classes != taxonomy.margin_count()
            || net_config.shape_classes != taxonomy.shape_count()
        {
            return Err(TrainError::Contract(
                "network class counts must match the taxonomy".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = Networks::init(net_config, &mut rng)?;
        Ok(Self {
            taxonomy,
            nets,
            epoch: 0,
            global_step: 0,
            opt_steps: [0; 3],
            rng,
        })
    }
}

/// Randomly flips and crops one image. Each enabled transform fires
/// independently with probability 1/2; the crop takes a random 56x56 window
/// and resizes it back with bilinear resampling.
pub fn augment(image: &MassImage, flags: &AugmentFlags, rng: &mut impl Rng) -> MassImage {
    let mut px = image.pixels().clone();
    if flags.hflip && rng.random::<f64>() < 0.5 {
        px.invert_axis(Axis(1));
    }
    if flags.vflip && rng.random::<f64>() < 0.5 {
        px.invert_axis(Axis(0));
    }
    if flags.crop && rng.random::<f64>() < 0.5 {
        let size = px.nrows();
        let window = size * 7 / 8;
        let oy = rng.random_range(0..=(size - window));
        let ox = rng.random_range(0..=(size - window));
        let win = px.slice(s![oy..oy + window, ox..ox + window]).to_owned();
        px = resize_bilinear(&win.view(), size, size);
    }
    MassImage::from_clamped(px).expect("augmentation preserves range")
}

/// An assembled training batch in network precision.
pub struct Batch<F> {
    pub images: Array4<F>,
    pub margins: Vec<usize>,
    pub shapes: Vec<usize>,
}

impl<F: Scalar> Batch<F> {
    pub fn from_records(records: &[&DatasetRecord]) -> Result<Self, TrainError> {
        if records.is_empty() {
            return Err(TrainError::Contract("batch must be non-empty".into()));
        }
        let size = records[0].image.pixels().nrows();
        let mut images = Array4::zeros((records.len(), 1, size, size));
        let mut margins = Vec::with_capacity(records.len());
        let mut shapes = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let px = rec.image.pixels();
            let mut dst = images.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), 0);
            ndarray::Zip::from(&mut dst).and(px).for_each(|d, &v| {
                *d = F::from_f64(v);
            });
            margins.push(rec.description.margin);
            shapes.push(rec.description.shape);
        }
        Ok(Self {
            images,
            margins,
            shapes,
        })
    }

    pub fn len(&self) -> usize {
        self.margins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.margins.is_empty()
    }
}

/// Per-step scalar metrics. The `loss_d*` values follow the ascended-
/// objective sign convention (0 at the discriminator optimum); `loss_g` is
/// the descended generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss_d1: f64,
    pub loss_d2: f64,
    pub loss_g: f64,
    pub l1: f64,
}

impl StepMetrics {
    pub fn csv_header() -> &'static str {
        "step,epoch,loss_d1,loss_d2,loss_g,l1"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.loss_d1, self.loss_d2, self.loss_g, self.l1
        )
    }
}

/// Runs the conditional generator on an assembled batch in training mode.
fn forward_fake<F: Scalar>(
    state: &mut ModelState<F>,
    batch: &Batch<F>,
) -> (Array4<F>, Array2<F>, Array2<F>) {
    let m_oh = one_hot_batch::<F>(&batch.margins, state.nets.config.margin_classes);
    let s_oh = one_hot_batch::<F>(&batch.shapes, state.nets.config.shape_classes);
    let p1 = state.nets.e1.forward_train(&m_oh);
    let p2 = state.nets.e2.forward_train(&s_oh);
    let enc_in = concat_channels(&batch.images, &p1, &p2);
    let latent = state.nets.gen.encode_train(&enc_in, true);
    let fake = state.nets.gen.decode_train(&latent, true);
    (fake, m_oh, s_oh)
}

/// One update of a single discriminator on a combined real-and-fake batch;
/// returns the batch-mean ascended objective.
fn discriminator_update<F: Scalar>(
    state: &mut ModelState<F>,
    group: ParamGroup,
    real: &Array4<F>,
    fake: &Array4<F>,
    targets: &Array2<F>,
    lambda: f64,
    opt: &mut Adam,
) -> f64 {
    state.nets.visit_group(group, &mut |_, p| p.zero_grad());
    let n = real.shape()[0];
    let x = ndarray::concatenate(Axis(0), &[real.view(), fake.view()])
        .expect("same shapes")
        .as_standard_layout()
        .to_owned();
    let d = match group {
        ParamGroup::D1 => &mut state.nets.d1,
        ParamGroup::D2 => &mut state.nets.d2,
        ParamGroup::Gen => unreachable!("generator is not a discriminator"),
    };
    let logits = d.forward_train(&x, true);
    let probs = sigmoid_scores(&logits);
    let (rf, labels) = split_heads(&probs);
    let rf_real = rf.slice(s![..n]).to_owned();
    let rf_fake = rf.slice(s![n..]).to_owned();
    let lab_real = labels.slice(s![..n, ..]).to_owned();
    let lab_fake = labels.slice(s![n.., ..]).to_owned();
    let value = d_objective_batch(&rf_real, &rf_fake, &lab_real, &lab_fake, targets, lambda);
    let (greal, gfake) = d_loss_logit_grads(&rf_real, &rf_fake, &lab_real, &lab_fake, targets, lambda);
    let glogits =
        ndarray::concatenate(Axis(0), &[greal.view(), gfake.view()]).expect("same shapes");
    d.backward(&glogits, false, true);
    opt.begin_step();
    state.nets.visit_group(group, &mut |_, p| opt.update(p));
    value
}

/// One generator/embedding update; returns (loss_g, l1) batch means.
fn generator_update<F: Scalar>(
    state: &mut ModelState<F>,
    batch: &Batch<F>,
    config: &TrainConfig,
    opt: &mut Adam,
) -> (f64, f64) {
    let w = &config.loss_weights;
    state.nets.visit_group(ParamGroup::Gen, &mut |_, p| p.zero_grad());

    // fresh fake images so batch-norm statistics reflect the current
    // generator
    let (fake, m_oh, s_oh) = forward_fake(state, batch);

    let (value, l1_value, mut dfake) = if config.adversarial {
        let logits1 = state.nets.d1.forward_train(&fake, true);
        let logits2 = state.nets.d2.forward_train(&fake, true);
        let probs1 = sigmoid_scores(&logits1);
        let probs2 = sigmoid_scores(&logits2);
        let (rf1, lab1) = split_heads(&probs1);
        let (rf2, lab2) = split_heads(&probs2);
        let (value, l1_value) = g_objective_batch(
            &rf1,
            &rf2,
            &lab1,
            &lab2,
            &m_oh,
            &s_oh,
            &batch.images,
            &fake,
            w,
        );
        let g1 = g_loss_logit_grads(&rf1, &lab1, &m_oh, w.lambda3);
        let g2 = g_loss_logit_grads(&rf2, &lab2, &s_oh, w.lambda3);
        // frozen discriminators: propagate to the image, do not accumulate
        // their parameter gradients
        let dfake1 = state.nets.d1.backward(&g1, true, false).expect("input grad");
        let dfake2 = state.nets.d2.backward(&g2, true, false).expect("input grad");
        (value, l1_value, dfake1 + dfake2)
    } else {
        let (_, l1_value) = g_objective_batch(
            &ndarray::Array1::from_elem(batch.len(), F::from_f64(0.5)),
            &ndarray::Array1::from_elem(batch.len(), F::from_f64(0.5)),
            &Array2::from_elem((batch.len(), state.nets.config.margin_classes), F::from_f64(0.5)),
            &Array2::from_elem((batch.len(), state.nets.config.shape_classes), F::from_f64(0.5)),
            &m_oh,
            &s_oh,
            &batch.images,
            &fake,
            w,
        );
        (
            w.lambda4 * l1_value,
            l1_value,
            Array4::zeros(fake.raw_dim()),
        )
    };
    dfake = dfake + l1_logit_free_grad(&batch.images, &fake, w.lambda4);

    let dlatent = state.nets.gen.decoder_backward(&dfake, true);
    let denc_in = state
        .nets
        .gen
        .encoder_backward(&dlatent, true, true)
        .expect("input grad");
    let dp1 = denc_in.slice(s![.., 1..2, .., ..]).to_owned();
    let dp2 = denc_in.slice(s![.., 2..3, .., ..]).to_owned();
    state.nets.e1.backward(&dp1, true);
    state.nets.e2.backward(&dp2, true);

    opt.begin_step();
    state.nets.visit_group(ParamGroup::Gen, &mut |_, p| opt.update(p));
    (value, l1_value)
}

/// One full training step over an assembled batch: D1 update, D2 update,
/// then the generator update.
pub fn train_step_batch<F: Scalar>(
    state: &mut ModelState<F>,
    batch: &Batch<F>,
    config: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Contract("batch must be non-empty".into()));
    }
    let w = &config.loss_weights;
    let mut opt_d1 = Adam::new(config.learning_rate, config.beta1, config.beta2);
    opt_d1.t = state.opt_steps[0];
    let mut opt_d2 = Adam::new(config.learning_rate, config.beta1, config.beta2);
    opt_d2.t = state.opt_steps[1];
    let mut opt_g = Adam::new(config.learning_rate, config.beta1, config.beta2);
    opt_g.t = state.opt_steps[2];

    let (loss_d1, loss_d2) = if config.adversarial {
        // fakes for the discriminator updates are detached by construction:
        // gradients never flow back through this forward pass
        let (fake, m_oh, s_oh) = forward_fake(state, batch);
        let loss_d1 = discriminator_update(
            state,
            ParamGroup::D1,
            &batch.images,
            &fake,
            &m_oh,
            w.lambda1,
            &mut opt_d1,
        );
        let loss_d2 = discriminator_update(
            state,
            ParamGroup::D2,
            &batch.images,
            &fake,
            &s_oh,
            w.lambda2,
            &mut opt_d2,
        );
        (loss_d1, loss_d2)
    } else {
        (0.0, 0.0)
    };

    let (loss_g, l1) = generator_update(state, batch, config, &mut opt_g);

    state.opt_steps = [opt_d1.t, opt_d2.t, opt_g.t];
    state.global_step += 1;

    let metrics = StepMetrics {
        step: state.global_step,
        epoch: state.epoch,
        loss_d1,
        loss_d2,
        loss_g,
        l1,
    };
    for (name, v) in [
        ("loss_d1", loss_d1),
        ("loss_d2", loss_d2),
        ("loss_g", loss_g),
        ("l1", l1),
    ] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                quantity: name,
                epoch: state.epoch,
                step: state.global_step,
            });
        }
    }
    Ok(metrics)
}

/// Convenience wrapper assembling the batch from records (no augmentation).
pub fn train_step<F: Scalar>(
    state: &mut ModelState<F>,
    records: &[&DatasetRecord],
    config: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    let batch = Batch::from_records(records)?;
    train_step_batch(state, &batch, config)
}

/// Where to put checkpoints during [`train`], if anywhere.
pub struct TrainSinks<'a> {
    pub on_metrics: &'a mut dyn FnMut(&StepMetrics),
    pub checkpoint_dir: Option<&'a Path>,
}

/// Runs epochs `state.epoch .. config.epochs` with seeded shuffling and
/// augmentation. Checkpoints are written every `checkpoint_every` epochs
/// (and after the final epoch) when a directory is provided.
pub fn train<F: Scalar>(
    state: &mut ModelState<F>,
    records: &[DatasetRecord],
    config: &TrainConfig,
    sinks: &mut TrainSinks<'_>,
) -> Result<(), TrainError> {
    config.validate()?;
    if records.is_empty() {
        return Err(TrainError::Contract("dataset must be non-empty".into()));
    }
    if state.epoch >= config.epochs {
        return Err(TrainError::Contract(format!(
            "state is already at epoch {} >= configured epochs {}",
            state.epoch, config.epochs
        )));
    }
    while state.epoch < config.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(config.batch_size) {
            let mut augmented: Vec<DatasetRecord> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let rec = &records[i];
                augmented.push(DatasetRecord {
                    id: rec.id.clone(),
                    image: augment(&rec.image, &config.augment, &mut state.rng),
                    description: rec.description,
                });
            }
            let refs: Vec<&DatasetRecord> = augmented.iter().collect();
            let batch = Batch::from_records(&refs)?;
            let metrics = train_step_batch(state, &batch, config)?;
            (sinks.on_metrics)(&metrics);
        }
        state.epoch += 1;
        let due = config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0;
        if let Some(dir) = sinks.checkpoint_dir {
            if due || state.epoch == config.epochs {
                let path = dir.join(format!("ckpt_epoch_{:05}.f2m", state.epoch));
                crate::checkpoint::save(state, &path).map_err(|e| TrainError::Checkpoint {
                    path: path.display().to_string(),
                    source: Box::new(e),
                })?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::group_hash;
    use crate::synthdata::{synth_dataset, SynthConfig};
    use ndarray::Array2;

    fn mini_state(seed: u64) -> ModelState<f64> {
        ModelState::init(Taxonomy::default(), NetConfig::miniature(3, 3), seed).unwrap()
    }

    fn mini_batch(n: usize, seed: u64) -> Batch<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let images = Array4::from_shape_simple_fn((n, 1, 8, 8), || rng.random::<f64>());
        let margins = (0..n).map(|i| i % 3).collect();
        let shapes = (0..n).map(|i| (i + 1) % 3).collect();
        Batch {
            images,
            margins,
            shapes,
        }
    }

    #[test]
    fn augment_identity_when_disabled() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let img = MassImage::new(Array2::from_shape_fn((64, 64), |(y, x)| {
            ((y * 64 + x) % 256) as f64 / 255.0
        }))
        .unwrap();
        let flags = AugmentFlags {
            hflip: false,
            vflip: false,
            crop: false,
        };
        let out = augment(&img, &flags, &mut rng);
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn hflip_twice_is_identity() {
        let img = MassImage::new(Array2::from_shape_fn((64, 64), |(y, x)| {
            ((y * 31 + x * 7) % 100) as f64 / 100.0
        }))
        .unwrap();
        let mut once = img.pixels().clone();
        once.invert_axis(Axis(1));
        let mut twice = once.clone();
        twice.invert_axis(Axis(1));
        assert_eq!(&twice, img.pixels());
        assert_ne!(&once, img.pixels());
    }

    #[test]
    fn augment_stays_in_range_and_shape() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img = MassImage::new(Array2::from_shape_fn((64, 64), |(y, x)| {
            ((y + x) % 2) as f64
        }))
        .unwrap();
        let flags = AugmentFlags::default();
        for _ in 0..1000 {
            let out = augment(&img, &flags, &mut rng);
            assert_eq!(out.pixels().dim(), (64, 64));
            assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut state = mini_state(1);
        let cfg = TrainConfig::desk_scale();
        let err = train_step(&mut state, &[], &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Contract(_)));
    }

    #[test]
    fn discriminator_updates_leave_generator_untouched_and_vice_versa() {
        let mut state = mini_state(2);
        let batch = mini_batch(4, 20);
        let mut cfg = TrainConfig::desk_scale();
        cfg.batch_size = 4;

        let g_before = group_hash(&mut state.nets, ParamGroup::Gen);
        let d1_before = group_hash(&mut state.nets, ParamGroup::D1);
        let d2_before = group_hash(&mut state.nets, ParamGroup::D2);

        let (fake, m_oh, _s_oh) = forward_fake(&mut state, &batch);
        let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
        discriminator_update(
            &mut state,
            ParamGroup::D1,
            &batch.images,
            &fake,
            &m_oh,
            cfg.loss_weights.lambda1,
            &mut opt,
        );
        assert_eq!(group_hash(&mut state.nets, ParamGroup::Gen), g_before);
        assert_eq!(group_hash(&mut state.nets, ParamGroup::D2), d2_before);
        assert_ne!(group_hash(&mut state.nets, ParamGroup::D1), d1_before);

        let d1_mid = group_hash(&mut state.nets, ParamGroup::D1);
        let mut opt_g = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
        generator_update(&mut state, &batch, &cfg, &mut opt_g);
        assert_eq!(group_hash(&mut state.nets, ParamGroup::D1), d1_mid);
        assert_eq!(group_hash(&mut state.nets, ParamGroup::D2), d2_before);
        assert_ne!(group_hash(&mut state.nets, ParamGroup::Gen), g_before);
    }

    #[test]
    fn pure_l1_mode_decreases_reconstruction_error() {
        let mut state = mini_state(5);
        let batch = mini_batch(4, 50);
        let mut cfg = TrainConfig::desk_scale();
        cfg.adversarial = false;
        cfg.learning_rate = 2e-3;
        let first = train_step_batch(&mut state, &batch, &cfg).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = train_step_batch(&mut state, &batch, &cfg).unwrap();
        }
        assert!(
            last.l1 < first.l1,
            "l1 did not decrease: {} -> {}",
            first.l1,
            last.l1
        );
    }

    #[test]
    fn identical_seeds_give_identical_metric_streams() {
        let run = |seed: u64| -> Vec<StepMetrics> {
            let mut state = mini_state(seed);
            let batch = mini_batch(4, 77);
            let mut cfg = TrainConfig::desk_scale();
            cfg.batch_size = 4;
            (0..5)
                .map(|_| train_step_batch(&mut state, &batch, &cfg).unwrap())
                .collect()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a, b);
    }

    #[test]
    fn config_file_parsing() {
        let mut cfg = TrainConfig::desk_scale();
        cfg.apply_file_text(
            "# comment\nlearning_rate = 0.001\nbatch_size = 16\nlambda4 = 150\nhflip = false\n",
        )
        .unwrap();
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.loss_weights.lambda4, 150.0);
        assert!(!cfg.augment.hflip);

        let err = cfg.apply_file_text("warp_factor = 9\n").unwrap_err();
        assert!(err.to_string().contains("warp_factor"));
    }

    #[test]
    fn train_runs_requested_epochs() {
        let taxonomy = Taxonomy::default();
        let data = synth_dataset(
            &SynthConfig {
                seed: 3,
                per_category_count: 1,
                ..Default::default()
            },
            &taxonomy,
        )
        .unwrap();
        let mut state: ModelState<f32> =
            ModelState::init(taxonomy, NetConfig::paper(3, 3), 4).unwrap();
        let mut cfg = TrainConfig::desk_scale();
        cfg.epochs = 2;
        cfg.batch_size = 16;
        let mut rows = Vec::new();
        let mut sinks = TrainSinks {
            on_metrics: &mut |m: &StepMetrics| rows.push(*m),
            checkpoint_dir: None,
        };
        train(&mut state, &data, &cfg, &mut sinks).unwrap();
        assert_eq!(state.epoch, 2);
        assert_eq!(rows.len(), 2); // 9 records, batch 16 -> 1 step per epoch
        assert!(rows.iter().all(|r| r.l1.is_finite()));
    }
}
