//! Network definitions: the two label-embedding modules (E1, E2), the
//! generator G (encoder + decoder), and the two dual-head discriminators
//! (D1, D2).
//!
//! Default sizes: embeddings are FC(256) -> FC(4096) reshaped to one 64x64
//! plane; the encoder runs seven convolution stages (six stride-2 halvings
//! then a collapse stage) into a 1024-d latent vector; the decoder mirrors
//! it with transposed convolutions; each discriminator runs ten convolution
//! stages and three fully-connected stages ending in a real/fake head and a
//! per-class label head.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{BiradsDescription, LatentFeature, MassImage};
use crate::nn::{
    Activation, BatchNorm2d, BufferFn, Conv2d, ConvTranspose2d, Linear, ParamFn, Scalar,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Architecture hyperparameters. The defaults reproduce the reference
/// layout; the miniature variant keeps every structural element (both
/// heads, batch norm, activations) at a fraction of the size, for fast
/// finite-difference verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    /// Channel widths of the encoder's stride-2 halving stages; the decoder
    /// mirrors them. One collapse/expand stage is added on top, so the
    /// stage count is `enc_channels.len() + 1`.
    pub enc_channels: Vec<usize>,
    /// Kernel size of the generator's strided stages.
    pub gen_kernel: usize,
    /// (width, stride) of each discriminator convolution stage.
    pub disc_channels: Vec<(usize, usize)>,
    pub disc_kernel: usize,
    /// Hidden widths of the discriminator's fully-connected stages; the
    /// head layer is appended, so the FC stage count is `disc_fc.len() + 1`.
    pub disc_fc: Vec<usize>,
    /// Width of the first embedding layer; the second is `image_size^2`.
    pub emb_hidden: usize,
    pub margin_classes: usize,
    pub shape_classes: usize,
    pub init_std: f64,
}

impl NetConfig {
    /// Full-size layout: 7-stage encoder/decoder, 1024-d latent,
    /// FC(256)->FC(4096) embeddings, 10-conv + 3-FC discriminators.
    pub fn paper(margin_classes: usize, shape_classes: usize) -> Self {
        Self {
            image_size: 64,
            latent_dim: 1024,
            enc_channels: vec![32, 64, 128, 256, 512, 1024],
            gen_kernel: 4,
            disc_channels: vec![
                (16, 2),
                (32, 2),
                (32, 1),
                (64, 2),
                (64, 1),
                (128, 2),
                (128, 1),
                (256, 2),
                (256, 1),
                (256, 1),
            ],
            disc_kernel: 3,
            disc_fc: vec![256, 64],
            emb_hidden: 256,
            margin_classes,
            shape_classes,
            init_std: 0.02,
        }
    }

    /// Tiny layout for gradient checking: 8x8 images, 2-stage nets,
    /// 8-d latent.
    pub fn miniature(margin_classes: usize, shape_classes: usize) -> Self {
        Self {
            image_size: 8,
            latent_dim: 8,
            enc_channels: vec![8],
            gen_kernel: 4,
            disc_channels: vec![(6, 2), (8, 2)],
            disc_kernel: 3,
            disc_fc: vec![12],
            emb_hidden: 8,
            margin_classes,
            shape_classes,
            init_std: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.enc_channels.is_empty() || self.disc_channels.is_empty() {
            return Err(NetworkError::Contract("empty stage list".into()));
        }
        if self.margin_classes == 0 || self.shape_classes == 0 {
            return Err(NetworkError::Contract("class counts must be >= 1".into()));
        }
        let halvings = self.enc_channels.len();
        let spatial = self.image_size >> halvings;
        if spatial == 0 || (spatial << halvings) != self.image_size {
            return Err(NetworkError::Contract(format!(
                "image size {} does not survive {halvings} halvings",
                self.image_size
            )));
        }
        let mut h = self.image_size;
        for &(_, s) in &self.disc_channels {
            h = crate::nn::conv::conv_out(h, self.disc_kernel, s, 1);
            if h == 0 {
                return Err(NetworkError::Contract(
                    "discriminator spatial size collapsed to zero".into(),
                ));
            }
        }
        Ok(())
    }

    /// Spatial size entering the encoder's collapse stage.
    fn collapse_spatial(&self) -> usize {
        self.image_size >> self.enc_channels.len()
    }

    fn disc_flat_dim(&self) -> usize {
        let mut h = self.image_size;
        for &(_, s) in &self.disc_channels {
            h = crate::nn::conv::conv_out(h, self.disc_kernel, s, 1);
        }
        self.disc_channels.last().unwrap().0 * h * h
    }
}

/// One network stage: conv or transposed conv, optional batch norm, then an
/// activation.
#[derive(Debug, Clone)]
enum StageOp<F> {
    Conv(Conv2d<F>),
    Deconv(ConvTranspose2d<F>),
}

#[derive(Debug, Clone)]
struct ConvBlock<F> {
    op: StageOp<F>,
    bn: Option<BatchNorm2d<F>>,
    act: Activation,
    out_cache: Option<Array4<F>>,
}

impl<F: Scalar> ConvBlock<F> {
    fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let mut z = match &self.op {
            StageOp::Conv(c) => c.forward_eval(x),
            StageOp::Deconv(d) => d.forward_eval(x),
        };
        if let Some(bn) = &self.bn {
            z = bn.forward_eval(&z);
        }
        self.act.forward_inplace(&mut z);
        z
    }

    fn forward_train(&mut self, x: &Array4<F>, update_running: bool) -> Array4<F> {
        let mut z = match &mut self.op {
            StageOp::Conv(c) => c.forward_train(x),
            StageOp::Deconv(d) => d.forward_train(x),
        };
        if let Some(bn) = &mut self.bn {
            z = bn.forward_train(&z, update_running);
        }
        self.act.forward_inplace(&mut z);
        if self.act != Activation::Identity {
            self.out_cache = Some(z.clone());
        }
        z
    }

    fn backward(
        &mut self,
        mut gout: Array4<F>,
        want_input_grad: bool,
        acc_params: bool,
    ) -> Option<Array4<F>> {
        if self.act != Activation::Identity {
            let y = self
                .out_cache
                .as_ref()
                .expect("forward_train must precede backward");
            self.act.backward_inplace(&mut gout, y);
        }
        let gconv = match &mut self.bn {
            Some(bn) => bn.backward(&gout, acc_params),
            None => gout,
        };
        match &mut self.op {
            StageOp::Conv(c) => c.backward(&gconv, want_input_grad, acc_params),
            StageOp::Deconv(d) => d.backward(&gconv, want_input_grad, acc_params),
        }
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        match &mut self.op {
            StageOp::Conv(c) => {
                f(format!("{prefix}.conv.weight"), &mut c.weight);
                f(format!("{prefix}.conv.bias"), &mut c.bias);
            }
            StageOp::Deconv(d) => {
                f(format!("{prefix}.deconv.weight"), &mut d.weight);
                f(format!("{prefix}.deconv.bias"), &mut d.bias);
            }
        }
        if let Some(bn) = &mut self.bn {
            f(format!("{prefix}.bn.gamma"), &mut bn.gamma);
            f(format!("{prefix}.bn.beta"), &mut bn.beta);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn<'_, F>) {
        if let Some(bn) = &mut self.bn {
            f(
                format!("{prefix}.bn.running_mean"),
                bn.running_mean.view_mut().into_dyn(),
            );
            f(
                format!("{prefix}.bn.running_var"),
                bn.running_var.view_mut().into_dyn(),
            );
        }
    }

    fn clear_caches(&mut self) {
        self.out_cache = None;
        match &mut self.op {
            StageOp::Conv(c) => c.clear_cache(),
            StageOp::Deconv(d) => d.clear_cache(),
        }
        if let Some(bn) = &mut self.bn {
            bn.clear_cache();
        }
    }
}

/// Label-embedding module: two fully-connected layers mapping a one-hot
/// label to one image-sized plane.
#[derive(Debug, Clone)]
pub struct EmbeddingModule<F> {
    pub classes: usize,
    pub image_size: usize,
    fc1: Linear<F>,
    fc2: Linear<F>,
    act_cache: Option<Array2<F>>,
}

impl<F: Scalar> EmbeddingModule<F> {
    fn new(classes: usize, hidden: usize, image_size: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            classes,
            image_size,
            fc1: Linear::new(classes, hidden, std, rng),
            fc2: Linear::new(hidden, image_size * image_size, std, rng),
            act_cache: None,
        }
    }

    pub fn fc_widths(&self) -> (usize, usize) {
        (self.fc1.out_dim, self.fc2.out_dim)
    }

    pub fn forward_eval(&self, one_hots: &Array2<F>) -> Array4<F> {
        let n = one_hots.nrows();
        let mut h = self.fc1.forward_eval(one_hots);
        Activation::LeakyRelu.forward_inplace(&mut h);
        let plane = self.fc2.forward_eval(&h);
        plane
            .into_shape_with_order((n, 1, self.image_size, self.image_size))
            .expect("contiguous")
    }

    pub fn forward_train(&mut self, one_hots: &Array2<F>) -> Array4<F> {
        let n = one_hots.nrows();
        let mut h = self.fc1.forward_train(one_hots);
        Activation::LeakyRelu.forward_inplace(&mut h);
        self.act_cache = Some(h.clone());
        let plane = self.fc2.forward_train(&h);
        plane
            .into_shape_with_order((n, 1, self.image_size, self.image_size))
            .expect("contiguous")
    }

    pub fn backward(&mut self, gplane: &Array4<F>, acc_params: bool) {
        let n = gplane.shape()[0];
        let g2 = gplane
            .view()
            .into_shape_with_order((n, self.image_size * self.image_size))
            .expect("contiguous")
            .to_owned();
        let mut gh = self
            .fc2
            .backward(&g2, true, acc_params)
            .expect("input grad");
        let y = self.act_cache.as_ref().expect("forward_train first");
        Activation::LeakyRelu.backward_inplace(&mut gh, y);
        self.fc1.backward(&gh, false, acc_params);
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(format!("{prefix}.fc1.weight"), &mut self.fc1.weight);
        f(format!("{prefix}.fc1.bias"), &mut self.fc1.bias);
        f(format!("{prefix}.fc2.weight"), &mut self.fc2.weight);
        f(format!("{prefix}.fc2.bias"), &mut self.fc2.bias);
    }

    fn clear_caches(&mut self) {
        self.act_cache = None;
        self.fc1.clear_cache();
        self.fc2.clear_cache();
    }
}

/// Encoder + decoder pair; `G` in the adversarial game.
#[derive(Debug, Clone)]
pub struct Generator<F> {
    encoder: Vec<ConvBlock<F>>,
    decoder: Vec<ConvBlock<F>>,
    pub latent_dim: usize,
    pub image_size: usize,
}

impl<F: Scalar> Generator<F> {
    fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let k = cfg.gen_kernel;
        let s0 = cfg.collapse_spatial();
        let std = cfg.init_std;
        let mut encoder = Vec::new();
        let mut in_ch = 3;
        for (i, &ch) in cfg.enc_channels.iter().enumerate() {
            encoder.push(ConvBlock {
                op: StageOp::Conv(Conv2d::new(in_ch, ch, k, 2, 1, std, rng)),
                // batch norm is omitted on the first encoder stage
                bn: (i > 0).then(|| BatchNorm2d::new(ch, rng)),
                act: Activation::LeakyRelu,
                out_cache: None,
            });
            in_ch = ch;
        }
        // collapse stage: full-map convolution down to 1x1 latent channels
        encoder.push(ConvBlock {
            op: StageOp::Conv(Conv2d::new(in_ch, cfg.latent_dim, s0, 1, 0, std, rng)),
            bn: None,
            act: Activation::Identity,
            out_cache: None,
        });

        let mut decoder = Vec::new();
        let top = *cfg.enc_channels.last().unwrap();
        decoder.push(ConvBlock {
            op: StageOp::Deconv(ConvTranspose2d::new(cfg.latent_dim, top, s0, 1, 0, std, rng)),
            bn: Some(BatchNorm2d::new(top, rng)),
            act: Activation::LeakyRelu,
            out_cache: None,
        });
        let mut ch_in = top;
        for &ch in cfg.enc_channels.iter().rev().skip(1) {
            decoder.push(ConvBlock {
                op: StageOp::Deconv(ConvTranspose2d::new(ch_in, ch, k, 2, 1, std, rng)),
                bn: Some(BatchNorm2d::new(ch, rng)),
                act: Activation::LeakyRelu,
                out_cache: None,
            });
            ch_in = ch;
        }
        decoder.push(ConvBlock {
            op: StageOp::Deconv(ConvTranspose2d::new(ch_in, 1, k, 2, 1, std, rng)),
            bn: None,
            act: Activation::Sigmoid,
            out_cache: None,
        });

        Self {
            encoder,
            decoder,
            latent_dim: cfg.latent_dim,
            image_size: cfg.image_size,
        }
    }

    pub fn encoder_stage_count(&self) -> usize {
        self.encoder.len()
    }

    pub fn decoder_stage_count(&self) -> usize {
        self.decoder.len()
    }

    pub fn encode_eval(&self, x: &Array4<F>) -> Array2<F> {
        let mut z = x.clone();
        for b in &self.encoder {
            z = b.forward_eval(&z);
        }
        let n = z.shape()[0];
        z.into_shape_with_order((n, self.latent_dim))
            .expect("1x1 spatial")
    }

    pub fn encode_train(&mut self, x: &Array4<F>, update_running: bool) -> Array2<F> {
        let mut z = x.clone();
        for b in &mut self.encoder {
            z = b.forward_train(&z, update_running);
        }
        let n = z.shape()[0];
        z.into_shape_with_order((n, self.latent_dim))
            .expect("1x1 spatial")
    }

    pub fn decode_eval(&self, latent: &Array2<F>) -> Array4<F> {
        let n = latent.nrows();
        let mut z = latent
            .clone()
            .into_shape_with_order((n, self.latent_dim, 1, 1))
            .expect("contiguous");
        for b in &self.decoder {
            z = b.forward_eval(&z);
        }
        z
    }

    pub fn decode_train(&mut self, latent: &Array2<F>, update_running: bool) -> Array4<F> {
        let n = latent.nrows();
        let mut z = latent
            .clone()
            .into_shape_with_order((n, self.latent_dim, 1, 1))
            .expect("contiguous");
        for b in &mut self.decoder {
            z = b.forward_train(&z, update_running);
        }
        z
    }

    /// Backward through the decoder; returns the latent gradient.
    pub fn decoder_backward(&mut self, gout: &Array4<F>, acc_params: bool) -> Array2<F> {
        let mut g = gout.clone();
        for b in self.decoder.iter_mut().rev() {
            g = b.backward(g, true, acc_params).expect("input grad requested");
        }
        let n = g.shape()[0];
        g.into_shape_with_order((n, self.latent_dim))
            .expect("1x1 spatial")
    }

    /// Backward through the encoder; returns the gradient on the
    /// concatenated (image, margin plane, shape plane) input when requested.
    pub fn encoder_backward(
        &mut self,
        glatent: &Array2<F>,
        want_input_grad: bool,
        acc_params: bool,
    ) -> Option<Array4<F>> {
        let n = glatent.nrows();
        let mut g = glatent
            .clone()
            .into_shape_with_order((n, self.latent_dim, 1, 1))
            .expect("contiguous");
        for (i, b) in self.encoder.iter_mut().enumerate().rev() {
            let want = want_input_grad || i > 0;
            match b.backward(g, want, acc_params) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.enc{i}"), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.dec{i}"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn<'_, F>) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_buffers(&format!("{prefix}.enc{i}"), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_buffers(&format!("{prefix}.dec{i}"), f);
        }
    }

    fn clear_caches(&mut self) {
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            b.clear_caches();
        }
    }
}

/// A dual-head discriminator: convolution stages, fully-connected stages,
/// and a final layer producing one real/fake logit plus per-class label
/// logits.
#[derive(Debug, Clone)]
pub struct Discriminator<F> {
    blocks: Vec<ConvBlock<F>>,
    fcs: Vec<Linear<F>>,
    fc_caches: Vec<Option<Array2<F>>>,
    head: Linear<F>,
    pub num_classes: usize,
    flat_dim: usize,
}

impl<F: Scalar> Discriminator<F> {
    fn new(cfg: &NetConfig, num_classes: usize, rng: &mut impl Rng) -> Self {
        let std = cfg.init_std;
        let mut blocks = Vec::new();
        let mut in_ch = 1;
        for (i, &(ch, stride)) in cfg.disc_channels.iter().enumerate() {
            blocks.push(ConvBlock {
                op: StageOp::Conv(Conv2d::new(in_ch, ch, cfg.disc_kernel, stride, 1, std, rng)),
                // batch norm is omitted on the first discriminator stage
                bn: (i > 0).then(|| BatchNorm2d::new(ch, rng)),
                act: Activation::LeakyRelu,
                out_cache: None,
            });
            in_ch = ch;
        }
        let flat_dim = cfg.disc_flat_dim();
        let mut fcs = Vec::new();
        let mut d = flat_dim;
        for &width in &cfg.disc_fc {
            fcs.push(Linear::new(d, width, std, rng));
            d = width;
        }
        let head = Linear::new(d, 1 + num_classes, std, rng);
        let fc_caches = vec![None; fcs.len()];
        Self {
            blocks,
            fcs,
            fc_caches,
            head,
            num_classes,
            flat_dim,
        }
    }

    pub fn conv_stage_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn fc_stage_count(&self) -> usize {
        self.fcs.len() + 1
    }

    /// Returns `(batch, 1 + num_classes)` logits: column 0 is the real/fake
    /// logit, the rest are label logits.
    pub fn forward_eval(&self, x: &Array4<F>) -> Array2<F> {
        let mut z = x.clone();
        for b in &self.blocks {
            z = b.forward_eval(&z);
        }
        let n = z.shape()[0];
        let mut h = z
            .into_shape_with_order((n, self.flat_dim))
            .expect("contiguous");
        for fc in &self.fcs {
            h = fc.forward_eval(&h);
            Activation::LeakyRelu.forward_inplace(&mut h);
        }
        self.head.forward_eval(&h)
    }

    pub fn forward_train(&mut self, x: &Array4<F>, update_running: bool) -> Array2<F> {
        let mut z = x.clone();
        for b in &mut self.blocks {
            z = b.forward_train(&z, update_running);
        }
        let n = z.shape()[0];
        let mut h = z
            .into_shape_with_order((n, self.flat_dim))
            .expect("contiguous");
        for (fc, cache) in self.fcs.iter_mut().zip(self.fc_caches.iter_mut()) {
            h = fc.forward_train(&h);
            Activation::LeakyRelu.forward_inplace(&mut h);
            *cache = Some(h.clone());
        }
        self.head.forward_train(&h)
    }

    pub fn backward(
        &mut self,
        glogits: &Array2<F>,
        want_input_grad: bool,
        acc_params: bool,
    ) -> Option<Array4<F>> {
        let mut g = self
            .head
            .backward(glogits, true, acc_params)
            .expect("input grad");
        for (fc, cache) in self.fcs.iter_mut().zip(self.fc_caches.iter()).rev() {
            let y = cache.as_ref().expect("forward_train first");
            Activation::LeakyRelu.backward_inplace(&mut g, y);
            g = fc.backward(&g, true, acc_params).expect("input grad");
        }
        let n = g.nrows();
        let last_ch = match &self.blocks.last().unwrap().op {
            StageOp::Conv(c) => c.out_ch,
            StageOp::Deconv(_) => unreachable!("discriminators use convs"),
        };
        let sp = ((self.flat_dim / last_ch) as f64).sqrt() as usize;
        let mut g4 = g
            .into_shape_with_order((n, last_ch, sp, sp))
            .expect("contiguous");
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            let want = want_input_grad || i > 0;
            match b.backward(g4, want, acc_params) {
                Some(next) => g4 = next,
                None => return None,
            }
        }
        Some(g4)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.conv{i}"), f);
        }
        for (i, fc) in self.fcs.iter_mut().enumerate() {
            f(format!("{prefix}.fc{i}.weight"), &mut fc.weight);
            f(format!("{prefix}.fc{i}.bias"), &mut fc.bias);
        }
        f(format!("{prefix}.head.weight"), &mut self.head.weight);
        f(format!("{prefix}.head.bias"), &mut self.head.bias);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn<'_, F>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers(&format!("{prefix}.conv{i}"), f);
        }
    }

    fn clear_caches(&mut self) {
        for b in &mut self.blocks {
            b.clear_caches();
        }
        for (fc, cache) in self.fcs.iter_mut().zip(self.fc_caches.iter_mut()) {
            fc.clear_cache();
            *cache = None;
        }
        self.head.clear_cache();
    }
}

/// The three alternating optimizer groups of the adversarial game.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    D1,
    D2,
    Gen,
}

/// The complete parameter set of the system.
#[derive(Debug, Clone)]
pub struct Networks<F> {
    pub e1: EmbeddingModule<F>,
    pub e2: EmbeddingModule<F>,
    pub gen: Generator<F>,
    pub d1: Discriminator<F>,
    pub d2: Discriminator<F>,
    pub config: NetConfig,
}

impl<F: Scalar> Networks<F> {
    /// Construction order (e1, e2, gen, d1, d2) is fixed so that a seeded
    /// rng reproduces parameters bitwise.
    pub fn init(config: NetConfig, rng: &mut impl Rng) -> Result<Self, NetworkError> {
        config.validate()?;
        let e1 = EmbeddingModule::new(
            config.margin_classes,
            config.emb_hidden,
            config.image_size,
            config.init_std,
            rng,
        );
        let e2 = EmbeddingModule::new(
            config.shape_classes,
            config.emb_hidden,
            config.image_size,
            config.init_std,
            rng,
        );
        let gen = Generator::new(&config, rng);
        let d1 = Discriminator::new(&config, config.margin_classes, rng);
        let d2 = Discriminator::new(&config, config.shape_classes, rng);
        Ok(Self {
            e1,
            e2,
            gen,
            d1,
            d2,
            config,
        })
    }

    pub fn visit_params(&mut self, f: &mut ParamFn<'_, F>) {
        self.e1.visit_params("e1", f);
        self.e2.visit_params("e2", f);
        self.gen.visit_params("gen", f);
        self.d1.visit_params("d1", f);
        self.d2.visit_params("d2", f);
    }

    pub fn visit_buffers(&mut self, f: &mut BufferFn<'_, F>) {
        self.gen.visit_buffers("gen", f);
        self.d1.visit_buffers("d1", f);
        self.d2.visit_buffers("d2", f);
    }

    /// Walks one optimizer group: each discriminator trains alone, the
    /// generator trains jointly with both embedding modules.
    pub fn visit_group(&mut self, group: ParamGroup, f: &mut ParamFn<'_, F>) {
        match group {
            ParamGroup::D1 => self.d1.visit_params("d1", f),
            ParamGroup::D2 => self.d2.visit_params("d2", f),
            ParamGroup::Gen => {
                self.e1.visit_params("e1", f);
                self.e2.visit_params("e2", f);
                self.gen.visit_params("gen", f);
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Drops every forward-pass cache (used before serialization).
    pub fn clear_caches(&mut self) {
        self.e1.clear_caches();
        self.e2.clear_caches();
        self.gen.clear_caches();
        self.d1.clear_caches();
        self.d2.clear_caches();
    }
}

/// FNV-1a hash over the bit patterns of one parameter group; used by tests
/// to prove that updates touch only their own group.
pub fn group_hash<F: Scalar>(nets: &mut Networks<F>, group: ParamGroup) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    nets.visit_group(group, &mut |_, p| {
        for v in p.value.iter() {
            let bits = v.as_f64().to_bits();
            for byte in bits.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    });
    h
}

// ---------------------------------------------------------------------------
// Public single-image operations on the f64 domain types.
// ---------------------------------------------------------------------------

fn plane_to_f<F: Scalar>(plane: &Array2<f64>) -> Array2<F> {
    plane.mapv(F::from_f64)
}

/// Clamp bound keeping discriminator outputs strictly inside (0, 1).
pub const SCORE_EPS: f64 = 1e-7;

/// Maps a one-hot label through an embedding module into one image-sized
/// plane.
pub fn embed<F: Scalar>(
    module: &EmbeddingModule<F>,
    label_one_hot: &[f64],
) -> Result<Array2<f64>, NetworkError> {
    if label_one_hot.len() != module.classes {
        return Err(NetworkError::Contract(format!(
            "embedding expects {} classes, got {}",
            module.classes,
            label_one_hot.len()
        )));
    }
    let x = Array2::from_shape_vec((1, module.classes), label_one_hot.to_vec())
        .expect("shape")
        .mapv(F::from_f64);
    let plane = module.forward_eval(&x);
    let s = module.image_size;
    let out = Array2::from_shape_fn((s, s), |(y, xx)| plane[[0, 0, y, xx]].as_f64());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(NetworkError::Contract("non-finite embedding output".into()));
    }
    Ok(out)
}

/// Encodes an image with its label planes into a latent feature.
pub fn encode<F: Scalar>(
    gen: &Generator<F>,
    image: &MassImage,
    margin_plane: &Array2<f64>,
    shape_plane: &Array2<f64>,
) -> Result<LatentFeature, NetworkError> {
    let s = gen.image_size;
    for (name, p) in [("margin", margin_plane), ("shape", shape_plane)] {
        if p.dim() != (s, s) {
            return Err(NetworkError::Contract(format!(
                "{name} plane must be {s}x{s}, got {:?}",
                p.dim()
            )));
        }
    }
    if image.pixels().dim() != (s, s) {
        return Err(NetworkError::Contract(format!(
            "image must be {s}x{s}, got {:?}",
            image.pixels().dim()
        )));
    }
    let mut x = Array4::<F>::zeros((1, 3, s, s));
    x.index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(&plane_to_f::<F>(image.pixels()));
    x.index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 1)
        .assign(&plane_to_f::<F>(margin_plane));
    x.index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 2)
        .assign(&plane_to_f::<F>(shape_plane));
    let z = gen.encode_eval(&x);
    let values: Vec<f64> = z.row(0).iter().map(|v| v.as_f64()).collect();
    LatentFeature::new(values)
        .map_err(|e| NetworkError::Contract(format!("encoder output invalid: {e}")))
}

/// Decodes a latent feature into an image.
pub fn decode<F: Scalar>(
    gen: &Generator<F>,
    feature: &LatentFeature,
) -> Result<MassImage, NetworkError> {
    if feature.dim() != gen.latent_dim {
        return Err(NetworkError::Contract(format!(
            "latent feature must have length {}, got {}",
            gen.latent_dim,
            feature.dim()
        )));
    }
    let z = Array2::from_shape_vec((1, gen.latent_dim), feature.values().to_vec())
        .expect("shape")
        .mapv(F::from_f64);
    let img = gen.decode_eval(&z);
    let s = gen.image_size;
    let out = Array2::from_shape_fn((s, s), |(y, x)| img[[0, 0, y, x]].as_f64());
    MassImage::new(out).map_err(|e| NetworkError::Contract(format!("decoder output invalid: {e}")))
}

/// Full conditional generation: embed labels, encode, decode. Defined as
/// the exact composition of [`embed`], [`encode`], and [`decode`].
pub fn generate<F: Scalar>(
    nets: &Networks<F>,
    image: &MassImage,
    desc: &BiradsDescription,
) -> Result<MassImage, NetworkError> {
    let m = crate::datamodel::one_hot(desc.margin, nets.config.margin_classes)
        .map_err(|e| NetworkError::Contract(e.to_string()))?;
    let s = crate::datamodel::one_hot(desc.shape, nets.config.shape_classes)
        .map_err(|e| NetworkError::Contract(e.to_string()))?;
    let margin_plane = embed(&nets.e1, &m)?;
    let shape_plane = embed(&nets.e2, &s)?;
    let feature = encode(&nets.gen, image, &margin_plane, &shape_plane)?;
    decode(&nets.gen, &feature)
}

/// Runs a discriminator on one image; returns the real/fake score and the
/// per-class label scores, all strictly inside (0, 1).
pub fn discriminate<F: Scalar>(
    d: &Discriminator<F>,
    image: &MassImage,
    image_size: usize,
) -> Result<(f64, Vec<f64>), NetworkError> {
    if image.pixels().dim() != (image_size, image_size) {
        return Err(NetworkError::Contract(format!(
            "image must be {image_size}x{image_size}"
        )));
    }
    let mut x = Array4::<F>::zeros((1, 1, image_size, image_size));
    x.index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(&plane_to_f::<F>(image.pixels()));
    let logits = d.forward_eval(&x);
    let squash = |z: f64| (1.0 / (1.0 + (-z).exp())).clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let rf = squash(logits[[0, 0]].as_f64());
    let labels: Vec<f64> = (0..d.num_classes)
        .map(|c| squash(logits[[0, 1 + c]].as_f64()))
        .collect();
    Ok((rf, labels))
}

/// Builds the `(batch, 3, s, s)` encoder input from image and label planes.
pub fn concat_channels<F: Scalar>(
    images: &Array4<F>,
    margin_planes: &Array4<F>,
    shape_planes: &Array4<F>,
) -> Array4<F> {
    let out = ndarray::concatenate(
        Axis(1),
        &[images.view(), margin_planes.view(), shape_planes.view()],
    )
    .expect("matching shapes");
    // conv kernels require contiguous standard-layout inputs
    out.as_standard_layout().to_owned()
}

/// One-hot rows for a batch of label indices.
pub fn one_hot_batch<F: Scalar>(indices: &[usize], cardinality: usize) -> Array2<F> {
    let mut out = Array2::zeros((indices.len(), cardinality));
    for (row, &i) in indices.iter().enumerate() {
        out[[row, i]] = F::one();
    }
    out
}

/// Splits discriminator logits into the real/fake column and label columns.
pub fn split_heads<F: Scalar>(logits: &Array2<F>) -> (Array1<F>, Array2<F>) {
    let rf = logits.column(0).to_owned();
    let labels = logits.slice(ndarray::s![.., 1..]).to_owned();
    (rf, labels)
}
