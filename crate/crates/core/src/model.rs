//! Encoder, factorized-head decoder and discriminator.
//!
//! Widths scale with `base_channels = b`: the image stream runs `b -> 2b`, the
//! watermark stream `b/2 -> 2b` and the fused map has `2b` channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::distortion::Stage;
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Conv2d, ConvBlock, Linear, ParamStore, SeResBlock};
use crate::payload::{IdBits, LANDMARK_DIM};
use crate::tensor::{Real, Tensor};

/// Side of the square map the payload is reshaped into before upsampling.
pub const SEED_MAP_SIDE: usize = 16;
const SEED_MAP_LEN: usize = SEED_MAP_SIDE * SEED_MAP_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub id_bits: IdBits,
    pub base_channels: usize,
    pub se_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { image_size: 128, id_bits: IdBits::Bits16, base_channels: 32, se_reduction: 16 }
    }
}

impl ModelConfig {
    pub fn payload_dim(&self) -> usize {
        self.id_bits.payload_dim()
    }

    /// `(landmark head, identifier head)` output widths.
    pub fn head_dims(&self) -> (usize, usize) {
        (LANDMARK_DIM, self.id_bits.bits())
    }

    pub fn validate(&self) -> Result<()> {
        if ![64, 128, 256].contains(&self.image_size) {
            return Err(Error::InvalidParameter(format!("image_size {} not in {{64, 128, 256}}", self.image_size)));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::InvalidParameter(format!("base_channels {} must be even and >= 2", self.base_channels)));
        }
        if self.se_reduction == 0 {
            return Err(Error::InvalidParameter("se_reduction must be positive".into()));
        }
        Ok(())
    }

    /// Number of 2x stages between the 16x16 seed map and the image.
    fn scale_steps(&self) -> usize {
        (self.image_size / SEED_MAP_SIDE).trailing_zeros() as usize
    }
}

fn check_images<T: Real>(images: &Tensor<T>, size: usize) -> Result<usize> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
        return Err(Error::InvalidParameter(format!("expected images [B, 3, {size}, {size}], got {shape:?}")));
    }
    Ok(shape[0])
}

/// Two-stream encoder with a global skip connection.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    image_block: ConvBlock,
    image_res: SeResBlock,
    payload_fc: Linear,
    seed_block: ConvBlock,
    // Learned upsampling from the seed map to the image grid ("DiffusionNet").
    upsample: Vec<ConvBlock>,
    watermark_res: [SeResBlock; 2],
    fuse: ConvBlock,
    output: Conv2d,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.base_channels;
        let r = config.se_reduction;
        let mut builder = Builder::new(&mut params, &mut rng);
        let bd = &mut builder;
        let image_block = ConvBlock::new(bd, "image.block", 3, b, 1);
        let image_res = SeResBlock::new(bd, "image.res", b, 2 * b, 1, r);
        let payload_fc = Linear::new(bd, "watermark.fc", config.payload_dim(), SEED_MAP_LEN);
        let seed_block = ConvBlock::new(bd, "watermark.block", 1, b / 2, 1);
        let upsample = (0..config.scale_steps()).map(|i| ConvBlock::new(bd, &format!("watermark.upsample{i}"), b / 2, b / 2, 1)).collect();
        let watermark_res = [SeResBlock::new(bd, "watermark.res0", b / 2, 2 * b, 1, r), SeResBlock::new(bd, "watermark.res1", 2 * b, 2 * b, 1, r)];
        let fuse = ConvBlock::new(bd, "fuse.block", 4 * b, 2 * b, 1);
        let output = Conv2d::new(bd, "output", 2 * b + 3, 3, 1, 1, true, 0.1);
        Self { config, params, image_block, image_res, payload_fc, seed_block, upsample, watermark_res, fuse, output }
    }

    /// `images: [B, 3, S, S]` in `[-1, 1]`, `payloads: [B, payload_dim]`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>, payloads: Var<'t, T>) -> Var<'t, T> {
        let batch = images.shape()[0];
        let features = self.image_res.forward(p, self.image_block.forward(p, images));
        let seed = self.payload_fc.forward(p, payloads).reshape(&[batch, 1, SEED_MAP_SIDE, SEED_MAP_SIDE]);
        let mut w = self.seed_block.forward(p, seed);
        for block in &self.upsample {
            w = block.forward(p, w.upsample_nearest2x());
        }
        let w = self.watermark_res[1].forward(p, self.watermark_res[0].forward(p, w));
        let fused = self.fuse.forward(p, features.concat_channels(w));
        let residual = self.output.forward(p, fused.concat_channels(images)).tanh();
        images.add(residual).clamp(-T::one(), T::one())
    }

    pub fn encode(&self, images: &Tensor<T>, payloads: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = check_images(images, self.config.image_size)?;
        if payloads.shape() != [batch, self.config.payload_dim()] {
            return Err(Error::InvalidParameter(format!(
                "expected payloads [{batch}, {}], got {:?}",
                self.config.payload_dim(),
                payloads.shape()
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&p, tape.constant(images.clone()), tape.constant(payloads.clone()));
        let value = out.value();
        Ok((*value).clone())
    }

    pub fn macs(&self) -> u64 {
        let s = self.config.image_size;
        let mut total = self.image_block.cost(s, s).macs + self.image_res.cost(s, s).macs + self.payload_fc.macs();
        let mut side = SEED_MAP_SIDE;
        total += self.seed_block.cost(side, side).macs;
        for block in &self.upsample {
            side *= 2;
            total += block.cost(side, side).macs;
        }
        total += self.watermark_res.iter().map(|r| r.cost(s, s).macs).sum::<u64>();
        total + self.fuse.cost(s, s).macs + self.output.cost(s, s).macs
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config,
            params: self.params.cast(),
            image_block: self.image_block.clone(),
            image_res: self.image_res.clone(),
            payload_fc: self.payload_fc.clone(),
            seed_block: self.seed_block.clone(),
            upsample: self.upsample.clone(),
            watermark_res: self.watermark_res.clone(),
            fuse: self.fuse.clone(),
            output: self.output.clone(),
        }
    }
}

/// Decoder output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPayload {
    pub landmark_pred: Vec<f64>,
    pub id_logits: Vec<f64>,
}

/// Shared backbone feeding two independent linear heads.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    stem: [ConvBlock; 2],
    down: ConvBlock,
    // Strided residual stages down to the 16x16 grid.
    down_res: Vec<SeResBlock>,
    res: SeResBlock,
    landmark_head: Linear,
    id_head: Linear,
}

impl<T: Real> Decoder<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.base_channels;
        let r = config.se_reduction;
        let mut builder = Builder::new(&mut params, &mut rng);
        let bd = &mut builder;
        let stem = [ConvBlock::new(bd, "backbone.stem0", 3, b, 1), ConvBlock::new(bd, "backbone.stem1", b, b, 1)];
        let down = ConvBlock::new(bd, "backbone.down", b, 2 * b, 2);
        let down_res = (1..config.scale_steps()).map(|i| SeResBlock::new(bd, &format!("backbone.res_down{i}"), 2 * b, 2 * b, 2, r)).collect();
        let res = SeResBlock::new(bd, "backbone.res", 2 * b, 2 * b, 1, r);
        let features = 2 * b * SEED_MAP_LEN;
        let (lm_dim, id_dim) = config.head_dims();
        let landmark_head = Linear::new(bd, "landmark_head", features, lm_dim);
        let id_head = Linear::new(bd, "id_head", features, id_dim);
        Self { config, params, stem, down, down_res, res, landmark_head, id_head }
    }

    /// Flattened shared features `[B, 2b * 256]`.
    pub fn backbone<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Var<'t, T> {
        let batch = images.shape()[0];
        let mut x = self.stem[1].forward(p, self.stem[0].forward(p, images));
        x = self.down.forward(p, x);
        for block in &self.down_res {
            x = block.forward(p, x);
        }
        x = self.res.forward(p, x);
        let features = x.shape()[1..].iter().product();
        x.reshape(&[batch, features])
    }

    /// `(landmark_pred [B, 136], id_logits [B, L_ID])`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let shared = self.backbone(p, images);
        (self.landmark_head.forward(p, shared), self.id_head.forward(p, shared))
    }

    pub fn decode(&self, images: &Tensor<T>) -> Result<Vec<DecodedPayload>> {
        let batch = check_images(images, self.config.image_size)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (lm, id) = self.forward(&p, tape.constant(images.clone()));
        let (lm, id) = (lm.value(), id.value());
        let (lm_dim, id_dim) = self.config.head_dims();
        Ok((0..batch)
            .map(|i| DecodedPayload {
                landmark_pred: lm.data()[i * lm_dim..(i + 1) * lm_dim].iter().map(|v| v.f64()).collect(),
                id_logits: id.data()[i * id_dim..(i + 1) * id_dim].iter().map(|v| v.f64()).collect(),
            })
            .collect())
    }

    pub fn macs(&self) -> u64 {
        let s = self.config.image_size;
        let mut total = self.stem[0].cost(s, s).macs + self.stem[1].cost(s, s).macs;
        let c = self.down.cost(s, s);
        total += c.macs;
        let mut side = c.height;
        for block in &self.down_res {
            let c = block.cost(side, side);
            total += c.macs;
            side = c.height;
        }
        total + self.res.cost(side, side).macs + self.landmark_head.macs() + self.id_head.macs()
    }

    pub fn cast<U: Real>(&self) -> Decoder<U> {
        Decoder {
            config: self.config,
            params: self.params.cast(),
            stem: self.stem.clone(),
            down: self.down.clone(),
            down_res: self.down_res.clone(),
            res: self.res.clone(),
            landmark_head: self.landmark_head.clone(),
            id_head: self.id_head.clone(),
        }
    }
}

/// Strided ConvBlocks, global average pooling, one linear logit.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    blocks: Vec<ConvBlock>,
    head: Linear,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.base_channels;
        let mut builder = Builder::new(&mut params, &mut rng);
        let blocks = vec![
            ConvBlock::new(&mut builder, "block0", 3, b, 2),
            ConvBlock::new(&mut builder, "block1", b, b, 2),
            ConvBlock::new(&mut builder, "block2", b, b, 2),
        ];
        let head = Linear::new(&mut builder, "head", b, 1);
        Self { config, params, blocks, head }
    }

    /// Logits `[B]`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Var<'t, T> {
        let batch = images.shape()[0];
        let x = self.blocks.iter().fold(images, |x, block| block.forward(p, x));
        self.head.forward(p, x.global_avg_pool()).reshape(&[batch])
    }

    pub fn discriminate(&self, images: &Tensor<T>) -> Result<Vec<f64>> {
        check_images(images, self.config.image_size)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let logits = self.forward(&p, tape.constant(images.clone())).value();
        Ok(logits.data().iter().map(|v| v.f64()).collect())
    }

    pub fn macs(&self) -> u64 {
        let s = self.config.image_size;
        let mut side = s;
        let mut total = 0;
        for block in &self.blocks {
            let c = block.cost(side, side);
            total += c.macs;
            side = c.height;
        }
        total + self.head.macs()
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator { config: self.config, params: self.params.cast(), blocks: self.blocks.clone(), head: self.head.clone() }
    }
}

/// The three networks trained together.
#[derive(Debug, Clone)]
pub struct ModelSet<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub discriminator: Discriminator<T>,
    /// Training stages completed so far, in order.
    pub stages: Vec<Stage>,
}

impl<T: Real> ModelSet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new(config, seed),
            decoder: Decoder::new(config, seed.wrapping_add(1)),
            discriminator: Discriminator::new(config, seed.wrapping_add(2)),
            stages: Vec::new(),
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.encoder.config
    }

    /// `(prefix, store)` for each network, in checkpoint order.
    pub fn stores(&self) -> [(&'static str, &ParamStore<T>); 3] {
        [("encoder", &self.encoder.params), ("decoder", &self.decoder.params), ("discriminator", &self.discriminator.params)]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore<T>); 3] {
        [("encoder", &mut self.encoder.params), ("decoder", &mut self.decoder.params), ("discriminator", &mut self.discriminator.params)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ModelConfig,
    pub encoder: NetworkSummary,
    pub decoder: NetworkSummary,
    pub discriminator: NetworkSummary,
    /// Encoder + decoder, the networks used at inference.
    pub inference_params: usize,
    pub inference_flops: u64,
}

/// Exact parameter counts and `2 x MAC` FLOP estimates of conv/linear layers.
pub fn model_summary(config: ModelConfig) -> Result<ModelSummary> {
    let models = ModelSet::<f32>::new(config, 0)?;
    let enc = NetworkSummary { params: models.encoder.params.count(), flops: 2 * models.encoder.macs() };
    let dec = NetworkSummary { params: models.decoder.params.count(), flops: 2 * models.decoder.macs() };
    let dis = NetworkSummary { params: models.discriminator.params.count(), flops: 2 * models.discriminator.macs() };
    Ok(ModelSummary {
        config,
        encoder: enc,
        decoder: dec,
        discriminator: dis,
        inference_params: enc.params + dec.params,
        inference_flops: enc.flops + dec.flops,
    })
}
