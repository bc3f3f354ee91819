//! Two-stage training of the encoder, decoder and discriminator.

pub mod losses;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::*;
pub use optim::Adam;

use crate::autograd::Tape;
use crate::dataset::DatasetRecord;
use crate::distortion::{apply_tensor, apply_var, sample_manipulation, DistortionParams, ManipulationKind, ManipulationSpec};
pub use crate::distortion::Stage;
use crate::error::{Error, Result};
use crate::forensics;
use crate::imaging::ImageBuffer;
use crate::model::ModelSet;
use crate::payload::{compose_payload, derive_source_id, normalize_landmarks, IdBits, LandmarkSet, SourceId, LANDMARK_DIM};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub distortion: DistortionParams,
    /// Keep updating the discriminator (also during finetuning).
    pub train_discriminator: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 100,
            batch_size: 32,
            learning_rate: 4.3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::pretrain(),
            distortion: DistortionParams::default(),
            train_discriminator: true,
            seed: 0,
        }
    }

    pub fn finetune() -> Self {
        Self { stage: Stage::Finetune, batch_size: 8, learning_rate: 4.0e-4, weights: LossWeights::finetune(), ..Self::pretrain() }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::InvalidParameter(format!("Adam parameters ({}, {}, {})", self.beta1, self.beta2, self.eps)));
        }
        self.weights.validate(self.stage)?;
        self.distortion.validate()
    }
}

/// One training example with its embedded payload.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: ImageBuffer,
    pub landmarks: LandmarkSet,
    pub payload: Vec<f64>,
    pub id: SourceId,
}

impl Example {
    pub fn from_record(record: &DatasetRecord, bits: IdBits) -> Result<Self> {
        let normalized = normalize_landmarks(&record.landmarks)?;
        let id = derive_source_id(&record.source_name, bits);
        let payload = compose_payload(normalized, id.clone()).to_flat();
        Ok(Self { image: record.image.clone(), landmarks: record.landmarks.clone(), payload, id })
    }

    pub fn landmark_target(&self) -> &[f64] {
        &self.payload[..LANDMARK_DIM]
    }
}

pub fn prepare_examples(records: &[DatasetRecord], bits: IdBits) -> Result<Vec<Example>> {
    records.iter().map(|r| Example::from_record(r, bits)).collect()
}

/// Stack images and payloads of a batch.
pub fn batch_tensors(batch: &[&Example]) -> (Tensor<f32>, Tensor<f32>) {
    let images: Vec<ImageBuffer> = batch.iter().map(|e| e.image.clone()).collect();
    let dim = batch[0].payload.len();
    let payloads = batch.iter().flat_map(|e| e.payload.iter().map(|&v| v as f32)).collect();
    (ImageBuffer::batch(&images), Tensor::from_vec(&[batch.len(), dim], payloads))
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub enc: f64,
    pub landmark: f64,
    pub id: f64,
    pub dec: f64,
    pub adv: f64,
    pub discriminator: Option<f64>,
    pub gen: Option<f64>,
    pub stab: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub ber: f64,
    pub aed_px: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Step { stage: Stage, epoch: usize, step: usize, manipulation: ManipulationKind, losses: StepLosses },
    Epoch { stage: Stage, epoch: usize, mean_total: f64, validation: Option<Validation> },
}

/// Optimizer state for the three networks.
pub struct Trainer {
    pub config: TrainConfig,
    encoder_opt: Adam,
    decoder_opt: Adam,
    discriminator_opt: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(models: &ModelSet<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.stage == Stage::Finetune && !models.stages.contains(&Stage::Pretrain) {
            return Err(Error::InvalidParameter("finetuning needs a pretrained model".into()));
        }
        let adam = |s| Adam::new(s, config.learning_rate, config.beta1, config.beta2, config.eps);
        Ok(Self {
            encoder_opt: adam(&models.encoder.params),
            decoder_opt: adam(&models.decoder.params),
            discriminator_opt: adam(&models.discriminator.params),
            config,
            step: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One discriminator update followed by one generator update on `batch`.
    pub fn step(&mut self, models: &mut ModelSet<f32>, batch: &[&Example], spec: &ManipulationSpec) -> Result<StepLosses> {
        let stage = self.config.stage;
        let w = self.config.weights;
        let (images, payloads) = batch_tensors(batch);
        let landmarks: Vec<LandmarkSet> = batch.iter().map(|e| e.landmarks.clone()).collect();
        let targets: Vec<f32> = batch.iter().flat_map(|e| e.landmark_target().iter().map(|&v| v as f32)).collect();
        let bits: Vec<i8> = batch.iter().flat_map(|e| e.id.bits().iter().copied()).collect();
        let step = self.step;
        let finite = |name: &str, v: f64| if v.is_finite() { Ok(v) } else { Err(Error::NonFiniteLoss { step, component: name.into() }) };

        let tape = Tape::<f32>::new();
        let pe = models.encoder.params.bind(&tape);
        let pd = models.decoder.params.bind(&tape);
        let cover = tape.constant(images.clone());
        let watermarked = models.encoder.forward(&pe, cover, tape.constant(payloads));

        let discriminator = if self.config.train_discriminator {
            let dt = Tape::<f32>::new();
            let pdisc = models.discriminator.params.bind(&dt);
            let real = models.discriminator.forward(&pdisc, dt.constant(images.clone()));
            let fake = models.discriminator.forward(&pdisc, dt.constant((*watermarked.value()).clone()));
            let loss = loss_discriminator(real, fake)?;
            let value = finite("discriminator", loss.value().item() as f64)?;
            let grads = dt.backward(loss);
            self.discriminator_opt.update(&mut models.discriminator.params, pdisc.vars(), &grads);
            Some(value)
        } else {
            None
        };
        let frozen = models.discriminator.params.bind_frozen(&tape);
        let adv = loss_adv(models.discriminator.forward(&frozen, watermarked))?;

        let attacked = apply_var(spec, watermarked, &landmarks)?;
        let (lm_pred, id_logits) = models.decoder.forward(&pd, attacked.images);
        let target = tape.constant(Tensor::from_vec(&[batch.len(), LANDMARK_DIM], targets));
        let landmark = loss_landmark(lm_pred, target)?;
        let id = loss_id(id_logits, &bits)?;
        let dec = loss_dec(landmark, id, w.landmark, w.id);
        let enc = loss_enc(watermarked, cover);
        let (gen, stab) = if stage == Stage::Finetune {
            let attacked_cover = apply_tensor(spec, &images, &landmarks)?.images;
            let gen = loss_gen(attacked.images, tape.constant(attacked_cover));
            let (lm_clean, id_clean) = models.decoder.forward(&pd, watermarked);
            (Some(gen), Some(loss_stab(loss_landmark(lm_clean, target)?, loss_id(id_clean, &bits)?)))
        } else {
            (None, None)
        };
        let total = total_generator_loss(stage, GeneratorTerms { enc, dec, adv, gen, stab }, &w)?;

        let v = |x: crate::autograd::Var<'_, f32>| x.value().item() as f64;
        let losses = StepLosses {
            total: finite("total", v(total))?,
            enc: finite("enc", v(enc))?,
            landmark: finite("landmark", v(landmark))?,
            id: finite("id", v(id))?,
            dec: finite("dec", v(dec))?,
            adv: finite("adv", v(adv))?,
            discriminator,
            gen: gen.map(|g| finite("gen", v(g))).transpose()?,
            stab: stab.map(|s| finite("stab", v(s))).transpose()?,
        };
        let grads = tape.backward(total);
        self.encoder_opt.update(&mut models.encoder.params, pe.vars(), &grads);
        self.decoder_opt.update(&mut models.decoder.params, pd.vars(), &grads);
        self.step += 1;
        Ok(losses)
    }
}

/// Identity-channel recovery and image quality on `examples`.
pub fn validate_models(models: &ModelSet<f32>, examples: &[Example], batch_size: usize) -> Result<Validation> {
    if examples.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let (mut ber, mut aed, mut psnr) = (0.0, 0.0, 0.0);
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (images, payloads) = batch_tensors(&refs);
        let watermarked = models.encoder.encode(&images, &payloads)?;
        let decoded = models.decoder.decode(&watermarked)?;
        for (i, (e, d)) in chunk.iter().zip(&decoded).enumerate() {
            ber += forensics::ber(&d.id_logits, &e.id)?;
            aed += forensics::aed_px_over(&d.landmark_pred, e.landmark_target(), e.landmarks.width, e.landmarks.height, 0..crate::payload::NUM_LANDMARKS)?;
            psnr += forensics::psnr(&e.image, &ImageBuffer::from_batch(&watermarked, i).quantized())?;
        }
    }
    let n = examples.len() as f64;
    Ok(Validation { ber: ber / n, aed_px: aed / n, psnr_db: psnr / n })
}

/// Run `config.epochs` epochs over `train_set`, reporting every step and epoch to `sink`.
pub fn train(
    models: &mut ModelSet<f32>,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    sink: &mut dyn FnMut(&LogEntry) -> Result<()>,
) -> Result<Option<Validation>> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut trainer = Trainer::new(models, *config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let spec = sample_manipulation(config.stage, &config.distortion, &mut rng);
            let losses = trainer.step(models, &batch, &spec)?;
            total += losses.total;
            batches += 1;
            sink(&LogEntry::Step { stage: config.stage, epoch, step: trainer.steps() - 1, manipulation: spec.kind(), losses })?;
        }
        let validation = if val_set.is_empty() { None } else { Some(validate_models(models, val_set, config.batch_size)?) };
        if let Some(v) = validation {
            log::info!(
                "{:?} epoch {}: loss {:.4}, val BER {:.4}, AED {:.3} px, PSNR {:.2} dB",
                config.stage,
                epoch,
                total / batches as f64,
                v.ber,
                v.aed_px,
                v.psnr_db
            );
        }
        sink(&LogEntry::Epoch { stage: config.stage, epoch, mean_total: total / batches as f64, validation })?;
        last = validation;
    }
    models.stages.push(config.stage);
    Ok(last)
}
