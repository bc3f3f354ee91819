//! Loss functions as graph nodes. Each node's forward value is computed by the
//! matching plain function, so the graph and the reported numbers agree.

use serde::{Deserialize, Serialize};

use crate::autograd::{weighted_sum, Var};
use crate::distortion::Stage;
use crate::error::{Error, Result};
use crate::payload::LANDMARK_DIM;
use crate::tensor::{Real, Tensor};

/// Mean squared difference over all elements.
pub fn mse_value<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse length mismatch");
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / a.len() as f64
}

/// Mean Euclidean distance between consecutive `(x, y)` pairs.
pub fn point_distance_value<T: Real>(pred: &[T], target: &[T]) -> f64 {
    assert_eq!(pred.len(), target.len(), "landmark length mismatch");
    assert_eq!(pred.len() % 2, 0, "landmark vectors hold (x, y) pairs");
    let points = pred.len() / 2;
    (0..points)
        .map(|i| {
            let dx = pred[2 * i].f64() - target[2 * i].f64();
            let dy = pred[2 * i + 1].f64() - target[2 * i + 1].f64();
            (dx * dx + dy * dy).sqrt()
        })
        .sum::<f64>()
        / points as f64
}

/// Mean binary cross-entropy of logits against `{0, 1}` targets, written as
/// `max(x, 0) - x t + ln(1 + e^{-|x|})` so large logits stay finite.
pub fn bce_logits_value<T: Real>(logits: &[T], targets: &[f64]) -> f64 {
    assert_eq!(logits.len(), targets.len(), "BCE length mismatch");
    logits
        .iter()
        .zip(targets)
        .map(|(x, &t)| {
            let x = x.f64();
            x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / logits.len() as f64
}

/// Bipolar bits to BCE targets `(b + 1) / 2`.
pub fn bits_to_targets(bits: &[i8]) -> Vec<f64> {
    bits.iter().map(|&b| (b as f64 + 1.0) / 2.0).collect()
}

/// Mean squared error node.
pub fn loss_mse<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
    let d = a.sub(b);
    d.mul(d).mean()
}

/// Imperceptibility loss between watermarked and cover images.
pub fn loss_enc<'t, T: Real>(watermarked: Var<'t, T>, cover: Var<'t, T>) -> Var<'t, T> {
    loss_mse(watermarked, cover)
}

/// Consistency between manipulated watermarked and manipulated cover images.
pub fn loss_gen<'t, T: Real>(manipulated_wm: Var<'t, T>, manipulated_co: Var<'t, T>) -> Var<'t, T> {
    loss_mse(manipulated_wm, manipulated_co)
}

/// Mean point-wise Euclidean distance for `[B, 136]` normalized landmarks.
pub fn loss_landmark<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = pred.shape();
    if shape.last() != Some(&LANDMARK_DIM) {
        return Err(Error::Dimension { what: "landmark prediction width", expected: LANDMARK_DIM, actual: shape.last().copied().unwrap_or(0) });
    }
    if target.shape() != shape {
        return Err(Error::Dimension { what: "landmark target length", expected: pred.value().len(), actual: target.value().len() });
    }
    let (p, t) = (pred.value(), target.value());
    let value = T::lit(point_distance_value(p.data(), t.data()));
    let points = p.len() / 2;
    Ok(pred.tape().op(Tensor::scalar(value), &[pred, target], move |g, needs| {
        let scale = g.item().f64() / points as f64;
        let mut grad = vec![T::zero(); p.len()];
        for i in 0..points {
            let dx = p.data()[2 * i].f64() - t.data()[2 * i].f64();
            let dy = p.data()[2 * i + 1].f64() - t.data()[2 * i + 1].f64();
            let norm = (dx * dx + dy * dy).sqrt();
            // Subgradient 0 where prediction and target coincide.
            if norm > 0.0 {
                grad[2 * i] = T::lit(scale * dx / norm);
                grad[2 * i + 1] = T::lit(scale * dy / norm);
            }
        }
        let grad = Tensor::from_vec(p.shape(), grad);
        let neg = if needs[1] { Some(grad.map(|v| -v)) } else { None };
        vec![Some(grad), neg]
    }))
}

/// Stable binary cross-entropy on logits against fixed `{0, 1}` targets.
pub fn loss_bce_logits<'t, T: Real>(logits: Var<'t, T>, targets: &[f64]) -> Result<Var<'t, T>> {
    let x = logits.value();
    if x.len() != targets.len() {
        return Err(Error::Dimension { what: "BCE targets", expected: x.len(), actual: targets.len() });
    }
    let targets = targets.to_vec();
    let value = T::lit(bce_logits_value(x.data(), &targets));
    Ok(logits.tape().op(Tensor::scalar(value), &[logits], move |g, _| {
        let scale = g.item().f64() / x.len() as f64;
        let grad = x.data().iter().zip(&targets).map(|(v, t)| T::lit(scale * (crate::autograd::sigmoid(v.f64()) - t))).collect();
        vec![Some(Tensor::from_vec(x.shape(), grad))]
    }))
}

/// Identifier loss: BCE of `[B, L_ID]` logits against bipolar bits.
pub fn loss_id<'t, T: Real>(logits: Var<'t, T>, bits: &[i8]) -> Result<Var<'t, T>> {
    loss_bce_logits(logits, &bits_to_targets(bits))
}

/// Weighted decoder loss `lambda_L * L_L + lambda_ID * L_ID`.
pub fn loss_dec<'t, T: Real>(landmark: Var<'t, T>, id: Var<'t, T>, lambda_l: f64, lambda_id: f64) -> Var<'t, T> {
    weighted_sum(&[(T::lit(lambda_l), landmark), (T::lit(lambda_id), id)])
}

/// Discriminator loss: covers labelled 1, watermarked images 0.
pub fn loss_discriminator<'t, T: Real>(cover_logits: Var<'t, T>, watermarked_logits: Var<'t, T>) -> Result<Var<'t, T>> {
    let real = loss_bce_logits(cover_logits, &vec![1.0; cover_logits.value().len()])?;
    let fake = loss_bce_logits(watermarked_logits, &vec![0.0; watermarked_logits.value().len()])?;
    Ok(real.add(fake))
}

/// Adversarial loss pushing the discriminator's verdict on watermarked images to 1.
pub fn loss_adv<'t, T: Real>(watermarked_logits: Var<'t, T>) -> Result<Var<'t, T>> {
    loss_bce_logits(watermarked_logits, &vec![1.0; watermarked_logits.value().len()])
}

/// Unweighted recovery loss on the non-attacked watermarked image.
pub fn loss_stab<'t, T: Real>(landmark: Var<'t, T>, id: Var<'t, T>) -> Var<'t, T> {
    landmark.add(id)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub enc: f64,
    pub landmark: f64,
    pub id: f64,
    pub adv: f64,
    pub gen: f64,
    pub stab: f64,
}

impl LossWeights {
    pub fn pretrain() -> Self {
        Self { enc: 1.0, landmark: 11.5, id: 14.7, adv: 0.1, gen: 1.0, stab: 11.5 }
    }

    pub fn finetune() -> Self {
        Self { enc: 1.0, landmark: 4.2, id: 1.0, adv: 0.1, gen: 1.0, stab: 4.2 }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        let all = [self.enc, self.landmark, self.id, self.adv, self.gen, self.stab];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if stage == Stage::Finetune && self.stab != self.landmark {
            return Err(Error::InvalidParameter(format!("finetune needs lambda_stab = lambda_L (got {} vs {})", self.stab, self.landmark)));
        }
        Ok(())
    }
}

/// Generator-side loss terms; the finetune-only ones are `None` in pretraining.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms<V> {
    pub enc: V,
    pub dec: V,
    pub adv: V,
    pub gen: Option<V>,
    pub stab: Option<V>,
}

/// `lambda_enc L_enc + L_dec + lambda_adv L_adv`, plus `lambda_gen L_gen + lambda_stab L_stab` when finetuning.
pub fn total_generator_loss<'t, T: Real>(stage: Stage, terms: GeneratorTerms<Var<'t, T>>, w: &LossWeights) -> Result<Var<'t, T>> {
    let mut parts = vec![(T::lit(w.enc), terms.enc), (T::one(), terms.dec), (T::lit(w.adv), terms.adv)];
    if stage == Stage::Finetune {
        match (terms.gen, terms.stab) {
            (Some(gen), Some(stab)) => {
                parts.push((T::lit(w.gen), gen));
                parts.push((T::lit(w.stab), stab));
            }
            _ => return Err(Error::InvalidParameter("finetune loss needs the generative and stability terms".into())),
        }
    }
    Ok(weighted_sum(&parts))
}

/// Scalar version of [`total_generator_loss`].
pub fn total_generator_value(stage: Stage, terms: GeneratorTerms<f64>, w: &LossWeights) -> f64 {
    let mut total = w.enc * terms.enc + terms.dec + w.adv * terms.adv;
    if stage == Stage::Finetune {
        total += w.gen * terms.gen.unwrap_or(0.0) + w.stab * terms.stab.unwrap_or(0.0);
    }
    total
}
