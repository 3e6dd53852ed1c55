//! Recurrent classification of latent sequences, plus the end-to-end
//! conv+GRU model trained from raw frames.

mod convgru;
mod gru;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::data::LatentSequence;
use crate::error::{Error, Result};
use crate::nn::{bce_with_logits, seeded_rng, sigmoid, Adam};

pub use convgru::{train_convgru, ConvGru, ConvGruConfig};
pub use gru::{init_gru, GruConfig, GruModel};

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_auc: f64,
}

pub type ClassifierHistory = Vec<EpochRow>;

fn seq_to_f64(seq: &LatentSequence) -> Array2<f64> {
    seq.vectors.mapv(|v| v as f64)
}

/// Probability that a sequence belongs to the positive class.
pub fn gru_forward(model: &GruModel, seq: &LatentSequence) -> Result<f64> {
    let x = seq_to_f64(seq);
    let (logit, _) = model.forward_cached(x.view())?;
    Ok(sigmoid(logit))
}

/// Element-wise [`gru_forward`]; order-preserving.
pub fn predict(model: &GruModel, sequences: &[LatentSequence]) -> Result<Vec<f64>> {
    sequences.iter().map(|s| gru_forward(model, s)).collect()
}

/// Trains a GRU classifier with binary cross-entropy and Adam.
/// Deterministic given `cfg.seed`.
pub fn train_classifier(
    sequences: &[LatentSequence],
    labels: &[u8],
    cfg: &GruConfig,
) -> Result<(GruModel, ClassifierHistory)> {
    if sequences.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} sequences vs {} labels",
            sequences.len(),
            labels.len()
        )));
    }
    if sequences.len() < 2 {
        return Err(Error::Config("need >= 2 training subjects".into()));
    }
    if !(labels.iter().any(|&l| l == 0) && labels.iter().any(|&l| l == 1)) {
        return Err(Error::Config(
            "training set must contain both classes".into(),
        ));
    }
    for s in sequences {
        if s.dim() != cfg.input_dim {
            return Err(Error::Shape(format!(
                "sequence {} width {} != input_dim {}",
                s.subject_id,
                s.dim(),
                cfg.input_dim
            )));
        }
    }

    let mut model = init_gru(cfg)?;
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut shuffle_rng = seeded_rng(cfg.seed, &[1]);
    let inputs: Vec<Array2<f64>> = sequences.iter().map(seq_to_f64).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut scores = vec![0.0; sequences.len()];
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut logits = Vec::with_capacity(chunk.len());
            let mut caches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (logit, cache) = model.forward_cached(inputs[i].view())?;
                logits.push(logit);
                caches.push((i, cache));
            }
            let ys: Vec<f64> = chunk.iter().map(|&i| labels[i] as f64).collect();
            let (loss, dlogits) = bce_with_logits(&logits, &ys);
            if !loss.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite classifier loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            for ((i, cache), dlogit) in caches.iter().zip(dlogits.iter()) {
                scores[*i] = sigmoid(cache_logit(cache));
                model.backward(*dlogit, cache);
            }
            opt.step(model.params_mut());
        }
        let label_f: Vec<u8> = labels.to_vec();
        let train_auc = crate::eval::roc_auc(
            &scores,
            &label_f,
        )
        .unwrap_or(f64::NAN);
        history.push(EpochRow {
            epoch,
            loss: epoch_loss / sequences.len() as f64,
            train_auc,
        });
    }
    Ok((model, history))
}

fn cache_logit(cache: &gru::GruCaches) -> f64 {
    cache.logit()
}
