//! End-to-end conv+GRU model: one frame encoder shared across time, a GRU
//! over the per-frame feature vectors, temporal mean pooling, logistic
//! readout. Trained jointly from raw frames with no pretraining and no
//! discriminator.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::VolumeSeries;
use crate::error::{Error, Result};
use crate::fader::nets::Encoder;
use crate::fader::FaderArch;
use crate::nn::{bce_with_logits, seeded_rng, sigmoid, Adam};

use super::gru::{init_gru, GruConfig, GruModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvGruConfig {
    /// Convolutional feature extractor (encoder half of the fader arch).
    pub arch: FaderArch,
    pub hidden: usize,
    pub n_layers: usize,
    pub steps: usize,
    /// Subjects per step; every frame of a drawn subject enters the batch.
    pub batch_subjects: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ConvGruConfig {
    pub fn new(arch: FaderArch, hidden: usize, steps: usize, seed: u64) -> Self {
        ConvGruConfig {
            arch,
            hidden,
            n_layers: 2,
            steps,
            batch_subjects: 4,
            lr: 1e-3,
            seed,
        }
    }
}

pub struct ConvGru {
    pub(crate) encoder: Encoder,
    pub(crate) gru: GruModel,
    pub arch: FaderArch,
}

impl ConvGru {
    pub fn init(cfg: &ConvGruConfig) -> Result<Self> {
        cfg.arch.validate()?;
        let encoder = Encoder::new(&cfg.arch, &mut seeded_rng(cfg.seed, &[0]));
        let gru_cfg = GruConfig {
            n_layers: cfg.n_layers,
            hidden: cfg.hidden,
            input_dim: cfg.arch.latent_dim(),
            lr: cfg.lr,
            batch_size: cfg.batch_subjects,
            epochs: 0,
            seed: crate::nn::derive_seed(cfg.seed, &[2]),
        };
        let gru = init_gru(&gru_cfg)?;
        Ok(ConvGru {
            encoder,
            gru,
            arch: cfg.arch.clone(),
        })
    }

    fn series_to_rows(&self, series: &VolumeSeries) -> Result<Array2<f64>> {
        if series.side() != self.arch.side {
            return Err(Error::Shape(format!(
                "series side {} != arch side {}",
                series.side(),
                self.arch.side
            )));
        }
        let cube = self.arch.side.pow(3);
        let t = series.len_t();
        let mut rows = Array2::<f64>::zeros((t * cube, 1));
        for (i, &v) in series.data().iter().enumerate() {
            rows[[i, 0]] = v as f64;
        }
        Ok(rows)
    }

    /// Inference-mode probability for one subject.
    pub fn predict_series(&self, series: &VolumeSeries) -> Result<f64> {
        let rows = self.series_to_rows(series)?;
        let latents = self.encoder.forward_eval(&rows);
        let (logit, _) = self.gru.forward_cached(latents.view())?;
        Ok(sigmoid(logit))
    }
}

/// Per-step loss record.
pub type ConvGruHistory = Vec<(usize, f64)>;

/// Joint training from scratch with BCE + Adam. Deterministic given
/// `cfg.seed`.
pub fn train_convgru(
    subjects: &[(VolumeSeries, u8)],
    cfg: &ConvGruConfig,
) -> Result<(ConvGru, ConvGruHistory)> {
    if subjects.len() < 2 {
        return Err(Error::Config("need >= 2 training subjects".into()));
    }
    if !(subjects.iter().any(|(_, l)| *l == 0) && subjects.iter().any(|(_, l)| *l == 1)) {
        return Err(Error::Config(
            "training set must contain both classes".into(),
        ));
    }
    let mut model = ConvGru::init(cfg)?;
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut sample_rng = seeded_rng(cfg.seed, &[1]);
    let cube = cfg.arch.side.pow(3);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_subjects)
            .map(|_| sample_rng.gen_range(0..subjects.len()))
            .collect();
        // Concatenate every frame of the drawn subjects into one conv batch
        // so batch norm sees all of them.
        let total_t: usize = picks.iter().map(|&i| subjects[i].0.len_t()).sum();
        let mut frames = Array2::<f64>::zeros((total_t * cube, 1));
        let mut offset = 0usize;
        for &i in &picks {
            for (j, &v) in subjects[i].0.data().iter().enumerate() {
                frames[[offset + j, 0]] = v as f64;
            }
            offset += subjects[i].0.len_t() * cube;
        }
        let (latents, enc_caches) = model.encoder.forward_train(&frames, true);

        let mut logits = Vec::with_capacity(picks.len());
        let mut caches = Vec::with_capacity(picks.len());
        let mut row_start = 0usize;
        for &i in &picks {
            let t = subjects[i].0.len_t();
            let seq = latents.slice(ndarray::s![row_start..row_start + t, ..]);
            let (logit, cache) = model.gru.forward_cached(seq)?;
            logits.push(logit);
            caches.push((row_start, t, cache));
            row_start += t;
        }
        let ys: Vec<f64> = picks.iter().map(|&i| subjects[i].1 as f64).collect();
        let (loss, dlogits) = bce_with_logits(&logits, &ys);
        if !loss.is_finite() {
            return Err(Error::Data(format!("non-finite loss at step {step}")));
        }

        let mut dlatents = Array2::<f64>::zeros(latents.raw_dim());
        for ((row_start, t, cache), dlogit) in caches.iter().zip(dlogits.iter()) {
            let dx = model.gru.backward(*dlogit, cache);
            for (dt, row) in dx.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    dlatents[[row_start + dt, j]] += v;
                }
            }
            let _ = t;
        }
        model.encoder.backward(&dlatents, &enc_caches);

        let mut params = model.encoder.params_mut();
        params.extend(model.gru.params_mut());
        opt.step(params);
        history.push((step, loss));
    }
    Ok((model, history))
}
