//! Fader network: a 3D convolutional autoencoder conditioned on site,
//! trained adversarially against a latent site discriminator so the latent
//! code carries no site information while the decoder still reconstructs.

pub(crate) mod nets;

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::{self, Blob};
use crate::data::{LatentSequence, SubjectRecord, VolumeSeries};
use crate::error::{Error, Result};
use crate::nn::{
    mse_loss, seeded_rng, softmax_cross_entropy, Adam, CeTarget, Param,
};

pub use nets::DiscMasks;
use nets::{Decoder, Discriminator, Encoder};

/// Adversarial weight for the "slight" site-information elimination regime.
pub const LAMBDA_SLIGHT: f64 = 0.01;
/// Adversarial weight for the "strong" site-information elimination regime.
pub const LAMBDA_STRONG: f64 = 0.3;

const TAG_BATCH: u64 = 10;
const TAG_DROPOUT: u64 = 11;

/// Architecture hyper-parameters shared by encoder, decoder, and
/// discriminator. The encoder halves the side per block, so a valid arch has
/// `side == 2^n_blocks` (spatial size 1 after the stack) and
/// `latent_dim == base_channels * 2^(n_blocks-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaderArch {
    pub side: usize,
    pub n_blocks: usize,
    pub base_channels: usize,
    pub n_sites: usize,
    pub disc_widths: Vec<usize>,
    pub disc_dropout: f64,
    pub leaky_slope: f64,
}

impl FaderArch {
    /// The full-scale configuration: 64-voxel cubes, 6 blocks, 32 base
    /// channels (1024-dim latent), discriminator 1024/256/64.
    pub fn full_scale(n_sites: usize) -> Self {
        FaderArch {
            side: 64,
            n_blocks: 6,
            base_channels: 32,
            n_sites,
            disc_widths: vec![1024, 256, 64],
            disc_dropout: 0.3,
            leaky_slope: 0.2,
        }
    }

    /// Desk-scale configuration for a given cube side; discriminator widths
    /// scale with the latent dimension.
    pub fn for_side(side: usize, base_channels: usize, n_sites: usize) -> Result<Self> {
        if side < 8 || !side.is_power_of_two() {
            return Err(Error::Config(format!(
                "side must be a power of two >= 8, got {side}"
            )));
        }
        let n_blocks = side.trailing_zeros() as usize;
        let latent = base_channels << (n_blocks - 1);
        let arch = FaderArch {
            side,
            n_blocks,
            base_channels,
            n_sites,
            disc_widths: vec![latent, (latent / 4).max(8), (latent / 16).max(8)],
            disc_dropout: 0.3,
            leaky_slope: 0.2,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn latent_dim(&self) -> usize {
        self.base_channels << (self.n_blocks - 1)
    }

    /// Encoder output channels per block: `base, 2*base, ..., base*2^(n-1)`.
    pub fn channel_ladder(&self) -> Vec<usize> {
        (0..self.n_blocks).map(|i| self.base_channels << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.base_channels == 0 {
            return Err(Error::Config("n_blocks and base_channels must be >= 1".into()));
        }
        if self.side != (1usize << self.n_blocks) {
            return Err(Error::Config(format!(
                "side {} must equal 2^n_blocks = {}",
                self.side,
                1usize << self.n_blocks
            )));
        }
        if self.n_sites == 0 {
            return Err(Error::Config("n_sites must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.disc_dropout) {
            return Err(Error::Config("disc_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Trainable fader model: encoder `E`, decoder `D`, latent discriminator `L`.
pub struct FaderModel {
    pub arch: FaderArch,
    encoder: Encoder,
    decoder: Decoder,
    discriminator: Discriminator,
}

/// Deterministic initialization: conv and linear weights
/// `Uniform(+-1/sqrt(fan_in))`, batch-norm scale 1 / shift 0.
pub fn init_model(arch: &FaderArch, seed: u64) -> Result<FaderModel> {
    arch.validate()?;
    Ok(FaderModel {
        arch: arch.clone(),
        encoder: Encoder::new(arch, &mut seeded_rng(seed, &[0])),
        decoder: Decoder::new(arch, &mut seeded_rng(seed, &[1])),
        discriminator: Discriminator::new(arch, &mut seeded_rng(seed, &[2])),
    })
}

/// The three training losses for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaderLosses {
    /// Mean squared reconstruction error.
    pub rec: f64,
    /// Cross-entropy of the discriminator against true sites (encoder
    /// treated as constant).
    pub disc: f64,
    /// Cross-entropy of the discriminator output against the uniform
    /// distribution (discriminator treated as constant).
    pub adv: f64,
}

/// Which loss a gradient pass propagates; used by the gradient-check suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaderLoss {
    Rec,
    Disc,
    Adv,
}

impl FaderModel {
    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    fn check_frame_rows(&self, x: &Array2<f64>) -> Result<usize> {
        let cube = self.arch.side.pow(3);
        if x.ncols() != 1 || x.nrows() == 0 || x.nrows() % cube != 0 {
            return Err(Error::Shape(format!(
                "frame batch must be [n*{cube}, 1], got [{}, {}]",
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(x.nrows() / cube)
    }

    /// Inference-mode encoding of a frame batch `[n * side^3, 1]` into
    /// latents `[n, latent_dim]`.
    pub fn encode_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_frame_rows(x)?;
        Ok(self.encoder.forward_eval(x))
    }

    /// Inference-mode decoding of latents with one-hot site rows.
    pub fn decode_batch(&self, z: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent width {} != latent_dim {}",
                z.ncols(),
                self.latent_dim()
            )));
        }
        check_one_hot(y, self.arch.n_sites)?;
        if z.nrows() != y.nrows() {
            return Err(Error::Shape("z and y row counts differ".into()));
        }
        Ok(self.decoder.forward_eval(z, y))
    }

    /// Inference-mode site probabilities for latents `[n, latent_dim]`.
    pub fn discriminate_batch(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent width {} != latent_dim {}",
                z.ncols(),
                self.latent_dim()
            )));
        }
        let logits = self.discriminator.forward_eval(z);
        let (_, _, probs) = softmax_cross_entropy(&logits, CeTarget::Uniform);
        Ok(probs)
    }

    /// Training-mode losses on a batch, without updating running statistics.
    /// `masks` fixes the discriminator dropout; `None` disables dropout.
    pub fn losses(
        &mut self,
        x: &Array2<f64>,
        sites: &[usize],
        masks: Option<&DiscMasks>,
    ) -> Result<FaderLosses> {
        let n = self.check_frame_rows(x)?;
        check_sites(sites, n, self.arch.n_sites)?;
        let y = one_hot_rows(sites, self.arch.n_sites);
        let (z, _) = self.encoder.forward_train(x, false);
        let (xhat, _) = self.decoder.forward_train(&z, &y, false);
        let (rec, _) = mse_loss(&xhat, x);
        let identity = self.discriminator.identity_masks(n);
        let masks = masks.unwrap_or(&identity);
        let (logits, _) = self.discriminator.forward_train(&z, masks, false);
        let (disc, _, _) = softmax_cross_entropy(&logits, CeTarget::Labels(sites));
        let (adv, _, _) = softmax_cross_entropy(&logits, CeTarget::Uniform);
        let losses = FaderLosses { rec, disc, adv };
        if !(rec.is_finite() && disc.is_finite() && adv.is_finite()) {
            return Err(Error::Data(format!("non-finite losses: {losses:?}")));
        }
        Ok(losses)
    }

    /// Forward + backward of one loss with fixed dropout masks, accumulating
    /// gradients into the parameter group that the loss trains: `Rec` into
    /// encoder+decoder, `Disc` into the discriminator, `Adv` into the encoder
    /// (through the frozen discriminator). Gradients are zeroed first.
    pub fn loss_backward(
        &mut self,
        which: FaderLoss,
        x: &Array2<f64>,
        sites: &[usize],
        masks: &DiscMasks,
    ) -> Result<f64> {
        let n = self.check_frame_rows(x)?;
        check_sites(sites, n, self.arch.n_sites)?;
        for p in self.all_params_mut() {
            p.zero_grad();
        }
        let y = one_hot_rows(sites, self.arch.n_sites);
        match which {
            FaderLoss::Rec => {
                let (z, enc_caches) = self.encoder.forward_train(x, false);
                let (xhat, dec_caches) = self.decoder.forward_train(&z, &y, false);
                let (loss, dxhat) = mse_loss(&xhat, x);
                let dz = self.decoder.backward(&dxhat, &dec_caches);
                self.encoder.backward(&dz, &enc_caches);
                Ok(loss)
            }
            FaderLoss::Disc => {
                let (z, _) = self.encoder.forward_train(x, false);
                let (logits, caches) = self.discriminator.forward_train(&z, masks, false);
                let (loss, dlogits, _) = softmax_cross_entropy(&logits, CeTarget::Labels(sites));
                self.discriminator.backward(&dlogits, &caches, masks);
                Ok(loss)
            }
            FaderLoss::Adv => {
                let (z, enc_caches) = self.encoder.forward_train(x, false);
                let (logits, caches) = self.discriminator.forward_train(&z, masks, false);
                let (loss, dlogits, _) = softmax_cross_entropy(&logits, CeTarget::Uniform);
                let dz = self.discriminator.backward_frozen(&dlogits, &caches, masks);
                self.encoder.backward(&dz, &enc_caches);
                Ok(loss)
            }
        }
    }

    /// Deterministic loss value with fixed masks; pairs with
    /// [`FaderModel::loss_backward`] for finite-difference checks.
    pub fn loss_value(
        &mut self,
        which: FaderLoss,
        x: &Array2<f64>,
        sites: &[usize],
        masks: &DiscMasks,
    ) -> Result<f64> {
        let losses = self.losses(x, sites, Some(masks))?;
        Ok(match which {
            FaderLoss::Rec => losses.rec,
            FaderLoss::Disc => losses.disc,
            FaderLoss::Adv => losses.adv,
        })
    }

    pub fn sample_disc_masks(&self, rows: usize, rng: &mut ChaCha8Rng) -> DiscMasks {
        self.discriminator.sample_masks(rows, rng)
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Param> {
        self.encoder.params_mut()
    }

    pub fn decoder_params_mut(&mut self) -> Vec<&mut Param> {
        self.decoder.params_mut()
    }

    pub fn discriminator_params_mut(&mut self) -> Vec<&mut Param> {
        self.discriminator.params_mut()
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out.extend(self.discriminator.params_mut());
        out
    }

    fn state_blobs(&self) -> Vec<Blob> {
        let mut blobs = Vec::new();
        let mut push_params = |params: Vec<&Param>| {
            for p in params {
                blobs.push(Blob::from_f64(p.name.clone(), &p.shape, &p.data));
            }
        };
        push_params(self.encoder.params());
        push_params(self.decoder.params());
        push_params(self.discriminator.params());
        for bn in self
            .encoder
            .batch_norms()
            .into_iter()
            .chain(self.decoder.batch_norms())
            .chain(self.discriminator.batch_norms())
        {
            let c = bn.channels();
            let prefix = bn.gamma.name.trim_end_matches(".gamma").to_string();
            blobs.push(Blob::from_f64(
                format!("{prefix}.running_mean"),
                &[c],
                &bn.running_mean,
            ));
            blobs.push(Blob::from_f64(
                format!("{prefix}.running_var"),
                &[c],
                &bn.running_var,
            ));
        }
        blobs
    }

    /// Writes a checkpoint: versioned header, arch echo, named f32 blobs.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let arch = serde_json::to_value(&self.arch).expect("arch json");
        ckpt::write_checkpoint(path, "fader", &arch, &self.state_blobs())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FaderModel> {
        let path = path.as_ref();
        let (kind, arch_json, blobs) = ckpt::read_checkpoint(path)?;
        if kind != "fader" {
            return Err(Error::format(path, format!("checkpoint kind `{kind}`, expected `fader`")));
        }
        let arch: FaderArch = serde_json::from_value(arch_json)
            .map_err(|e| Error::format(path, format!("arch echo: {e}")))?;
        let mut model = init_model(&arch, 0)?;
        let by_name: std::collections::HashMap<&str, &Blob> =
            blobs.iter().map(|b| (b.name.as_str(), b)).collect();
        let mut fill = |p: &mut Param| -> Result<()> {
            let blob = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::format(path, format!("missing blob `{}`", p.name)))?;
            if blob.data.len() != p.data.len() {
                return Err(Error::Shape(format!(
                    "blob `{}` has {} values, expected {}",
                    p.name,
                    blob.data.len(),
                    p.data.len()
                )));
            }
            p.data.copy_from_slice(&blob.to_f64());
            Ok(())
        };
        for p in model.encoder.params_mut() {
            fill(p)?;
        }
        for p in model.decoder.params_mut() {
            fill(p)?;
        }
        for p in model.discriminator.params_mut() {
            fill(p)?;
        }
        let bns = model
            .encoder
            .batch_norms_mut()
            .into_iter()
            .chain(model.decoder.batch_norms_mut())
            .chain(model.discriminator.batch_norms_mut());
        for bn in bns {
            let prefix = bn.gamma.name.trim_end_matches(".gamma").to_string();
            for (field, target) in [
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let name = format!("{prefix}.{field}");
                let blob = by_name
                    .get(name.as_str())
                    .ok_or_else(|| Error::format(path, format!("missing blob `{name}`")))?;
                if blob.data.len() != target.len() {
                    return Err(Error::Shape(format!("blob `{name}` length mismatch")));
                }
                target.copy_from_slice(&blob.to_f64());
            }
        }
        Ok(model)
    }
}

fn check_one_hot(y: &Array2<f64>, n_sites: usize) -> Result<()> {
    if y.ncols() != n_sites {
        return Err(Error::Shape(format!(
            "one-hot width {} != n_sites {n_sites}",
            y.ncols()
        )));
    }
    for row in y.rows() {
        let mut sum = 0.0;
        for &v in row.iter() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Domain(format!(
                    "one-hot entries must be exactly 0 or 1, got {v}"
                )));
            }
            sum += v;
        }
        if sum != 1.0 {
            return Err(Error::Domain(format!(
                "one-hot row must sum to 1, got {sum}"
            )));
        }
    }
    Ok(())
}

fn check_sites(sites: &[usize], n_rows: usize, n_sites: usize) -> Result<()> {
    if sites.len() != n_rows {
        return Err(Error::Shape(format!(
            "{} site labels for {n_rows} frames",
            sites.len()
        )));
    }
    if let Some(&bad) = sites.iter().find(|&&s| s >= n_sites) {
        return Err(Error::Domain(format!(
            "site index {bad} out of range 0..{n_sites}"
        )));
    }
    Ok(())
}

/// One-hot rows for site labels.
pub fn one_hot_rows(sites: &[usize], n_sites: usize) -> Array2<f64> {
    let mut y = Array2::<f64>::zeros((sites.len(), n_sites));
    for (i, &s) in sites.iter().enumerate() {
        y[[i, s]] = 1.0;
    }
    y
}

/// Flattens an f32 frame into the `[side^3, 1]` f64 batch layout.
pub fn frame_to_batch(frame: ArrayView3<'_, f32>) -> Array2<f64> {
    let (x, y, z) = frame.dim();
    let mut out = Array2::<f64>::zeros((x * y * z, 1));
    for (i, &v) in frame.iter().enumerate() {
        out[[i, 0]] = v as f64;
    }
    out
}

/// Encodes a single 3D frame to its latent vector (inference mode).
pub fn encode(model: &FaderModel, frame: ArrayView3<'_, f32>) -> Result<Array1<f64>> {
    let (x, y, z) = frame.dim();
    let s = model.arch.side;
    if (x, y, z) != (s, s, s) {
        return Err(Error::Shape(format!(
            "frame side [{x}, {y}, {z}] does not match arch side {s}"
        )));
    }
    let batch = frame_to_batch(frame);
    let z = model.encode_batch(&batch)?;
    let out = z.row(0).to_owned();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite latent".into()));
    }
    Ok(out)
}

/// Decodes a latent vector and a one-hot site into a 3D volume.
pub fn decode(model: &FaderModel, z: &[f64], y: &[f64]) -> Result<Array3<f64>> {
    let zr = Array2::from_shape_vec((1, z.len()), z.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let yr = Array2::from_shape_vec((1, y.len()), y.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let out = model.decode_batch(&zr, &yr)?;
    let s = model.arch.side;
    Array3::from_shape_vec((s, s, s), out.column(0).to_vec())
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Site probabilities for one latent vector (softmax output, sums to 1).
pub fn discriminate(model: &FaderModel, z: &[f64]) -> Result<Vec<f64>> {
    let zr = Array2::from_shape_vec((1, z.len()), z.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let probs = model.discriminate_batch(&zr)?;
    Ok(probs.row(0).to_vec())
}

/// Training-mode batch losses with dropout disabled; see
/// [`FaderModel::losses`] for the mask-controlled variant.
pub fn fader_losses(
    model: &mut FaderModel,
    x: &Array2<f64>,
    sites: &[usize],
) -> Result<FaderLosses> {
    model.losses(x, sites, None)
}

/// Encodes every frame of a series (inference mode) into a latent sequence.
pub fn encode_series(model: &FaderModel, series: &VolumeSeries) -> Result<LatentSequence> {
    let s = model.arch.side;
    if series.side() != s {
        return Err(Error::Shape(format!(
            "series side {} does not match arch side {s}",
            series.side()
        )));
    }
    let t = series.len_t();
    let cube = s * s * s;
    let mut batch = Array2::<f64>::zeros((t * cube, 1));
    for (i, &v) in series.data().iter().enumerate() {
        batch[[i, 0]] = v as f64;
    }
    let z = model.encode_batch(&batch)?;
    let vectors = z.mapv(|v| v as f32);
    LatentSequence::new(series.subject_id(), vectors)
}

/// Training mode: alternating fader updates or single-step gradient
/// reversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FaderAlternating,
    GradientReversal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaderTrainConfig {
    /// Adversarial weight; 0 degenerates to a plain autoencoder.
    pub lambda: f64,
    /// Steps over which the adversarial weight ramps linearly from 0.
    pub lambda_ramp_steps: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub steps: usize,
    pub mode: TrainMode,
    pub seed: u64,
    /// Record before/after measurements around each update (costs extra
    /// forward passes; used by the adversarial-directionality checks).
    #[serde(default)]
    pub track_step_deltas: bool,
}

impl FaderTrainConfig {
    pub fn new(lambda: f64, steps: usize, seed: u64) -> Self {
        FaderTrainConfig {
            lambda,
            lambda_ramp_steps: steps / 4,
            lr: 2e-4,
            adam_betas: (0.5, 0.999),
            batch_size: 16,
            steps,
            mode: TrainMode::FaderAlternating,
            seed,
            track_step_deltas: false,
        }
    }

    fn lambda_at(&self, step: usize) -> f64 {
        if self.lambda_ramp_steps == 0 {
            self.lambda
        } else {
            self.lambda * (step as f64 / self.lambda_ramp_steps as f64).min(1.0)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// One history row per training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub l_rec: f64,
    pub l_disc: f64,
    pub l_adv: f64,
    pub disc_acc: f64,
    pub lambda_t: f64,
}

/// Before/after measurements around the two updates of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDelta {
    pub disc_acc_before: f64,
    pub disc_acc_after: f64,
    pub l_adv_before: f64,
    pub l_adv_after: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub deltas: Vec<StepDelta>,
}

impl TrainHistory {
    pub fn last_rec(&self) -> Option<f64> {
        self.rows.last().map(|r| r.l_rec)
    }

    /// Mean of a column over the last `k` rows.
    pub fn tail_mean(&self, k: usize, f: impl Fn(&HistoryRow) -> f64) -> f64 {
        let n = self.rows.len();
        let take = k.min(n);
        if take == 0 {
            return f64::NAN;
        }
        self.rows[n - take..].iter().map(f).sum::<f64>() / take as f64
    }

    /// Writes the step log as CSV with columns
    /// `step,L_rec,L_disc,L_adv,disc_acc,lambda_t`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("step,L_rec,L_disc,L_adv,disc_acc,lambda_t\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.l_rec, r.l_disc, r.l_adv, r.disc_acc, r.lambda_t
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// In-memory training data: per-subject series plus site labels.
pub struct TrainingSet {
    subjects: Vec<(usize, VolumeSeries)>,
    side: usize,
    n_sites: usize,
    /// Cumulative frame counts for uniform (subject, t) sampling.
    cum_frames: Vec<usize>,
}

impl TrainingSet {
    pub fn from_subjects(subjects: Vec<(usize, VolumeSeries)>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let side = subjects[0].1.side();
        if subjects.iter().any(|(_, s)| s.side() != side) {
            return Err(Error::Dimension("mixed volume sides in training set".into()));
        }
        let n_sites = subjects.iter().map(|(s, _)| s + 1).max().unwrap_or(1);
        let mut cum = Vec::with_capacity(subjects.len());
        let mut total = 0usize;
        for (_, s) in &subjects {
            total += s.len_t();
            cum.push(total);
        }
        Ok(TrainingSet {
            subjects,
            side,
            n_sites,
            cum_frames: cum,
        })
    }

    /// Loads every record's series; relative paths resolve against `base`.
    pub fn load(records: &[SubjectRecord], base: &Path) -> Result<Self> {
        let mut subjects = Vec::with_capacity(records.len());
        for r in records {
            let path = if r.series_path.is_absolute() {
                r.series_path.clone()
            } else {
                base.join(&r.series_path)
            };
            subjects.push((r.site, crate::data::load_volume_series(path)?));
        }
        Self::from_subjects(subjects)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_frames(&self) -> usize {
        *self.cum_frames.last().unwrap_or(&0)
    }

    pub fn subjects(&self) -> &[(usize, VolumeSeries)] {
        &self.subjects
    }

    /// Draws `batch` (subject, t) pairs uniformly with replacement and packs
    /// the frames as `[batch * side^3, 1]`.
    fn sample_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
        use rand::Rng;
        let cube = self.side.pow(3);
        let mut x = Array2::<f64>::zeros((batch * cube, 1));
        let mut sites = Vec::with_capacity(batch);
        for b in 0..batch {
            let g = rng.gen_range(0..self.total_frames());
            let subj = self.cum_frames.partition_point(|&c| c <= g);
            let before = if subj == 0 { 0 } else { self.cum_frames[subj - 1] };
            let t = g - before;
            let (site, series) = &self.subjects[subj];
            sites.push(*site);
            let frame = series.frame(t);
            let slice = frame.to_slice().expect("contiguous frame");
            for (i, &v) in slice.iter().enumerate() {
                x[[b * cube + i, 0]] = v as f64;
            }
        }
        (x, sites)
    }
}

fn batch_accuracy(logits: &Array2<f64>, sites: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (row, &site) in logits.rows().into_iter().zip(sites.iter()) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == site {
            correct += 1;
        }
    }
    correct as f64 / sites.len() as f64
}

fn ce_uniform_from_probs(probs: &Array2<f64>) -> f64 {
    let (n, c) = probs.dim();
    let u = 1.0 / c as f64;
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..c {
            loss -= u * probs[[i, j]].max(1e-300).ln();
        }
    }
    loss / n as f64
}

fn check_divergence(step: usize, losses: &FaderLosses, history: &TrainHistory) -> Result<()> {
    if losses.rec.is_finite() && losses.disc.is_finite() && losses.adv.is_finite() {
        return Ok(());
    }
    Err(Error::Diverged {
        step,
        what: format!(
            "L_rec={}, L_disc={}, L_adv={}",
            losses.rec, losses.disc, losses.adv
        ),
        history: Box::new(history.clone()),
    })
}

/// Trains a fader model. With `mode == FaderAlternating` each step first
/// updates the discriminator on `L_disc` (encoder frozen), then the
/// encoder-decoder on `L_rec + lambda_t * L_adv` (discriminator frozen).
/// With `mode == GradientReversal` one combined step updates everything,
/// the discriminator minimizing `L_disc` and the encoder receiving the
/// reversed discriminator gradient at the latent boundary.
pub fn train_fader(
    set: &TrainingSet,
    arch: &FaderArch,
    cfg: &FaderTrainConfig,
) -> Result<(FaderModel, TrainHistory)> {
    cfg.validate()?;
    arch.validate()?;
    if set.side() != arch.side {
        return Err(Error::Shape(format!(
            "training volumes side {} != arch side {}",
            set.side(),
            arch.side
        )));
    }
    if set.n_sites() > arch.n_sites {
        return Err(Error::Config(format!(
            "training set has {} sites, arch declares {}",
            set.n_sites(),
            arch.n_sites
        )));
    }
    if cfg.lambda > 0.0 && set.n_sites() < 2 {
        return Err(Error::Config(
            "adversarial training (lambda > 0) needs >= 2 sites".into(),
        ));
    }

    let mut model = init_model(arch, cfg.seed)?;
    let mut batch_rng = seeded_rng(cfg.seed, &[TAG_BATCH]);
    let mut dropout_rng = seeded_rng(cfg.seed, &[TAG_DROPOUT]);
    let (b1, b2) = cfg.adam_betas;
    let mut opt_ae = Adam::new(cfg.lr, b1, b2);
    let mut opt_disc = Adam::new(cfg.lr, b1, b2);
    let mut opt_all = Adam::new(cfg.lr, b1, b2);
    let mut history = TrainHistory::default();

    for step in 0..cfg.steps {
        let lambda_t = cfg.lambda_at(step);
        let (x, sites) = set.sample_batch(cfg.batch_size, &mut batch_rng);
        let y = one_hot_rows(&sites, arch.n_sites);

        let (losses, disc_acc) = match cfg.mode {
            TrainMode::FaderAlternating => {
                // Discriminator step on detached latents.
                let (z_det, _) = model.encoder.forward_train(&x, false);
                let masks = model.discriminator.sample_masks(cfg.batch_size, &mut dropout_rng);
                let (logits, disc_caches) =
                    model.discriminator.forward_train(&z_det, &masks, true);
                let (l_disc, dlogits, _) =
                    softmax_cross_entropy(&logits, CeTarget::Labels(&sites));
                let acc = batch_accuracy(&logits, &sites);
                model.discriminator.backward(&dlogits, &disc_caches, &masks);
                opt_disc.step(model.discriminator.params_mut());
                let acc_after = cfg.track_step_deltas.then(|| {
                    let (logits2, _) =
                        model.discriminator.forward_train(&z_det, &masks, false);
                    batch_accuracy(&logits2, &sites)
                });

                // Encoder-decoder step against the updated, frozen
                // discriminator.
                let (z, enc_caches) = model.encoder.forward_train(&x, true);
                let (xhat, dec_caches) = model.decoder.forward_train(&z, &y, true);
                let (l_rec, dxhat) = mse_loss(&xhat, &x);
                let mut dz = model.decoder.backward(&dxhat, &dec_caches);
                let masks2 = model.discriminator.sample_masks(cfg.batch_size, &mut dropout_rng);
                let (logits2, caches2) = model.discriminator.forward_train(&z, &masks2, false);
                let (l_adv, dlog2, _) = softmax_cross_entropy(&logits2, CeTarget::Uniform);
                if lambda_t > 0.0 {
                    let dz_adv = model.discriminator.backward_frozen(&dlog2, &caches2, &masks2);
                    dz.zip_mut_with(&dz_adv, |a, &b| *a += lambda_t * b);
                }
                model.encoder.backward(&dz, &enc_caches);
                let mut ae_params = model.encoder.params_mut();
                ae_params.extend(model.decoder.params_mut());
                opt_ae.step(ae_params);

                if cfg.track_step_deltas {
                    let (z_after, _) = model.encoder.forward_train(&x, false);
                    let (logits3, _) =
                        model.discriminator.forward_train(&z_after, &masks2, false);
                    let (l_adv_after, _, _) = softmax_cross_entropy(&logits3, CeTarget::Uniform);
                    history.deltas.push(StepDelta {
                        disc_acc_before: acc,
                        disc_acc_after: acc_after.unwrap_or(f64::NAN),
                        l_adv_before: l_adv,
                        l_adv_after,
                    });
                }

                (
                    FaderLosses {
                        rec: l_rec,
                        disc: l_disc,
                        adv: l_adv,
                    },
                    acc,
                )
            }
            TrainMode::GradientReversal => {
                let (z, enc_caches) = model.encoder.forward_train(&x, true);
                let (xhat, dec_caches) = model.decoder.forward_train(&z, &y, true);
                let (l_rec, dxhat) = mse_loss(&xhat, &x);
                let mut dz = model.decoder.backward(&dxhat, &dec_caches);
                let masks = model.discriminator.sample_masks(cfg.batch_size, &mut dropout_rng);
                let (logits, disc_caches) = model.discriminator.forward_train(&z, &masks, true);
                let (l_disc, dlogits, probs) =
                    softmax_cross_entropy(&logits, CeTarget::Labels(&sites));
                let l_adv = ce_uniform_from_probs(&probs);
                let acc = batch_accuracy(&logits, &sites);
                // The discriminator trains on L_disc; the encoder receives
                // the reversed gradient at the latent boundary.
                let dz_disc = model.discriminator.backward(&dlogits, &disc_caches, &masks);
                dz.zip_mut_with(&dz_disc, |a, &b| *a -= lambda_t * b);
                model.encoder.backward(&dz, &enc_caches);
                opt_all.step(model.all_params_mut());
                (
                    FaderLosses {
                        rec: l_rec,
                        disc: l_disc,
                        adv: l_adv,
                    },
                    acc,
                )
            }
        };

        history.rows.push(HistoryRow {
            step,
            l_rec: losses.rec,
            l_disc: losses.disc,
            l_adv: losses.adv,
            disc_acc,
            lambda_t,
        });
        check_divergence(step, &losses, &history)?;
    }

    Ok((model, history))
}

/// Dedicated plain-autoencoder path: identical initialization and batch
/// sampling streams as [`train_fader`], no discriminator interaction at all.
/// With `cfg.lambda == 0` the fader path produces bit-identical
/// encoder/decoder parameter trajectories.
pub fn train_autoencoder(
    set: &TrainingSet,
    arch: &FaderArch,
    cfg: &FaderTrainConfig,
) -> Result<(FaderModel, TrainHistory)> {
    cfg.validate()?;
    arch.validate()?;
    if set.side() != arch.side {
        return Err(Error::Shape(format!(
            "training volumes side {} != arch side {}",
            set.side(),
            arch.side
        )));
    }
    let mut model = init_model(arch, cfg.seed)?;
    let mut batch_rng = seeded_rng(cfg.seed, &[TAG_BATCH]);
    let (b1, b2) = cfg.adam_betas;
    let mut opt = Adam::new(cfg.lr, b1, b2);
    let mut history = TrainHistory::default();

    for step in 0..cfg.steps {
        let (x, sites) = set.sample_batch(cfg.batch_size, &mut batch_rng);
        let y = one_hot_rows(&sites, arch.n_sites);
        let (z, enc_caches) = model.encoder.forward_train(&x, true);
        let (xhat, dec_caches) = model.decoder.forward_train(&z, &y, true);
        let (l_rec, dxhat) = mse_loss(&xhat, &x);
        let dz = model.decoder.backward(&dxhat, &dec_caches);
        model.encoder.backward(&dz, &enc_caches);
        let mut params = model.encoder.params_mut();
        params.extend(model.decoder.params_mut());
        opt.step(params);
        history.rows.push(HistoryRow {
            step,
            l_rec,
            l_disc: f64::NAN,
            l_adv: f64::NAN,
            disc_acc: f64::NAN,
            lambda_t: 0.0,
        });
        if !l_rec.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("L_rec={l_rec}"),
                history: Box::new(history.clone()),
            });
        }
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests;
