use std::path::PathBuf;

use ndarray::{Array2, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject's 4D scan: `T` time-steps of cubic 3D intensity volumes.
///
/// The volume side must be a power of two (>= 8) so that a stack of stride-2
/// convolution blocks can halve each axis down to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSeries {
    subject_id: String,
    tr_seconds: f32,
    data: Array4<f32>,
}

impl VolumeSeries {
    pub fn new(subject_id: impl Into<String>, tr_seconds: f32, data: Array4<f32>) -> Result<Self> {
        let (t, x, y, z) = data.dim();
        if t < 1 {
            return Err(Error::Dimension("T must be >= 1".into()));
        }
        if x != y || y != z {
            return Err(Error::Dimension(format!(
                "volume must be cubic, got [{x}, {y}, {z}]"
            )));
        }
        if x < 8 || !x.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "volume side must be a power of two >= 8, got {x}"
            )));
        }
        if !(tr_seconds.is_finite() && tr_seconds > 0.0) {
            return Err(Error::Domain(format!(
                "tr_seconds must be a positive real, got {tr_seconds}"
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value in volume payload at flat index {bad}"
            )));
        }
        Ok(VolumeSeries {
            subject_id: subject_id.into(),
            tr_seconds,
            data,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn tr_seconds(&self) -> f32 {
        self.tr_seconds
    }

    /// Number of time-steps.
    pub fn len_t(&self) -> usize {
        self.data.dim().0
    }

    /// Volume side length S (cubic volumes).
    pub fn side(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(ndarray::Axis(0), t)
    }
}

/// Phenotype row: one subject with its site and diagnosis labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// Site index in `0..n_sites`.
    pub site: usize,
    /// Binary diagnosis, 1 = positive class.
    pub diagnosis: u8,
    pub series_path: PathBuf,
}

impl SubjectRecord {
    pub fn new(
        subject_id: impl Into<String>,
        site: usize,
        diagnosis: u8,
        series_path: impl Into<PathBuf>,
    ) -> Result<Self> {
        if diagnosis > 1 {
            return Err(Error::Domain(format!(
                "diagnosis must be 0 or 1, got {diagnosis}"
            )));
        }
        Ok(SubjectRecord {
            subject_id: subject_id.into(),
            site,
            diagnosis,
            series_path: series_path.into(),
        })
    }
}

/// Number of distinct sites among `records` (max index + 1).
pub fn site_count(records: &[SubjectRecord]) -> usize {
    records.iter().map(|r| r.site + 1).max().unwrap_or(0)
}

/// `T` latent vectors (one per time-step) produced by an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub subject_id: String,
    /// `[T, D_latent]`, all finite.
    pub vectors: Array2<f32>,
}

impl LatentSequence {
    pub fn new(subject_id: impl Into<String>, vectors: Array2<f32>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::Dimension("latent sequence must be non-empty".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in latent sequence".into()));
        }
        Ok(LatentSequence {
            subject_id: subject_id.into(),
            vectors,
        })
    }

    pub fn len_t(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Time-mean latent vector, in f64.
    pub fn mean_vector(&self) -> Vec<f64> {
        let t = self.vectors.nrows() as f64;
        (0..self.vectors.ncols())
            .map(|j| self.vectors.column(j).iter().map(|&v| v as f64).sum::<f64>() / t)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    KFold,
    LeaveOneSiteOut,
}

/// One train/test split. `held_out_site` is set for leave-one-site-out folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub held_out_site: Option<usize>,
}

/// A complete cross-validation assignment over a set of subjects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<Fold>,
    pub kind: SplitKind,
    pub seed: u64,
}
