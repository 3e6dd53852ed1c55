//! Synthetic multi-site dataset generator.
//!
//! Each site plants three independently controllable effects: a
//! multiplicative intensity gain, a smooth site-specific spatial bias field,
//! and a per-voxel noise level. Disease is a temporal effect: positive
//! subjects carry a sinusoidal activation (period [`SIGNAL_PERIOD`] frames)
//! inside a smoothed region mask, so a single frame carries less label
//! information than the sequence.
//!
//! Frame formula for subject at site `s` with diagnosis `d`:
//! `V[t] = gain[s] * (B + bias_scale * F_s + d * amp * sin(2 pi t / P) * M) + eps`,
//! with `B` a fixed radial template, `F_s` a smoothed unit-max site field,
//! `M` the smoothed region indicator, and `eps ~ N(0, sigma[s]^2)` i.i.d.
//! per voxel per frame. All randomness derives from `(seed, site, subject)`,
//! so generation order cannot change the output.

use std::path::Path;

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{save_phenotype_table, save_volume_series, SubjectRecord, VolumeSeries};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

/// Period of the planted sinusoidal activation, in frames.
pub const SIGNAL_PERIOD: usize = 10;

const TAG_SITE_FIELD: u64 = 101;
const TAG_SUBJECT_NOISE: u64 = 102;

/// Axis-aligned box `[min, min+size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub min: [usize; 3],
    pub size: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sites: usize,
    pub subjects_per_site: usize,
    pub t_len: usize,
    pub side: usize,
    pub site_gain: Vec<f64>,
    pub site_bias_scale: f64,
    pub noise_sigma: Vec<f64>,
    pub signal_amplitude: f64,
    pub signal_region: Region,
    pub tr_seconds: f32,
    pub seed: u64,
}

impl SynthConfig {
    /// Two sites with a 30% gain gap; the set used by the small examples.
    pub fn default_two_site() -> Self {
        SynthConfig {
            n_sites: 2,
            subjects_per_site: 20,
            t_len: 32,
            side: 16,
            site_gain: vec![1.0, 1.3],
            site_bias_scale: 0.2,
            noise_sigma: vec![0.05, 0.05],
            signal_amplitude: 0.5,
            signal_region: Region {
                min: [6, 6, 6],
                size: [4, 4, 4],
            },
            tr_seconds: 2.0,
            seed: 7,
        }
    }

    /// Four sites with graded gains; the default multi-site benchmark.
    pub fn default_four_site() -> Self {
        SynthConfig {
            n_sites: 4,
            subjects_per_site: 20,
            t_len: 32,
            side: 16,
            site_gain: vec![1.0, 1.15, 1.3, 1.45],
            site_bias_scale: 0.2,
            noise_sigma: vec![0.05; 4],
            signal_amplitude: 0.5,
            signal_region: Region {
                min: [6, 6, 6],
                size: [4, 4, 4],
            },
            tr_seconds: 2.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 2 {
            return Err(Error::Config("n_sites must be >= 2".into()));
        }
        if self.subjects_per_site == 0 || self.t_len == 0 {
            return Err(Error::Config(
                "subjects_per_site and t_len must be >= 1".into(),
            ));
        }
        if self.side < 8 || !self.side.is_power_of_two() {
            return Err(Error::Config(format!(
                "side must be a power of two >= 8, got {}",
                self.side
            )));
        }
        if self.site_gain.len() != self.n_sites || self.noise_sigma.len() != self.n_sites {
            return Err(Error::Config(
                "site_gain and noise_sigma must have length n_sites".into(),
            ));
        }
        if self.site_bias_scale < 0.0
            || self.signal_amplitude < 0.0
            || self.noise_sigma.iter().any(|&s| s < 0.0)
        {
            return Err(Error::Config("amplitudes must be >= 0".into()));
        }
        for axis in 0..3 {
            let r = &self.signal_region;
            if r.size[axis] == 0 || r.min[axis] + r.size[axis] > self.side {
                return Err(Error::Config(format!(
                    "signal_region must lie inside [0, {})^3",
                    self.side
                )));
            }
        }
        Ok(())
    }
}

fn voxel_index(side: usize, x: usize, y: usize, z: usize) -> usize {
    (x * side + y) * side + z
}

/// Fixed smooth radial "brain" template: 1 inside a centered ball of radius
/// `0.4 * side`, cosine roll-off to 0 over a shell of width `0.1 * side`.
pub fn brain_template(side: usize) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let r0 = 0.4 * side as f64;
    let w = 0.1 * side as f64;
    let mut out = vec![0.0; side * side * side];
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let dx = x as f64 - c;
                let dy = y as f64 - c;
                let dz = z as f64 - c;
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                out[voxel_index(side, x, y, z)] = if r <= r0 {
                    1.0
                } else if r < r0 + w {
                    0.5 * (1.0 + (std::f64::consts::PI * (r - r0) / w).cos())
                } else {
                    0.0
                };
            }
        }
    }
    out
}

/// Separable box filter of width `w` along all three axes, edge-truncated
/// with renormalization.
fn box_filter(volume: &[f64], side: usize, w: usize) -> Vec<f64> {
    if w <= 1 {
        return volume.to_vec();
    }
    let lo = (w as isize - 1) / 2;
    let hi = w as isize / 2;
    let mut cur = volume.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    let coord = [x as isize, y as isize, z as isize];
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for off in -lo..=hi {
                        let mut c = coord;
                        c[axis] += off;
                        if c[axis] < 0 || c[axis] >= side as isize {
                            continue;
                        }
                        sum += cur
                            [voxel_index(side, c[0] as usize, c[1] as usize, c[2] as usize)];
                        count += 1.0;
                    }
                    next[voxel_index(side, x, y, z)] = sum / count;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Precomputed deterministic fields shared by all subjects of a config.
pub struct SynthFields {
    pub template: Vec<f64>,
    /// One smoothed, unit-max-abs field per site.
    pub site_fields: Vec<Vec<f64>>,
    /// Smoothed indicator of the signal region, values in [0, 1].
    pub signal_mask: Vec<f64>,
}

pub fn build_fields(cfg: &SynthConfig) -> SynthFields {
    let side = cfg.side;
    let n = side * side * side;
    let w = side / 4;
    let template = brain_template(side);

    let mut site_fields = Vec::with_capacity(cfg.n_sites);
    for s in 0..cfg.n_sites {
        let mut rng = seeded_rng(cfg.seed, &[TAG_SITE_FIELD, s as u64]);
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut field = box_filter(&noise, side, w);
        let max_abs = field.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if max_abs > 0.0 {
            for v in &mut field {
                *v /= max_abs;
            }
        }
        site_fields.push(field);
    }

    let mut indicator = vec![0.0; n];
    let r = &cfg.signal_region;
    for x in r.min[0]..r.min[0] + r.size[0] {
        for y in r.min[1]..r.min[1] + r.size[1] {
            for z in r.min[2]..r.min[2] + r.size[2] {
                indicator[voxel_index(side, x, y, z)] = 1.0;
            }
        }
    }
    let signal_mask = box_filter(&indicator, side, w);

    SynthFields {
        template,
        site_fields,
        signal_mask,
    }
}

/// Generates one subject's series; all randomness comes from
/// `(cfg.seed, site, subject_index)`.
pub fn generate_subject(
    cfg: &SynthConfig,
    fields: &SynthFields,
    site: usize,
    subject_index: usize,
) -> (VolumeSeries, u8) {
    let diagnosis = (subject_index % 2) as u8;
    let side = cfg.side;
    let n = side * side * side;
    let gain = cfg.site_gain[site];
    let sigma = cfg.noise_sigma[site];
    let mut rng = seeded_rng(
        cfg.seed,
        &[TAG_SUBJECT_NOISE, site as u64, subject_index as u64],
    );
    let mut data = Array4::<f32>::zeros((cfg.t_len, side, side, side));
    {
        let flat = data.as_slice_mut().expect("contiguous");
        for t in 0..cfg.t_len {
            let phase = (2.0 * std::f64::consts::PI * t as f64 / SIGNAL_PERIOD as f64).sin();
            let signal_coeff = diagnosis as f64 * cfg.signal_amplitude * phase;
            for i in 0..n {
                let mut v = fields.template[i]
                    + cfg.site_bias_scale * fields.site_fields[site][i]
                    + signal_coeff * fields.signal_mask[i];
                v *= gain;
                if sigma > 0.0 {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    v += sigma * eps;
                }
                flat[t * n + i] = v as f32;
            }
        }
    }
    let id = format!("site{site}_subj{subject_index:03}");
    (
        VolumeSeries::new(id, cfg.tr_seconds, data).expect("generated series valid"),
        diagnosis,
    )
}

/// Generates the whole dataset in memory, ordered by (site, subject index).
pub fn generate_in_memory(cfg: &SynthConfig) -> Result<Vec<(SubjectRecord, VolumeSeries)>> {
    cfg.validate()?;
    let fields = build_fields(cfg);
    let mut out = Vec::with_capacity(cfg.n_sites * cfg.subjects_per_site);
    for site in 0..cfg.n_sites {
        for j in 0..cfg.subjects_per_site {
            let (series, diagnosis) = generate_subject(cfg, &fields, site, j);
            let record = SubjectRecord {
                subject_id: series.subject_id().to_string(),
                site,
                diagnosis,
                series_path: format!("{}.vts", series.subject_id()).into(),
            };
            out.push((record, series));
        }
    }
    Ok(out)
}

/// Generates the dataset onto disk: one `.vts` per subject, a phenotype CSV
/// (`phenotype.csv`), and a manifest (`manifest.json`) echoing the full
/// config. Series paths in the CSV are relative to `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let subjects = generate_in_memory(cfg)?;
    let mut records = Vec::with_capacity(subjects.len());
    for (record, series) in subjects {
        save_volume_series(&series, out_dir.join(&record.series_path))?;
        records.push(record);
    }
    save_phenotype_table(&records, out_dir.join("phenotype.csv"))?;
    let manifest = serde_json::to_string_pretty(cfg).expect("config json");
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(manifest_path, e))?;
    Ok(records)
}

/// Subsamples records so that diagnosis correlates with site identity: in
/// the lower half of the site range mostly negatives survive, in the upper
/// half mostly positives, keeping `minority_keep` subjects of the minority
/// class per site so within-site AUC stays defined. Within one site the gain
/// is constant, so the planted correlation carries zero within-site label
/// information.
pub fn plant_label_confound(
    records: &[SubjectRecord],
    minority_keep: usize,
) -> Vec<SubjectRecord> {
    let n_sites = crate::data::site_count(records);
    let mut out = Vec::new();
    for site in 0..n_sites {
        let minority_class: u8 = if site < n_sites / 2 { 1 } else { 0 };
        let mut kept_minority = 0usize;
        for r in records.iter().filter(|r| r.site == site) {
            if r.diagnosis == minority_class {
                if kept_minority < minority_keep {
                    out.push(r.clone());
                    kept_minority += 1;
                }
            } else {
                out.push(r.clone());
            }
        }
    }
    out
}
