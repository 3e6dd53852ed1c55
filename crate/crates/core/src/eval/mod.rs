//! Scoring and cross-validation orchestration: ROC AUC, fold evaluation,
//! leave-one-site-out evaluation, and the post-hoc site-information probe.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{make_loso_splits, Fold, FoldAssignment, SubjectRecord};
use crate::error::{Error, Result};
use crate::logreg::{LogRegConfig, MultinomialLogReg};
use crate::nn::{derive_seed, seeded_rng};

/// ROC AUC with the Mann-Whitney tie convention: the probability that a
/// random positive outscores a random negative, ties counted 1/2. Computed
/// via average ranks in O(N log N).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos == 0 || neg == 0 {
        return Err(Error::Domain(
            "roc_auc needs both classes present".into(),
        ));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Average 1-based rank for the tie group [i, j].
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let q = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// One cross-validation fold outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Held-out site name for leave-one-site-out folds, else "mixed".
    pub test_site: String,
    pub auc: Option<f64>,
    pub n_test: usize,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Aggregated evaluation report. `mean_auc`/`std_auc` are recomputable from
/// the non-skipped `per_fold` entries; the std is the population standard
/// deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_fold: Vec<FoldResult>,
    pub mean_auc: f64,
    pub std_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub site_probe_accuracy: Option<f64>,
    pub config_echo: serde_json::Value,
}

impl EvalReport {
    fn from_folds(per_fold: Vec<FoldResult>, config_echo: serde_json::Value) -> Self {
        let aucs: Vec<f64> = per_fold.iter().filter_map(|f| f.auc).collect();
        let (mean, std) = if aucs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = aucs.iter().sum::<f64>() / aucs.len() as f64;
            let v = aucs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / aucs.len() as f64;
            (m, v.sqrt())
        };
        EvalReport {
            per_fold,
            mean_auc: mean,
            std_auc: std,
            site_probe_accuracy: None,
            config_echo,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report json");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Flat per-fold CSV for tabulation.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("fold,test_site,auc,n_test,skipped\n");
        for f in &self.per_fold {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                f.fold,
                f.test_site,
                f.auc.map(|a| a.to_string()).unwrap_or_default(),
                f.n_test,
                f.skipped
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// A train/score pair evaluated per fold. Implementations must be
/// deterministic given the fold seed.
pub trait FoldPipeline {
    fn name(&self) -> &str;

    /// Trains on `train` and returns `(subject_id, score)` for every test
    /// subject, higher score = more likely positive.
    fn run_fold(
        &self,
        train: &[SubjectRecord],
        test: &[SubjectRecord],
        seed: u64,
    ) -> Result<Vec<(String, f64)>>;
}

fn resolve<'a>(
    records: &'a [SubjectRecord],
    ids: &[String],
) -> Result<Vec<&'a SubjectRecord>> {
    let by_id: BTreeMap<&str, &SubjectRecord> = records
        .iter()
        .map(|r| (r.subject_id.as_str(), r))
        .collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Domain(format!("fold references unknown subject {id}")))
        })
        .collect()
}

fn evaluate_fold(
    pipeline: &dyn FoldPipeline,
    records: &[SubjectRecord],
    fold: &Fold,
    fold_idx: usize,
    seed: u64,
) -> Result<FoldResult> {
    let test_site = fold
        .held_out_site
        .map(|s| format!("site{s}"))
        .unwrap_or_else(|| "mixed".to_string());
    let train: Vec<SubjectRecord> = resolve(records, &fold.train_ids)?
        .into_iter()
        .cloned()
        .collect();
    let test: Vec<SubjectRecord> = resolve(records, &fold.test_ids)?
        .into_iter()
        .cloned()
        .collect();
    let n_test = test.len();
    let single_class =
        test.iter().all(|r| r.diagnosis == 0) || test.iter().all(|r| r.diagnosis == 1);
    if single_class {
        return Ok(FoldResult {
            fold: fold_idx,
            test_site,
            auc: None,
            n_test,
            skipped: true,
            warning: Some("single-class test set; fold skipped".into()),
        });
    }
    let scored = pipeline.run_fold(&train, &test, seed)?;
    let by_id: BTreeMap<&str, f64> = scored.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for r in &test {
        let s = by_id.get(r.subject_id.as_str()).ok_or_else(|| {
            Error::Data(format!(
                "pipeline {} returned no score for {}",
                pipeline.name(),
                r.subject_id
            ))
        })?;
        scores.push(*s);
        labels.push(r.diagnosis);
    }
    let auc = roc_auc(&scores, &labels)?;
    Ok(FoldResult {
        fold: fold_idx,
        test_site,
        auc: Some(auc),
        n_test,
        skipped: false,
        warning: None,
    })
}

/// Evaluates a pipeline over precomputed folds. Fold seeds derive from
/// `(base_seed, fold index)`, so reruns with the same inputs are identical.
/// Single-class test folds are skipped with a warning and excluded from the
/// aggregates.
pub fn cross_validate(
    pipeline: &dyn FoldPipeline,
    records: &[SubjectRecord],
    folds: &FoldAssignment,
    base_seed: u64,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    let mut per_fold = Vec::with_capacity(folds.folds.len());
    for (i, fold) in folds.folds.iter().enumerate() {
        let seed = derive_seed(base_seed, &[i as u64]);
        per_fold.push(evaluate_fold(pipeline, records, fold, i, seed)?);
    }
    Ok(EvalReport::from_folds(per_fold, config_echo))
}

/// Leave-one-site-out evaluation; per-fold entries name the held-out site.
pub fn loso_evaluate(
    pipeline: &dyn FoldPipeline,
    records: &[SubjectRecord],
    base_seed: u64,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    let folds = make_loso_splits(records)?;
    cross_validate(pipeline, records, &folds, base_seed, config_echo)
}

const PROBE_SEED: u64 = 0x5e11_ab1e;

/// Residual site information in frozen latents: stratified 5-fold CV
/// accuracy of a fresh multinomial logistic probe. Chance accuracy means the
/// latents carry no usable site signal.
pub fn site_probe(latents: &Array2<f64>, sites: &[usize]) -> Result<f64> {
    if latents.nrows() != sites.len() {
        return Err(Error::Shape(format!(
            "{} latents vs {} site labels",
            latents.nrows(),
            sites.len()
        )));
    }
    let mut by_site: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in sites.iter().enumerate() {
        by_site.entry(s).or_default().push(i);
    }
    if by_site.len() < 2 {
        return Err(Error::Domain("site_probe needs >= 2 sites".into()));
    }
    for (site, members) in &by_site {
        if members.len() < 4 {
            return Err(Error::Domain(format!(
                "site {site} has {} members, need >= 4",
                members.len()
            )));
        }
    }
    let n_sites = sites.iter().max().unwrap() + 1;
    const K: usize = 5;
    let mut rng = seeded_rng(PROBE_SEED, &[latents.nrows() as u64]);
    let mut fold_of = vec![0usize; sites.len()];
    let mut offset = 0usize;
    for members in by_site.values() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for (i, &idx) in shuffled.iter().enumerate() {
            fold_of[idx] = (offset + i) % K;
        }
        offset = (offset + shuffled.len()) % K;
    }

    let cfg = LogRegConfig::default();
    let mut fold_accs = Vec::new();
    for k in 0..K {
        let train_idx: Vec<usize> = (0..sites.len()).filter(|&i| fold_of[i] != k).collect();
        let test_idx: Vec<usize> = (0..sites.len()).filter(|&i| fold_of[i] == k).collect();
        if test_idx.is_empty() || train_idx.is_empty() {
            continue;
        }
        let take = |idx: &[usize]| {
            let mut m = Array2::<f64>::zeros((idx.len(), latents.ncols()));
            for (row, &i) in idx.iter().enumerate() {
                m.row_mut(row).assign(&latents.row(i));
            }
            m
        };
        let x_train = take(&train_idx);
        let x_test = take(&test_idx);
        let y_train: Vec<usize> = train_idx.iter().map(|&i| sites[i]).collect();
        let probe = MultinomialLogReg::fit(&x_train, &y_train, n_sites, &cfg)?;
        let pred = probe.predict(&x_test);
        let correct = pred
            .iter()
            .zip(test_idx.iter())
            .filter(|(p, &i)| **p == sites[i])
            .count();
        fold_accs.push(correct as f64 / test_idx.len() as f64);
    }
    Ok(fold_accs.iter().sum::<f64>() / fold_accs.len() as f64)
}
