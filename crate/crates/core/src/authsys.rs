//! Simulated verification system: template store, EER threshold calibration,
//! accept/reject decisions, and ROC computation.
//!
//! A probe claiming identity `u` is accepted when the dissimilarity between
//! its embedding and the enrolled template of `u` is at or below the
//! threshold tau (boundary inclusive).

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, IdentityDataset};
use crate::embedding::{EmbeddingModel, FeatureVector};
use crate::error::{Error, Result};
use crate::metrics::dissimilarity;

/// Genuine and imposter dissimilarity score populations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSets {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
}

/// Enrollment store plus calibrated threshold over one embedding model.
pub struct AuthSystem {
    model: Arc<dyn EmbeddingModel>,
    enrolled: BTreeMap<String, FeatureVector>,
    threshold_tau: f64,
    eer: f64,
}

impl AuthSystem {
    pub fn new(model: Arc<dyn EmbeddingModel>) -> Self {
        Self {
            model,
            enrolled: BTreeMap::new(),
            threshold_tau: 0.5,
            eer: f64::NAN,
        }
    }

    pub fn model(&self) -> &Arc<dyn EmbeddingModel> {
        &self.model
    }

    pub fn threshold(&self) -> f64 {
        self.threshold_tau
    }

    pub fn eer(&self) -> f64 {
        self.eer
    }

    pub fn set_threshold(&mut self, tau: f64, eer: f64) -> Result<()> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("threshold {tau} outside (0,1)")));
        }
        self.threshold_tau = tau;
        self.eer = eer;
        Ok(())
    }

    pub fn n_enrolled(&self) -> usize {
        self.enrolled.len()
    }

    pub fn template(&self, identity: &str) -> Option<&FeatureVector> {
        self.enrolled.get(identity)
    }

    /// Stores `embed(image)` as the identity's template; re-enrollment
    /// overwrites.
    pub fn enroll(&mut self, identity: &str, image: &Image) -> Result<()> {
        let template = self.model.embed(image)?;
        self.enrolled.insert(identity.to_string(), template);
        Ok(())
    }

    /// Accept/reject decision plus the dissimilarity score; accepted iff
    /// score <= tau.
    pub fn verify(&self, identity: &str, probe: &Image) -> Result<(bool, f64)> {
        let template = self
            .enrolled
            .get(identity)
            .ok_or_else(|| Error::UnknownIdentity(identity.to_string()))?;
        let score = dissimilarity(&self.model.embed(probe)?, template)?;
        Ok((score <= self.threshold_tau, score))
    }

    /// Calibrates from score sets and stores the resulting threshold.
    pub fn calibrate(&mut self, scores: &ScoreSets) -> Result<(f64, f64)> {
        let (tau, eer) = calibrate_threshold(scores)?;
        self.threshold_tau = tau;
        self.eer = eer;
        Ok((tau, eer))
    }
}

/// Fraction of imposter scores at or below `t` (false accepts).
pub fn fpr_at(imposter: &[f64], t: f64) -> f64 {
    imposter.iter().filter(|&&s| s <= t).count() as f64 / imposter.len() as f64
}

/// Fraction of genuine scores above `t` (false rejects).
pub fn fnr_at(genuine: &[f64], t: f64) -> f64 {
    genuine.iter().filter(|&&s| s > t).count() as f64 / genuine.len() as f64
}

/// Sweeps all pooled distinct score values for the operating point where
/// FPR(t) = FNR(t), interpolating linearly between adjacent sweep points.
/// When a gap of equal-rate thresholds exists (e.g. perfectly separated
/// populations), the midpoint of the gap is returned.
pub fn calibrate_threshold(scores: &ScoreSets) -> Result<(f64, f64)> {
    if scores.genuine.is_empty() || scores.imposter.is_empty() {
        return Err(Error::invalid("calibration requires non-empty score sets"));
    }

    let mut cands: Vec<f64> = scores
        .genuine
        .iter()
        .chain(&scores.imposter)
        .copied()
        .collect();
    cands.sort_by(|a, b| a.total_cmp(b));
    cands.dedup();

    // diff(t) = FPR(t) - FNR(t) is non-decreasing in t; find its zero.
    let eval = |t: f64| -> (f64, f64) {
        (fpr_at(&scores.imposter, t), fnr_at(&scores.genuine, t))
    };
    let diffs: Vec<(f64, f64, f64)> = cands
        .iter()
        .map(|&t| {
            let (fpr, fnr) = eval(t);
            (t, fpr, fnr)
        })
        .collect();

    // Below the smallest score FPR = 0 and FNR = 1, so diff starts <= 0.
    let mut prev: (f64, f64, f64) = (cands[0] - 1.0, 0.0, 1.0);
    for &(t, fpr, fnr) in &diffs {
        let diff = fpr - fnr;
        if diff.abs() < 1e-15 {
            // Rates are equal on [t, next candidate); tie-break at the
            // midpoint of the gap.
            let next = diffs
                .iter()
                .find(|&&(tc, _, _)| tc > t)
                .map(|&(tc, _, _)| tc);
            let tau = match next {
                Some(tn) => (t + tn) / 2.0,
                None => t,
            };
            return Ok((tau, (fpr + fnr) / 2.0));
        }
        if diff > 0.0 {
            let (tp, fprp, fnrp) = prev;
            let dp = fprp - fnrp;
            // dp < 0 < diff here; interpolate the crossing.
            let frac = -dp / (diff - dp);
            let tau = tp + frac * (t - tp);
            let eer_fpr = fprp + frac * (fpr - fprp);
            let eer_fnr = fnrp + frac * (fnr - fnrp);
            return Ok((tau, (eer_fpr + eer_fnr) / 2.0));
        }
        prev = (t, fpr, fnr);
    }

    // diff never became positive: all imposter scores above all genuine and
    // the loop consumed every candidate without crossing; threshold at the
    // top candidate.
    let (t, fpr, fnr) = *diffs.last().unwrap();
    Ok((t, (fpr + fnr) / 2.0))
}

/// ROC sweep: (FPR(t), TPR(t)) over all pooled distinct scores, with the
/// endpoints (0, 0) and (1, 1). TPR is non-decreasing as FPR increases.
pub fn roc(scores: &ScoreSets) -> Result<Vec<(f64, f64)>> {
    if scores.genuine.is_empty() || scores.imposter.is_empty() {
        return Err(Error::invalid("ROC requires non-empty score sets"));
    }
    let mut cands: Vec<f64> = scores
        .genuine
        .iter()
        .chain(&scores.imposter)
        .copied()
        .collect();
    cands.sort_by(|a, b| a.total_cmp(b));
    cands.dedup();

    let mut points = vec![(0.0, 0.0)];
    for t in cands {
        let fpr = fpr_at(&scores.imposter, t);
        let tpr = 1.0 - fnr_at(&scores.genuine, t);
        points.push((fpr, tpr));
    }
    points.push((1.0, 1.0));
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(points)
}

/// Trapezoidal area under an ROC curve.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Builds balanced calibration score sets from a dataset: all within-identity
/// pairs (excluding self-pairs) as genuine, and an equal-size seeded random
/// sample of cross-identity pairs as imposter.
pub fn score_sets_from_dataset(
    model: &dyn EmbeddingModel,
    dataset: &IdentityDataset,
    seed: u64,
) -> Result<ScoreSets> {
    let embedded: Vec<(usize, Vec<FeatureVector>)> = dataset
        .identities
        .iter()
        .enumerate()
        .map(|(i, (_, samples))| {
            let fs: Result<Vec<_>> = samples.iter().map(|s| model.embed(s)).collect();
            Ok((i, fs?))
        })
        .collect::<Result<_>>()?;

    let mut genuine = Vec::new();
    for (_, fs) in &embedded {
        for i in 0..fs.len() {
            for j in i + 1..fs.len() {
                genuine.push(dissimilarity(&fs[i], &fs[j])?);
            }
        }
    }
    if genuine.is_empty() {
        return Err(Error::invalid("dataset yields no genuine pairs"));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_id = embedded.len();
    if n_id < 2 {
        return Err(Error::invalid("imposter pairs need at least two identities"));
    }
    let mut imposter = Vec::with_capacity(genuine.len());
    while imposter.len() < genuine.len() {
        let a = rng.gen_range(0..n_id);
        let b = rng.gen_range(0..n_id);
        if a == b {
            continue;
        }
        let sa = rng.gen_range(0..embedded[a].1.len());
        let sb = rng.gen_range(0..embedded[b].1.len());
        imposter.push(dissimilarity(&embedded[a].1[sa], &embedded[b].1[sb])?);
    }

    Ok(ScoreSets { genuine, imposter })
}

#[derive(Debug, Serialize, Deserialize)]
struct SystemState {
    format_version: u32,
    threshold_tau: f64,
    eer: f64,
    model_ref: String,
    templates: BTreeMap<String, Vec<f64>>,
}

/// Saves templates, threshold, EER, and a model reference (e.g. the model
/// file path) as JSON for the harness to reload.
pub fn save_system(system: &AuthSystem, model_ref: &str, path: impl AsRef<Path>) -> Result<()> {
    let state = SystemState {
        format_version: 1,
        threshold_tau: system.threshold_tau,
        eer: system.eer,
        model_ref: model_ref.to_string(),
        templates: system
            .enrolled
            .iter()
            .map(|(k, v)| (k.clone(), v.values().to_vec()))
            .collect(),
    };
    let file = fs::File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &state)?;
    Ok(())
}

/// Reloads a system saved by [`save_system`]; the caller supplies the model
/// named by the returned reference.
pub fn load_system(
    model: Arc<dyn EmbeddingModel>,
    path: impl AsRef<Path>,
) -> Result<(AuthSystem, String)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let state: SystemState = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut enrolled = BTreeMap::new();
    for (id, values) in state.templates {
        enrolled.insert(id, FeatureVector::new(values)?);
    }
    let mut system = AuthSystem::new(model);
    system.enrolled = enrolled;
    system.set_threshold(state.threshold_tau, state.eer)?;
    Ok((system, state.model_ref))
}
