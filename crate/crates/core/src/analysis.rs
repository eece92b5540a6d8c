//! Concept interventions and activation statistics.
//!
//! An intervention replaces the decoder's least trustworthy activations
//! with the planted ground truth and reruns only the symbolic half.
//! Trustworthiness is distance to the planted bit: the activations
//! farthest from their targets are corrected first. Because the
//! switchboard and classifier never change, accuracy gained under
//! intervention is attributable to concept decoding errors alone.

use crate::error::{Error, Result};
use crate::model::{Model, SampleInference};
use crate::synthetic::FeatureBatch;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Indices of the `budget` activations farthest from their planted bits,
/// distance descending, ties to the smaller concept id.
pub fn correction_order(chat: &[f64], truth: &[u8]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..chat.len()).collect();
    order.sort_by(|&i, &j| {
        let di = (chat[i] - f64::from(truth[i])).abs();
        let dj = (chat[j] - f64::from(truth[j])).abs();
        dj.total_cmp(&di).then(i.cmp(&j))
    });
    order
}

/// Rewrites the top `budget` activations to their planted values and
/// reruns binarization, switchboard, and classifier.
pub fn intervene(model: &Model, chat: &[f64], truth: &[u8], budget: usize) -> SampleInference {
    let mut fixed = chat.to_vec();
    for &i in correction_order(chat, truth).iter().take(budget) {
        fixed[i] = f64::from(truth[i]);
    }
    model.infer_from_chat(&fixed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvePoint {
    pub budget: usize,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionCurve {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// When set, budgets apply only to samples the unintervened model
    /// misclassified, and accuracy is measured on that subset.
    pub misclassified_only: bool,
    pub points: Vec<CurvePoint>,
}

/// Accuracy as progressively more activations are corrected. Budget 0 is
/// the unintervened model.
pub fn intervention_curve(
    model: &Model,
    batch: &FeatureBatch,
    budgets: &[usize],
    misclassified_only: bool,
    config_hash: &str,
    seed: u64,
) -> Result<InterventionCurve> {
    if batch.is_empty() {
        return Err(Error::validation("intervention needs at least one sample"));
    }
    let mut chats = Vec::with_capacity(batch.len());
    let mut base_preds = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let inf = model.forward_sample(&batch.sample_features(i));
        chats.push(inf.chat.clone());
        base_preds.push(inf.predicted);
    }
    let scope: Vec<usize> = if misclassified_only {
        (0..batch.len())
            .filter(|&i| base_preds[i] != batch.labels[i])
            .collect()
    } else {
        (0..batch.len()).collect()
    };
    if scope.is_empty() {
        return Err(Error::validation(
            "no misclassified samples; intervention scope is empty",
        ));
    }

    let mut points = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let mut correct = 0usize;
        for &i in &scope {
            let inf = intervene(model, &chats[i], &batch.true_concepts[i], budget);
            if inf.predicted == batch.labels[i] {
                correct += 1;
            }
        }
        points.push(CurvePoint {
            budget,
            accuracy: correct as f64 / scope.len() as f64,
            samples: scope.len(),
        });
    }
    Ok(InterventionCurve {
        schema_version: crate::SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        misclassified_only,
        points,
    })
}

// ---------------------------------------------------------------------------
// Activation statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptStat {
    pub id: usize,
    pub name: String,
    /// Fraction of samples whose thresholded bit is on.
    pub mean_active: f64,
    /// Coefficient of variation of the raw activation; null when the mean
    /// activation is too small for the ratio to mean anything.
    pub cov: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupStat {
    pub group: String,
    pub mean_active: f64,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub samples: usize,
    /// Mean number of active bits per sample.
    pub mean_active_per_sample: f64,
    pub concepts: Vec<ConceptStat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupStat>>,
}

/// Names grouped under labels, for aggregate reporting.
pub type ConceptGrouping = BTreeMap<String, Vec<String>>;

const COV_MEAN_FLOOR: f64 = 1e-6;

pub fn concept_stats(
    model: &Model,
    batch: &FeatureBatch,
    grouping: Option<&ConceptGrouping>,
    config_hash: &str,
    seed: u64,
) -> Result<StatsFile> {
    if batch.is_empty() {
        return Err(Error::validation("statistics need at least one sample"));
    }
    let c = model.vocabulary.len();
    let n = batch.len();
    let mut chats = Vec::with_capacity(n);
    for i in 0..n {
        chats.push(model.forward_sample(&batch.sample_features(i)).chat);
    }

    let mut concepts = Vec::with_capacity(c);
    let mut active_total = 0usize;
    for j in 0..c {
        let vals: Vec<f64> = chats.iter().map(|ch| ch[j]).collect();
        let active = vals.iter().filter(|&&v| v > 0.5).count();
        active_total += active;
        let mean = vals.iter().sum::<f64>() / n as f64;
        let cov = if mean > COV_MEAN_FLOOR {
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            Some(var.sqrt() / mean)
        } else {
            None
        };
        concepts.push(ConceptStat {
            id: j,
            name: model.vocabulary.concepts()[j].name.clone(),
            mean_active: active as f64 / n as f64,
            cov,
        });
    }

    let groups = match grouping {
        Some(g) => {
            let mut out = Vec::new();
            for (label, members) in g {
                let mut sum = 0.0;
                for m in members {
                    let idx = model.vocabulary.index_of(m).ok_or_else(|| {
                        Error::validation(format!("grouping names unknown concept '{m}'"))
                    })?;
                    sum += concepts[idx].mean_active;
                }
                if members.is_empty() {
                    return Err(Error::validation(format!("group '{label}' is empty")));
                }
                out.push(GroupStat {
                    group: label.clone(),
                    mean_active: sum / members.len() as f64,
                    members: members.clone(),
                });
            }
            Some(out)
        }
        None => None,
    };

    Ok(StatsFile {
        schema_version: crate::SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        samples: n,
        mean_active_per_sample: active_total as f64 / n as f64,
        concepts,
        groups,
    })
}
