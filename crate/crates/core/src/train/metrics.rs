//! Classification metrics and per-epoch records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::binmodules::model::Model;
use crate::binmodules::sampling::CloudPlan;
use crate::binmodules::PointCloud;
use crate::error::{Error, Result};

/// Overall accuracy and mean per-class recall. Classes absent from `labels`
/// are left out of the mean.
pub fn accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} with {classes} classes")));
        }
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let oa = hit.iter().sum::<usize>() as f64 / labels.len() as f64;
    let recalls: Vec<f64> = hit
        .iter()
        .zip(&total)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    Ok((oa, recalls.iter().sum::<f64>() / recalls.len() as f64))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub oa: f64,
    pub macc: f64,
    /// mean cross-entropy
    pub loss: f64,
    /// mean attention entropy over clouds and blocks
    pub attn_entropy: f64,
    pub predictions: Vec<usize>,
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - logits[label]
}

/// Packed-path evaluation over clouds with precomputed plans.
pub fn evaluate_planned(model: &Model, clouds: &[PointCloud], plans: &[CloudPlan], classes: usize) -> Result<EvalResult> {
    if clouds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<usize> = clouds
        .iter()
        .map(|c| c.label.ok_or_else(|| Error::InvalidArgument("unlabeled cloud".into())))
        .collect::<Result<_>>()?;
    let outs = clouds
        .par_iter()
        .zip(plans)
        .map(|(c, p)| model.forward_packed(p, &c.points))
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<usize> = outs.iter().map(|(l, _)| argmax(l)).collect();
    let (oa, macc) = accuracy(&predictions, &labels, classes)?;
    let n = clouds.len() as f64;
    let loss = outs.iter().zip(&labels).map(|((l, _), &y)| cross_entropy(l, y)).sum::<f64>() / n;
    let ent: Vec<f64> = outs.iter().flat_map(|(_, e)| e.iter().copied()).collect();
    let attn_entropy = if ent.is_empty() { 0.0 } else { ent.iter().sum::<f64>() / ent.len() as f64 };
    Ok(EvalResult {
        oa,
        macc,
        loss,
        attn_entropy,
        predictions,
    })
}

pub fn plan_all(model: &Model, clouds: &[PointCloud]) -> Result<Vec<CloudPlan>> {
    clouds.par_iter().map(|c| CloudPlan::build(&model.config, &c.points)).collect()
}

pub fn evaluate_detailed(model: &Model, dataset: &Dataset) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let plans = plan_all(model, &dataset.clouds)?;
    evaluate_planned(model, &dataset.clouds, &plans, dataset.classes)
}

/// `(overall accuracy, mean class accuracy)` on the packed inference path.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(f64, f64)> {
    let r = evaluate_detailed(model, dataset)?;
    Ok((r.oa, r.macc))
}

/// One line of the training metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    /// mean training loss, or evaluation loss for the inference-only stage
    pub loss: f64,
    pub oa: f64,
    pub macc: f64,
    pub attn_entropy: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}
