//! Image classification error and per-region Dice scores.
//!
//! Dice is macro averaged: each image gets its own score and the report holds
//! their mean. When a class is absent from both the prediction and the ground
//! truth the image scores 1 for that class.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::datagen::{EvaluationSet, Sample};
use crate::error::{Error, Result};
use crate::masking::{binarize, BinaryMask};
use crate::models::{Checkpoint, Networks};
use crate::objectives::{ObjectiveConfig, Variant};

/// Which pixels count as positive when scoring a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Foreground,
    Background,
}

/// `2|P ∩ G| / (|P| + |G|)` over the pixels of `region`; 1 when both are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask, region: Region) -> Result<f64> {
    let (inter, total) = dice_counts(pred, gt, region)?;
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

fn dice_counts(pred: &BinaryMask, gt: &BinaryMask, region: Region) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() {
        let (a, b) = (pred.shape(), gt.shape());
        return Err(Error::ShapeMismatch {
            op: "dice",
            lhs: vec![a.0, a.1],
            rhs: vec![b.0, b.1],
        });
    }
    let want = region == Region::Foreground;
    let (mut inter, mut total) = (0, 0);
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        let (p, g) = (p == want, g == want);
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok((inter, total))
}

/// Pooled Dice over all pixels of all pairs, for diagnostics.
pub fn micro_dice<'a>(
    pairs: impl IntoIterator<Item = (&'a BinaryMask, &'a BinaryMask)>,
    region: Region,
) -> Result<f64> {
    let (mut inter, mut total) = (0, 0);
    for (pred, gt) in pairs {
        let (i, t) = dice_counts(pred, gt, region)?;
        inter += i;
        total += t;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Percentage of mismatched labels.
pub fn classification_error(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "classification_error",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("classification error of an empty list".into()));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: usize,
    pub label: usize,
    #[serde(default)]
    pub predicted_class: Option<usize>,
    pub f1_plus_pct: f64,
    pub f1_minus_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub split: String,
    pub n_images: usize,
    /// Absent for methods that do not classify.
    pub classification_error_pct: Option<f64>,
    pub f1_plus_pct: f64,
    pub f1_minus_pct: f64,
    pub per_image: Vec<ImageMetrics>,
    /// SHA-256 of the checkpoint and evaluation settings.
    pub config_fingerprint: String,
}

/// Aggregate scores over a subset of images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n_images: usize,
    pub classification_error_pct: Option<f64>,
    pub f1_plus_pct: f64,
    pub f1_minus_pct: f64,
}

fn summarize<'a>(rows: impl Iterator<Item = &'a ImageMetrics> + Clone) -> Option<Summary> {
    let n = rows.clone().count();
    if n == 0 {
        return None;
    }
    let mean = |f: fn(&ImageMetrics) -> f64| rows.clone().map(f).sum::<f64>() / n as f64;
    let classified: Option<Vec<(usize, usize)>> =
        rows.clone().map(|r| r.predicted_class.map(|p| (p, r.label))).collect();
    let classification_error_pct = classified.map(|pairs| {
        let wrong = pairs.iter().filter(|(p, l)| p != l).count();
        100.0 * wrong as f64 / n as f64
    });
    Some(Summary {
        n_images: n,
        classification_error_pct,
        f1_plus_pct: mean(|r| r.f1_plus_pct),
        f1_minus_pct: mean(|r| r.f1_minus_pct),
    })
}

impl MetricsReport {
    /// Builds a report from per-image rows, which must be non-empty.
    pub fn from_rows(method: &str, split: &str, config_fingerprint: String, per_image: Vec<ImageMetrics>) -> Result<Self> {
        let summary = summarize(per_image.iter())
            .ok_or_else(|| Error::InvalidArgument("cannot report on zero images".into()))?;
        Ok(Self {
            method: method.to_string(),
            split: split.to_string(),
            n_images: summary.n_images,
            classification_error_pct: summary.classification_error_pct,
            f1_plus_pct: summary.f1_plus_pct,
            f1_minus_pct: summary.f1_minus_pct,
            per_image,
            config_fingerprint,
        })
    }

    /// Aggregates restricted to images with the given label.
    pub fn for_label(&self, label: usize) -> Option<Summary> {
        summarize(self.per_image.iter().filter(move |r| r.label == label))
    }

    pub fn table_header() -> String {
        format!(
            "{:<24} {:<8} {:>6} {:>14} {:>9} {:>9}",
            "method", "split", "n", "Cl. error (%)", "F1+ (%)", "F1- (%)"
        )
    }

    pub fn table_row(&self) -> String {
        let err = match self.classification_error_pct {
            Some(e) => format!("{e:.2}"),
            None => "-".to_string(),
        };
        format!(
            "{:<24} {:<8} {:>6} {:>14} {:>9.2} {:>9.2}",
            self.method, self.split, self.n_images, err, self.f1_plus_pct, self.f1_minus_pct
        )
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::table_header())?;
        write!(f, "{}", self.table_row())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Identifies a checkpoint together with the evaluation threshold.
pub fn fingerprint(checkpoint: &Checkpoint, threshold: f64) -> String {
    let mut bytes = checkpoint.to_json();
    bytes.extend_from_slice(format!("\nthreshold={threshold:?}").as_bytes());
    sha256_hex(&bytes)
}

/// What the trained pipeline says about one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Foreground-branch posterior.
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    /// Soft foreground mask `[h, w]`.
    pub soft_mask: Tensor,
    pub mask: BinaryMask,
}

/// Runs both networks on one `[c, h, w]` image with frozen weights.
pub fn predict(nets: &Networks, image: &Tensor, threshold: f64) -> Result<Prediction> {
    let (h, w) = match image.shape() {
        &[_, h, w] => (h, w),
        other => {
            return Err(Error::InvalidShape {
                op: "predict",
                msg: format!("expected image [c, h, w], got {other:?}"),
            })
        }
    };
    // only consulted when a label is given, which never happens here
    let objective = ObjectiveConfig {
        variant: Variant::Sem,
        lambda: 0.0,
        t: 1.0,
        num_classes: nets.config.num_classes,
        omega_size: h * w,
    };
    let (g, _, out) = nets.forward(image, None, &objective)?;
    let soft_mask = g.value(out.mask.plus()).clone();
    let mask = binarize(&soft_mask, threshold)?;
    Ok(Prediction {
        probabilities: out.p_hat_fg.values(&g).to_vec(),
        predicted_class: out.p_hat_fg.argmax(&g),
        soft_mask,
        mask,
    })
}

/// Scores arbitrary predictions against the ground truth of `set`.
pub fn score_predictions(
    method: &str,
    set: &EvaluationSet,
    config_fingerprint: String,
    mut predict: impl FnMut(&Sample) -> Result<(Option<usize>, BinaryMask)>,
) -> Result<MetricsReport> {
    let rows = set
        .samples
        .iter()
        .map(|s| {
            let (predicted_class, mask) = predict(s)?;
            Ok(ImageMetrics {
                id: s.id,
                label: s.label,
                predicted_class,
                f1_plus_pct: 100.0 * dice(&mask, &s.gt_mask, Region::Foreground)?,
                f1_minus_pct: 100.0 * dice(&mask, &s.gt_mask, Region::Background)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(method, &set.split, config_fingerprint, rows)
}

/// Evaluates a checkpoint on an annotated split. With `export_dir`, writes
/// each binarized mask to `export_dir/NNNN.pgm`.
pub fn evaluate(
    checkpoint: &Checkpoint,
    set: &EvaluationSet,
    threshold: f64,
    export_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let nets = checkpoint.networks()?;
    let method = format!(
        "{} lambda={} t={}",
        checkpoint.objective.variant, checkpoint.objective.lambda, checkpoint.objective.t
    );
    score_predictions(&method, set, fingerprint(checkpoint, threshold), |s| {
        let p = predict(&nets, &s.image, threshold)?;
        if let Some(dir) = export_dir {
            p.mask.write_pgm(&mask_path(dir, s.id))?;
        }
        Ok((Some(p.predicted_class), p.mask))
    })
}

pub fn mask_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("{id:04}.pgm"))
}

/// Every pixel predicted foreground; no class prediction.
pub fn all_ones_baseline(set: &EvaluationSet) -> Result<MetricsReport> {
    let full = BinaryMask::filled(set.height, set.width, true);
    score_predictions("all-ones", set, sha256_hex(b"all-ones"), |_| Ok((None, full.clone())))
}
