//! Reliability statistics: binning, expected calibration error and
//! temperature scaling.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, Image, LabeledExample};
use crate::error::{Error, Result};
use crate::math::{argmax, softmax};
use crate::model::{head_mean_probabilities, infer, Logits, MultiHeadModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub predicted_class: usize,
    pub true_class: usize,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.predicted_class == self.true_class
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for an empty bin.
    pub avg_confidence: f64,
    pub avg_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub temperature: Option<f64>,
    pub count: usize,
    pub overall_accuracy: f64,
    pub overall_avg_confidence: f64,
}

/// Index of the equal-width bin holding `confidence`; `1.0` falls in the last bin.
pub fn bin_index(confidence: f64, n_bins: usize) -> usize {
    ((confidence * n_bins as f64).floor() as usize).min(n_bins - 1)
}

pub fn bin_predictions(records: &[PredictionRecord], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    if n_bins == 0 {
        return Err(Error::contract("at least one bin is required"));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for r in records {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::contract(format!("confidence {} outside [0, 1]", r.confidence)));
        }
        let i = bin_index(r.confidence, n_bins);
        count[i] += 1;
        conf[i] += r.confidence;
        hits[i] += usize::from(r.correct());
    }
    Ok((0..n_bins)
        .map(|i| {
            let n = count[i];
            let avg = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
            CalibrationBin {
                lower: i as f64 / n_bins as f64,
                upper: (i + 1) as f64 / n_bins as f64,
                count: n,
                avg_confidence: avg(conf[i]),
                avg_accuracy: avg(hits[i] as f64),
            }
        })
        .collect())
}

/// `Σ_b (|S_b| / total)·|acc(S_b) − conf(S_b)|`.
pub fn ece(bins: &[CalibrationBin], total_count: usize) -> Result<f64> {
    if total_count == 0 {
        return Err(Error::contract("calibration error of an empty set"));
    }
    Ok(bins
        .iter()
        .map(|b| b.count as f64 / total_count as f64 * (b.avg_accuracy - b.avg_confidence).abs())
        .sum())
}

/// `softmax(logits / temperature)`.
pub fn temperature_scale(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    Ok(softmax(&scaled))
}

/// One record per example from multi-head logits; confidence and prediction
/// come from the head-mean of per-head tempered softmax vectors.
pub fn records_from_logits(logits: &Logits, labels: &[usize], temperature: f64) -> Result<Vec<PredictionRecord>> {
    if labels.len() != logits.batch {
        return Err(Error::contract("one label per example required"));
    }
    temperature_scale(&[0.0], temperature)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(b, &true_class)| {
            let p = head_mean_probabilities(logits, b, temperature);
            let predicted_class = argmax(&p);
            PredictionRecord {
                confidence: p[predicted_class].clamp(0.0, 1.0),
                predicted_class,
                true_class,
            }
        })
        .collect())
}

pub fn report_from_records(
    records: &[PredictionRecord],
    n_bins: usize,
    temperature: Option<f64>,
) -> Result<CalibrationReport> {
    if records.is_empty() {
        return Err(Error::config("calibration needs at least one example"));
    }
    let bins = bin_predictions(records, n_bins)?;
    let n = records.len() as f64;
    Ok(CalibrationReport {
        ece: ece(&bins, records.len())?,
        temperature,
        count: records.len(),
        overall_accuracy: records.iter().filter(|r| r.correct()).count() as f64 / n,
        overall_avg_confidence: records.iter().map(|r| r.confidence).sum::<f64>() / n,
        bins,
    })
}

/// Calibration of the head-mean ensemble of `model` on `dataset`.
pub fn calibration_report(
    model: &mut MultiHeadModel,
    dataset: &[LabeledExample],
    stats: &ChannelStats,
    n_bins: usize,
    temperature: Option<f64>,
) -> Result<CalibrationReport> {
    if dataset.is_empty() {
        return Err(Error::config("calibration needs at least one example"));
    }
    let images: Vec<&Image> = dataset.iter().map(|e| &e.image).collect();
    let logits = infer(model, &images, stats)?;
    let labels: Vec<usize> = dataset.iter().map(|e| e.label).collect();
    let records = records_from_logits(&logits, &labels, temperature.unwrap_or(1.0))?;
    report_from_records(&records, n_bins, temperature)
}

impl CalibrationReport {
    /// Reliability-diagram and confidence-histogram table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lower,bin_upper,count,avg_conf,avg_acc\n");
        for b in &self.bins {
            writeln!(
                out,
                "{},{},{},{},{}",
                b.lower, b.upper, b.count, b.avg_confidence, b.avg_accuracy
            )
            .expect("writing to a String cannot fail");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bin(count: usize, acc: f64, conf: f64) -> CalibrationBin {
        CalibrationBin {
            lower: 0.0,
            upper: 1.0,
            count,
            avg_confidence: conf,
            avg_accuracy: acc,
        }
    }

    #[test]
    fn bin_boundaries() {
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.35, 10), 3);
        assert_eq!(bin_index(0.0, 10), 0);
        let records: Vec<PredictionRecord> = (0..100)
            .map(|i| PredictionRecord {
                confidence: i as f64 / 99.0,
                predicted_class: 0,
                true_class: i % 2,
            })
            .collect();
        let bins = bin_predictions(&records, 10).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 100);
    }

    #[test]
    fn out_of_range_confidence() {
        let r = PredictionRecord {
            confidence: 1.5,
            predicted_class: 0,
            true_class: 0,
        };
        assert!(matches!(bin_predictions(&[r], 10), Err(Error::Contract(_))));
    }

    #[test]
    fn worked_ece() {
        let e = ece(&[bin(10, 0.8, 0.9), bin(30, 0.6, 0.55)], 40).unwrap();
        assert!((e - 0.0625).abs() < 1e-12);
        assert!((ece(&[bin(5, 0.5, 0.7)], 5).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(ece(&[bin(4, 0.5, 0.5), bin(0, 0.0, 0.0)], 4).unwrap(), 0.0);
    }

    #[test]
    fn tempered_softmax() {
        let p = temperature_scale(&[2.0, 0.0], 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert_eq!(temperature_scale(&[0.3, -1.0], 1.0).unwrap(), softmax(&[0.3, -1.0]));
        assert!(temperature_scale(&[1.0], 0.0).is_err());
        assert!(temperature_scale(&[1.0], -2.0).is_err());
    }

    #[test]
    fn perfect_predictor() {
        let logits = Logits {
            batch: 2,
            heads: 1,
            classes: 2,
            data: vec![800.0, 0.0, 0.0, 800.0],
        };
        let records = records_from_logits(&logits, &[0, 1], 1.0).unwrap();
        let report = report_from_records(&records, 10, None).unwrap();
        assert_eq!(report.ece, 0.0);
        assert_eq!(report.overall_accuracy, 1.0);
        assert_eq!(report.overall_avg_confidence, 1.0);
    }

    #[test]
    fn csv_has_one_row_per_bin() {
        let report = report_from_records(
            &[PredictionRecord {
                confidence: 0.9,
                predicted_class: 1,
                true_class: 1,
            }],
            4,
            Some(2.0),
        )
        .unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(csv.lines().last().unwrap(), "0.75,1,1,0.9,1");
    }
}
