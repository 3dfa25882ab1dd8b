use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::bbox::BBox;
use crate::error::{io_err, Result, TrackError};

/// Precision thresholds: center error in pixels, 0 through 50 inclusive.
pub const PRECISION_THRESHOLDS: usize = 51;
/// Success thresholds: overlap i/20 for i in 0..=20.
pub const SUCCESS_THRESHOLDS: usize = 21;

/// One-pass evaluation curves for a tracker run, all in 64-bit arithmetic.
#[derive(Clone, Debug, Serialize)]
pub struct OpeResult {
    /// Fraction of frames with center error at most t pixels, t = 0..=50.
    pub precision: Vec<f64>,
    /// Fraction of frames with overlap strictly above i/20, i = 0..=20.
    pub success: Vec<f64>,
    /// Precision at the conventional 20-pixel threshold.
    pub precision_at_20: f64,
    /// Mean of the success curve.
    pub auc: f64,
    pub frames: usize,
}

/// Compares a tracker's boxes against ground truth frame by frame. Success
/// uses a strict inequality, so a perfect run scores 1.0 at every threshold
/// below 1 and 0.0 at exactly 1, giving an area under the curve of 20/21.
pub fn ope_curves(gt: &[BBox], pred: &[BBox]) -> Result<OpeResult> {
    if gt.is_empty() {
        return Err(TrackError::Data("ground truth has no frames".into()));
    }
    if gt.len() != pred.len() {
        return Err(TrackError::Data(format!(
            "results have {} boxes but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = gt.len() as f64;
    let mut precision = vec![0.0f64; PRECISION_THRESHOLDS];
    let mut success = vec![0.0f64; SUCCESS_THRESHOLDS];
    for (g, p) in gt.iter().zip(pred) {
        let cle = g.cle(p);
        let iou = g.iou(p);
        for (t, slot) in precision.iter_mut().enumerate() {
            if cle <= t as f64 {
                *slot += 1.0;
            }
        }
        for (i, slot) in success.iter_mut().enumerate() {
            if iou > i as f64 / 20.0 {
                *slot += 1.0;
            }
        }
    }
    for v in &mut precision {
        *v /= n;
    }
    for v in &mut success {
        *v /= n;
    }
    let precision_at_20 = precision[20];
    let auc = success.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    Ok(OpeResult {
        precision,
        success,
        precision_at_20,
        auc,
        frames: gt.len(),
    })
}

/// Curve-wise mean over a set of per-sequence results; every sequence
/// counts equally regardless of length.
pub fn aggregate(results: &[&OpeResult]) -> OpeResult {
    let n = results.len() as f64;
    let mut precision = vec![0.0f64; PRECISION_THRESHOLDS];
    let mut success = vec![0.0f64; SUCCESS_THRESHOLDS];
    let mut frames = 0;
    for r in results {
        for (acc, v) in precision.iter_mut().zip(&r.precision) {
            *acc += v / n;
        }
        for (acc, v) in success.iter_mut().zip(&r.success) {
            *acc += v / n;
        }
        frames += r.frames;
    }
    let precision_at_20 = precision[20];
    let auc = success.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    OpeResult {
        precision,
        success,
        precision_at_20,
        auc,
        frames,
    }
}

/// One benchmark sequence queued for evaluation: ground truth, attribute
/// tags, and the tracker's boxes if a results file was found.
pub struct SequenceRecord {
    pub name: String,
    pub gt: Vec<BBox>,
    pub attributes: Vec<String>,
    pub pred: Option<Vec<BBox>>,
}

/// Full benchmark evaluation: per-sequence curves, the equal-weight overall
/// aggregate, and per-attribute aggregates over the sequences carrying each
/// tag.
#[derive(Serialize)]
pub struct BenchmarkReport {
    pub sequences: BTreeMap<String, OpeResult>,
    pub overall: OpeResult,
    pub attributes: BTreeMap<String, OpeResult>,
    pub warnings: Vec<String>,
}

pub fn evaluate(records: &[SequenceRecord]) -> Result<BenchmarkReport> {
    let mut sequences = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut tagged: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for record in records {
        let Some(pred) = &record.pred else {
            warnings.push(format!("sequence {}: no results file", record.name));
            continue;
        };
        let curves = ope_curves(&record.gt, pred)
            .map_err(|e| TrackError::Data(format!("sequence {}: {e}", record.name)))?;
        sequences.insert(record.name.clone(), curves);
        for tag in &record.attributes {
            tagged
                .entry(tag.clone())
                .or_default()
                .push(record.name.clone());
        }
    }
    if sequences.is_empty() {
        return Err(TrackError::Data(
            "no sequences were evaluated; every results file is missing".into(),
        ));
    }
    let all: Vec<&OpeResult> = sequences.values().collect();
    let overall = aggregate(&all);
    let mut attributes = BTreeMap::new();
    for (tag, names) in tagged {
        let members: Vec<&OpeResult> = names.iter().map(|n| &sequences[n]).collect();
        attributes.insert(tag, aggregate(&members));
    }
    Ok(BenchmarkReport {
        sequences,
        overall,
        attributes,
        warnings,
    })
}

/// Writes report.json plus the overall curves as two-column CSV files,
/// precision.csv and success.csv.
pub fn write_report(dir: &Path, report: &BenchmarkReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| TrackError::Data(format!("cannot serialize report: {e}")))?;
    let json_path = dir.join("report.json");
    fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;

    let curve_csv = |header: &str, values: &[f64], scale: f64| {
        let mut out = String::from(header);
        out.push('\n');
        for (i, v) in values.iter().enumerate() {
            out.push_str(&format!("{},{v}\n", i as f64 * scale));
        }
        out
    };
    let precision_path = dir.join("precision.csv");
    fs::write(
        &precision_path,
        curve_csv("threshold,value", &report.overall.precision, 1.0),
    )
    .map_err(|e| io_err(&precision_path, e))?;
    let success_path = dir.join("success.csv");
    fs::write(
        &success_path,
        curve_csv("threshold,value", &report.overall.success, 1.0 / 20.0),
    )
    .map_err(|e| io_err(&success_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxes(n: usize) -> Vec<BBox> {
        (0..n)
            .map(|i| BBox::new(10.0 + i as f32, 20.0 + 0.5 * i as f32, 30.0, 24.0))
            .collect()
    }

    #[test]
    fn perfect_tracking_scores_one_and_twenty_over_twenty_one() {
        let gt = boxes(40);
        let result = ope_curves(&gt, &gt).unwrap();
        assert!(result.precision.iter().all(|&v| v == 1.0));
        assert_eq!(result.precision_at_20, 1.0);
        assert!((result.auc - 20.0 / 21.0).abs() < 1e-12);
        assert_eq!(result.success[20], 0.0);
        assert_eq!(result.success[19], 1.0);
    }

    #[test]
    fn uniform_half_overlap_gives_the_expected_step_curve() {
        let gt: Vec<BBox> = (0..25).map(|_| BBox::new(0.0, 0.0, 30.0, 30.0)).collect();
        // Shifting a 30x30 box down by 10 leaves IoU at exactly 0.5.
        let pred: Vec<BBox> = gt.iter().map(|b| BBox::new(b.x, b.y + 10.0, b.w, b.h)).collect();
        assert_eq!(gt[0].iou(&pred[0]), 0.5);
        let result = ope_curves(&gt, &pred).unwrap();
        for (i, &v) in result.success.iter().enumerate() {
            let expected = if (i as f64 / 20.0) < 0.5 { 1.0 } else { 0.0 };
            assert_eq!(v, expected, "threshold {i}");
        }
        assert!((result.auc - 0.5).abs() <= 0.025);
    }

    #[test]
    fn curves_are_monotone_in_the_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let gt: Vec<BBox> = (0..60)
            .map(|_| {
                BBox::new(
                    rng.gen_range(0.0..200.0),
                    rng.gen_range(0.0..200.0),
                    rng.gen_range(5.0..60.0),
                    rng.gen_range(5.0..60.0),
                )
            })
            .collect();
        let pred: Vec<BBox> = gt
            .iter()
            .map(|b| {
                BBox::new(
                    b.x + rng.gen_range(-30.0..30.0),
                    b.y + rng.gen_range(-30.0..30.0),
                    b.w * rng.gen_range(0.5..1.5),
                    b.h * rng.gen_range(0.5..1.5),
                )
            })
            .collect();
        let result = ope_curves(&gt, &pred).unwrap();
        for w in result.precision.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in result.success.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(result.precision.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(result.success.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn length_mismatch_is_an_error_naming_the_counts() {
        let gt = boxes(10);
        let pred = boxes(9);
        let err = ope_curves(&gt, &pred).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains("10"), "{msg}");
    }

    #[test]
    fn evaluation_aggregates_sequences_and_attributes() {
        let gt = boxes(20);
        let off: Vec<BBox> = gt
            .iter()
            .map(|b| BBox::new(b.x + 100.0, b.y, b.w, b.h))
            .collect();
        let records = vec![
            SequenceRecord {
                name: "good".into(),
                gt: gt.clone(),
                attributes: vec!["IV".into()],
                pred: Some(gt.clone()),
            },
            SequenceRecord {
                name: "lost".into(),
                gt: gt.clone(),
                attributes: vec!["IV".into(), "POC".into()],
                pred: Some(off),
            },
            SequenceRecord {
                name: "skipped".into(),
                gt,
                attributes: vec![],
                pred: None,
            },
        ];
        let report = evaluate(&records).unwrap();
        assert_eq!(report.sequences.len(), 2);
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("skipped"));

        assert_eq!(report.sequences["good"].precision_at_20, 1.0);
        assert_eq!(report.sequences["lost"].precision_at_20, 0.0);
        assert!((report.overall.precision_at_20 - 0.5).abs() < 1e-12);

        assert!((report.attributes["IV"].precision_at_20 - 0.5).abs() < 1e-12);
        assert_eq!(report.attributes["POC"].precision_at_20, 0.0);
        assert!(!report.attributes.contains_key("SV"));
    }

    #[test]
    fn all_results_missing_is_an_error() {
        let records = vec![SequenceRecord {
            name: "only".into(),
            gt: boxes(5),
            attributes: vec![],
            pred: None,
        }];
        assert!(evaluate(&records).is_err());
    }

    #[test]
    fn report_files_are_written_and_parse_back() {
        let gt = boxes(12);
        let records = vec![SequenceRecord {
            name: "seq".into(),
            gt: gt.clone(),
            attributes: vec!["SV".into()],
            pred: Some(gt),
        }];
        let report = evaluate(&records).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &report).unwrap();

        let json = fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["overall"]["precision_at_20"], 1.0);
        assert!(parsed["sequences"]["seq"]["auc"].is_number());

        let precision = fs::read_to_string(dir.path().join("precision.csv")).unwrap();
        assert_eq!(precision.lines().count(), 1 + PRECISION_THRESHOLDS);
        assert_eq!(precision.lines().next().unwrap(), "threshold,value");
        let success = fs::read_to_string(dir.path().join("success.csv")).unwrap();
        assert_eq!(success.lines().count(), 1 + SUCCESS_THRESHOLDS);
        assert!(success.lines().nth(1).unwrap().starts_with("0,"));
    }
}
