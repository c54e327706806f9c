//! Threshold-sweep evaluation: per-video crossings, time-to-accident,
//! average precision and smoothed confidence curves.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_bundle, DatasetManifest, Label};
use crate::error::{Error, Result};
use crate::network::{forward, ModelConfig, ModelParams};

/// Per-frame accident probabilities for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnticipationResult {
    pub id: String,
    pub probs: Vec<f64>,
    pub label: Label,
    pub toa: i64,
    pub fps: u32,
}

impl AnticipationResult {
    /// Frames that count as anticipation: all frames for negatives, `t < toa` for positives.
    fn window(&self) -> &[f64] {
        if self.label.is_positive() {
            let end = self.toa.clamp(0, self.probs.len() as i64) as usize;
            &self.probs[..end]
        } else {
            &self.probs
        }
    }
}

/// First frame with `p >= threshold`; for positives only frames before `toa` count.
pub fn crossing_frame(result: &AnticipationResult, threshold: f64) -> Option<usize> {
    result.window().iter().position(|&p| p >= threshold)
}

/// Seconds between the first valid crossing and the accident.
pub fn tta(result: &AnticipationResult, threshold: f64) -> Result<Option<f64>> {
    if !result.label.is_positive() {
        return Err(Error::Invalid(format!(
            "{}: time-to-accident needs a positive video",
            result.id
        )));
    }
    Ok(crossing_frame(result, threshold)
        .map(|t| (result.toa - t as i64) as f64 / f64::from(result.fps)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean TTA over this threshold's true positives, seconds.
    pub mean_tta: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub mtta_s: f64,
    pub tta_at_best_ap_s: f64,
    /// Threshold of the operating point behind `tta_at_best_ap_s`.
    pub best_threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Ordered from the highest threshold to the lowest.
    pub points: Vec<PrPoint>,
}

fn check_results(results: &[AnticipationResult]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Invalid("no results to evaluate".into()));
    }
    for r in results {
        if r.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid(format!(
                "{}: probabilities must lie in [0, 1]",
                r.id
            )));
        }
        if r.fps == 0 {
            return Err(Error::Invalid(format!("{}: fps must be positive", r.id)));
        }
    }
    let n_pos = results.iter().filter(|r| r.label.is_positive()).count();
    if n_pos == 0 || n_pos == results.len() {
        return Err(Error::Invalid(
            "evaluation needs both positive and negative videos".into(),
        ));
    }
    Ok(())
}

/// Distinct probabilities plus 1.0, descending.
pub fn thresholds(results: &[AnticipationResult]) -> Vec<f64> {
    let mut all: Vec<f64> = results
        .iter()
        .flat_map(|r| r.probs.iter().copied())
        .collect();
    all.push(1.0);
    all.sort_by(|a, b| b.total_cmp(a));
    all.dedup();
    all
}

pub fn pr_point(results: &[AnticipationResult], threshold: f64) -> PrPoint {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    let mut tta_sum = 0.0;
    for r in results {
        let hit = crossing_frame(r, threshold);
        match (r.label.is_positive(), hit) {
            (true, Some(t)) => {
                tp += 1;
                tta_sum += (r.toa - t as i64) as f64 / f64::from(r.fps);
            }
            (true, None) => fn_ += 1,
            (false, Some(_)) => fp += 1,
            (false, None) => tn += 1,
        }
    }
    PrPoint {
        threshold,
        precision: if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        recall: tp as f64 / (tp + fn_) as f64,
        mean_tta: (tp > 0).then(|| tta_sum / tp as f64),
        tp,
        fp,
        fn_,
        tn,
    }
}

pub fn evaluate(results: &[AnticipationResult]) -> Result<MetricsReport> {
    check_results(results)?;
    let points: Vec<PrPoint> = thresholds(results)
        .into_iter()
        .map(|th| pr_point(results, th))
        .collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for p in &points {
        ap += p.precision * (p.recall - prev_recall);
        prev_recall = p.recall;
    }
    let with_tp: Vec<&PrPoint> = points.iter().filter(|p| p.tp > 0).collect();
    let mtta_s = if with_tp.is_empty() {
        0.0
    } else {
        with_tp
            .iter()
            .map(|p| p.mean_tta.unwrap_or(0.0))
            .sum::<f64>()
            / with_tp.len() as f64
    };
    // highest precision, then highest recall, then highest threshold
    let best = with_tp
        .iter()
        .copied()
        .fold(None::<&PrPoint>, |best, p| match best {
            Some(b) if (b.precision, b.recall) >= (p.precision, p.recall) => Some(b),
            _ => Some(p),
        });
    Ok(MetricsReport {
        ap,
        mtta_s,
        tta_at_best_ap_s: best.and_then(|p| p.mean_tta).unwrap_or(0.0),
        best_threshold: best.map_or(1.0, |p| p.threshold),
        n_pos: results.iter().filter(|r| r.label.is_positive()).count(),
        n_neg: results.iter().filter(|r| !r.label.is_positive()).count(),
        points,
    })
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = floor(4 sigma + 0.5)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Gaussian smoothing with reflective boundary, for display only.
pub fn smooth(probs: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid("sigma must be positive".into()));
    }
    if probs.is_empty() {
        return Ok(Vec::new());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    Ok((0..probs.len() as i64)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * probs[reflect(t + k as i64 - radius, probs.len())])
                .sum()
        })
        .collect())
}

pub const SMOOTHING_SIGMA: f64 = 2.0;

/// Runs the model over every clip of `split`.
pub fn predict_split(
    manifest_path: &Path,
    split: &str,
    params: &ModelParams,
    model: &ModelConfig,
) -> Result<Vec<AnticipationResult>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let samples = manifest.split(split)?;
    if samples.is_empty() {
        return Err(Error::Invalid(format!("split {split} is empty")));
    }
    samples
        .into_iter()
        .map(|s| {
            let bundle = read_bundle(DatasetManifest::bundle_path(manifest_path, s))?;
            Ok(AnticipationResult {
                id: s.id.clone(),
                probs: forward(&bundle, params, model)?.probs,
                label: s.label,
                toa: s.toa,
                fps: s.fps,
            })
        })
        .collect()
}

/// Machine-readable summary written next to the curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub ap: f64,
    pub mtta_s: f64,
    pub tta_at_best_ap_s: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub pr_curve_path: String,
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes `metrics.json`, `pr_curve.csv` and `curves/<id>.csv`; returns the metrics path.
pub fn export_report(
    report: &MetricsReport,
    results: &[AnticipationResult],
    out_dir: &Path,
) -> Result<PathBuf> {
    if results.is_empty() {
        return Err(Error::Invalid("no results to export".into()));
    }
    let curves = out_dir.join("curves");
    std::fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;

    let pr_path = out_dir.join("pr_curve.csv");
    let mut pr = create(&pr_path)?;
    let io = |e| Error::io(&pr_path, e);
    writeln!(pr, "threshold,precision,recall,mean_tta").map_err(io)?;
    for p in &report.points {
        writeln!(
            pr,
            "{},{},{},{}",
            p.threshold,
            p.precision,
            p.recall,
            fmt_opt(p.mean_tta)
        )
        .map_err(io)?;
    }
    pr.flush().map_err(io)?;

    for r in results {
        let path = curves.join(format!("{}.csv", r.id));
        let smoothed = smooth(&r.probs, SMOOTHING_SIGMA)?;
        let mut f = create(&path)?;
        let io = |e| Error::io(&path, e);
        writeln!(f, "frame,p_raw,p_smoothed").map_err(io)?;
        for (t, (p, s)) in r.probs.iter().zip(&smoothed).enumerate() {
            writeln!(f, "{t},{p},{s}").map_err(io)?;
        }
        f.flush().map_err(io)?;
    }

    let metrics = MetricsFile {
        ap: report.ap,
        mtta_s: report.mtta_s,
        tta_at_best_ap_s: report.tta_at_best_ap_s,
        n_pos: report.n_pos,
        n_neg: report.n_neg,
        pr_curve_path: "pr_curve.csv".into(),
    };
    let path = out_dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&metrics)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn res(id: &str, probs: &[f64], label: Label, toa: i64, fps: u32) -> AnticipationResult {
        AnticipationResult {
            id: id.into(),
            probs: probs.to_vec(),
            label,
            toa,
            fps,
        }
    }

    #[test]
    fn crossing_cases() {
        let r = res("a", &[0.1, 0.6, 0.9], Label::Negative, -1, 10);
        assert_eq!(crossing_frame(&r, 0.5), Some(1));
        assert_eq!(crossing_frame(&r, 0.95), None);
        let late = res("b", &[0.1, 0.2, 0.9], Label::Positive, 2, 10);
        assert_eq!(crossing_frame(&late, 0.5), None);
        assert_eq!(crossing_frame(&late, 0.1), Some(0));
    }

    #[test]
    fn tta_cases() {
        let mut probs = vec![0.0; 100];
        probs[50] = 0.9;
        let r = res("a", &probs, Label::Positive, 90, 20);
        assert_eq!(tta(&r, 0.5).unwrap(), Some(2.0));
        let mut probs = vec![0.0; 100];
        probs[89] = 0.9;
        let r = res("b", &probs, Label::Positive, 90, 20);
        assert_eq!(tta(&r, 0.5).unwrap(), Some(0.05));
        assert_eq!(tta(&r, 0.95).unwrap(), None);
        assert!(tta(&res("c", &[0.1], Label::Negative, -1, 20), 0.5).is_err());
    }

    #[test]
    fn perfect_separation_gives_unit_ap() {
        let rs = vec![
            res("p1", &[0.2, 0.9, 0.95, 0.99], Label::Positive, 3, 10),
            res("p2", &[0.8, 0.85, 0.9, 0.9], Label::Positive, 3, 10),
            res("n1", &[0.1, 0.3, 0.2, 0.1], Label::Negative, -1, 10),
            res("n2", &[0.4, 0.5, 0.6, 0.7], Label::Negative, -1, 10),
        ];
        let rep = evaluate(&rs).unwrap();
        assert!((rep.ap - 1.0).abs() < 1e-12);
        assert!(rep.mtta_s > 0.0);
        assert_eq!(rep.n_pos, 2);
        assert_eq!(rep.n_neg, 2);
    }

    #[test]
    fn constant_scores_give_positive_fraction() {
        let rs = vec![
            res("p", &[0.5; 4], Label::Positive, 3, 10),
            res("n1", &[0.5; 4], Label::Negative, -1, 10),
            res("n2", &[0.5; 4], Label::Negative, -1, 10),
        ];
        let rep = evaluate(&rs).unwrap();
        let p = rep.points.iter().find(|p| p.threshold == 0.5).unwrap();
        assert!((p.precision - 1.0 / 3.0).abs() < 1e-15);
        assert!((rep.ap - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors_on_degenerate_input() {
        assert!(evaluate(&[]).is_err());
        assert!(evaluate(&[res("p", &[0.5], Label::Positive, 1, 10)]).is_err());
        let bad = vec![
            res("p", &[1.5], Label::Positive, 1, 10),
            res("n", &[0.5], Label::Negative, -1, 10),
        ];
        assert!(evaluate(&bad).is_err());
    }

    /// Independent reference: every candidate threshold is rescanned from the raw sequences.
    fn reference_ap(rs: &[AnticipationResult]) -> f64 {
        let mut cands: Vec<f64> = vec![1.0];
        for r in rs {
            for &p in &r.probs {
                if !cands.contains(&p) {
                    cands.push(p);
                }
            }
        }
        cands.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let npos = rs.iter().filter(|r| r.label == Label::Positive).count() as f64;
        let mut ap = 0.0;
        let mut last_r = 0.0;
        for th in cands {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for r in rs {
                let mut fired = false;
                for (t, &p) in r.probs.iter().enumerate() {
                    let valid = r.label == Label::Negative || (t as i64) < r.toa;
                    if valid && p >= th {
                        fired = true;
                        break;
                    }
                }
                if fired {
                    if r.label == Label::Positive {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let prec = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
            let rec = tp / npos;
            ap += prec * (rec - last_r);
            last_r = rec;
        }
        ap
    }

    #[test]
    fn hand_written_six_video_set() {
        let rs = vec![
            res("p1", &[0.1, 0.4, 0.8, 0.9, 0.95], Label::Positive, 4, 10),
            res("p2", &[0.3, 0.3, 0.35, 0.7, 0.7], Label::Positive, 2, 10),
            res("p3", &[0.05, 0.1, 0.2, 0.6, 0.9], Label::Positive, 3, 10),
            res("n1", &[0.2, 0.5, 0.4, 0.3, 0.2], Label::Negative, -1, 10),
            res("n2", &[0.1, 0.1, 0.1, 0.1, 0.1], Label::Negative, -1, 10),
            res("n3", &[0.3, 0.85, 0.3, 0.3, 0.3], Label::Negative, -1, 10),
        ];
        let rep = evaluate(&rs).unwrap();
        assert!((rep.ap - reference_ap(&rs)).abs() < 1e-9);
        assert!(rep.points.windows(2).all(|w| w[1].recall >= w[0].recall));
    }

    pub(crate) fn random_set(rng: &mut ChaCha8Rng) -> Vec<AnticipationResult> {
        let n = rng.random_range(2..=20);
        let t_len = rng.random_range(1..=20);
        let mut rs: Vec<AnticipationResult> = (0..n)
            .map(|i| {
                let positive = i == 0 || (i > 1 && rng.random_bool(0.5));
                let probs: Vec<f64> = (0..t_len)
                    .map(|_| (rng.random_range(0..20) as f64) / 19.0)
                    .collect();
                res(
                    &format!("v{i}"),
                    &probs,
                    if positive {
                        Label::Positive
                    } else {
                        Label::Negative
                    },
                    if positive {
                        rng.random_range(0..=t_len as i64)
                    } else {
                        -1
                    },
                    rng.random_range(1..30),
                )
            })
            .collect();
        rs.rotate_left(rng.random_range(0..n));
        rs
    }

    #[test]
    fn matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let rs = random_set(&mut rng);
            let rep = evaluate(&rs).unwrap();
            assert!((rep.ap - reference_ap(&rs)).abs() < 1e-9);
            assert!((0.0..=1.0 + 1e-12).contains(&rep.ap));
        }
    }

    #[test]
    fn monotone_transform_keeps_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let rs = random_set(&mut rng);
            let f = |p: f64| p.powi(3);
            let mapped: Vec<AnticipationResult> = rs
                .iter()
                .map(|r| AnticipationResult {
                    probs: r.probs.iter().map(|&p| f(p)).collect(),
                    ..r.clone()
                })
                .collect();
            for th in thresholds(&rs) {
                let a = pr_point(&rs, th);
                let b = pr_point(&mapped, f(th));
                assert_eq!((a.tp, a.fp, a.fn_, a.tn), (b.tp, b.fp, b.fn_, b.tn));
            }
        }
    }

    #[test]
    fn tta_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rs = random_set(&mut rng);
            for r in rs.iter().filter(|r| r.label.is_positive()) {
                for th in thresholds(&rs) {
                    if let Some(s) = tta(r, th).unwrap() {
                        assert!(s > 0.0 && s <= r.toa as f64 / f64::from(r.fps));
                    }
                }
            }
        }
    }

    #[test]
    fn smoothing_cases() {
        let c = smooth(&[0.3; 25], 2.0).unwrap();
        assert!(c.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let mut impulse = vec![0.0; 41];
        impulse[20] = 1.0;
        let s = smooth(&impulse, 2.0).unwrap();
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 17);
        for (i, w) in k.iter().enumerate() {
            assert!((s[12 + i] - w).abs() < 1e-15);
        }
        let sym: Vec<f64> = (0..30)
            .map(|t| ((t as f64 - 14.5).abs() / 15.0).powi(2))
            .collect();
        let mean = sym.iter().sum::<f64>() / 30.0;
        let sm = smooth(&sym, 2.0).unwrap();
        assert!((sm.iter().sum::<f64>() / 30.0 - mean).abs() < 1e-9);
        // shorter than the kernel still reflects cleanly
        assert!(smooth(&[0.2, 0.4], 2.0)
            .unwrap()
            .iter()
            .all(|v| (0.2..=0.4).contains(v)));
        assert!(smooth(&[0.2], 0.0).is_err());
    }

    #[test]
    fn reflect_matches_half_sample_rule() {
        // d c b a | a b c d | d c b a
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rs = vec![
            res("p", &[0.1, 0.7, 0.9], Label::Positive, 2, 10),
            res("n", &[0.2, 0.3, 0.1], Label::Negative, -1, 10),
        ];
        let rep = evaluate(&rs).unwrap();
        let path = export_report(&rep, &rs, dir.path()).unwrap();
        let m: MetricsFile = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(m.ap, rep.ap);
        assert_eq!(m.mtta_s, rep.mtta_s);
        let pr = std::fs::read_to_string(dir.path().join("pr_curve.csv")).unwrap();
        let rows: Vec<&str> = pr.lines().skip(1).collect();
        assert_eq!(rows.len(), rep.points.len());
        for (row, p) in rows.iter().zip(&rep.points) {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols[0].parse::<f64>().unwrap(), p.threshold);
            assert_eq!(cols[1].parse::<f64>().unwrap(), p.precision);
        }
        let curve = std::fs::read_to_string(dir.path().join("curves/p.csv")).unwrap();
        assert_eq!(curve.lines().count(), 4);
        assert!(export_report(&rep, &[], dir.path()).is_err());
    }
}
