//! Keypoint precision/recall/F1 under one-to-one matching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point, Skeleton, SkeletonFile};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [20.0, 30.0, 40.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and ground-truth sets differ: {0}")]
    KeyMismatch(String),
    #[error("annotation {id}: {msg}")]
    Malformed { id: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Flat keypoint list for one sign image, in stroke order
/// `[head_a, head_b, head_c, tail]` per stroke.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    #[serde(alias = "sign")]
    pub sign_name: String,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub keypoints: Vec<Point>,
}

impl Annotation {
    pub fn from_skeleton(id: &str, s: &Skeleton, image_size: (usize, usize)) -> Self {
        Self {
            id: id.to_string(),
            sign_name: s.sign_name().to_string(),
            image_size,
            keypoints: s.keypoints(),
        }
    }

    /// Reads an annotation file, or a skeleton file whose id becomes the file
    /// stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if let Ok(a) = serde_json::from_str::<Annotation>(&text) {
            a.validate()?;
            return Ok(a);
        }
        let skel: SkeletonFile = serde_json::from_str(&text)?;
        let stem = path
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.split('.').next().unwrap_or(n).to_string())
            .unwrap_or_default();
        Ok(Self {
            id: stem,
            sign_name: skel.sign,
            image_size: (0, 0),
            keypoints: skel.strokes.iter().flat_map(|s| s.keypoints()).collect(),
        })
    }

    /// Four keypoints per stroke, all finite.
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |msg: &str| EvalError::Malformed {
            id: self.id.clone(),
            msg: msg.to_string(),
        };
        if self.keypoints.len() % 4 != 0 {
            return Err(bad("keypoint count is not a multiple of 4"));
        }
        if self.keypoints.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite keypoint"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Loads every `*.json` annotation under `dir` (non-recursive).
pub fn load_annotation_dir(dir: impl AsRef<Path>) -> Result<Vec<Annotation>, EvalError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(Annotation::load).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn add(&mut self, o: MatchCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// 0 when there are no predictions.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there is no ground truth.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Greedy one-to-one matching: candidate pairs within `threshold` are taken
/// in order of increasing distance (ties by prediction, then GT index).
pub fn match_keypoints(pred: &[Point], gt: &[Point], threshold: f64) -> MatchCounts {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = p.distance(g);
            if d <= threshold {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            tp += 1;
        }
    }
    MatchCounts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    #[serde(flatten)]
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ThresholdMetrics {
    fn new(threshold: f64, counts: MatchCounts) -> Self {
        Self {
            threshold,
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: usize,
    /// Micro-averaged over all keypoints.
    pub overall: Vec<ThresholdMetrics>,
    pub per_sign: BTreeMap<String, Vec<ThresholdMetrics>>,
    /// Unweighted mean of per-image F1, per threshold.
    pub mean_image_f1: Vec<f64>,
}

impl MetricReport {
    pub fn f1_at(&self, threshold: f64) -> Option<f64> {
        self.overall
            .iter()
            .find(|m| m.threshold == threshold)
            .map(|m| m.f1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "sign", "thr", "tp", "fp", "fn", "P", "R", "F1"
        );
        let mut row = |name: &str, m: &ThresholdMetrics| {
            let _ = writeln!(
                out,
                "{:<12} {:>6.1} {:>7} {:>7} {:>7} {:>7.4} {:>7.4} {:>7.4}",
                name, m.threshold, m.counts.tp, m.counts.fp, m.counts.fn_, m.precision, m.recall, m.f1
            );
        };
        for (sign, rows) in &self.per_sign {
            for m in rows {
                row(sign, m);
            }
        }
        for m in &self.overall {
            row("ALL", m);
        }
        out
    }
}

/// Pairs predictions with ground truth by id and reports micro-averaged
/// metrics. The two sets must contain exactly the same ids.
pub fn evaluate_corpus(
    preds: &[Annotation],
    gts: &[Annotation],
    thresholds: &[f64],
) -> Result<MetricReport, EvalError> {
    let pred_map = index_by_id(preds, "prediction")?;
    let gt_map = index_by_id(gts, "ground truth")?;
    let pk: BTreeSet<_> = pred_map.keys().collect();
    let gk: BTreeSet<_> = gt_map.keys().collect();
    if pk != gk {
        let missing: Vec<_> = gk.difference(&pk).map(|s| s.as_str()).collect();
        let extra: Vec<_> = pk.difference(&gk).map(|s| s.as_str()).collect();
        return Err(EvalError::KeyMismatch(format!(
            "missing predictions {missing:?}, unexpected predictions {extra:?}"
        )));
    }

    let mut overall = vec![MatchCounts::default(); thresholds.len()];
    let mut per_sign: BTreeMap<String, Vec<MatchCounts>> = BTreeMap::new();
    let mut f1_sum = vec![0.0; thresholds.len()];
    for (id, gt) in &gt_map {
        let pred = pred_map[id];
        if pred.sign_name != gt.sign_name {
            return Err(EvalError::KeyMismatch(format!(
                "{id}: predicted sign {} but ground truth is {}",
                pred.sign_name, gt.sign_name
            )));
        }
        let sign = per_sign
            .entry(gt.sign_name.clone())
            .or_insert_with(|| vec![MatchCounts::default(); thresholds.len()]);
        for (k, &t) in thresholds.iter().enumerate() {
            let c = match_keypoints(&pred.keypoints, &gt.keypoints, t);
            overall[k].add(c);
            sign[k].add(c);
            f1_sum[k] += c.f1();
        }
    }
    let pack = |counts: &[MatchCounts]| {
        thresholds
            .iter()
            .zip(counts)
            .map(|(&t, &c)| ThresholdMetrics::new(t, c))
            .collect::<Vec<_>>()
    };
    let n = gt_map.len();
    Ok(MetricReport {
        images: n,
        overall: pack(&overall),
        per_sign: per_sign.iter().map(|(k, v)| (k.clone(), pack(v))).collect(),
        mean_image_f1: f1_sum
            .iter()
            .map(|s| if n == 0 { 0.0 } else { s / n as f64 })
            .collect(),
    })
}

fn index_by_id<'a>(
    anns: &'a [Annotation],
    what: &str,
) -> Result<BTreeMap<String, &'a Annotation>, EvalError> {
    let mut map = BTreeMap::new();
    for a in anns {
        a.validate()?;
        if map.insert(a.id.clone(), a).is_some() {
            return Err(EvalError::KeyMismatch(format!("duplicate {what} id {}", a.id)));
        }
    }
    Ok(map)
}
