//! Detection scoring: greedy matching, precision/recall, all-point AP.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::annotate::{indices_with, iou, read_labels, AnnotateError, BBox};
use crate::detect::Detection;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image {0} has no matching prediction or label file")]
    MissingPair(usize),
    #[error(transparent)]
    Labels(#[from] AnnotateError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Outcome of one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredMatch {
    /// Position in the caller's prediction list.
    pub pred: usize,
    pub score: f64,
    /// Matched gt index, `None` for a false positive.
    pub gt: Option<usize>,
    /// IoU with the matched gt, or the best IoU seen for a false positive.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatches {
    pub index: usize,
    /// In matching order: descending score, ties by prediction index.
    pub preds: Vec<PredMatch>,
    pub n_gt: usize,
    /// Unmatched gt indices.
    pub missed: Vec<usize>,
}

impl ImageMatches {
    pub fn true_positives(&self) -> usize {
        self.preds.iter().filter(|m| m.gt.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.preds.len() - self.true_positives()
    }
}

/// Each prediction, best score first, takes the unmatched gt of highest
/// IoU at or above `iou_thresh` (ties to the lower gt index).
pub fn match_detections(preds: &[Detection], gts: &[BBox], iou_thresh: f64) -> ImageMatches {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        let mut seen = 0.0f64;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(&preds[p].bbox, gt);
            seen = seen.max(v);
            if !taken[g] && v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.push(PredMatch {
            pred: p,
            score: preds[p].score,
            gt: best.map(|b| b.0),
            iou: best.map_or(seen, |b| b.1),
        });
    }
    ImageMatches {
        index: 0,
        preds: out,
        n_gt: gts.len(),
        missed: (0..gts.len()).filter(|&g| !taken[g]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    /// Predictions scoring at least this are kept.
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct prediction score, highest first.
pub fn pr_curve(images: &[ImageMatches]) -> Vec<PrPoint> {
    let n_gt: usize = images.iter().map(|m| m.n_gt).sum();
    let mut all: Vec<(f64, bool)> = images
        .iter()
        .flat_map(|m| m.preds.iter().map(|p| (p.score, p.gt.is_some())))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            tp += all[i].1 as usize;
            n += 1;
            i += 1;
        }
        out.push(PrPoint {
            score: s,
            precision: tp as f64 / n as f64,
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
        });
    }
    out
}

/// Area under the precision envelope (best precision at any recall at
/// least as high) as a step function of recall. Zero without gts.
pub fn average_precision(images: &[ImageMatches]) -> f64 {
    let curve = pr_curve(images);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, p) in curve.iter().enumerate() {
        if p.recall > prev_recall {
            let envelope = curve[k..].iter().map(|q| q.precision).fold(0.0, f64::max);
            ap += (p.recall - prev_recall) * envelope;
            prev_recall = p.recall;
        }
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

/// Counts over predictions scoring at least `score_thresh`. Greedy matching
/// runs best-first, so dropping low scores never changes earlier matches.
pub fn counts_at(images: &[ImageMatches], score_thresh: f64) -> Counts {
    let mut c = Counts::default();
    for m in images {
        let kept: Vec<&PredMatch> = m.preds.iter().filter(|p| p.score >= score_thresh).collect();
        let tp = kept.iter().filter(|p| p.gt.is_some()).count();
        c.tp += tp;
        c.fp += kept.len() - tp;
        c.fn_ += m.n_gt - tp;
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageMatches>,
    pub iou_thresh: f64,
    pub score_thresh: f64,
    pub ap: f64,
    /// At `score_thresh`.
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    /// Mean score of true positives at `score_thresh`, 0 when there are none.
    pub mean_tp_score: f64,
    pub n_gt: usize,
    pub n_pred: usize,
}

pub fn evaluate(pairs: &[(usize, Vec<Detection>, Vec<BBox>)], iou_thresh: f64, score_thresh: f64) -> EvalReport {
    let images: Vec<ImageMatches> = pairs
        .iter()
        .map(|(i, p, g)| ImageMatches {
            index: *i,
            ..match_detections(p, g, iou_thresh)
        })
        .collect();
    let counts = counts_at(&images, score_thresh);
    let tp_scores: Vec<f64> = images
        .iter()
        .flat_map(|m| m.preds.iter())
        .filter(|p| p.gt.is_some() && p.score >= score_thresh)
        .map(|p| p.score)
        .collect();
    EvalReport {
        ap: average_precision(&images),
        precision: counts.precision(),
        recall: counts.recall(),
        mean_tp_score: if tp_scores.is_empty() {
            0.0
        } else {
            tp_scores.iter().sum::<f64>() / tp_scores.len() as f64
        },
        n_gt: images.iter().map(|m| m.n_gt).sum(),
        n_pred: images.iter().map(|m| m.preds.len()).sum(),
        images,
        iou_thresh,
        score_thresh,
        counts,
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images {}", self.images.len());
        let _ = writeln!(s, "gt_boxes {}", self.n_gt);
        let _ = writeln!(s, "predictions {}", self.n_pred);
        let _ = writeln!(s, "iou_thresh {}", self.iou_thresh);
        let _ = writeln!(s, "score_thresh {}", self.score_thresh);
        let _ = writeln!(s, "ap {:.6}", self.ap);
        let _ = writeln!(s, "precision {:.6}", self.precision);
        let _ = writeln!(s, "recall {:.6}", self.recall);
        let _ = writeln!(s, "tp {}", self.counts.tp);
        let _ = writeln!(s, "fp {}", self.counts.fp);
        let _ = writeln!(s, "fn {}", self.counts.fn_);
        let _ = writeln!(s, "mean_tp_score {:.6}", self.mean_tp_score);
        for m in &self.images {
            let tp = m.preds.iter().filter(|p| p.gt.is_some() && p.score >= self.score_thresh).count();
            let fp = m.preds.iter().filter(|p| p.gt.is_none() && p.score >= self.score_thresh).count();
            let _ = writeln!(s, "image {} tp {} fp {} fn {}", m.index, tp, fp, m.n_gt - tp);
        }
        s
    }

    /// `score,precision,recall` rows.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("score,precision,recall\n");
        for p in pr_curve(&self.images) {
            let _ = writeln!(s, "{},{},{}", p.score, p.precision, p.recall);
        }
        s
    }
}

/// Pairs `{i}.txt` prediction files with `{i}.txt` labels. Without `range`
/// the prediction files define the evaluated set; with it, every labeled
/// index inside the range must have predictions.
pub fn eval_report(
    pred_dir: &Path,
    gt_dir: &Path,
    iou_thresh: f64,
    score_thresh: f64,
    range: Option<Range<usize>>,
) -> Result<EvalReport> {
    let preds = indices_with(pred_dir, "txt")?;
    let gts = indices_with(gt_dir, "txt")?;
    let wanted: Vec<usize> = match &range {
        Some(r) => {
            let w: Vec<usize> = gts.iter().copied().filter(|i| r.contains(i)).collect();
            if let Some(&i) = w.iter().find(|i| preds.binary_search(i).is_err()) {
                return Err(EvalError::MissingPair(i));
            }
            w
        }
        None => preds,
    };
    let mut pairs = Vec::with_capacity(wanted.len());
    for i in wanted {
        if gts.binary_search(&i).is_err() {
            return Err(EvalError::MissingPair(i));
        }
        let p: Vec<Detection> = read_labels(pred_dir.join(format!("{i}.txt")))?
            .iter()
            .map(Detection::from_label)
            .collect();
        let g = read_labels(gt_dir.join(format!("{i}.txt")))?;
        pairs.push((i, p, g));
    }
    Ok(evaluate(&pairs, iou_thresh, score_thresh))
}

pub fn write_report(path: &Path, report: &EvalReport, csv: Option<&Path>) -> Result<()> {
    fs::write(path, report.to_text()).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(c) = csv {
        fs::write(c, report.pr_csv()).map_err(|source| EvalError::Io {
            path: c.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}
