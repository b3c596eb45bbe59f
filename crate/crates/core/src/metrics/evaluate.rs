use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ber_family, confusion, f_beta, iou, mae, BerFamily, ConfusionCounts};
use crate::data_io::{load_gt_mask, load_mask, RunConfig, ShadowMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub threshold: f32,
    pub beta_sq: f64,
    pub mae_on_probabilities: bool,
    pub aggregate_per_video: bool,
    pub ber_pooled: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            beta_sq: 0.3,
            mae_on_probabilities: true,
            aggregate_per_video: false,
            ber_pooled: false,
        }
    }
}

impl From<&RunConfig> for EvalSettings {
    fn from(cfg: &RunConfig) -> Self {
        Self {
            threshold: cfg.binarize_threshold as f32,
            beta_sq: cfg.f_beta_sq,
            mae_on_probabilities: cfg.mae_on_probabilities,
            aggregate_per_video: cfg.aggregate_per_video,
            ber_pooled: cfg.ber_pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub video: String,
    pub frame: String,
    pub counts: ConfusionCounts,
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
    pub ber: Option<f64>,
    pub sber: Option<f64>,
    pub nber: Option<f64>,
}

/// Aggregated metrics. BER is always the mean of the aggregated components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
    pub ber: Option<f64>,
    pub sber: Option<f64>,
    pub nber: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalIssue {
    pub video: String,
    pub frame: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub settings: EvalSettings,
    pub frames: Vec<FrameMetrics>,
    pub videos: Vec<VideoMetrics>,
    pub dataset: Summary,
    pub issues: Vec<EvalIssue>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn summarize(frames: &[&FrameMetrics], pooled_ber: bool) -> Summary {
    let ber = if pooled_ber {
        ber_family(&frames.iter().map(|f| f.counts).sum())
    } else {
        BerFamily::from_components(
            mean_of(frames.iter().filter_map(|f| f.sber)),
            mean_of(frames.iter().filter_map(|f| f.nber)),
        )
    };
    Summary {
        frames: frames.len(),
        mae: mean_of(frames.iter().map(|f| f.mae)).unwrap_or(f64::NAN),
        f_beta: mean_of(frames.iter().map(|f| f.f_beta)).unwrap_or(f64::NAN),
        iou: mean_of(frames.iter().map(|f| f.iou)).unwrap_or(f64::NAN),
        ber: ber.ber,
        sber: ber.sber,
        nber: ber.nber,
    }
}

fn mean_of_means(videos: &[VideoMetrics]) -> Summary {
    let s: Vec<&Summary> = videos.iter().map(|v| &v.summary).collect();
    let comp = BerFamily::from_components(
        mean_of(s.iter().filter_map(|v| v.sber)),
        mean_of(s.iter().filter_map(|v| v.nber)),
    );
    Summary {
        frames: s.iter().map(|v| v.frames).sum(),
        mae: mean_of(s.iter().map(|v| v.mae)).unwrap_or(f64::NAN),
        f_beta: mean_of(s.iter().map(|v| v.f_beta)).unwrap_or(f64::NAN),
        iou: mean_of(s.iter().map(|v| v.iou)).unwrap_or(f64::NAN),
        ber: comp.ber,
        sber: comp.sber,
        nber: comp.nber,
    }
}

/// Accumulates per-frame metrics and produces a [`MetricsReport`].
#[derive(Debug, Clone)]
pub struct Evaluator {
    settings: EvalSettings,
    frames: Vec<FrameMetrics>,
    issues: Vec<EvalIssue>,
}

impl Evaluator {
    pub fn new(settings: EvalSettings) -> Self {
        Self {
            settings,
            frames: Vec::new(),
            issues: Vec::new(),
        }
    }

    pub fn frame_metrics(
        &self,
        video: &str,
        frame: &str,
        pred: &ShadowMask,
        gt: &ShadowMask,
    ) -> Result<FrameMetrics> {
        let binary = pred.binarize(self.settings.threshold);
        let counts = confusion(&binary, gt)?;
        let mae = if self.settings.mae_on_probabilities {
            mae(pred, gt)?
        } else {
            mae(&binary, gt)?
        };
        let ber = ber_family(&counts);
        Ok(FrameMetrics {
            video: video.to_string(),
            frame: frame.to_string(),
            counts,
            mae,
            f_beta: f_beta(&counts, self.settings.beta_sq),
            iou: iou(&counts),
            ber: ber.ber,
            sber: ber.sber,
            nber: ber.nber,
        })
    }

    pub fn add_frame(
        &mut self,
        video: &str,
        frame: &str,
        pred: &ShadowMask,
        gt: &ShadowMask,
    ) -> Result<()> {
        let m = self.frame_metrics(video, frame, pred, gt)?;
        self.frames.push(m);
        Ok(())
    }

    pub fn add_issue(&mut self, video: &str, frame: &str, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{video}/{frame}: {message}; frame excluded");
        self.issues.push(EvalIssue {
            video: video.to_string(),
            frame: frame.to_string(),
            message,
        });
    }

    pub fn finish(self) -> MetricsReport {
        let mut by_video: BTreeMap<&str, Vec<&FrameMetrics>> = BTreeMap::new();
        for f in &self.frames {
            by_video.entry(f.video.as_str()).or_default().push(f);
        }
        let videos: Vec<VideoMetrics> = by_video
            .iter()
            .map(|(v, frames)| VideoMetrics {
                video: v.to_string(),
                summary: summarize(frames, self.settings.ber_pooled),
            })
            .collect();
        let dataset = if self.settings.aggregate_per_video {
            mean_of_means(&videos)
        } else {
            summarize(&self.frames.iter().collect::<Vec<_>>(), self.settings.ber_pooled)
        };
        MetricsReport {
            settings: self.settings,
            frames: self.frames,
            videos,
            dataset,
            issues: self.issues,
        }
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            stems.push(p.file_stem().unwrap().to_string_lossy().into_owned());
        }
    }
    stems.sort();
    Ok(stems)
}

/// Evaluates a prediction tree against a ground-truth tree, both laid out as
/// `<root>/<video>/<frame>.png`. Frames without a readable prediction are
/// recorded as issues and excluded.
pub fn evaluate(pred_root: &Path, gt_root: &Path, settings: EvalSettings) -> Result<MetricsReport> {
    if !gt_root.is_dir() {
        return Err(Error::NotFound(gt_root.display().to_string()));
    }
    if !pred_root.is_dir() {
        return Err(Error::NotFound(pred_root.display().to_string()));
    }
    let mut videos: Vec<String> = std::fs::read_dir(gt_root)
        .map_err(|e| Error::io(gt_root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    videos.sort();

    let mut ev = Evaluator::new(settings);
    for video in &videos {
        for stem in png_stems(&gt_root.join(video))? {
            let gt = load_gt_mask(&gt_root.join(video).join(format!("{stem}.png")))?;
            let pred_path = pred_root.join(video).join(format!("{stem}.png"));
            match load_mask(&pred_path) {
                Ok(pred) if pred.shape() == gt.shape() => ev.add_frame(video, &stem, &pred, &gt)?,
                Ok(pred) => ev.add_issue(
                    video,
                    &stem,
                    format!("prediction is {:?}, ground truth {:?}", pred.shape(), gt.shape()),
                ),
                Err(Error::NotFound(_)) => ev.add_issue(video, &stem, "missing prediction"),
                Err(e) => ev.add_issue(video, &stem, e.to_string()),
            }
        }
    }
    Ok(ev.finish())
}

fn cell(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.digits$}"),
        _ => "-".to_string(),
    }
}

impl MetricsReport {
    /// Human-readable table, columns MAE, Fβ, IoU, BER, SBER, NBER.
    pub fn to_table(&self) -> String {
        let s = &self.settings;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# threshold={} beta_sq={} mae_on={} aggregation={} ber={}",
            s.threshold,
            s.beta_sq,
            if s.mae_on_probabilities { "probabilities" } else { "binary" },
            if s.aggregate_per_video { "per-video" } else { "per-frame" },
            if s.ber_pooled { "pooled" } else { "per-frame" },
        );
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "video", "frames", "MAE", "Fβ", "IoU", "BER", "SBER", "NBER"
        );
        let mut row = |name: &str, m: &Summary| {
            let _ = writeln!(
                out,
                "{:<24} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                name,
                m.frames,
                cell(Some(m.mae), 3),
                cell(Some(m.f_beta), 3),
                cell(Some(m.iou), 3),
                cell(m.ber, 2),
                cell(m.sber, 2),
                cell(m.nber, 2),
            );
        };
        for v in &self.videos {
            row(&v.video, &v.summary);
        }
        row("ALL", &self.dataset);
        if !self.issues.is_empty() {
            let _ = writeln!(out, "# {} frame(s) excluded", self.issues.len());
        }
        out
    }

    /// Line-delimited JSON: one header, then frame, video, dataset and issue records.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        push(json!({"type": "header", "settings": self.settings}));
        for f in &self.frames {
            push(json!({"type": "frame", "metrics": f}));
        }
        for v in &self.videos {
            push(json!({"type": "video", "video": v.video, "metrics": v.summary}));
        }
        push(json!({"type": "dataset", "metrics": self.dataset}));
        for i in &self.issues {
            push(json!({"type": "issue", "issue": i}));
        }
        out
    }
}
