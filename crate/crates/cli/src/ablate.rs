//! Ablation sweeps: one propagation network is trained and scored per setting.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};
use serde::Serialize;
use shadowsam_core::data_io::{RunConfig, VideoSequence};
use shadowsam_core::lstn::{train_lstn, Lstn, LstnConfig, TrainConfig};
use shadowsam_core::metrics::{EvalSettings, Evaluator};
use shadowsam_core::propagation::{init_session, Direction};
use shadowsam_core::prompt_gen::extract_boxes;
use shadowsam_core::segmenter::{SamLite, Segmenter};

use crate::cli::{AblateArgs, Axis, Toggle};
use crate::commands::{load_segmenter, load_videos, usage};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: &'static str,
    pub setting: String,
    pub blocks: usize,
    pub window: usize,
    pub long_term: bool,
    pub short_term: bool,
    pub final_loss: f64,
    pub scored_frames: usize,
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
    pub ber: Option<f64>,
}

pub fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Blocks => "blocks",
        Axis::Window => "window",
        Axis::Components => "components",
    }
}

fn mark(on: bool) -> &'static str {
    if on {
        "on"
    } else {
        "off"
    }
}

/// Labelled configurations for one sweep.
pub fn sweep(
    axis: Axis,
    values: &[usize],
    long: Option<Toggle>,
    short: Option<Toggle>,
    base: &LstnConfig,
) -> Result<Vec<(String, LstnConfig)>> {
    if axis != Axis::Components && (long.is_some() || short.is_some()) {
        return Err(usage("--long and --short apply to `ablate components` only"));
    }
    if axis == Axis::Components && !values.is_empty() {
        return Err(usage("--values does not apply to `ablate components`"));
    }
    let out: Vec<(String, LstnConfig)> = match axis {
        Axis::Blocks => {
            let values = if values.is_empty() { &[1, 2, 3, 4][..] } else { values };
            values
                .iter()
                .map(|&n| (format!("N={n}"), LstnConfig { blocks: n, ..base.clone() }))
                .collect()
        }
        Axis::Window => {
            let values = if values.is_empty() { &[5, 9, 15, 21][..] } else { values };
            values
                .iter()
                .map(|&w| (format!("w={w}"), LstnConfig { window: w, ..base.clone() }))
                .collect()
        }
        Axis::Components => {
            let pick = |t: Option<Toggle>| match t {
                Some(t) => vec![t.enabled()],
                None => vec![false, true],
            };
            let mut grid = Vec::new();
            for s in pick(short) {
                for l in pick(long) {
                    grid.push((
                        format!("long={} short={}", mark(l), mark(s)),
                        LstnConfig { long_term: l, short_term: s, ..base.clone() },
                    ));
                }
            }
            grid
        }
    };
    for (label, cfg) in &out {
        cfg.validate().map_err(|e| usage(format!("{label}: {e}")))?;
    }
    Ok(out)
}

/// First-frame masks for scoring: ground truth, or the segmenter prompted
/// with ground-truth boxes.
pub enum Seeding<'a> {
    GroundTruth,
    Segmenter(&'a SamLite),
}

/// Propagates every annotated test video from frame 0 and accumulates
/// metrics; the seed frame is scored only when the segmenter produced it.
pub fn score(model: &Lstn, videos: &[VideoSequence], seeding: &Seeding<'_>, cfg: &RunConfig) -> Result<(usize, shadowsam_core::metrics::Summary)> {
    let mut ev = Evaluator::new(EvalSettings::from(cfg));
    let mut frames = 0;
    for v in videos {
        let Some(gt) = v.gt_masks() else { continue };
        let (seed, first_scored) = match seeding {
            Seeding::GroundTruth => (gt[0].clone(), 1),
            Seeding::Segmenter(seg) => {
                let boxes = extract_boxes(&gt[0], cfg.min_region_area, cfg.max_boxes)?;
                (seg.predict_mask(v.frame(0), &boxes)?, 0)
            }
        };
        let mut session = init_session(model, v, 0, &seed, Direction::Forward)?;
        session.run_to_end()?;
        for t in first_scored..v.len() {
            let pred = session.mask(t).expect("session ran to the end");
            ev.add_frame(v.id(), v.frame_stem(t), pred, &gt[t])?;
            frames += 1;
        }
    }
    if frames == 0 {
        bail!("no annotated frames to score");
    }
    Ok((frames, ev.finish().dataset))
}

pub fn run_sweep(
    axis: Axis,
    settings: &[(String, LstnConfig)],
    train: &[VideoSequence],
    test: &[VideoSequence],
    seeding: &Seeding<'_>,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let train_cfg = TrainConfig::from_run_config(cfg);
    let mut rows = Vec::with_capacity(settings.len());
    for (label, lstn_cfg) in settings {
        log::info!("ablation {label}: training");
        let mut model = Lstn::new(lstn_cfg.clone())?;
        let log = train_lstn(&mut model, train, &train_cfg)?;
        if let Some(out) = out {
            let dir = out.join(axis_name(axis)).join(label.replace([' ', '='], "_"));
            model.save(&dir.join("lstn.safetensors"))?;
            std::fs::write(dir.join("train_log.jsonl"), log.to_jsonl())?;
        }
        let (scored_frames, s) = score(&model, test, seeding, cfg)?;
        rows.push(AblationRow {
            axis: axis_name(axis),
            setting: label.clone(),
            blocks: lstn_cfg.blocks,
            window: lstn_cfg.window,
            long_term: lstn_cfg.long_term,
            short_term: lstn_cfg.short_term,
            final_loss: log.records.last().map_or(f64::NAN, |r| r.loss),
            scored_frames,
            mae: s.mae,
            f_beta: s.f_beta,
            iou: s.iou,
            ber: s.ber,
        });
    }
    Ok(rows)
}

pub fn to_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>7} {:>8} {:>8} {:>8} {:>8} {:>10}", "setting", "frames", "MAE", "Fβ", "IoU", "BER", "loss");
    for r in rows {
        let ber = r.ber.map_or("-".to_string(), |b| format!("{b:.2}"));
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>8.3} {:>8.3} {:>8.3} {:>8} {:>10.4}",
            r.setting, r.scored_frames, r.mae, r.f_beta, r.iou, ber, r.final_loss
        );
    }
    out
}

pub fn to_jsonl(rows: &[AblationRow]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
}

pub fn ablate_cmd(cfg: &RunConfig, args: &AblateArgs) -> Result<()> {
    let settings = sweep(args.axis, &args.values, args.long, args.short, &LstnConfig::from_run_config(cfg))?;
    let train: Vec<VideoSequence> = load_videos(&args.data, &[])?
        .into_iter()
        .filter(|v| v.gt_masks().is_some())
        .collect();
    let test = match &args.test_data {
        Some(p) => load_videos(p, &[])?,
        None => train.clone(),
    };
    let segmenter = args.segmenter.as_deref().map(load_segmenter).transpose()?;
    let seeding = match &segmenter {
        Some(s) => Seeding::Segmenter(s),
        None => Seeding::GroundTruth,
    };
    std::fs::create_dir_all(&args.out)?;
    let rows = run_sweep(args.axis, &settings, &train, &test, &seeding, cfg, Some(&args.out))?;
    let table = to_table(&rows);
    print!("{table}");
    let name = axis_name(args.axis);
    std::fs::write(args.out.join(format!("ablation_{name}.txt")), &table)?;
    std::fs::write(args.out.join(format!("ablation_{name}.jsonl")), to_jsonl(&rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_shapes() {
        let base = LstnConfig::toy(8, 1);
        let blocks = sweep(Axis::Blocks, &[], None, None, &base).unwrap();
        assert_eq!(blocks.iter().map(|(_, c)| c.blocks).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let grid = sweep(Axis::Components, &[], None, None, &base).unwrap();
        let flags: Vec<_> = grid.iter().map(|(_, c)| (c.long_term, c.short_term)).collect();
        assert_eq!(flags, vec![(false, false), (true, false), (false, true), (true, true)]);
        let one = sweep(Axis::Components, &[], Some(Toggle::Off), Some(Toggle::Off), &base).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].0, "long=off short=off");
    }

    #[test]
    fn sweep_rejects_misuse() {
        let base = LstnConfig::toy(8, 1);
        assert!(sweep(Axis::Blocks, &[], Some(Toggle::On), None, &base).is_err());
        assert!(sweep(Axis::Window, &[4], None, None, &base).is_err());
        assert!(sweep(Axis::Blocks, &[0], None, None, &base).is_err());
    }
}
