use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use shadowsam_core::data_io::{
    list_videos, load_config, load_video_sequence, save_prediction_tree, save_video_sequence, RunConfig,
    VideoSequence,
};
use shadowsam_core::lstn::{train_lstn, Lstn, LstnConfig, TrainConfig};
use shadowsam_core::metrics::{evaluate, EvalSettings};
use shadowsam_core::propagation::{agreement_to_jsonl, run_forward, run_plus, PlusSettings};
use shadowsam_core::prompt_gen::{extract_boxes, load_boxes, BoxPrompt};
use shadowsam_core::segmenter::{finetune, load_adapted, FinetuneConfig, SamLite, SegmenterConfig};
use shadowsam_core::synthetic::BlobVideo;

use crate::cli::{
    ConfigArgs, EvalArgs, FinetuneArgs, InferArgs, InferPlusArgs, PromptArgs, SynthArgs, TrainArgs,
};

/// Misuse of flags that clap cannot detect; reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(usage(format!("--set expects KEY=VALUE, got {o:?}")));
        };
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(format!("--set {o}: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_videos(root: &Path, ids: &[String]) -> Result<Vec<VideoSequence>> {
    let ids = if ids.is_empty() { list_videos(root)? } else { ids.to_vec() };
    if ids.is_empty() {
        bail!("no videos under {}", root.display());
    }
    ids.iter()
        .map(|id| load_video_sequence(root, id).with_context(|| format!("loading video {id}")))
        .collect()
}

pub fn load_segmenter(path: &Path) -> Result<SamLite> {
    let model = if path.extension().is_some_and(|e| e == "json") {
        load_adapted(path)?
    } else {
        SamLite::load(path)?
    };
    Ok(model)
}

pub fn finetune_cmd(cfg: &RunConfig, args: &FinetuneArgs) -> Result<()> {
    let mut model = match &args.init {
        Some(p) => load_segmenter(p)?,
        None => SamLite::new(SegmenterConfig::from_run_config(cfg))?,
    };
    let videos = load_videos(&args.data, &args.videos)?;
    let stride = cfg.finetune_frame_stride.max(1);
    let mut samples = Vec::new();
    for v in &videos {
        let Some(gt) = v.gt_masks() else {
            log::warn!("video {} has no annotations; skipped", v.id());
            continue;
        };
        for t in (0..v.len()).step_by(stride) {
            samples.push((v.frame(t).clone(), gt[t].clone()));
        }
    }
    if samples.is_empty() {
        bail!("no annotated frames under {}", args.data.display());
    }
    log::info!("fine-tuning on {} frames", samples.len());
    let log = finetune(&mut model, &samples, &FinetuneConfig::from_run_config(cfg))?;
    model.save(&args.out.join("segmenter.safetensors"))?;
    write_file(&args.out.join("finetune_log.jsonl"), &log.to_jsonl())?;
    write_file(&args.out.join("config.txt"), &cfg.to_text())?;
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let mut model = match &args.init {
        Some(p) => Lstn::load(p)?,
        None => Lstn::new(LstnConfig::from_run_config(cfg))?,
    };
    let videos = load_videos(&args.data, &args.videos)?;
    let annotated: Vec<VideoSequence> = videos.into_iter().filter(|v| v.gt_masks().is_some()).collect();
    let log = train_lstn(&mut model, &annotated, &TrainConfig::from_run_config(cfg))?;
    model.save(&args.out.join("lstn.safetensors"))?;
    write_file(&args.out.join("train_log.jsonl"), &log.to_jsonl())?;
    write_file(&args.out.join("config.txt"), &cfg.to_text())?;
    Ok(())
}

/// Where the boxes for one prompted frame come from.
enum PromptSource<'a> {
    File(&'a Path),
    Dir(&'a Path),
    GroundTruth,
    WholeImage,
}

fn prompt_source<'a>(p: &'a PromptArgs, file: Option<&'a PathBuf>, videos: usize) -> Result<PromptSource<'a>> {
    if file.is_some() && videos != 1 {
        return Err(usage("a box file applies to a single --video; use --boxes-dir for several"));
    }
    Ok(match (file, &p.boxes_dir, p.boxes_from_gt) {
        (Some(f), _, _) => PromptSource::File(f),
        (None, Some(d), _) => PromptSource::Dir(d),
        (None, None, true) => PromptSource::GroundTruth,
        (None, None, false) => PromptSource::WholeImage,
    })
}

fn boxes_for(
    source: &PromptSource<'_>,
    video: &VideoSequence,
    frame: usize,
    suffix: &str,
    cfg: &RunConfig,
) -> Result<Vec<BoxPrompt>> {
    let boxes = match source {
        PromptSource::File(p) => load_boxes(p)?,
        PromptSource::Dir(d) => {
            let p = d.join(format!("{}{suffix}.txt", video.id()));
            if p.exists() {
                load_boxes(&p)?
            } else {
                log::warn!("{} not found; using the whole image", p.display());
                Vec::new()
            }
        }
        PromptSource::GroundTruth => {
            let Some(gt) = video.gt_masks() else {
                bail!("video {} has no annotations to derive boxes from", video.id());
            };
            extract_boxes(&gt[frame], cfg.min_region_area, cfg.max_boxes)?
        }
        PromptSource::WholeImage => Vec::new(),
    };
    let (h, w) = video.resolution();
    for b in &boxes {
        b.validate(h, w).with_context(|| format!("box {b} on video {}", video.id()))?;
    }
    Ok(boxes)
}

pub fn infer_cmd(cfg: &RunConfig, args: &InferArgs) -> Result<()> {
    let videos = load_videos(&args.data, &args.videos)?;
    let source = prompt_source(&args.prompts, args.prompts.boxes.as_ref(), videos.len())?;
    let segmenter = load_segmenter(&args.models.segmenter)?;
    let lstn = Lstn::load(&args.models.lstn)?;
    for v in &videos {
        let boxes = boxes_for(&source, v, 0, "", cfg)?;
        let masks = run_forward(v, &segmenter, &lstn, &boxes)?;
        save_prediction_tree(&args.out, v, &masks)?;
        log::info!("{}: {} frames", v.id(), masks.len());
    }
    Ok(())
}

pub fn infer_plus_cmd(cfg: &RunConfig, args: &InferPlusArgs) -> Result<()> {
    let inf = &args.infer;
    let videos = load_videos(&inf.data, &inf.videos)?;
    let first = prompt_source(&inf.prompts, inf.prompts.boxes.as_ref(), videos.len())?;
    let last = prompt_source(&inf.prompts, args.last_boxes.as_ref(), videos.len())?;
    let segmenter = load_segmenter(&inf.models.segmenter)?;
    let lstn = Lstn::load(&inf.models.lstn)?;
    let settings = PlusSettings::from_run_config(cfg);
    for v in &videos {
        let b0 = boxes_for(&first, v, 0, "", cfg)?;
        let b1 = boxes_for(&last, v, v.len() - 1, ".last", cfg)?;
        let r = run_plus(v, &segmenter, &lstn, &b0, &b1, &settings)?;
        save_prediction_tree(&inf.out, v, &r.masks)?;
        write_file(
            &inf.out.join("agreement").join(format!("{}.jsonl", v.id())),
            &agreement_to_jsonl(&r.agreement),
        )?;
        let gated = r.agreement.iter().filter(|a| a.gated).count();
        log::info!("{}: {} frames, {gated} re-predicted", v.id(), r.masks.len());
    }
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let gt = match args.gt.join("annotations") {
        a if a.is_dir() => a,
        _ => args.gt.clone(),
    };
    let report = evaluate(&args.pred, &gt, EvalSettings::from(cfg))?;
    if report.dataset.frames == 0 {
        bail!("no prediction matched a ground-truth mask under {}", gt.display());
    }
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &args.out {
        write_file(&out.join("report.txt"), &table)?;
        write_file(&out.join("report.jsonl"), &report.to_jsonl())?;
    }
    Ok(())
}

/// Synthetic videos with distinct backgrounds and drift directions.
pub fn synthetic_dataset(args: &SynthArgs) -> Result<Vec<VideoSequence>> {
    if args.videos == 0 || args.frames == 0 || args.height == 0 || args.width == 0 {
        return Err(usage("synthetic dataset dimensions must be positive"));
    }
    (0..args.videos)
        .map(|i| {
            let angle = i as f64 * 2.399;
            let speed = 0.03 * args.height.min(args.width) as f64;
            let spec = BlobVideo::new(args.height, args.width, args.frames)
                .with_seed(args.seed.wrapping_add(i as u64))
                .with_velocity(speed * angle.sin(), speed * angle.cos());
            Ok(spec.build(&format!("synth{i:02}"))?)
        })
        .collect()
}

pub fn synth_cmd(args: &SynthArgs) -> Result<()> {
    for v in synthetic_dataset(args)? {
        save_video_sequence(&args.out, &v)?;
    }
    Ok(())
}
