//! Dataset layout, mask files and run configuration.
//!
//! A dataset root holds frames under `videos/<id>/` and optional binary ground
//! truth under `annotations/<id>/`. Frames are ordered by filename. Prediction
//! trees written by the pipeline mirror this as `<out>/<id>/<frame stem>.png`.

mod config;
mod mask;

use std::path::{Path, PathBuf};

use image::RgbImage;

pub use config::{load_config, RunConfig};
pub use mask::{load_gt_mask, load_mask, quantize, save_mask, MaskKind, ShadowMask};

use crate::error::{Error, Result};

pub const VIDEOS_DIR: &str = "videos";
pub const ANNOTATIONS_DIR: &str = "annotations";

const FRAME_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "bmp"];

/// Ordered frames of one video plus optional ground truth.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    id: String,
    frame_names: Vec<String>,
    frames: Vec<RgbImage>,
    gt_masks: Option<Vec<ShadowMask>>,
}

impl VideoSequence {
    pub fn new(
        id: impl Into<String>,
        frame_names: Vec<String>,
        frames: Vec<RgbImage>,
        gt_masks: Option<Vec<ShadowMask>>,
    ) -> Result<Self> {
        let id = id.into();
        if frames.is_empty() {
            return Err(Error::Format(format!("video {id} has no frames")));
        }
        if frame_names.len() != frames.len() {
            return Err(Error::Format(format!(
                "video {id}: {} names for {} frames",
                frame_names.len(),
                frames.len()
            )));
        }
        let dims = frames[0].dimensions();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dimensions() != dims) {
            return Err(Error::Format(format!(
                "video {id}: frame {} is {:?}, expected {:?}",
                frame_names[i],
                f.dimensions(),
                dims
            )));
        }
        if let Some(masks) = &gt_masks {
            if masks.len() != frames.len() {
                return Err(Error::Format(format!(
                    "video {id}: {} masks for {} frames",
                    masks.len(),
                    frames.len()
                )));
            }
            let want = (dims.1 as usize, dims.0 as usize);
            if let Some(m) = masks.iter().find(|m| m.shape() != want) {
                return Err(Error::Format(format!(
                    "video {id}: mask of {:?} does not match frames {:?}",
                    m.shape(),
                    want
                )));
            }
        }
        Ok(Self {
            id,
            frame_names,
            frames,
            gt_masks,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` shared by every frame.
    pub fn resolution(&self) -> (usize, usize) {
        let (w, h) = self.frames[0].dimensions();
        (h as usize, w as usize)
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> &RgbImage {
        &self.frames[index]
    }

    pub fn frame_names(&self) -> &[String] {
        &self.frame_names
    }

    pub fn frame_stem(&self, index: usize) -> &str {
        let name = &self.frame_names[index];
        Path::new(name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(name)
    }

    pub fn gt_masks(&self) -> Option<&[ShadowMask]> {
        self.gt_masks.as_deref()
    }

    /// The same video with frames (and masks) in reverse order.
    pub fn reversed(&self) -> VideoSequence {
        let mut out = self.clone();
        out.frame_names.reverse();
        out.frames.reverse();
        if let Some(m) = out.gt_masks.as_mut() {
            m.reverse();
        }
        out
    }

    /// Frames `range` as a new sequence.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<VideoSequence> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Contract(format!(
                "frame range {range:?} invalid for {} frames",
                self.len()
            )));
        }
        VideoSequence::new(
            self.id.clone(),
            self.frame_names[range.clone()].to_vec(),
            self.frames[range.clone()].to_vec(),
            self.gt_masks.as_ref().map(|m| m[range].to_vec()),
        )
    }
}

fn sorted_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap().to_string_lossy().into_owned()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().unwrap().to_string_lossy().into_owned()
}

pub fn load_video_sequence(root: &Path, video_id: &str) -> Result<VideoSequence> {
    let frame_dir = root.join(VIDEOS_DIR).join(video_id);
    if !frame_dir.is_dir() {
        return Err(Error::NotFound(frame_dir.display().to_string()));
    }
    let frame_files = sorted_files(&frame_dir, FRAME_EXTENSIONS)?;
    if frame_files.is_empty() {
        return Err(Error::NotFound(format!(
            "no frame images in {}",
            frame_dir.display()
        )));
    }
    let frames = frame_files
        .iter()
        .map(|p| {
            image::open(p)
                .map(|img| img.to_rgb8())
                .map_err(|e| Error::image(p, e))
        })
        .collect::<Result<Vec<_>>>()?;

    let ann_dir = root.join(ANNOTATIONS_DIR).join(video_id);
    let gt_masks = if ann_dir.is_dir() {
        let mask_files = sorted_files(&ann_dir, &["png"])?;
        if mask_files.len() != frame_files.len() {
            return Err(Error::Format(format!(
                "video {video_id}: {} masks for {} frames",
                mask_files.len(),
                frame_files.len()
            )));
        }
        for (f, m) in frame_files.iter().zip(&mask_files) {
            if file_stem(f) != file_stem(m) {
                return Err(Error::Format(format!(
                    "video {video_id}: frame {} has no matching mask (found {})",
                    file_name(f),
                    file_name(m)
                )));
            }
        }
        Some(
            mask_files
                .iter()
                .map(|p| load_gt_mask(p))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    VideoSequence::new(
        video_id,
        frame_files.iter().map(|p| file_name(p)).collect(),
        frames,
        gt_masks,
    )
}

/// Video ids under `root/videos`, sorted.
pub fn list_videos(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(VIDEOS_DIR);
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.display().to_string()));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.is_dir() {
            ids.push(file_name(&path));
        }
    }
    ids.sort();
    Ok(ids)
}

/// Writes `masks` as `<out_root>/<video id>/<frame stem>.png`.
pub fn save_prediction_tree(
    out_root: &Path,
    video: &VideoSequence,
    masks: &[ShadowMask],
) -> Result<()> {
    if masks.len() != video.len() {
        return Err(Error::Contract(format!(
            "{} masks for {} frames",
            masks.len(),
            video.len()
        )));
    }
    for (i, mask) in masks.iter().enumerate() {
        let path = out_root
            .join(video.id())
            .join(format!("{}.png", video.frame_stem(i)));
        save_mask(mask, &path)?;
    }
    Ok(())
}

/// Writes a sequence in the dataset layout under `root`.
pub fn save_video_sequence(root: &Path, video: &VideoSequence) -> Result<()> {
    let frame_dir = root.join(VIDEOS_DIR).join(video.id());
    std::fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
    for (name, frame) in video.frame_names().iter().zip(video.frames()) {
        let path = frame_dir.join(name);
        frame.save(&path).map_err(|e| Error::image(&path, e))?;
    }
    if let Some(masks) = video.gt_masks() {
        for (i, m) in masks.iter().enumerate() {
            let path = root
                .join(ANNOTATIONS_DIR)
                .join(video.id())
                .join(format!("{}.png", video.frame_stem(i)));
            save_mask(m, &path)?;
        }
    }
    Ok(())
}
