//! Inference over whole videos: seed one frame with the segmenter, then
//! propagate its mask frame by frame through the memory network.
//!
//! `run_forward` seeds frame 0 and walks to the end. `run_plus` additionally
//! seeds the last frame, walks backward, and re-segments frames on which the
//! two passes disagree.

use serde::{Deserialize, Serialize};

use crate::data_io::{RunConfig, ShadowMask, VideoSequence};
use crate::error::{contract, Result};
use crate::lstn::{Lstn, MemoryBank};
use crate::metrics::{confusion, iou};
use crate::prompt_gen::{extract_boxes, BoxPrompt};
use crate::segmenter::Segmenter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Pending,
    Seeded,
    Propagated,
    RePredicted,
}

/// Sequential propagation state for one direction.
pub struct PropagationSession<'a> {
    model: &'a Lstn,
    video: &'a VideoSequence,
    direction: Direction,
    bank: MemoryBank,
    masks: Vec<Option<ShadowMask>>,
    status: Vec<FrameStatus>,
    order: Vec<usize>,
    cursor: usize,
}

/// Frames visited after `seed`, in order.
pub fn visit_order(len: usize, seed: usize, direction: Direction) -> Vec<usize> {
    match direction {
        Direction::Forward => (seed + 1..len).collect(),
        Direction::Backward => (0..seed).rev().collect(),
    }
}

pub fn init_session<'a>(
    model: &'a Lstn,
    video: &'a VideoSequence,
    seed_frame: usize,
    seed_mask: &ShadowMask,
    direction: Direction,
) -> Result<PropagationSession<'a>> {
    contract!(seed_frame < video.len(), "seed frame {seed_frame} outside video of {} frames", video.len());
    contract!(
        seed_mask.shape() == video.resolution(),
        "seed mask {:?} does not match video resolution {:?}",
        seed_mask.shape(),
        video.resolution()
    );
    let bank = model.seed_image(video.frame(seed_frame), seed_mask, seed_frame)?;
    let mut masks = vec![None; video.len()];
    let mut status = vec![FrameStatus::Pending; video.len()];
    masks[seed_frame] = Some(seed_mask.clone());
    status[seed_frame] = FrameStatus::Seeded;
    Ok(PropagationSession {
        model,
        video,
        direction,
        bank,
        masks,
        status,
        order: visit_order(video.len(), seed_frame, direction),
        cursor: 0,
    })
}

impl PropagationSession<'_> {
    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn status(&self) -> &[FrameStatus] {
        &self.status
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.order.len()
    }

    /// Next frame to be predicted.
    pub fn next_frame(&self) -> Option<usize> {
        self.order.get(self.cursor).copied()
    }

    /// Predicts the next frame and stores it as short-term memory.
    pub fn step(&mut self) -> Result<(usize, ShadowMask)> {
        let frame = self
            .next_frame()
            .ok_or_else(|| crate::Error::Contract("propagation session is exhausted".into()))?;
        let mask = self.model.step_image(self.video.frame(frame), &mut self.bank, frame)?;
        self.masks[frame] = Some(mask.clone());
        self.status[frame] = FrameStatus::Propagated;
        self.cursor += 1;
        Ok((frame, mask))
    }

    /// Replaces the mask of an already visited or upcoming frame and makes
    /// it the short-term memory, so that propagation resumes right after it.
    pub fn splice(&mut self, frame: usize, mask: &ShadowMask) -> Result<()> {
        let pos = self.order.iter().position(|&f| f == frame);
        contract!(pos.is_some(), "frame {frame} is not on this session's path");
        contract!(mask.shape() == self.video.resolution(), "spliced mask has wrong resolution");
        let feature = self.model.encode_image(self.video.frame(frame))?;
        let memory = self
            .model
            .memorize_seed(&feature, &crate::lstn::mask_tensor(mask)?, frame)?;
        self.bank.write_short_term(memory);
        self.masks[frame] = Some(mask.clone());
        self.status[frame] = FrameStatus::RePredicted;
        self.cursor = pos.unwrap() + 1;
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_exhausted() {
            self.step()?;
        }
        Ok(())
    }

    pub fn mask(&self, frame: usize) -> Option<&ShadowMask> {
        self.masks.get(frame).and_then(|m| m.as_ref())
    }

    /// Masks of every frame reached so far, indexed by frame.
    pub fn masks(&self) -> &[Option<ShadowMask>] {
        &self.masks
    }
}

/// Forward-only propagation from the segmenter's mask of frame 0.
pub fn run_forward(
    video: &VideoSequence,
    segmenter: &dyn Segmenter,
    model: &Lstn,
    boxes: &[BoxPrompt],
) -> Result<Vec<ShadowMask>> {
    let seed = segmenter.predict_mask(video.frame(0), boxes)?;
    propagate(video, model, 0, &seed, Direction::Forward)
}

/// Propagates from `seed_frame`; returns the masks of every frame in the
/// visited range including the seed, indexed from the first of them.
fn propagate(
    video: &VideoSequence,
    model: &Lstn,
    seed_frame: usize,
    seed: &ShadowMask,
    direction: Direction,
) -> Result<Vec<ShadowMask>> {
    let mut s = init_session(model, video, seed_frame, seed, direction)?;
    s.run_to_end()?;
    Ok(s.masks.into_iter().flatten().collect())
}

/// Settings of the bidirectional mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlusSettings {
    pub iou_gate: f64,
    pub threshold: f32,
    pub average_non_gated: bool,
    pub min_region_area: usize,
    pub max_boxes: usize,
}

impl Default for PlusSettings {
    fn default() -> Self {
        Self::from_run_config(&RunConfig::default())
    }
}

impl PlusSettings {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        Self {
            iou_gate: cfg.plus_iou_gate,
            threshold: cfg.binarize_threshold as f32,
            average_non_gated: cfg.plus_average_non_gated,
            min_region_area: cfg.min_region_area,
            max_boxes: cfg.max_boxes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameAction {
    /// Seed frame of the forward pass; always the segmenter output.
    Seed,
    Forward,
    Average,
    Repredicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementRecord {
    pub frame: usize,
    pub iou: f64,
    pub gated: bool,
    pub action: FrameAction,
}

/// IoU between binarized forward and backward masks of every frame;
/// `gated` is `iou < gate`.
pub fn agreement(
    forward: &[ShadowMask],
    backward: &[ShadowMask],
    gate: f64,
    threshold: f32,
) -> Result<Vec<(f64, bool)>> {
    contract!(forward.len() == backward.len(), "{} forward vs {} backward masks", forward.len(), backward.len());
    forward
        .iter()
        .zip(backward)
        .map(|(f, b)| {
            let v = iou(&confusion(&f.binarize(threshold), &b.binarize(threshold))?);
            Ok((v, v < gate))
        })
        .collect()
}

/// Boxes used to re-segment a gated frame: regions of the union mask
/// passing the size filter, or all of its regions when none does.
pub fn union_boxes(
    forward: &ShadowMask,
    backward: &ShadowMask,
    settings: &PlusSettings,
) -> Result<Vec<BoxPrompt>> {
    let union = forward.binarize(settings.threshold).union(&backward.binarize(settings.threshold))?;
    let boxes = extract_boxes(&union, settings.min_region_area, settings.max_boxes)?;
    if boxes.is_empty() {
        return extract_boxes(&union, 1, settings.max_boxes);
    }
    Ok(boxes)
}

#[derive(Debug, Clone)]
pub struct PlusResult {
    pub masks: Vec<ShadowMask>,
    pub forward: Vec<ShadowMask>,
    pub backward: Vec<ShadowMask>,
    pub agreement: Vec<AgreementRecord>,
}

/// Forward pass from frame 0 and backward pass from the last frame, run
/// concurrently; frames whose agreement falls below the gate are
/// re-segmented from boxes of the union mask.
pub fn run_plus(
    video: &VideoSequence,
    segmenter: &dyn Segmenter,
    model: &Lstn,
    boxes_first: &[BoxPrompt],
    boxes_last: &[BoxPrompt],
    settings: &PlusSettings,
) -> Result<PlusResult> {
    let last = video.len() - 1;
    let seed_first = segmenter.predict_mask(video.frame(0), boxes_first)?;
    let seed_last = segmenter.predict_mask(video.frame(last), boxes_last)?;
    let (forward, backward) = std::thread::scope(|s| {
        let f = s.spawn(|| propagate(video, model, 0, &seed_first, Direction::Forward));
        let b = s.spawn(|| propagate(video, model, last, &seed_last, Direction::Backward));
        (f.join().expect("forward pass panicked"), b.join().expect("backward pass panicked"))
    });
    let (forward, backward) = (forward?, backward?);
    fuse_plus(video, segmenter, forward, backward, settings)
}

/// Gating and fusion step of [`run_plus`] on precomputed passes.
pub fn fuse_plus(
    video: &VideoSequence,
    segmenter: &dyn Segmenter,
    forward: Vec<ShadowMask>,
    backward: Vec<ShadowMask>,
    settings: &PlusSettings,
) -> Result<PlusResult> {
    let gates = agreement(&forward, &backward, settings.iou_gate, settings.threshold)?;
    let mut masks = Vec::with_capacity(forward.len());
    let mut records = Vec::with_capacity(forward.len());
    for (t, &(v, gated)) in gates.iter().enumerate() {
        let (mask, action) = if t == 0 {
            (forward[0].clone(), FrameAction::Seed)
        } else if gated {
            let boxes = union_boxes(&forward[t], &backward[t], settings)?;
            (segmenter.predict_mask(video.frame(t), &boxes)?, FrameAction::Repredicted)
        } else if settings.average_non_gated {
            (forward[t].average(&backward[t])?, FrameAction::Average)
        } else {
            (forward[t].clone(), FrameAction::Forward)
        };
        masks.push(mask);
        records.push(AgreementRecord { frame: t, iou: v, gated, action });
    }
    Ok(PlusResult {
        masks,
        forward,
        backward,
        agreement: records,
    })
}

pub fn agreement_to_jsonl(records: &[AgreementRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}
