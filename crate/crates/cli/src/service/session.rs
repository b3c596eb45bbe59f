use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use shadowsam_core::data_io::{ShadowMask, VideoSequence};
use shadowsam_core::lstn::Lstn;
use shadowsam_core::propagation::{
    init_session, run_plus, AgreementRecord, Direction, FrameAction, FrameStatus, PlusSettings,
};
use shadowsam_core::prompt_gen::BoxPrompt;
use shadowsam_core::segmenter::{SamLite, Segmenter};

use super::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    Prompted,
    Seeded,
    Propagating,
    Propagated,
    Repredicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forward,
    Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    #[default]
    Final,
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub revision: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Persistent annotation session. Masks are kept as base64 PNG, the exact
/// bytes the API returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub video: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub state: SessionState,
    pub revision: u64,
    pub prompts: BTreeMap<usize, Vec<[usize; 4]>>,
    pub seed_frame: Option<usize>,
    pub seed_mask: Option<String>,
    pub mode: Option<Mode>,
    pub masks: Vec<Option<String>>,
    pub forward: Vec<Option<String>>,
    pub backward: Vec<Option<String>>,
    pub frame_status: Vec<FrameStatus>,
    pub agreement: Vec<AgreementRecord>,
    pub events: Vec<Event>,
    pub last_error: Option<String>,
}

pub fn encode_mask(m: &ShadowMask) -> Result<String, ApiError> {
    Ok(STANDARD.encode(m.to_png_bytes().map_err(ApiError::internal)?))
}

pub fn decode_mask(s: &str) -> Result<ShadowMask, ApiError> {
    let bytes = STANDARD.decode(s).map_err(ApiError::internal)?;
    ShadowMask::from_png_bytes(&bytes).map_err(ApiError::internal)
}

pub fn parse_boxes(raw: &[[usize; 4]], height: usize, width: usize) -> Result<Vec<BoxPrompt>, ApiError> {
    raw.iter()
        .map(|&[x0, y0, x1, y1]| {
            let b = BoxPrompt::new(x0, y0, x1, y1).map_err(|e| ApiError::unprocessable(e.to_string()))?;
            b.validate(height, width).map_err(|e| ApiError::unprocessable(e.to_string()))?;
            Ok(b)
        })
        .collect()
}

/// Inputs of a full propagation run, captured when it starts.
#[derive(Debug, Clone)]
pub struct PropagationJob {
    pub mode: Mode,
    pub seed_frame: usize,
    pub seed_mask: ShadowMask,
    pub first_boxes: Vec<BoxPrompt>,
    pub last_boxes: Vec<BoxPrompt>,
}

#[derive(Debug, Clone)]
pub struct PropagationOutput {
    pub masks: Vec<ShadowMask>,
    pub forward: Option<Vec<ShadowMask>>,
    pub backward: Option<Vec<ShadowMask>>,
    pub status: Vec<FrameStatus>,
    pub agreement: Vec<AgreementRecord>,
}

impl Session {
    pub fn new(id: String, video: &VideoSequence) -> Self {
        let (height, width) = video.resolution();
        let n = video.len();
        let mut s = Session {
            id,
            video: video.id().to_string(),
            frames: n,
            width,
            height,
            state: SessionState::Created,
            revision: 0,
            prompts: BTreeMap::new(),
            seed_frame: None,
            seed_mask: None,
            mode: None,
            masks: vec![None; n],
            forward: vec![None; n],
            backward: vec![None; n],
            frame_status: vec![FrameStatus::Pending; n],
            agreement: Vec::new(),
            events: Vec::new(),
            last_error: None,
        };
        s.bump("created", "");
        s
    }

    fn bump(&mut self, kind: &str, detail: impl Into<String>) {
        self.revision += 1;
        self.events.push(Event {
            revision: self.revision,
            kind: kind.into(),
            detail: detail.into(),
        });
    }

    fn conflict(&self, msg: impl Into<String>) -> ApiError {
        ApiError::conflict(msg).at(self.revision)
    }

    pub fn check_frame(&self, frame: usize) -> Result<(), ApiError> {
        if frame >= self.frames {
            return Err(ApiError::not_found(format!("frame {frame} outside 0..{}", self.frames)).at(self.revision));
        }
        Ok(())
    }

    fn ensure_idle(&self) -> Result<(), ApiError> {
        if self.state == SessionState::Propagating {
            return Err(self.conflict("propagation in progress"));
        }
        Ok(())
    }

    pub fn has_results(&self) -> bool {
        matches!(self.state, SessionState::Propagated | SessionState::Repredicted)
    }

    pub fn boxes(&self, frame: usize) -> Option<Vec<BoxPrompt>> {
        self.prompts.get(&frame).map(|raw| {
            raw.iter()
                .map(|&[x0, y0, x1, y1]| BoxPrompt { x_min: x0, y_min: y0, x_max: x1, y_max: y1 })
                .collect()
        })
    }

    pub fn put_prompts(&mut self, frame: usize, raw: Vec<[usize; 4]>) -> Result<(), ApiError> {
        self.check_frame(frame)?;
        self.ensure_idle()?;
        parse_boxes(&raw, self.height, self.width).map_err(|e| e.at(self.revision))?;
        let n = raw.len();
        self.prompts.insert(frame, raw);
        if self.state == SessionState::Created {
            self.state = SessionState::Prompted;
        }
        self.bump("prompts", format!("frame {frame}: {n} boxes"));
        Ok(())
    }

    /// Boxes for seeding `frame`; fails unless prompts were stored for it.
    pub fn seed_boxes(&self, frame: usize) -> Result<Vec<BoxPrompt>, ApiError> {
        self.check_frame(frame)?;
        self.ensure_idle()?;
        if self.state == SessionState::Created {
            return Err(self.conflict("no prompts submitted yet"));
        }
        self.boxes(frame)
            .ok_or_else(|| self.conflict(format!("no prompts stored for frame {frame}")))
    }

    fn clear_results(&mut self) {
        let n = self.frames;
        self.masks = vec![None; n];
        self.forward = vec![None; n];
        self.backward = vec![None; n];
        self.frame_status = vec![FrameStatus::Pending; n];
        self.agreement.clear();
        self.mode = None;
    }

    pub fn apply_seed(&mut self, frame: usize, mask: &ShadowMask) -> Result<String, ApiError> {
        let png = encode_mask(mask)?;
        self.clear_results();
        self.seed_frame = Some(frame);
        self.seed_mask = Some(png.clone());
        self.frame_status[frame] = FrameStatus::Seeded;
        self.state = SessionState::Seeded;
        self.last_error = None;
        self.bump("seeded", format!("frame {frame}"));
        Ok(png)
    }

    /// Inputs for propagating in `mode` from the current seed.
    pub fn job(&self, mode: Mode) -> Result<PropagationJob, ApiError> {
        let (Some(seed_frame), Some(seed)) = (self.seed_frame, &self.seed_mask) else {
            return Err(self.conflict("session is not seeded"));
        };
        let last = self.frames - 1;
        let (first_boxes, last_boxes) = match mode {
            Mode::Forward => (Vec::new(), Vec::new()),
            Mode::Plus => match (self.boxes(0), self.boxes(last)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(self.conflict(format!("plus mode needs prompts on frames 0 and {last}"))),
            },
        };
        Ok(PropagationJob {
            mode,
            seed_frame,
            seed_mask: decode_mask(seed)?,
            first_boxes,
            last_boxes,
        })
    }

    pub fn begin_propagation(&mut self, mode: Mode) -> Result<PropagationJob, ApiError> {
        self.ensure_idle()?;
        if !matches!(self.state, SessionState::Seeded | SessionState::Propagated | SessionState::Repredicted) {
            return Err(self.conflict("session must be seeded before propagation"));
        }
        let job = self.job(mode)?;
        let seed = self.seed_frame;
        self.clear_results();
        if let Some(f) = seed {
            self.frame_status[f] = FrameStatus::Seeded;
        }
        self.mode = Some(mode);
        self.state = SessionState::Propagating;
        self.bump("propagating", format!("{mode:?}").to_lowercase());
        Ok(job)
    }

    pub fn finish_propagation(&mut self, out: PropagationOutput) -> Result<(), ApiError> {
        let enc = |v: &[ShadowMask]| v.iter().map(|m| encode_mask(m).map(Some)).collect::<Result<Vec<_>, _>>();
        self.masks = enc(&out.masks)?;
        if let Some(f) = &out.forward {
            self.forward = enc(f)?;
        }
        if let Some(b) = &out.backward {
            self.backward = enc(b)?;
        }
        self.frame_status = out.status;
        self.agreement = out.agreement;
        self.state = SessionState::Propagated;
        let gated = self.agreement.iter().filter(|a| a.gated).count();
        self.bump("propagated", format!("{gated} gated frames"));
        Ok(())
    }

    pub fn fail_propagation(&mut self, err: &str) {
        self.clear_results();
        if let Some(f) = self.seed_frame {
            self.frame_status[f] = FrameStatus::Seeded;
        }
        self.state = SessionState::Seeded;
        self.last_error = Some(err.to_string());
        self.bump("propagation_failed", err);
    }

    /// Long-term seed used when re-propagating after a repredict.
    pub fn memory_seed(&self) -> Result<(usize, ShadowMask), ApiError> {
        match self.mode {
            Some(Mode::Plus) => {
                let first = self.forward[0].as_ref().ok_or_else(|| ApiError::internal("missing forward seed"))?;
                Ok((0, decode_mask(first)?))
            }
            _ => {
                let f = self.seed_frame.ok_or_else(|| self.conflict("session is not seeded"))?;
                Ok((f, decode_mask(self.seed_mask.as_ref().unwrap())?))
            }
        }
    }

    pub fn check_repredict(&self, frame: usize) -> Result<(), ApiError> {
        self.check_frame(frame)?;
        self.ensure_idle()?;
        if !self.has_results() {
            return Err(self.conflict("repredict needs a completed propagation"));
        }
        Ok(())
    }

    pub fn apply_repredict(
        &mut self,
        frame: usize,
        raw: Vec<[usize; 4]>,
        mask: &ShadowMask,
        downstream: &[(usize, ShadowMask)],
    ) -> Result<String, ApiError> {
        let png = encode_mask(mask)?;
        self.prompts.insert(frame, raw);
        self.masks[frame] = Some(png.clone());
        self.frame_status[frame] = FrameStatus::RePredicted;
        let plus = self.mode == Some(Mode::Plus);
        for (t, m) in downstream {
            let enc = encode_mask(m)?;
            if plus {
                self.forward[*t] = Some(enc.clone());
            }
            self.masks[*t] = Some(enc);
            self.frame_status[*t] = FrameStatus::Propagated;
        }
        self.state = SessionState::Repredicted;
        self.bump("repredicted", format!("frame {frame}, {} frames re-propagated", downstream.len()));
        Ok(png)
    }

    pub fn mask(&self, frame: usize, layer: Layer) -> Result<&str, ApiError> {
        self.check_frame(frame)?;
        if !self.has_results() {
            return Err(self.conflict("no propagation result yet"));
        }
        let store = match layer {
            Layer::Final => &self.masks,
            Layer::Forward if self.mode == Some(Mode::Plus) => &self.forward,
            Layer::Forward => &self.masks,
            Layer::Backward if self.mode == Some(Mode::Plus) => &self.backward,
            Layer::Backward => {
                return Err(ApiError::not_found("backward layer exists only after plus propagation").at(self.revision))
            }
        };
        store[frame]
            .as_deref()
            .ok_or_else(|| ApiError::internal(format!("frame {frame} has no mask")))
    }
}

pub fn compute_seed(seg: &SamLite, video: &VideoSequence, frame: usize, boxes: &[BoxPrompt]) -> Result<ShadowMask, ApiError> {
    seg.predict_mask(video.frame(frame), boxes).map_err(ApiError::internal)
}

fn sweep(model: &Lstn, video: &VideoSequence, seed: usize, mask: &ShadowMask, dir: Direction) -> shadowsam_core::Result<Vec<(usize, ShadowMask)>> {
    let mut s = init_session(model, video, seed, mask, dir)?;
    let mut out = Vec::new();
    while !s.is_exhausted() {
        out.push(s.step()?);
    }
    Ok(out)
}

/// Forward mode fills frames after the seed forward and frames before it
/// backward; plus mode runs both full passes with gating.
pub fn compute_propagation(
    seg: &SamLite,
    model: &Lstn,
    video: &VideoSequence,
    job: &PropagationJob,
    settings: &PlusSettings,
) -> shadowsam_core::Result<PropagationOutput> {
    match job.mode {
        Mode::Forward => {
            let s = job.seed_frame;
            let (fwd, back) = std::thread::scope(|sc| {
                let f = sc.spawn(|| sweep(model, video, s, &job.seed_mask, Direction::Forward));
                let b = sc.spawn(|| sweep(model, video, s, &job.seed_mask, Direction::Backward));
                (f.join().expect("forward pass panicked"), b.join().expect("backward pass panicked"))
            });
            let mut masks = vec![None; video.len()];
            let mut status = vec![FrameStatus::Propagated; video.len()];
            masks[s] = Some(job.seed_mask.clone());
            status[s] = FrameStatus::Seeded;
            for (t, m) in fwd?.into_iter().chain(back?) {
                masks[t] = Some(m);
            }
            Ok(PropagationOutput {
                masks: masks.into_iter().map(|m| m.expect("every frame visited")).collect(),
                forward: None,
                backward: None,
                status,
                agreement: Vec::new(),
            })
        }
        Mode::Plus => {
            let r = run_plus(video, seg, model, &job.first_boxes, &job.last_boxes, settings)?;
            let status = r
                .agreement
                .iter()
                .map(|a| match a.action {
                    FrameAction::Seed => FrameStatus::Seeded,
                    FrameAction::Repredicted => FrameStatus::RePredicted,
                    _ => FrameStatus::Propagated,
                })
                .collect();
            Ok(PropagationOutput {
                masks: r.masks,
                forward: Some(r.forward),
                backward: Some(r.backward),
                status,
                agreement: r.agreement,
            })
        }
    }
}

/// Re-propagates away from the long-term seed, starting after `frame`
/// whose mask was replaced by `mask`.
pub fn compute_repropagation(
    model: &Lstn,
    video: &VideoSequence,
    seed: (usize, &ShadowMask),
    frame: usize,
    mask: &ShadowMask,
) -> shadowsam_core::Result<Vec<(usize, ShadowMask)>> {
    let (s, seed_mask) = seed;
    if frame == s {
        return sweep(model, video, s, mask, Direction::Forward);
    }
    let dir = if frame > s { Direction::Forward } else { Direction::Backward };
    let mut session = init_session(model, video, s, seed_mask, dir)?;
    session.splice(frame, mask)?;
    let mut out = Vec::new();
    while !session.is_exhausted() {
        out.push(session.step()?);
    }
    Ok(out)
}
