//! The localization MDP: state construction, rewards, termination and
//! multi-object cross masking.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::features::FeatureExtractor;
use crate::geometry::{apply_action, best_match, greedy_oracle_step, Action, BBox, TransformConfig, NUM_ACTIONS};
use crate::imaging::{crop_resize, mask_cross, GrayImage};
use crate::qnet::StateVec;
use crate::{Error, Result, STATE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepRewardMode {
    /// Sign of the IoU change after each move.
    SignDeltaIou,
    /// Only TRIGGER is rewarded.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub trigger_eta: f64,
    pub iou_threshold: f64,
    pub step_reward_mode: StepRewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            trigger_eta: 3.0,
            iou_threshold: 0.5,
            step_reward_mode: StepRewardMode::SignDeltaIou,
        }
    }
}

/// Everything that shapes an episode apart from the policy and the extractor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub reward: RewardConfig,
    pub transform: TransformConfig,
    /// Number of past actions encoded in the observation.
    pub history_len: usize,
    /// Actions (TRIGGER included) after which an episode is cut off.
    pub max_steps: usize,
    pub max_detections: usize,
    /// Width of each cross bar relative to the masked box side.
    pub mask_bar_fraction: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            reward: RewardConfig::default(),
            transform: TransformConfig::default(),
            history_len: 10,
            max_steps: 40,
            max_detections: 3,
            mask_bar_fraction: 1.0 / 3.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        let r = &self.reward;
        if !(r.trigger_eta > 0.0 && r.trigger_eta.is_finite()) {
            return Err(Error::Config(format!("trigger_eta must be positive, got {}", r.trigger_eta)));
        }
        if !(r.iou_threshold > 0.0 && r.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must lie in (0, 1), got {}",
                r.iou_threshold
            )));
        }
        if self.max_steps == 0 || self.max_detections == 0 {
            return Err(Error::Config("max_steps and max_detections must be >= 1".into()));
        }
        if !(self.mask_bar_fraction > 0.0 && self.mask_bar_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "mask_bar_fraction must lie in (0, 1], got {}",
                self.mask_bar_fraction
            )));
        }
        Ok(())
    }

    /// Length of the history one-hot block.
    pub fn history_dim(&self) -> usize {
        self.history_len * NUM_ACTIONS
    }
}

/// Extractor embedding of the current crop plus the action-history encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f32>,
    /// `history_len` slots of 9, right-aligned: the most recent action is the last slot.
    pub history_onehot: Vec<f32>,
}

impl Observation {
    /// Network input: features followed by the history block.
    pub fn to_input(&self) -> StateVec {
        self.features
            .iter()
            .chain(&self.history_onehot)
            .copied()
            .collect::<Vec<_>>()
            .into()
    }
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    /// Best IoU of the box after the step against the ground truth (0 without any).
    pub iou: f64,
}

/// One episode on one (possibly masked) image.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    image: GrayImage,
    gt_boxes: Vec<BBox>,
    bbox: BBox,
    history: VecDeque<Action>,
    steps: usize,
    done: bool,
    triggered: bool,
}

impl EpisodeState {
    /// Fresh episode with the box covering the whole image.
    pub fn new(image: GrayImage, gt_boxes: Vec<BBox>) -> Self {
        let bbox = image.full_box();
        EpisodeState {
            image,
            gt_boxes,
            bbox,
            history: VecDeque::new(),
            steps: 0,
            done: false,
            triggered: false,
        }
    }

    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    pub fn gt_boxes(&self) -> &[BBox] {
        &self.gt_boxes
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn history(&self) -> impl Iterator<Item = Action> + '_ {
        self.history.iter().copied()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn triggered(&self) -> bool {
        self.triggered
    }

    /// Best IoU of the current box against the ground truth; 0 without any.
    pub fn current_iou(&self) -> f64 {
        self.iou_of(&self.bbox)
    }

    fn iou_of(&self, b: &BBox) -> f64 {
        best_match(b, &self.gt_boxes).map(|m| m.0).unwrap_or(0.0)
    }

    pub fn observe(&self, extractor: &dyn FeatureExtractor, cfg: &EnvConfig) -> Result<Observation> {
        let raster = crop_resize(&self.image, &self.bbox, STATE_SIZE, STATE_SIZE)?;
        let features = extractor.extract(&raster)?;
        if features.len() != extractor.dim() {
            return Err(Error::Provider(format!(
                "extractor {} returned {} values, declared {}",
                extractor.name(),
                features.len(),
                extractor.dim()
            )));
        }
        let mut history_onehot = vec![0f32; cfg.history_dim()];
        let offset = cfg.history_len - self.history.len();
        for (slot, a) in self.history.iter().enumerate() {
            history_onehot[(offset + slot) * NUM_ACTIONS + a.index()] = 1.0;
        }
        Ok(Observation {
            features,
            history_onehot,
        })
    }

    /// Applies `action` without computing the next observation.
    pub fn advance(&mut self, action: Action, cfg: &EnvConfig) -> Result<StepResult> {
        if self.done {
            return Err(Error::Contract("step on a finished episode".into()));
        }
        let before = self.current_iou();
        self.steps += 1;
        self.history.push_back(action);
        while self.history.len() > cfg.history_len {
            self.history.pop_front();
        }
        if action == Action::Trigger {
            self.done = true;
            self.triggered = true;
            let eta = cfg.reward.trigger_eta;
            let reward = if before > cfg.reward.iou_threshold { eta } else { -eta };
            return Ok(StepResult {
                reward,
                done: true,
                iou: before,
            });
        }
        let (w, h) = (self.image.width(), self.image.height());
        self.bbox = apply_action(&self.bbox, action, &cfg.transform, w, h)?;
        let after = self.current_iou();
        let reward = match cfg.reward.step_reward_mode {
            StepRewardMode::SignDeltaIou => sign(after - before),
            StepRewardMode::Zero => 0.0,
        };
        self.done = self.steps >= cfg.max_steps;
        Ok(StepResult {
            reward,
            done: self.done,
            iou: after,
        })
    }

    /// Actions that do not lower the IoU, plus TRIGGER when it would be rewarded.
    pub fn guidance(&self, cfg: &EnvConfig) -> Result<Vec<Action>> {
        if self.gt_boxes.is_empty() {
            return Ok(Vec::new());
        }
        let now = self.current_iou();
        let (w, h) = (self.image.width(), self.image.height());
        let mut out = Vec::with_capacity(NUM_ACTIONS);
        for a in Action::MOVES {
            let nb = apply_action(&self.bbox, a, &cfg.transform, w, h)?;
            if self.iou_of(&nb) >= now {
                out.push(a);
            }
        }
        if now > cfg.reward.iou_threshold {
            out.push(Action::Trigger);
        }
        Ok(out)
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Starts an episode on `image` and returns its first observation.
pub fn reset(
    image: GrayImage,
    gt_boxes: Vec<BBox>,
    extractor: &dyn FeatureExtractor,
    cfg: &EnvConfig,
) -> Result<(EpisodeState, Observation)> {
    let state = EpisodeState::new(image, gt_boxes);
    let obs = state.observe(extractor, cfg)?;
    Ok((state, obs))
}

/// Applies `action` and observes the result.
pub fn step(
    state: &mut EpisodeState,
    action: Action,
    extractor: &dyn FeatureExtractor,
    cfg: &EnvConfig,
) -> Result<(Observation, f64, bool)> {
    let r = state.advance(action, cfg)?;
    let obs = state.observe(extractor, cfg)?;
    Ok((obs, r.reward, r.done))
}

/// An action choice plus the values behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// Q-values when the policy has them.
    pub q: Option<[f64; NUM_ACTIONS]>,
    /// Confidence attached to a detection if `action` is TRIGGER.
    pub score: f64,
}

/// A deterministic acting rule used at inference time.
pub trait Policy: Sync {
    fn decide(&self, state: &EpisodeState, obs: &Observation) -> Result<Decision>;
}

/// Ground-truth driven greedy-IoU policy: moves toward the best-matching box
/// and triggers once the IoU clears the threshold. Its score is that IoU.
#[derive(Debug, Clone, Copy)]
pub struct OraclePolicy {
    pub cfg: EnvConfig,
}

impl Policy for OraclePolicy {
    fn decide(&self, state: &EpisodeState, _obs: &Observation) -> Result<Decision> {
        let gts = state.gt_boxes();
        if gts.is_empty() {
            // Nothing left to find: wander until the step cap ends the episode.
            return Ok(Decision {
                action: Action::Up,
                q: None,
                score: 0.0,
            });
        }
        let (now, idx) = best_match(&state.bbox(), gts)?;
        if now > self.cfg.reward.iou_threshold {
            return Ok(Decision {
                action: Action::Trigger,
                q: None,
                score: now,
            });
        }
        let img = state.image();
        let (action, _, _) =
            greedy_oracle_step(&state.bbox(), &gts[idx], &self.cfg.transform, img.width(), img.height())?;
        Ok(Decision {
            action,
            q: None,
            score: now,
        })
    }
}

/// One recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub action: Action,
    /// Box after the step.
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub reward: f64,
    /// Q-value of the chosen action, when the policy has one.
    pub q: Option<f64>,
    pub iou: f64,
}

/// One episode of a detection sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    /// Boxes whose crosses were painted before this episode started.
    pub masked: Vec<BBox>,
    pub mask_bar_fraction: f64,
    pub initial_box: BBox,
    pub steps: Vec<TraceStep>,
    pub triggered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub detections: Vec<Detection>,
    /// Actions spent across every episode on the image, capped ones included.
    pub total_steps: usize,
    pub episodes: Vec<EpisodeTrace>,
}

/// Repeated greedy episodes on one image with a cross painted over each
/// detection before the next episode starts.
///
/// Stops after `max_detections` triggers or at the first episode cut off by the
/// step cap. Ground-truth boxes only drive rewards in the trace and the oracle;
/// a box matched by a detection is dropped from later episodes.
pub fn detect_sequence(
    image: &GrayImage,
    gt_boxes: &[BBox],
    policy: &dyn Policy,
    extractor: &dyn FeatureExtractor,
    cfg: &EnvConfig,
    max_detections: usize,
) -> Result<SequenceResult> {
    if max_detections == 0 {
        return Err(Error::Contract("max_detections must be >= 1".into()));
    }
    let mut current = image.clone();
    let mut remaining = gt_boxes.to_vec();
    let mut masked = Vec::new();
    let mut out = SequenceResult {
        detections: Vec::new(),
        total_steps: 0,
        episodes: Vec::new(),
    };
    while out.detections.len() < max_detections {
        let (mut state, mut obs) = reset(current.clone(), remaining.clone(), extractor, cfg)?;
        let mut trace = EpisodeTrace {
            masked: masked.clone(),
            mask_bar_fraction: cfg.mask_bar_fraction,
            initial_box: state.bbox(),
            steps: Vec::new(),
            triggered: false,
        };
        let mut score = 0.0;
        while !state.is_done() {
            let d = policy.decide(&state, &obs)?;
            let r = state.advance(d.action, cfg)?;
            trace.steps.push(TraceStep {
                action: d.action,
                bbox: state.bbox(),
                reward: r.reward,
                q: d.q.map(|q| q[d.action.index()]),
                iou: r.iou,
            });
            if r.done {
                score = d.score;
            } else {
                obs = state.observe(extractor, cfg)?;
            }
        }
        out.total_steps += state.steps();
        trace.triggered = state.triggered();
        out.episodes.push(trace);
        if !state.triggered() {
            break;
        }
        let b = state.bbox();
        out.detections.push(Detection {
            bbox: b,
            score,
            steps: state.steps(),
        });
        if let Ok((v, i)) = best_match(&b, &remaining) {
            if v > cfg.reward.iou_threshold {
                remaining.remove(i);
            }
        }
        current = mask_cross(&current, &b, cfg.mask_bar_fraction)?;
        masked.push(b);
    }
    Ok(out)
}
