//! DQN training (epsilon-greedy over a replay buffer) and greedy inference.

use std::time::Instant;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{detect_sequence, Decision, Detection, EnvConfig, EpisodeState, EpisodeTrace, Observation, Policy};
use crate::features::FeatureExtractor;
use crate::geometry::{Action, BBox, NUM_ACTIONS};
use crate::imaging::{read_png, GrayImage};
use crate::qnet::{sync_target, td_batch_update, AdamConfig, AdamState, InputNormalizer, Mlp, StateVec, Transition};
use crate::synthgen::{Annotation, DatasetManifest};
use crate::{derive_seed, Error, Result};

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest transition once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Transitions in insertion order, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` distinct transitions drawn uniformly.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        if n == 0 || n > self.items.len() {
            return Err(Error::Contract(format!(
                "cannot sample {n} from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok(index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

/// Training hyperparameters; every field has a documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Passes over the training set, one episode per image per pass.
    pub epochs: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Epsilon decays linearly over this many epochs, then stays at `epsilon_end`.
    pub epsilon_decay_epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub replay_capacity: usize,
    /// Gradient updates between target-network syncs.
    pub target_sync_every: usize,
    /// Environment steps between gradient updates.
    pub update_every: usize,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    pub guided_exploration: bool,
    /// Chance that an exploratory action is drawn from the guidance set.
    pub guidance_prob: f64,
    /// Lower bound on the per-component std of the input normalizer.
    pub normalizer_std_floor: f64,
    pub seed: u64,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_epochs: 5,
            batch_size: 64,
            gamma: 0.9,
            replay_capacity: 10_000,
            target_sync_every: 500,
            update_every: 1,
            hidden: vec![512, 512],
            adam: AdamConfig::default(),
            guided_exploration: true,
            guidance_prob: 0.5,
            normalizer_std_floor: 1e-2,
            seed: 0,
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("guidance_prob", self.guidance_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad(format!(
                "need 1 <= batch_size ({}) <= replay_capacity ({})",
                self.batch_size, self.replay_capacity
            ));
        }
        if self.target_sync_every == 0 || self.update_every == 0 {
            return bad("target_sync_every and update_every must be >= 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        if !(self.adam.lr > 0.0 && self.normalizer_std_floor > 0.0) {
            return bad("learning rate and normalizer_std_floor must be positive".into());
        }
        Ok(())
    }

    /// Exploration rate used throughout epoch `epoch` (0-based).
    pub fn epsilon(&self, epoch: usize) -> f64 {
        if self.epsilon_decay_epochs == 0 || epoch >= self.epsilon_decay_epochs {
            return self.epsilon_end;
        }
        let t = epoch as f64 / self.epsilon_decay_epochs as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

/// Lowest-index argmax.
pub fn greedy_action(q: &[f64; NUM_ACTIONS]) -> Action {
    let mut best = 0;
    for i in 1..NUM_ACTIONS {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::ALL[best]
}

fn explore(rng: &mut impl Rng, guidance: Option<&[Action]>, guidance_prob: f64) -> Action {
    match guidance {
        Some(g) if !g.is_empty() && rng.random::<f64>() < guidance_prob => g[rng.random_range(0..g.len())],
        _ => Action::ALL[rng.random_range(0..NUM_ACTIONS)],
    }
}

/// Epsilon-greedy choice; exploration draws from `guidance` with
/// probability `guidance_prob` when a non-empty guidance set is given.
pub fn select_action(
    q: &[f64; NUM_ACTIONS],
    epsilon: f64,
    rng: &mut impl Rng,
    guidance: Option<&[Action]>,
    guidance_prob: f64,
) -> Action {
    if rng.random::<f64>() < epsilon {
        explore(rng, guidance, guidance_prob)
    } else {
        greedy_action(q)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub epsilon: f64,
    pub episodes: usize,
    /// Episodes run since training started, across all epochs.
    pub total_episodes: usize,
    pub env_steps: usize,
    pub updates: usize,
    pub mean_reward: f64,
    pub trigger_rate: f64,
    /// Mean IoU at trigger over triggered episodes; absent when none triggered.
    pub mean_iou_at_trigger: Option<f64>,
    pub mean_episode_steps: f64,
    pub mean_loss: Option<f64>,
    pub wall_secs: f64,
}

/// Network, optimizer and schedule position; everything needed to resume.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub net: Mlp,
    pub adam: AdamState,
    /// First epoch still to run.
    pub next_epoch: usize,
    pub total_episodes: usize,
}

struct Sample {
    image: GrayImage,
    gts: Vec<BBox>,
    initial: Vec<f32>,
}

fn load_record(manifest: &DatasetManifest, i: usize) -> Result<(GrayImage, Vec<BBox>)> {
    let rec = &manifest.records[i];
    let image = read_png(manifest.image_path(rec))?;
    Ok((image, rec.annotations.iter().map(|a| a.bbox).collect()))
}

fn load_samples(
    manifest: &DatasetManifest,
    extractor: &dyn FeatureExtractor,
    env: &EnvConfig,
) -> Result<Vec<Sample>> {
    (0..manifest.records.len())
        .into_par_iter()
        .map(|i| {
            let (image, gts) = load_record(manifest, i)?;
            let initial = EpisodeState::new(image.clone(), Vec::new())
                .observe(extractor, env)?
                .features;
            Ok(Sample { image, gts, initial })
        })
        .collect()
}

/// Untrained network with its input normalizer fitted on the initial
/// (full-image) observations of `manifest`.
pub fn init_network(
    manifest: &DatasetManifest,
    extractor: &dyn FeatureExtractor,
    cfg: &TrainConfig,
) -> Result<Mlp> {
    let samples = load_samples(manifest, extractor, &cfg.env)?;
    network_for(&samples, extractor, cfg)
}

fn network_for(samples: &[Sample], extractor: &dyn FeatureExtractor, cfg: &TrainConfig) -> Result<Mlp> {
    let dim = extractor.dim();
    let mut net = Mlp::new(dim + cfg.env.history_dim(), &cfg.hidden, derive_seed(cfg.seed, 0));
    let norm = InputNormalizer::fit(samples.iter().map(|s| s.initial.as_slice()), dim, cfg.normalizer_std_floor);
    net.set_normalizer(Some(norm))?;
    Ok(net)
}

fn join_input(features: &[f32], history: &[f32]) -> StateVec {
    features.iter().chain(history).copied().collect::<Vec<_>>().into()
}

/// Trains a Q-network on `manifest`.
///
/// `on_epoch` runs after every epoch with the log line and current state (the
/// CLI uses it to checkpoint); an error from it aborts training. Each epoch
/// draws its randomness from its own stream, so a resumed run replays the
/// same image order and exploration draws (the replay buffer restarts empty).
pub fn train(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor,
    resume: Option<TrainerState>,
    mut on_epoch: impl FnMut(&EpochLog, &TrainerState) -> Result<()>,
) -> Result<(TrainerState, Vec<EpochLog>)> {
    cfg.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::Contract("training manifest has no images".into()));
    }
    let env = &cfg.env;
    let samples = load_samples(manifest, extractor, env)?;
    let mut state = match resume {
        Some(s) => {
            if s.net.input_dim() != extractor.dim() + env.history_dim() {
                return Err(Error::Config(format!(
                    "checkpoint input dim {} does not match extractor {} ({} + {})",
                    s.net.input_dim(),
                    extractor.name(),
                    extractor.dim(),
                    env.history_dim()
                )));
            }
            s
        }
        None => {
            let net = network_for(&samples, extractor, cfg)?;
            let adam = AdamState::new(&net, cfg.adam);
            TrainerState {
                net,
                adam,
                next_epoch: 0,
                total_episodes: 0,
            }
        }
    };
    let mut target = state.net.clone();
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut updates = 0usize;
    let mut env_steps = 0usize;
    let mut logs = Vec::new();
    let guidance_on = cfg.guided_exploration && cfg.guidance_prob > 0.0;

    for epoch in state.next_epoch..cfg.epochs {
        let started = Instant::now();
        let epsilon = cfg.epsilon(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 + epoch as u64));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);

        let (mut reward_sum, mut triggers, mut iou_sum, mut step_sum) = (0.0, 0usize, 0.0, 0usize);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for &i in &order {
            let s = &samples[i];
            let mut ep = EpisodeState::new(s.image.clone(), s.gts.clone());
            let mut input = join_input(&s.initial, &vec![0.0; env.history_dim()]);
            let mut episode_reward = 0.0;
            while !ep.is_done() {
                let action = if rng.random::<f64>() < epsilon {
                    let guidance = if guidance_on { Some(ep.guidance(env)?) } else { None };
                    explore(&mut rng, guidance.as_deref(), cfg.guidance_prob)
                } else {
                    greedy_action(&state.net.forward(&input)?)
                };
                let iou_before = ep.current_iou();
                let r = ep.advance(action, env)?;
                episode_reward += r.reward;
                if action == Action::Trigger {
                    triggers += 1;
                    iou_sum += iou_before;
                }
                let next = if r.done {
                    input.clone()
                } else {
                    ep.observe(extractor, env)?.to_input()
                };
                replay.push(Transition {
                    state: input,
                    action: action.index(),
                    reward: r.reward,
                    next_state: next.clone(),
                    terminal: r.done,
                });
                input = next;
                env_steps += 1;
                if replay.len() >= cfg.batch_size && env_steps % cfg.update_every == 0 {
                    let batch = replay.sample(cfg.batch_size, &mut rng)?;
                    let loss = td_batch_update(&mut state.net, &mut state.adam, &batch, cfg.gamma, &target)
                        .map_err(|e| match e {
                            Error::NonFiniteLoss { loss, context } => Error::NonFiniteLoss {
                                loss,
                                context: format!("{context} at epoch {epoch}, environment step {env_steps}"),
                            },
                            other => other,
                        })?;
                    loss_sum += loss;
                    loss_n += 1;
                    updates += 1;
                    if updates % cfg.target_sync_every == 0 {
                        sync_target(&state.net, &mut target);
                    }
                }
            }
            reward_sum += episode_reward;
            step_sum += ep.steps();
        }
        let n = order.len() as f64;
        state.next_epoch = epoch + 1;
        state.total_episodes += order.len();
        let log = EpochLog {
            epoch,
            epsilon,
            episodes: order.len(),
            total_episodes: state.total_episodes,
            env_steps,
            updates,
            mean_reward: reward_sum / n,
            trigger_rate: triggers as f64 / n,
            mean_iou_at_trigger: (triggers > 0).then(|| iou_sum / triggers as f64),
            mean_episode_steps: step_sum as f64 / n,
            mean_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log, &state)?;
        logs.push(log);
    }
    Ok((state, logs))
}

/// Greedy policy of a Q-network; the detection score is Q(s, TRIGGER).
pub struct QPolicy<'a> {
    pub net: &'a Mlp,
}

impl Policy for QPolicy<'_> {
    fn decide(&self, _state: &EpisodeState, obs: &Observation) -> Result<Decision> {
        let q = self.net.forward(&obs.to_input())?;
        Ok(Decision {
            action: greedy_action(&q),
            q: Some(q),
            score: q[Action::Trigger.index()],
        })
    }
}

/// Detections on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub ground_truth: Vec<Annotation>,
    pub detections: Vec<Detection>,
    /// Actions across all of the image's episodes.
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<EpisodeTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub images: Vec<ImagePrediction>,
}

/// Greedy detection sequences for every image, in manifest order.
pub fn predict_with(
    manifest: &DatasetManifest,
    policy: &dyn Policy,
    extractor: &dyn FeatureExtractor,
    env: &EnvConfig,
    max_detections: usize,
    keep_traces: bool,
) -> Result<PredictionSet> {
    let images = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let (image, gts) = load_record(manifest, i)?;
            let seq = detect_sequence(&image, &gts, policy, extractor, env, max_detections)?;
            Ok(ImagePrediction {
                file: rec.file.clone(),
                width: image.width(),
                height: image.height(),
                ground_truth: rec.annotations.clone(),
                detections: seq.detections,
                steps: seq.total_steps,
                traces: if keep_traces { seq.episodes } else { Vec::new() },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet { images })
}

pub fn predict(
    manifest: &DatasetManifest,
    net: &Mlp,
    extractor: &dyn FeatureExtractor,
    env: &EnvConfig,
    max_detections: usize,
    keep_traces: bool,
) -> Result<PredictionSet> {
    predict_with(manifest, &QPolicy { net }, extractor, env, max_detections, keep_traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn t(tag: f32) -> Transition {
        let s: StateVec = Arc::from(vec![tag]);
        Transition {
            state: s.clone(),
            action: 0,
            reward: tag as f64,
            next_state: s,
            terminal: true,
        }
    }

    #[test]
    fn replay_evicts_oldest_first() {
        let mut r = ReplayBuffer::new(5);
        for i in 0..8 {
            r.push(t(i as f32));
            assert!(r.len() <= 5);
        }
        let tags: Vec<f32> = r.iter_oldest_first().map(|x| x.state[0]).collect();
        assert_eq!(tags, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn replay_samples_without_replacement() {
        let mut r = ReplayBuffer::new(10);
        for i in 0..10 {
            r.push(t(i as f32));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut tags: Vec<i32> = r.sample(10, &mut rng).unwrap().iter().map(|x| x.state[0] as i32).collect();
            tags.sort();
            assert_eq!(tags, (0..10).collect::<Vec<_>>());
        }
        assert!(r.sample(11, &mut rng).is_err());
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(1) - 0.82).abs() < 1e-12);
        assert_eq!(cfg.epsilon(5), 0.1);
        assert_eq!(cfg.epsilon(24), 0.1);
        for e in 0..30 {
            assert!(cfg.epsilon(e + 1) <= cfg.epsilon(e));
            assert!((0.0..=1.0).contains(&cfg.epsilon(e)));
        }
    }

    #[test]
    fn greedy_selection_and_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_action(&[0.0; 9], 0.0, &mut rng, None, 0.5), Action::Up);
        let mut q = [0.0; 9];
        q[6] = 2.0;
        q[7] = 2.0;
        for _ in 0..100 {
            assert_eq!(select_action(&q, 0.0, &mut rng, None, 0.5), Action::Thicker);
        }
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut counts = [0usize; 9];
        for _ in 0..n {
            counts[select_action(&[0.0; 9], 1.0, &mut rng, None, 0.5).index()] += 1;
        }
        let e = n as f64 / 9.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // chi-square critical value for df = 8 at p = 0.001
        assert!(chi2 < 26.124, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn guidance_biases_exploration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = [Action::Smaller];
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| select_action(&[0.0; 9], 1.0, &mut rng, Some(&g), 0.5) == Action::Smaller)
            .count();
        // 0.5 + 0.5 / 9
        let p = hits as f64 / n as f64;
        assert!((p - (0.5 + 0.5 / 9.0)).abs() < 0.02, "{p}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            batch_size: 20_000,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn argmax_is_a_maximum(q in proptest::array::uniform9(-10.0f64..10.0)) {
            let a = greedy_action(&q);
            prop_assert!(q.iter().all(|&v| v <= q[a.index()]));
            prop_assert!(q[..a.index()].iter().all(|&v| v < q[a.index()]));
        }
    }
}
