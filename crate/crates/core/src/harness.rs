//! Desk-scale reaching task used to measure attacks at the task level.
//!
//! A point agent must reach a goal disc. Each frame is rendered, optionally
//! perturbed, encoded, mean-pooled and mapped to a velocity by a ridge-fitted
//! linear head. The head never sees gradients from the attack; only the
//! encoder and projector are differentiated.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, Strategy};
use crate::config::{de_budget, de_budget_list};
use crate::encoder::{EncoderConfig, VisionEncoder};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Parallelism};
use crate::tensor::{cosine_similarity, Tensor};

pub const AGENT_COLOR: [f64; 3] = [0.95, 0.2, 0.15];
pub const GOAL_COLOR: [f64; 3] = [0.15, 0.8, 0.3];

const SCENE_STREAM: u64 = 0x5CE4_E000;
const TRAIN_STREAM: u64 = 0x7EA1_4000;
const EPISODE_STREAM: u64 = 0xE915_0DE0;

/// SplitMix64 finalizer, used to derive independent seeds.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ stream).wrapping_add(index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
}

/// One frame's worth of scene state. Positions are `(x, y)` in `[0, 1]²`
/// and radii are in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub agent: [f64; 2],
    pub goal: [f64; 2],
    pub agent_radius: f64,
    pub goal_radius: f64,
    pub background: f64,
    pub distractors: Vec<Blob>,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let inside = |p: [f64; 2]| p.iter().all(|v| (0.0..=1.0).contains(v));
        if !inside(self.agent) || !inside(self.goal) {
            return Err(Error::invalid("render_scene", "agent and goal must lie in [0, 1]^2"));
        }
        let radii = std::iter::once(self.agent_radius)
            .chain(std::iter::once(self.goal_radius))
            .chain(self.distractors.iter().map(|b| b.radius));
        for r in radii {
            if !(r >= 2.0 && r.is_finite()) {
                return Err(Error::invalid("render_scene", format!("blob radius {r} is below 2 px")));
            }
        }
        let colors = self.distractors.iter().flat_map(|b| b.color.iter()).chain(std::iter::once(&self.background));
        for c in colors {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::invalid("render_scene", "colors must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Agent-to-goal distance in pixels.
    pub fn goal_distance_px(&self, config: &EncoderConfig) -> f64 {
        let dx = (self.goal[0] - self.agent[0]) * config.image_w as f64;
        let dy = (self.goal[1] - self.agent[1]) * config.image_h as f64;
        dx.hypot(dy)
    }

    pub fn reached(&self, config: &EncoderConfig) -> bool {
        self.goal_distance_px(config) <= self.goal_radius
    }

    /// Unit vector from agent to goal in normalized coordinates; zero when
    /// they coincide.
    pub fn optimal_action(&self) -> [f64; 2] {
        let d = [self.goal[0] - self.agent[0], self.goal[1] - self.agent[1]];
        let n = d[0].hypot(d[1]);
        if n == 0.0 {
            [0.0, 0.0]
        } else {
            [d[0] / n, d[1] / n]
        }
    }
}

/// Pixel-space bounding box `[x0, x1) × [y0, y1)` of every pixel a disc can
/// touch, clipped to the image.
pub fn blob_bounds(center: [f64; 2], radius: f64, config: &EncoderConfig) -> [usize; 4] {
    let (w, h) = (config.image_w as f64, config.image_h as f64);
    let (cx, cy) = (center[0] * w, center[1] * h);
    let reach = radius + 0.5;
    let lo = |c: f64| (c - reach - 0.5).floor().max(0.0) as usize;
    let hi = |c: f64, lim: f64| ((c + reach + 0.5).ceil().min(lim)) as usize;
    [lo(cx), hi(cx, w), lo(cy), hi(cy, h)]
}

fn paint_disc(image: &mut [f64], config: &EncoderConfig, center: [f64; 2], radius: f64, color: [f64; 3]) {
    let (h, w) = (config.image_h, config.image_w);
    let (cx, cy) = (center[0] * w as f64, center[1] * h as f64);
    let [x0, x1, y0, y1] = blob_bounds(center, radius, config);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
            let coverage = (radius + 0.5 - d).clamp(0.0, 1.0);
            if coverage == 0.0 {
                continue;
            }
            for (c, &col) in color.iter().enumerate() {
                let p = &mut image[c * h * w + y * w + x];
                *p = (*p * (1.0 - coverage) + col * coverage).clamp(0.0, 1.0);
            }
        }
    }
}

/// Rasterizes the scene into a `[3, H, W]` image: background, distractors,
/// goal, then agent, each as an anti-aliased filled disc.
pub fn render_scene(spec: &SceneSpec, config: &EncoderConfig) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = (config.image_h, config.image_w);
    let mut data = vec![spec.background; 3 * h * w];
    for blob in &spec.distractors {
        paint_disc(&mut data, config, blob.center, blob.radius, blob.color);
    }
    paint_disc(&mut data, config, spec.goal, spec.goal_radius, GOAL_COLOR);
    paint_disc(&mut data, config, spec.agent, spec.agent_radius, AGENT_COLOR);
    Tensor::new(&[3, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub agent_radius: f64,
    pub goal_radius: f64,
    pub distractors: usize,
    pub distractor_radius: [f64; 2],
    pub background: [f64; 2],
    /// Minimum agent-goal distance at the start of an episode, normalized.
    pub min_start_distance: f64,
    /// Sampled positions keep this normalized distance from the border.
    pub margin: f64,
    /// Fixed goal position; drawn like the agent when absent.
    pub goal: Option<[f64; 2]>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            agent_radius: 6.0,
            goal_radius: 2.5,
            distractors: 2,
            distractor_radius: [2.0, 3.0],
            background: [0.2, 0.4],
            min_start_distance: 0.5,
            margin: 0.1,
            goal: Some([0.5, 0.5]),
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("harness.scene.{k}");
        if !(self.agent_radius >= 2.0) {
            return Err(Error::config(key("agent_radius"), "must be at least 2 px"));
        }
        if !(self.goal_radius >= 2.0) {
            return Err(Error::config(key("goal_radius"), "must be at least 2 px"));
        }
        let [r0, r1] = self.distractor_radius;
        if !(r0 >= 2.0 && r1 >= r0 && r1.is_finite()) {
            return Err(Error::config(key("distractor_radius"), "must be an ordered range with minimum 2 px"));
        }
        let [b0, b1] = self.background;
        if !(0.0 <= b0 && b0 <= b1 && b1 <= 1.0) {
            return Err(Error::config(key("background"), "must be an ordered range inside [0, 1]"));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::config(key("margin"), "must lie in [0, 0.5)"));
        }
        let span = (1.0 - 2.0 * self.margin) * std::f64::consts::SQRT_2;
        if !(self.min_start_distance >= 0.0 && self.min_start_distance < span) {
            return Err(Error::config(key("min_start_distance"), "must be reachable inside the sampling square"));
        }
        if let Some(g) = self.goal {
            if !g.iter().all(|v| (self.margin..=1.0 - self.margin).contains(v)) {
                return Err(Error::config(key("goal"), "must lie inside the sampling square"));
            }
        }
        Ok(())
    }

    fn position(&self, rng: &mut impl Rng) -> [f64; 2] {
        let (lo, hi) = (self.margin, 1.0 - self.margin);
        [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
    }

    fn range(rng: &mut impl Rng, [a, b]: [f64; 2]) -> f64 {
        if a == b {
            a
        } else {
            rng.gen_range(a..b)
        }
    }

    /// Samples a scene; `min_distance` bounds how close the agent may start.
    pub fn sample(&self, seed: u64, min_distance: f64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goal = self.goal.unwrap_or_else(|| self.position(&mut rng));
        let agent = loop {
            let p = self.position(&mut rng);
            if (p[0] - goal[0]).hypot(p[1] - goal[1]) >= min_distance {
                break p;
            }
        };
        let distractors = (0..self.distractors)
            .map(|_| Blob {
                center: [rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)],
                radius: Self::range(&mut rng, self.distractor_radius),
                color: [rng.gen_range(0.15..0.35), rng.gen_range(0.2..0.5), rng.gen_range(0.55..0.9)],
            })
            .collect();
        SceneSpec {
            agent,
            goal,
            agent_radius: self.agent_radius,
            goal_radius: self.goal_radius,
            background: Self::range(&mut rng, self.background),
            distractors,
            rng_seed: seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Condition {
    Clean,
    Random,
    Advla,
    Aw,
    Tkm,
    Tkl,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Clean,
        Condition::Random,
        Condition::Advla,
        Condition::Aw,
        Condition::Tkm,
        Condition::Tkl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "CLEAN",
            Condition::Random => "RANDOM",
            Condition::Advla => "ADVLA",
            Condition::Aw => "AW",
            Condition::Tkm => "TKM",
            Condition::Tkl => "TKL",
        }
    }

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Condition::Advla => Some(Strategy::Base),
            Condition::Aw => Some(Strategy::Aw),
            Condition::Tkm => Some(Strategy::Tkm),
            Condition::Tkl => Some(Strategy::Tkl),
            Condition::Clean | Condition::Random => None,
        }
    }
}

/// One cell of an evaluation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSpec {
    pub condition: Condition,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub ratio: f64,
}

impl ConditionSpec {
    pub fn clean() -> Self {
        Self {
            condition: Condition::Clean,
            epsilon: 0.0,
            alpha: 0.0,
            iterations: 0,
            ratio: 0.0,
        }
    }

    pub fn random(epsilon: f64) -> Self {
        Self {
            condition: Condition::Random,
            epsilon,
            ..Self::clean()
        }
    }

    /// An attack cell; `alpha` is capped at `epsilon`.
    pub fn attack(condition: Condition, epsilon: f64, alpha: f64, iterations: usize, ratio: f64) -> Self {
        Self {
            condition,
            epsilon,
            alpha: alpha.min(epsilon),
            iterations,
            ratio,
        }
    }

    fn attack_config(&self, base: &AttackConfig, seed: u64) -> Option<AttackConfig> {
        let strategy = self.condition.strategy()?;
        Some(AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            iterations: self.iterations,
            strategy,
            topk_ratio: self.ratio,
            seed,
            ..base.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub trials: usize,
    pub max_steps: usize,
    pub train_scenes: usize,
    pub ridge_lambda: f64,
    /// Normalized distance moved per step at unit action norm.
    pub agent_speed: f64,
    pub max_action_norm: f64,
    pub scene: SceneConfig,
    pub conditions: Vec<Condition>,
    #[serde(deserialize_with = "de_budget_list")]
    pub epsilons: Vec<f64>,
    pub iteration_grid: Vec<usize>,
    #[serde(deserialize_with = "de_budget")]
    pub iteration_epsilon: f64,
    /// Write wall-clock columns; off keeps every output byte-reproducible.
    pub record_timing: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            max_steps: 64,
            train_scenes: 2000,
            ridge_lambda: 1e-4,
            agent_speed: 0.04,
            max_action_norm: 1.0,
            scene: SceneConfig::default(),
            conditions: Condition::ALL.to_vec(),
            epsilons: vec![2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0],
            iteration_grid: vec![4, 5, 6],
            iteration_epsilon: 4.0 / 255.0,
            record_timing: false,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("harness.trials", "must be at least 1"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("harness.max_steps", "must be at least 1"));
        }
        if self.train_scenes < 200 {
            return Err(Error::config("harness.train_scenes", "must be at least 200"));
        }
        if !(self.ridge_lambda > 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::config("harness.ridge_lambda", "must be positive"));
        }
        if !(self.agent_speed > 0.0 && self.agent_speed.is_finite()) {
            return Err(Error::config("harness.agent_speed", "must be positive"));
        }
        if !(self.max_action_norm > 0.0 && self.max_action_norm.is_finite()) {
            return Err(Error::config("harness.max_action_norm", "must be positive"));
        }
        if self.conditions.is_empty() {
            return Err(Error::config("harness.conditions", "must name at least one condition"));
        }
        for &e in self.epsilons.iter().chain(std::iter::once(&self.iteration_epsilon)) {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config("harness.epsilons", "budgets must lie in [0, 1]"));
            }
        }
        self.scene.validate()
    }
}

/// Mean over patches of the projected features.
pub fn pooled_features(projected: &Tensor) -> Vec<f64> {
    let s = projected.shape();
    let (n, d) = (s[0], s[1]);
    let mut out = vec![0.0; d];
    for row in projected.data().chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

/// Linear velocity head on pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyHead {
    /// `[feature_dim, 2]`.
    pub weights: Tensor,
    pub bias: [f64; 2],
    pub lambda: f64,
}

impl PolicyHead {
    pub fn act(&self, pooled: &[f64]) -> [f64; 2] {
        let mut a = self.bias;
        for (row, x) in self.weights.data().chunks_exact(2).zip(pooled) {
            a[0] += row[0] * x;
            a[1] += row[1] * x;
        }
        a
    }

    /// Fraction of scenes whose predicted action has cosine above 0.7 with
    /// the optimal one.
    pub fn directional_accuracy(&self, enc: &VisionEncoder, scenes: &[SceneSpec]) -> Result<f64> {
        let feats = pooled_dataset(enc, scenes, Parallelism::Parallel)?;
        let hits = feats
            .iter()
            .zip(scenes)
            .filter(|(x, s)| {
                let (p, t) = (self.act(x), s.optimal_action());
                let dot = p[0] * t[0] + p[1] * t[1];
                let np = p[0].hypot(p[1]);
                np > 0.0 && dot / np > 0.7
            })
            .count();
        Ok(hits as f64 / scenes.len() as f64)
    }
}

fn pooled_dataset(enc: &VisionEncoder, scenes: &[SceneSpec], mode: Parallelism) -> Result<Vec<Vec<f64>>> {
    map_indexed(scenes.len(), mode, |i| {
        let image = render_scene(&scenes[i], enc.config())?;
        Ok(pooled_features(&enc.features(&image)?.projected))
    })
    .into_iter()
    .collect()
}

/// Ridge regression with an unpenalized intercept on standardized columns.
/// Gram and cross terms are averaged over samples, so repeating the whole
/// dataset leaves the solution unchanged.
pub fn fit_ridge(x: &[Vec<f64>], y: &[[f64; 2]], lambda: f64) -> Result<PolicyHead> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("fit_ridge", "lambda must be positive"));
    }
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid("fit_ridge", "need matching, non-empty inputs and targets"));
    }
    let (n, d) = (x.len(), x[0].len());
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("fit_ridge", "ragged feature rows"));
    }
    let nf = n as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / nf;
            if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let y_mean = [
        y.iter().map(|t| t[0]).sum::<f64>() / nf,
        y.iter().map(|t| t[1]).sum::<f64>() / nf,
    ];
    let z = DMatrix::from_fn(n, d, |i, j| (x[i][j] - mean[j]) / scale[j]);
    let yc = DMatrix::from_fn(n, 2, |i, k| y[i][k] - y_mean[k]);
    let gram = z.tr_mul(&z) / nf + DMatrix::identity(d, d) * lambda;
    let cross = z.tr_mul(&yc) / nf;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::NonFinite { context: "ridge normal equations".into() })?;
    let wz = chol.solve(&cross);
    let mut weights = Vec::with_capacity(2 * d);
    let mut bias = y_mean;
    for j in 0..d {
        for k in 0..2 {
            let w = wz[(j, k)] / scale[j];
            weights.push(w);
            bias[k] -= mean[j] * w;
        }
    }
    if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "ridge solution".into() });
    }
    Ok(PolicyHead {
        weights: Tensor::new(&[d, 2], weights)?,
        bias,
        lambda,
    })
}

/// Fits the head on clean renders; targets are unit vectors toward the goal.
pub fn fit_policy(enc: &VisionEncoder, scenes: &[SceneSpec], lambda: f64) -> Result<PolicyHead> {
    if scenes.len() < 200 {
        return Err(Error::invalid("fit_policy", format!("need at least 200 scenes, got {}", scenes.len())));
    }
    let x = pooled_dataset(enc, scenes, Parallelism::Parallel)?;
    let y: Vec<[f64; 2]> = scenes.iter().map(SceneSpec::optimal_action).collect();
    fit_ridge(&x, &y, lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub condition: Condition,
    pub steps: usize,
    pub success: bool,
    /// Feature dissimilarity `1 - cos(F_observed, F_clean)` per frame.
    pub losses: Vec<f64>,
    /// Mean PGD iteration seconds per frame; zero for unattacked frames.
    pub attack_seconds: Vec<f64>,
    pub patch_fractions: Vec<f64>,
    pub final_agent: [f64; 2],
}

struct Observation {
    features: Tensor,
    loss: f64,
    iter_seconds: f64,
    patch_fraction: f64,
}

/// Frozen encoder, fitted head and the configuration they came from.
pub struct Surrogate {
    pub encoder: VisionEncoder,
    pub policy: PolicyHead,
    pub harness: HarnessConfig,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl Surrogate {
    /// Builds the encoder from its seed and fits the head on
    /// `harness.train_scenes` clean scenes drawn from `seed`.
    pub fn build(encoder: EncoderConfig, harness: HarnessConfig, attack: AttackConfig, seed: u64) -> Result<Self> {
        harness.validate()?;
        attack.validate()?;
        let encoder = VisionEncoder::new(encoder)?;
        let scenes = Self::training_scenes(&harness, seed);
        let policy = fit_policy(&encoder, &scenes, harness.ridge_lambda)?;
        Ok(Self {
            encoder,
            policy,
            harness,
            attack,
            seed,
        })
    }

    pub fn from_run_config(cfg: &crate::config::RunConfig) -> Result<Self> {
        Self::build(cfg.encoder.clone(), cfg.harness.clone(), cfg.attack.clone(), cfg.seed)
    }

    pub fn training_scenes(harness: &HarnessConfig, seed: u64) -> Vec<SceneSpec> {
        (0..harness.train_scenes as u64)
            .map(|i| harness.scene.sample(derive_seed(seed, TRAIN_STREAM, i), 0.0))
            .collect()
    }

    /// Initial scene of evaluation episode `trial`; shared by all conditions.
    pub fn episode_scene(&self, trial: usize) -> SceneSpec {
        let s = &self.harness.scene;
        s.sample(derive_seed(self.seed, SCENE_STREAM, trial as u64), s.min_start_distance)
    }

    pub fn episode_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, EPISODE_STREAM, trial as u64)
    }

    fn observe(&self, image: &Tensor, spec: &ConditionSpec, frame_seed: u64) -> Result<Observation> {
        let enc = &self.encoder;
        match spec.condition {
            Condition::Clean => Ok(Observation {
                features: enc.features(image)?.projected,
                loss: 0.0,
                iter_seconds: 0.0,
                patch_fraction: 0.0,
            }),
            Condition::Random => {
                let clean = enc.features(image)?.projected;
                let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
                let eps = spec.epsilon;
                let noisy = if eps == 0.0 {
                    image.clone()
                } else {
                    let src = image.data();
                    Tensor::from_fn(image.shape(), |i| (src[i] + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0))
                };
                let features = enc.features(&noisy)?.projected;
                let cos = cosine_similarity(&features, &clean, self.attack.loss_eps)?;
                Ok(Observation {
                    features,
                    loss: 1.0 - cos,
                    iter_seconds: 0.0,
                    patch_fraction: attack::modified_patch_fraction(image, &noisy, enc.config().patch_size),
                })
            }
            _ => {
                let cfg = spec
                    .attack_config(&self.attack, frame_seed)
                    .expect("attack condition has a strategy");
                let result = attack::run_attack(enc, image, &cfg)?;
                Ok(Observation {
                    loss: result.final_loss(),
                    iter_seconds: result.mean_iter_seconds(),
                    patch_fraction: result.modified_patch_fraction,
                    features: result.final_features,
                })
            }
        }
    }

    /// Closed-loop rollout. Success is checked before every step, so an
    /// agent that starts on the goal succeeds with zero steps.
    pub fn run_episode(&self, init: &SceneSpec, spec: &ConditionSpec, episode_seed: u64) -> Result<EpisodeRecord> {
        let config = self.encoder.config();
        let h = &self.harness;
        let mut scene = init.clone();
        let mut record = EpisodeRecord {
            condition: spec.condition,
            steps: 0,
            success: false,
            losses: Vec::new(),
            attack_seconds: Vec::new(),
            patch_fractions: Vec::new(),
            final_agent: scene.agent,
        };
        for step in 0..=h.max_steps {
            if scene.reached(config) {
                record.success = true;
                break;
            }
            if step == h.max_steps {
                break;
            }
            let image = render_scene(&scene, config)?;
            let obs = self.observe(&image, spec, derive_seed(episode_seed, 0, step as u64))?;
            let mut a = self.policy.act(&pooled_features(&obs.features));
            let norm = a[0].hypot(a[1]);
            if !norm.is_finite() {
                return Err(Error::NonFinite { context: "policy action".into() });
            }
            if norm > h.max_action_norm {
                a = [a[0] * h.max_action_norm / norm, a[1] * h.max_action_norm / norm];
            }
            for (p, v) in scene.agent.iter_mut().zip(a) {
                *p = (*p + h.agent_speed * v).clamp(0.0, 1.0);
            }
            record.steps = step + 1;
            record.losses.push(obs.loss);
            record.attack_seconds.push(obs.iter_seconds);
            record.patch_fractions.push(obs.patch_fraction);
        }
        record.final_agent = scene.agent;
        Ok(record)
    }

    /// CLEAN, then RANDOM and every attack condition at each budget with the
    /// configured iteration count, then the iteration sweep for ADVLA.
    pub fn default_grid(&self) -> Vec<ConditionSpec> {
        let h = &self.harness;
        let a = &self.attack;
        let mut grid = Vec::new();
        let mut push = |spec: ConditionSpec| {
            if !grid.contains(&spec) {
                grid.push(spec);
            }
        };
        if h.conditions.contains(&Condition::Clean) {
            push(ConditionSpec::clean());
        }
        for cond in &h.conditions {
            for &eps in &h.epsilons {
                match cond {
                    Condition::Clean => {}
                    Condition::Random => push(ConditionSpec::random(eps)),
                    c => push(ConditionSpec::attack(*c, eps, a.alpha, a.iterations, a.topk_ratio)),
                }
            }
        }
        if h.conditions.contains(&Condition::Advla) {
            for &t in &h.iteration_grid {
                push(ConditionSpec::attack(Condition::Advla, h.iteration_epsilon, a.alpha, t, a.topk_ratio));
            }
        }
        grid
    }

    /// Runs `trials` paired episodes per grid cell. Episode `i` starts from
    /// the same scene and uses the same frame seeds under every condition.
    pub fn evaluate_suite(&self, grid: &[ConditionSpec], trials: usize, mode: Parallelism) -> Result<MetricsTable> {
        if trials == 0 {
            return Err(Error::config("harness.trials", "must be at least 1"));
        }
        let scenes: Vec<SceneSpec> = (0..trials).map(|i| self.episode_scene(i)).collect();
        let records: Vec<Result<EpisodeRecord>> = map_indexed(grid.len() * trials, mode, |job| {
            let (cell, trial) = (job / trials, job % trials);
            self.run_episode(&scenes[trial], &grid[cell], self.episode_seed(trial))
        });
        let mut records = records.into_iter();
        let mut rows = Vec::with_capacity(grid.len());
        for spec in grid {
            let cell: Vec<EpisodeRecord> = records.by_ref().take(trials).collect::<Result<_>>()?;
            rows.push(MetricsRow::aggregate(spec, &cell));
        }
        Ok(MetricsTable { rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub condition: Condition,
    pub epsilon: f64,
    pub alpha: f64,
    pub iters: usize,
    pub ratio: f64,
    pub trials: usize,
    pub sr: f64,
    pub fr: f64,
    pub mean_loss: f64,
    pub mean_iter_seconds: f64,
    pub mean_patch_fraction: f64,
}

impl MetricsRow {
    pub fn aggregate(spec: &ConditionSpec, records: &[EpisodeRecord]) -> Self {
        let trials = records.len();
        let successes = records.iter().filter(|r| r.success).count();
        let sr = successes as f64 / trials as f64;
        let frames: usize = records.iter().map(|r| r.losses.len()).sum();
        let mean_of = |f: fn(&EpisodeRecord) -> &Vec<f64>| {
            if frames == 0 {
                0.0
            } else {
                records.iter().flat_map(|r| f(r).iter()).sum::<f64>() / frames as f64
            }
        };
        Self {
            condition: spec.condition,
            epsilon: spec.epsilon,
            alpha: spec.alpha,
            iters: spec.iterations,
            ratio: spec.ratio,
            trials,
            sr,
            fr: (trials - successes) as f64 / trials as f64,
            mean_loss: mean_of(|r| &r.losses),
            mean_iter_seconds: mean_of(|r| &r.attack_seconds),
            mean_patch_fraction: mean_of(|r| &r.patch_fractions),
        }
    }
}

pub const METRICS_HEADER: &str =
    "condition,epsilon,alpha,iters,ratio,trials,sr,fr,mean_loss,mean_iter_seconds,mean_patch_fraction";

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn find(&self, condition: Condition, epsilon: f64, iters: Option<usize>) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| {
            r.condition == condition && (r.epsilon - epsilon).abs() < 1e-12 && iters.map_or(true, |t| r.iters == t)
        })
    }

    /// With `timing` off the seconds column is written as 0.
    pub fn write_csv<W: Write>(&self, mut out: W, timing: bool) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in &self.rows {
            let secs = if timing { r.mean_iter_seconds } else { 0.0 };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.condition.name(),
                r.epsilon,
                r.alpha,
                r.iters,
                r.ratio,
                r.trials,
                r.sr,
                r.fr,
                r.mean_loss,
                secs,
                r.mean_patch_fraction
            )?;
        }
        Ok(())
    }

    /// Places where FR drops as the budget grows (same condition and
    /// iteration count) or as iterations grow (same condition and budget).
    pub fn monotonicity_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let attacked = |r: &&MetricsRow| r.condition != Condition::Clean;
        for a in self.rows.iter().filter(attacked) {
            for b in self.rows.iter().filter(attacked) {
                if a.condition != b.condition || a.fr <= b.fr {
                    continue;
                }
                let budget_order = a.iters == b.iters && a.epsilon < b.epsilon;
                let iter_order = (a.epsilon - b.epsilon).abs() < 1e-12 && a.iters < b.iters;
                if budget_order || iter_order {
                    out.push(format!(
                        "{}: FR {} at eps={:.6} T={} exceeds FR {} at eps={:.6} T={}",
                        a.condition.name(),
                        a.fr,
                        a.epsilon,
                        a.iters,
                        b.fr,
                        b.epsilon,
                        b.iters
                    ));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRun {
    pub total_seconds: f64,
    pub iter_seconds: Vec<f64>,
}

impl BenchRun {
    pub fn mean_iter_seconds(&self) -> f64 {
        self.iter_seconds.iter().sum::<f64>() / self.iter_seconds.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub iterations: usize,
    pub runs: Vec<BenchRun>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => 0.0,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl BenchReport {
    fn per_iteration(&self) -> Vec<f64> {
        self.runs.iter().map(BenchRun::mean_iter_seconds).collect()
    }

    pub fn mean(&self) -> f64 {
        let v = self.per_iteration();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn median(&self) -> f64 {
        median(self.per_iteration())
    }

    /// Sample standard deviation of the per-run iteration means.
    pub fn stddev(&self) -> f64 {
        let v = self.per_iteration();
        if v.len() < 2 {
            return 0.0;
        }
        let m = self.mean();
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }

    pub fn median_total(&self) -> f64 {
        median(self.runs.iter().map(|r| r.total_seconds).collect())
    }

    /// One row per repeat: `repeat,iterations,total_seconds,mean_iter_seconds`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "repeat,iterations,total_seconds,mean_iter_seconds")?;
        for (i, r) in self.runs.iter().enumerate() {
            writeln!(out, "{i},{},{},{}", self.iterations, r.total_seconds, r.mean_iter_seconds())?;
        }
        Ok(())
    }
}

/// Times `repeats` full attacks on one image. Totals come from
/// [`attack::AttackResult::total_seconds`]: clean reference pass, guidance
/// and the PGD loop.
pub fn bench_iteration_time(enc: &VisionEncoder, image: &Tensor, cfg: &AttackConfig, repeats: usize) -> Result<BenchReport> {
    if repeats < 10 {
        return Err(Error::config("repeats", "must be at least 10"));
    }
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let cfg = AttackConfig {
            seed: cfg.seed.wrapping_add(r as u64),
            ..cfg.clone()
        };
        let result = attack::run_attack(enc, image, &cfg)?;
        runs.push(BenchRun {
            total_seconds: result.total_seconds,
            iter_seconds: result.iter_seconds,
        });
    }
    Ok(BenchReport {
        iterations: cfg.iterations,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            image_h: 16,
            image_w: 16,
            patch_size: 4,
            embed_dim: 16,
            num_blocks: 1,
            num_heads: 2,
            proj_dim: 8,
            ..Default::default()
        }
    }

    fn plain_scene(agent: [f64; 2], goal: [f64; 2]) -> SceneSpec {
        SceneSpec {
            agent,
            goal,
            agent_radius: 3.0,
            goal_radius: 3.0,
            background: 0.3,
            distractors: Vec::new(),
            rng_seed: 0,
        }
    }

    fn small_surrogate() -> Surrogate {
        let harness = HarnessConfig {
            train_scenes: 200,
            max_steps: 6,
            ..Default::default()
        };
        let attack = AttackConfig {
            iterations: 2,
            ..Default::default()
        };
        Surrogate::build(small_encoder(), harness, attack, 3).unwrap()
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small_encoder();
        let free = SceneConfig {
            goal: None,
            ..Default::default()
        };
        let spec = free.sample(11, 0.3);
        assert_ne!(spec.goal, [0.5, 0.5]);
        assert_eq!(render_scene(&spec, &cfg).unwrap(), render_scene(&spec, &cfg).unwrap());
    }

    #[test]
    fn agent_channel_peaks_at_the_agent_center() {
        let cfg = EncoderConfig {
            image_h: 33,
            image_w: 33,
            ..small_encoder()
        };
        let img = render_scene(&plain_scene([0.5, 0.5], [0.1, 0.1]), &cfg).unwrap();
        let red = &img.data()[..33 * 33];
        let best = red.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(red[16 * 33 + 16], best);
        assert!((best - AGENT_COLOR[0]).abs() < 1e-12);
    }

    #[test]
    fn moving_the_agent_touches_only_its_boxes() {
        let cfg = EncoderConfig {
            image_h: 32,
            image_w: 32,
            ..small_encoder()
        };
        let before = plain_scene([0.3, 0.4], [0.8, 0.8]);
        let after = SceneSpec {
            agent: [0.45, 0.35],
            ..before.clone()
        };
        let a = render_scene(&before, &cfg).unwrap();
        let b = render_scene(&after, &cfg).unwrap();
        // Oracle: exact disc extent in pixels plus a one-pixel fringe.
        let near = |spec: &SceneSpec, x: usize, y: usize| {
            let (cx, cy) = (spec.agent[0] * 32.0, spec.agent[1] * 32.0);
            let r = spec.agent_radius + 1.0;
            (x as f64 + 0.5 - cx).abs() <= r + 0.5 && (y as f64 + 0.5 - cy).abs() <= r + 0.5
        };
        let mut changed = 0;
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let i = c * 1024 + y * 32 + x;
                    if a.data()[i] != b.data()[i] {
                        changed += 1;
                        assert!(near(&before, x, y) || near(&after, x, y), "pixel ({x}, {y}) changed");
                    }
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let cfg = small_encoder();
        assert!(render_scene(&plain_scene([1.2, 0.5], [0.5, 0.5]), &cfg).is_err());
        let tiny = SceneSpec {
            goal_radius: 1.5,
            ..plain_scene([0.2, 0.5], [0.5, 0.5])
        };
        assert!(render_scene(&tiny, &cfg).is_err());
    }

    #[test]
    fn sampler_respects_fixed_goal_and_start_distance() {
        let sc = SceneConfig::default();
        for seed in 0..50 {
            let s = sc.sample(seed, 0.45);
            assert_eq!(s.goal, [0.5, 0.5]);
            assert!((s.agent[0] - 0.5).hypot(s.agent[1] - 0.5) >= 0.45);
            s.validate().unwrap();
        }
        let bad = SceneConfig {
            goal: Some([0.02, 0.5]),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn synthetic(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<[f64; 2]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y = x
            .iter()
            .map(|r| [2.0 * r[0] - r[2] + 0.5, r[1] + 3.0 * r[3] - 1.0])
            .collect();
        (x, y)
    }

    #[test]
    fn ridge_recovers_a_linear_map() {
        let (x, y) = synthetic(300, 1);
        let head = fit_ridge(&x, &y, 1e-10).unwrap();
        let want = [2.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 3.0];
        for (w, t) in head.weights.data().iter().zip(want) {
            assert!((w - t).abs() < 1e-6, "{w} vs {t}");
        }
        assert!((head.bias[0] - 0.5).abs() < 1e-6 && (head.bias[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn ridge_vanishes_for_huge_lambda() {
        let (x, y) = synthetic(100, 2);
        let head = fit_ridge(&x, &y, 1e12).unwrap();
        assert!(head.weights.max_abs() < 1e-10);
        let prior = fit_ridge(&x, &y, 1e2).unwrap().weights.max_abs();
        assert!(head.weights.max_abs() < prior);
    }

    #[test]
    fn duplicated_rows_leave_ridge_unchanged() {
        let (x, y) = synthetic(120, 3);
        let once = fit_ridge(&x, &y, 0.1).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<[f64; 2]> = y.iter().chain(&y).copied().collect();
        let twice = fit_ridge(&x2, &y2, 0.1).unwrap();
        for (a, b) in once.weights.data().iter().zip(twice.weights.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(fit_ridge(&x, &y, 0.0).is_err());
    }

    #[test]
    fn start_on_goal_succeeds_without_steps() {
        let s = small_surrogate();
        let init = plain_scene([0.5, 0.5], [0.5, 0.5]);
        for spec in [ConditionSpec::clean(), ConditionSpec::attack(Condition::Tkm, 0.03, 0.01, 2, 0.2)] {
            let r = s.run_episode(&init, &spec, 9).unwrap();
            assert!(r.success);
            assert_eq!(r.steps, 0);
            assert!(r.losses.is_empty());
        }
    }

    #[test]
    fn zero_budget_matches_clean_trajectory() {
        let s = small_surrogate();
        let init = s.episode_scene(0);
        let clean = s.run_episode(&init, &ConditionSpec::clean(), 5).unwrap();
        assert!(clean.steps > 0);
        for cond in [Condition::Advla, Condition::Aw, Condition::Tkm, Condition::Tkl] {
            let r = s.run_episode(&init, &ConditionSpec::attack(cond, 0.0, 1.0 / 255.0, 3, 0.1), 5).unwrap();
            assert_eq!(r.final_agent, clean.final_agent, "{}", cond.name());
            assert_eq!((r.steps, r.success), (clean.steps, clean.success));
        }
        let r = s.run_episode(&init, &ConditionSpec::random(0.0), 5).unwrap();
        assert_eq!(r.final_agent, clean.final_agent);
    }

    #[test]
    fn episodes_respect_step_limit() {
        let s = small_surrogate();
        for trial in 0..4 {
            let r = s
                .run_episode(&s.episode_scene(trial), &ConditionSpec::random(0.1), s.episode_seed(trial))
                .unwrap();
            assert!(r.steps <= s.harness.max_steps);
            assert_eq!(r.losses.len(), r.steps);
        }
    }

    #[test]
    fn suite_is_paired_and_reproducible() {
        let s = small_surrogate();
        let grid = [ConditionSpec::clean(), ConditionSpec::random(4.0 / 255.0)];
        let a = s.evaluate_suite(&grid, 3, Parallelism::Parallel).unwrap();
        let b = s.evaluate_suite(&grid, 3, Parallelism::Sequential).unwrap();
        assert_eq!(a, b);
        for r in &a.rows {
            assert_eq!(r.sr + r.fr, 1.0);
            assert_eq!(r.trials, 3);
        }
        let mut csv = Vec::new();
        a.write_csv(&mut csv, false).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next(), Some(METRICS_HEADER));
        assert_eq!(text.lines().count(), 3);
        assert!(s.evaluate_suite(&grid, 0, Parallelism::Sequential).is_err());
    }

    #[test]
    fn default_grid_layout() {
        let s = small_surrogate();
        let grid = s.default_grid();
        assert_eq!(grid[0], ConditionSpec::clean());
        // CLEAN, 3 budgets × 5 conditions, then T ∈ {4, 5, 6} at 4/255 for ADVLA.
        assert_eq!(grid.len(), 1 + 15 + 3);
        let sweep: Vec<usize> = grid[16..].iter().map(|c| c.iterations).collect();
        assert_eq!(sweep, [4, 5, 6]);
    }

    #[test]
    fn monotonicity_diagnostics() {
        let row = |eps: f64, iters: usize, fr: f64| MetricsRow {
            condition: Condition::Advla,
            epsilon: eps,
            alpha: 0.0,
            iters,
            ratio: 0.1,
            trials: 10,
            sr: 1.0 - fr,
            fr,
            mean_loss: 0.0,
            mean_iter_seconds: 0.0,
            mean_patch_fraction: 0.0,
        };
        let ok = MetricsTable {
            rows: vec![row(0.1, 8, 0.2), row(0.2, 8, 0.5), row(0.2, 9, 0.6)],
        };
        assert!(ok.monotonicity_violations().is_empty());
        let bad = MetricsTable {
            rows: vec![row(0.1, 8, 0.7), row(0.2, 8, 0.5)],
        };
        assert_eq!(bad.monotonicity_violations().len(), 1);
    }

    #[test]
    fn bench_writes_one_row_per_repeat() {
        let enc = VisionEncoder::new(small_encoder()).unwrap();
        let image = render_scene(&plain_scene([0.3, 0.3], [0.7, 0.7]), enc.config()).unwrap();
        let cfg = AttackConfig {
            iterations: 2,
            ..Default::default()
        };
        assert!(bench_iteration_time(&enc, &image, &cfg, 9).is_err());
        let report = bench_iteration_time(&enc, &image, &cfg, 10).unwrap();
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(report.mean() > 0.0 && report.stddev() >= 0.0);
    }

    #[test]
    fn median_and_seeds() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_ne!(derive_seed(1, SCENE_STREAM, 0), derive_seed(1, EPISODE_STREAM, 0));
        assert_ne!(derive_seed(1, SCENE_STREAM, 0), derive_seed(1, SCENE_STREAM, 1));
    }
}
