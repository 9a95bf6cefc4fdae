//! Feature-space PGD against the encoder + projector.
//!
//! Each frame: compute the clean projected features once, derive attention
//! guidance from the same clean pass, then take `T` signed-gradient ascent
//! steps on `1 - cos(F_t, F_clean)` inside the L∞ ball. The strategy decides
//! how guidance enters: weighting the gradient (AW), masking the gradient
//! (TKM) or masking the features inside the loss (TKL).

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::de_budget;
use crate::encoder::{Aggregation, AttentionRecord, VisionEncoder};
use crate::error::{Error, Result};
use crate::guidance::{FlatFeatureMask, Guidance};
use crate::io::PerturbationRecord;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Plain feature-space PGD.
    #[default]
    #[serde(rename = "BASE", alias = "ADVLA")]
    Base,
    /// Gradient weighted by the upsampled attention map.
    #[serde(rename = "AW")]
    Aw,
    /// Gradient restricted to the Top-K attention patches.
    #[serde(rename = "TKM")]
    Tkm,
    /// Loss restricted to the Top-K patch features.
    #[serde(rename = "TKL")]
    Tkl,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Base, Strategy::Aw, Strategy::Tkm, Strategy::Tkl];

    pub fn code(self) -> u32 {
        match self {
            Strategy::Base => 0,
            Strategy::Aw => 1,
            Strategy::Tkm => 2,
            Strategy::Tkl => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Base => "BASE",
            Strategy::Aw => "AW",
            Strategy::Tkm => "TKM",
            Strategy::Tkl => "TKL",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Init {
    #[default]
    Uniform,
    Gaussian,
}

/// How projected feature matrices are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// One cosine over the flattened `N×D` matrices.
    #[default]
    Flattened,
    /// Mean of per-patch cosines (over selected patches for TKL).
    PatchMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L∞ budget on the pixel perturbation.
    #[serde(deserialize_with = "de_budget")]
    pub epsilon: f64,
    #[serde(deserialize_with = "de_budget")]
    pub alpha: f64,
    pub iterations: usize,
    pub strategy: Strategy,
    pub topk_ratio: f64,
    pub init: Init,
    /// Standard deviation for Gaussian init; `epsilon / 2` when unset.
    #[serde(deserialize_with = "crate::config::de_opt_budget")]
    pub gaussian_sigma: Option<f64>,
    pub loss_eps: f64,
    pub seed: u64,
    /// Block whose attention drives guidance; the last block when unset.
    pub attention_block: Option<usize>,
    pub aggregation: Aggregation,
    pub recompute_mask_per_iter: bool,
    pub similarity: Similarity,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            alpha: 1.0 / 255.0,
            iterations: 6,
            strategy: Strategy::Base,
            topk_ratio: 0.1,
            init: Init::Uniform,
            gaussian_sigma: None,
            loss_eps: 1e-8,
            seed: 0,
            attention_block: None,
            aggregation: Aggregation::MeanHeadsMeanQueries,
            recompute_mask_per_iter: false,
            similarity: Similarity::Flattened,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config("attack.epsilon", "must lie in [0, 1]"));
        }
        if !(self.alpha >= 0.0 && self.alpha <= self.epsilon) {
            return Err(Error::config("attack.alpha", "must satisfy 0 <= alpha <= epsilon"));
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(Error::config("attack.topk_ratio", "must lie in (0, 1]"));
        }
        if !(self.loss_eps > 0.0 && self.loss_eps.is_finite()) {
            return Err(Error::config("attack.loss_eps", "must be positive"));
        }
        if let Some(s) = self.gaussian_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("attack.gaussian_sigma", "must be a finite nonnegative number"));
            }
        }
        Ok(())
    }
}

/// Samples the starting perturbation inside `[-epsilon, epsilon]`.
pub fn init_perturbation<R: Real>(shape: &[usize], cfg: &AttackConfig, rng: &mut impl Rng) -> Tensor<R> {
    let eps = cfg.epsilon;
    if eps == 0.0 {
        return Tensor::zeros(shape);
    }
    match cfg.init {
        Init::Uniform => Tensor::from_fn(shape, |_| R::from_f64_lossy(rng.gen_range(-eps..=eps))),
        Init::Gaussian => {
            let sigma = cfg.gaussian_sigma.unwrap_or(eps / 2.0);
            if sigma == 0.0 {
                return Tensor::zeros(shape);
            }
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            Tensor::from_fn(shape, |_| R::from_f64_lossy(normal.sample(rng).clamp(-eps, eps)))
        }
    }
}

/// Projected features of the clean frame, detached, plus the clean attention.
#[derive(Clone, Debug)]
pub struct CleanReference<R = f64> {
    pub features: Tensor<R>,
    pub attention: AttentionRecord<R>,
}

pub fn compute_clean_reference<R: Real>(enc: &VisionEncoder<R>, image: &Tensor<R>) -> Result<CleanReference<R>> {
    let feats = enc.features(image)?;
    Ok(CleanReference {
        features: feats.projected,
        attention: feats.attention,
    })
}

/// Guidance from the attention of the given record.
pub fn guidance_from_attention<R: Real>(
    enc: &VisionEncoder<R>,
    attention: &AttentionRecord<R>,
    cfg: &AttackConfig,
) -> Result<Guidance> {
    let scores = attention.scores(cfg.attention_block, cfg.aggregation)?;
    Guidance::from_scores(&scores, cfg.topk_ratio, enc.config())
}

/// Applies the gradient-side part of a strategy. AW multiplies by the weight
/// map and TKM by the pixel mask, both broadcast over channels; BASE and TKL
/// leave the gradient alone.
pub fn strategy_transform<R: Real>(
    grad: &Tensor<R>,
    guidance: Option<&Guidance>,
    strategy: Strategy,
) -> Result<Tensor<R>> {
    let plane = match strategy {
        Strategy::Base | Strategy::Tkl => return Ok(grad.clone()),
        Strategy::Aw => &guidance
            .ok_or_else(|| Error::invalid("strategy_transform", "AW needs a pixel weight map"))?
            .weight_map
            .values,
        Strategy::Tkm => &guidance
            .ok_or_else(|| Error::invalid("strategy_transform", "TKM needs a pixel mask"))?
            .pixel_mask
            .bits,
    };
    broadcast_channels(grad, plane, "strategy_transform")
}

/// `image ⊙ plane` for a `[C,H,W]` image and an `[H,W]` plane.
fn broadcast_channels<R: Real>(image: &Tensor<R>, plane: &Tensor<f64>, op: &'static str) -> Result<Tensor<R>> {
    let s = image.shape();
    if s.len() != 3 || plane.shape() != &s[1..] {
        return Err(Error::shape(op, s, plane.shape()));
    }
    let hw = s[1] * s[2];
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * R::from_f64_lossy(plane.data()[i % hw]);
    }
    Ok(out)
}

fn similarity<'t, R: Real>(
    a: &Var<'t, R>,
    b: &Var<'t, R>,
    kind: Similarity,
    eps: R,
    row_weights: Option<(&FlatFeatureMask, usize)>,
) -> Result<Var<'t, R>> {
    match kind {
        Similarity::Flattened => a.cosine_similarity(b, eps),
        Similarity::PatchMean => {
            let rows = a.cosine_rows(b, eps)?;
            let n = rows.value().numel();
            let tape_weights: Tensor<R> = match row_weights {
                Some((mask, k)) => {
                    let w = R::one() / R::from_usize(k).expect("k");
                    Tensor::from_fn(&[n], |i| if mask.bits()[i] { w } else { R::zero() })
                }
                None => Tensor::full(&[n], R::one() / R::from_usize(n).expect("n")),
            };
            let weights = a.tape().constant(tape_weights);
            Ok(rows.mul(&weights)?.sum())
        }
    }
}

/// `1 - sim(F_t ⊙ M, F_clean ⊙ M)` with the patch mask broadcast over
/// channels. Rows outside the mask contribute nothing.
pub fn tkl_loss<'t, R: Real>(
    features: &Var<'t, R>,
    reference: &Var<'t, R>,
    mask: &FlatFeatureMask,
    eps: R,
    kind: Similarity,
) -> Result<Var<'t, R>> {
    let k = mask.k_count();
    if k == 0 {
        return Err(Error::invalid("tkl_loss", "mask selects no patches"));
    }
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != mask.bits().len() {
        return Err(Error::shape("tkl_loss", &shape, &[mask.bits().len()]));
    }
    let m = features.tape().constant(mask.expand(shape[1]));
    let a = features.mul(&m)?;
    let b = reference.mul(&m)?;
    Ok(similarity(&a, &b, kind, eps, Some((mask, k)))?.affine(-R::one(), R::one()))
}

/// Plain base loss `1 - sim(F_t, F_clean)`.
pub fn feature_loss<'t, R: Real>(
    features: &Var<'t, R>,
    reference: &Var<'t, R>,
    eps: R,
    kind: Similarity,
) -> Result<Var<'t, R>> {
    Ok(similarity(features, reference, kind, eps, None)?.affine(-R::one(), R::one()))
}

fn strategy_loss<'t, R: Real>(
    features: &Var<'t, R>,
    reference: &Var<'t, R>,
    cfg: &AttackConfig,
    guidance: &Guidance,
) -> Result<Var<'t, R>> {
    let eps = R::from_f64_lossy(cfg.loss_eps);
    match cfg.strategy {
        Strategy::Tkl => tkl_loss(features, reference, &guidance.feature_mask, eps, cfg.similarity),
        _ => feature_loss(features, reference, eps, cfg.similarity),
    }
}

/// Loss of an image against the reference, without gradients.
pub fn evaluate_loss<R: Real>(
    enc: &VisionEncoder<R>,
    image: &Tensor<R>,
    reference: &Tensor<R>,
    cfg: &AttackConfig,
    guidance: &Guidance,
) -> Result<(f64, Tensor<R>)> {
    let tape = Tape::new();
    let x = tape.constant(image.clone());
    let (e, _) = enc.encode(&tape, x)?;
    let f = enc.project(&tape, e)?;
    let r = tape.constant(reference.clone());
    let loss = strategy_loss(&f, &r, cfg, guidance)?;
    Ok((loss.value().item().to_f64_lossy(), f.detach()))
}

/// Current iterate of one frame's optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackState<R = f64> {
    pub clean: Tensor<R>,
    pub adversarial: Tensor<R>,
    /// Accumulated perturbation, always inside `[-epsilon, epsilon]`.
    pub delta: Tensor<R>,
}

impl<R: Real> AttackState<R> {
    pub fn new(clean: Tensor<R>, delta: Tensor<R>) -> Result<Self> {
        let adversarial = clip_image(&clean, &delta)?;
        Ok(Self {
            clean,
            adversarial,
            delta,
        })
    }
}

fn clip_image<R: Real>(clean: &Tensor<R>, delta: &Tensor<R>) -> Result<Tensor<R>> {
    clean.zip_map(delta, |c, d| (c + d).max(R::zero()).min(R::one()))
}

fn sign<R: Real>(v: R) -> R {
    if v > R::zero() {
        R::one()
    } else if v < R::zero() {
        -R::one()
    } else {
        R::zero()
    }
}

/// What one PGD step observed at the pre-step iterate.
#[derive(Debug)]
pub struct StepOutcome<R = f64> {
    pub loss: f64,
    pub attention: AttentionRecord<R>,
}

/// One ascent step: gradient of the strategy loss at the current iterate,
/// strategy transform, signed step, projection onto the budget and [0, 1].
pub fn pgd_step<R: Real>(
    state: &mut AttackState<R>,
    enc: &VisionEncoder<R>,
    reference: &Tensor<R>,
    cfg: &AttackConfig,
    guidance: &Guidance,
) -> Result<StepOutcome<R>> {
    let tape = Tape::new();
    let x = tape.leaf(state.adversarial.clone(), true);
    let (e, attention) = enc.encode(&tape, x)?;
    let f = enc.project(&tape, e)?;
    let r = tape.constant(reference.clone());
    let loss = strategy_loss(&f, &r, cfg, guidance)?;
    let loss_value = loss.value().item().to_f64_lossy();
    let mut grads = tape.backward(loss)?;
    let grad = grads.take(&x).expect("image requires grad");
    if !loss_value.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite {
            context: format!("gradient of the {} loss (loss = {loss_value})", cfg.strategy.name()),
        });
    }
    let grad = strategy_transform(&grad, Some(guidance), cfg.strategy)?;

    let alpha = R::from_f64_lossy(cfg.alpha);
    let eps = R::from_f64_lossy(cfg.epsilon);
    for (d, &g) in state.delta.data_mut().iter_mut().zip(grad.data()) {
        *d = (*d + alpha * sign(g)).max(-eps).min(eps);
    }
    state.adversarial = clip_image(&state.clean, &state.delta)?;
    Ok(StepOutcome {
        loss: loss_value,
        attention,
    })
}

#[derive(Clone, Debug)]
pub struct AttackResult<R = f64> {
    pub strategy: Strategy,
    pub adversarial: Tensor<R>,
    /// Effective perturbation `adversarial - clean`.
    pub perturbation: Tensor<R>,
    /// Loss at the initial iterate and after every step.
    pub loss_trace: Vec<f64>,
    pub iter_seconds: Vec<f64>,
    /// Wall time of the clean reference pass (when computed by
    /// [`run_attack`]), guidance and the PGD loop. The closing evaluation
    /// of the final iterate is a measurement and is not counted.
    pub total_seconds: f64,
    pub modified_patch_fraction: f64,
    pub max_abs_perturbation: f64,
    pub guidance: Guidance,
    /// Projected features of the final adversarial image.
    pub final_features: Tensor<R>,
}

impl<R: Real> AttackResult<R> {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is never empty")
    }

    pub fn mean_iter_seconds(&self) -> f64 {
        if self.iter_seconds.is_empty() {
            0.0
        } else {
            self.iter_seconds.iter().sum::<f64>() / self.iter_seconds.len() as f64
        }
    }

    pub fn record(&self, clean: &Tensor<R>, patch_size: usize) -> PerturbationRecord {
        let s = self.adversarial.shape();
        PerturbationRecord {
            height: s[1],
            width: s[2],
            patch_size,
            strategy_code: self.strategy.code(),
            perturbation: self.perturbation.cast(),
            clean: clean.cast(),
            weight_map: self.guidance.weight_map.values.clone(),
            pixel_mask: self.guidance.pixel_mask.bits.clone(),
        }
    }

    /// CSV `iter,loss,seconds`; row 0 is the initial iterate and has no
    /// timing. With `timing` off the seconds column is written as 0.
    pub fn write_trace_csv<W: Write>(&self, mut out: W, timing: bool) -> Result<()> {
        writeln!(out, "iter,loss,seconds")?;
        for (i, loss) in self.loss_trace.iter().enumerate() {
            let secs = match i {
                0 => 0.0,
                _ if timing => self.iter_seconds[i - 1],
                _ => 0.0,
            };
            writeln!(out, "{i},{loss:e},{secs:e}")?;
        }
        Ok(())
    }
}

/// Fraction of patches with at least one changed pixel in any channel.
pub fn modified_patch_fraction<R: Real>(clean: &Tensor<R>, adversarial: &Tensor<R>, patch_size: usize) -> f64 {
    let s = clean.shape();
    let (h, w) = (s[1], s[2]);
    let gw = w / patch_size;
    let mut touched = vec![false; (h / patch_size) * gw];
    for (i, (a, b)) in clean.data().iter().zip(adversarial.data()).enumerate() {
        if a != b {
            let p = i % (h * w);
            let (y, x) = (p / w, p % w);
            touched[(y / patch_size) * gw + x / patch_size] = true;
        }
    }
    touched.iter().filter(|&&t| t).count() as f64 / touched.len() as f64
}

/// Runs the full attack on one frame with guidance derived from the clean
/// frame's attention.
pub fn run_attack<R: Real>(enc: &VisionEncoder<R>, image: &Tensor<R>, cfg: &AttackConfig) -> Result<AttackResult<R>> {
    cfg.validate()?;
    let start = Instant::now();
    let reference = compute_clean_reference(enc, image)?;
    let guidance = guidance_from_attention(enc, &reference.attention, cfg)?;
    let prep_seconds = start.elapsed().as_secs_f64();
    let mut result = run_attack_with_guidance(enc, image, &reference.features, cfg, guidance)?;
    result.total_seconds += prep_seconds;
    Ok(result)
}

/// The PGD loop with externally supplied reference features and guidance.
pub fn run_attack_with_guidance<R: Real>(
    enc: &VisionEncoder<R>,
    image: &Tensor<R>,
    reference: &Tensor<R>,
    cfg: &AttackConfig,
    mut guidance: Guidance,
) -> Result<AttackResult<R>> {
    cfg.validate()?;
    enc.check_image(image)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delta: Tensor<R> = init_perturbation(image.shape(), cfg, &mut rng);
    if cfg.strategy == Strategy::Tkm {
        delta = broadcast_channels(&delta, &guidance.pixel_mask.bits, "init_perturbation")?;
    }
    let mut state = AttackState::new(image.clone(), delta)?;

    let mut loss_trace = Vec::with_capacity(cfg.iterations + 1);
    let mut iter_seconds = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let t0 = Instant::now();
        let outcome = pgd_step(&mut state, enc, reference, cfg, &guidance)?;
        iter_seconds.push(t0.elapsed().as_secs_f64());
        loss_trace.push(outcome.loss);
        if cfg.recompute_mask_per_iter {
            guidance = guidance_from_attention(enc, &outcome.attention, cfg)?;
        }
    }
    let total_seconds = start.elapsed().as_secs_f64();
    let (final_loss, final_features) = evaluate_loss(enc, &state.adversarial, reference, cfg, &guidance)?;
    loss_trace.push(final_loss);

    let perturbation = state.adversarial.zip_map(&state.clean, |a, c| a - c)?;
    let patch = enc.config().patch_size;
    Ok(AttackResult {
        strategy: cfg.strategy,
        modified_patch_fraction: modified_patch_fraction(&state.clean, &state.adversarial, patch),
        max_abs_perturbation: perturbation.max_abs().to_f64_lossy(),
        perturbation,
        adversarial: state.adversarial,
        loss_trace,
        iter_seconds,
        total_seconds,
        guidance,
        final_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_h: 16,
            image_w: 16,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            proj_dim: 6,
            ..EncoderConfig::default()
        }
    }

    fn image(cfg: &EncoderConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&cfg.image_shape(), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_budget_init_is_exactly_zero() {
        let cfg = AttackConfig {
            epsilon: 0.0,
            alpha: 0.0,
            ..AttackConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Tensor<f64> = init_perturbation(&[3, 4, 4], &cfg, &mut rng);
        assert!(d.data().iter().all(|&v| v == 0.0));
        let g = AttackConfig { init: Init::Gaussian, ..cfg };
        let d: Tensor<f64> = init_perturbation(&[3, 4, 4], &g, &mut rng);
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_stays_in_budget() {
        let cfg = AttackConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d: Tensor<f64> = init_perturbation(&[100_000], &cfg, &mut rng);
        assert!(d.max_abs() <= cfg.epsilon);
        let g = AttackConfig {
            init: Init::Gaussian,
            gaussian_sigma: Some(cfg.epsilon * 3.0),
            ..cfg.clone()
        };
        let d: Tensor<f64> = init_perturbation(&[100_000], &g, &mut rng);
        assert!(d.max_abs() <= cfg.epsilon);
        // with a wide Gaussian the clip is active
        assert_eq!(d.max_abs(), cfg.epsilon);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = [
            AttackConfig { alpha: 0.1, ..AttackConfig::default() },
            AttackConfig { epsilon: -0.1, ..AttackConfig::default() },
            AttackConfig { topk_ratio: 0.0, ..AttackConfig::default() },
            AttackConfig { loss_eps: 0.0, ..AttackConfig::default() },
        ];
        for b in bad {
            assert!(matches!(b.validate(), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn transform_identities() {
        let cfg = small();
        let g = image(&cfg, 2).map(|v| v - 0.5);
        let neutral = Guidance::neutral(&cfg);
        assert_eq!(strategy_transform(&g, Some(&neutral), Strategy::Aw).unwrap(), g);
        assert_eq!(strategy_transform(&g, None, Strategy::Base).unwrap(), g);
        assert_eq!(strategy_transform(&g, None, Strategy::Tkl).unwrap(), g);
        assert!(strategy_transform(&g, None, Strategy::Aw).is_err());
        assert!(strategy_transform(&g, None, Strategy::Tkm).is_err());

        let mut zero = neutral.clone();
        zero.pixel_mask.bits = Tensor::zeros(&[16, 16]);
        zero.weight_map.values = Tensor::from_fn(&[16, 16], |i| (i % 3) as f64);
        let t = strategy_transform(&g, Some(&zero), Strategy::Tkm).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        let t = strategy_transform(&g, Some(&zero), Strategy::Aw).unwrap();
        for (i, v) in t.data().iter().enumerate() {
            if (i % 256) % 3 == 0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn zero_step_keeps_state() {
        let ecfg = small();
        let enc = VisionEncoder::new(ecfg.clone()).unwrap();
        let img = image(&ecfg, 4).map(|v| 0.1 + 0.8 * v);
        let cfg = AttackConfig {
            alpha: 0.0,
            ..AttackConfig::default()
        };
        let reference = compute_clean_reference(&enc, &img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = AttackState::new(img.clone(), init_perturbation(img.shape(), &cfg, &mut rng)).unwrap();
        let before = state.clone();
        let out = pgd_step(&mut state, &enc, &reference.features, &cfg, &Guidance::neutral(&ecfg)).unwrap();
        assert_eq!(state, before);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn first_step_moves_every_pixel_by_alpha() {
        let ecfg = small();
        let enc = VisionEncoder::new(ecfg.clone()).unwrap();
        let img = image(&ecfg, 5).map(|v| 0.2 + 0.6 * v);
        let cfg = AttackConfig::default();
        let reference = compute_clean_reference(&enc, &img).unwrap();
        // start away from the stationary point so the gradient is dense
        let shifted = image(&ecfg, 6).map(|v| 0.2 + 0.6 * v);
        let mut state = AttackState::new(shifted.clone(), Tensor::zeros(img.shape())).unwrap();
        pgd_step(&mut state, &enc, &reference.features, &cfg, &Guidance::neutral(&ecfg)).unwrap();
        for (a, c) in state.adversarial.data().iter().zip(shifted.data()) {
            assert!(((a - c).abs() - cfg.alpha).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_iterations_return_clipped_init() {
        let ecfg = small();
        let enc = VisionEncoder::new(ecfg.clone()).unwrap();
        let img = image(&ecfg, 8);
        let cfg = AttackConfig {
            iterations: 0,
            ..AttackConfig::default()
        };
        let res = run_attack(&enc, &img, &cfg).unwrap();
        assert_eq!(res.loss_trace.len(), 1);
        assert!(res.iter_seconds.is_empty());
        assert!(res.max_abs_perturbation <= cfg.epsilon + 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d: Tensor<f64> = init_perturbation(img.shape(), &cfg, &mut rng);
        assert_eq!(res.adversarial, clip_image(&img, &d).unwrap());
    }

    #[test]
    fn tkl_full_mask_equals_base_and_ignores_unmasked_rows() {
        let ecfg = small();
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::from_fn(&[16, 6], |_| rng.gen_range(-1.0..1.0));
        let r = Tensor::from_fn(&[16, 6], |_| rng.gen_range(-1.0..1.0));
        let fv = tape.constant(f.clone());
        let rv = tape.constant(r.clone());
        let full = crate::guidance::flatten_mask(&crate::guidance::PatchMask::full(16));
        let base = feature_loss(&fv, &rv, 1e-8, Similarity::Flattened).unwrap();
        let tkl = tkl_loss(&fv, &rv, &full, 1e-8, Similarity::Flattened).unwrap();
        assert_eq!(base.value().item(), tkl.value().item());

        let same = tkl_loss(&rv, &rv, &full, 1e-8, Similarity::Flattened).unwrap();
        assert!(f64::abs(same.value().item()) < 1e-8, "only the epsilon in the denominator separates cos from 1");

        let bits: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        let mask = crate::guidance::flatten_mask(&crate::guidance::PatchMask::from_bits(bits.clone()));
        let mut f2 = f.clone();
        for (i, v) in f2.data_mut().iter_mut().enumerate() {
            if !bits[i / 6] {
                *v = 100.0 * (i as f64).sin();
            }
        }
        let a = tkl_loss(&fv, &rv, &mask, 1e-8, Similarity::Flattened).unwrap();
        let b = tkl_loss(&tape.constant(f2), &rv, &mask, 1e-8, Similarity::Flattened).unwrap();
        assert!((a.value().item() - b.value().item()).abs() < 1e-12);

        let empty = crate::guidance::flatten_mask(&crate::guidance::PatchMask::from_bits(vec![false; 16]));
        assert!(tkl_loss(&fv, &rv, &empty, 1e-8, Similarity::Flattened).is_err());
        let _ = ecfg;
    }

    #[test]
    fn trace_csv_layout() {
        let ecfg = small();
        let enc = VisionEncoder::new(ecfg.clone()).unwrap();
        let cfg = AttackConfig {
            iterations: 2,
            ..AttackConfig::default()
        };
        let res = run_attack(&enc, &image(&ecfg, 1), &cfg).unwrap();
        let mut out = Vec::new();
        res.write_trace_csv(&mut out, false).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,loss,seconds");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("2,"));
        assert!(lines[3].ends_with(",0e0"));
    }
}
