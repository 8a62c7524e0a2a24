//! Denoising-diffusion core: linear noise schedule, forward process,
//! epsilon-prediction loss, DDPM/DDIM reverse steps and guided sampling.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1` standing for
//! clean data. Coefficients are kept in `f64`; images are `f32`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serializable parameters of a linear beta schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    /// `beta[t - 1]` for `t = 1..=T`.
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`, `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

/// Linear schedule with both endpoints included.
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps < 1 {
        return Err(Error::InvalidSchedule("at least one timestep is required".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect()
    };
    let mut alpha_bar = Vec::with_capacity(timesteps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            timesteps,
            beta_start,
            beta_end,
        },
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// Defined for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn q_sample(x0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    schedule.check(t)?;
    same_len(x0.len(), eps.len())?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Mean squared error over all elements, accumulated in `f64`.
pub fn training_loss(eps_hat: &[f32], eps: &[f32]) -> Result<f64> {
    same_len(eps_hat.len(), eps.len())?;
    if eps.is_empty() {
        return Err(Error::ShapeMismatch("loss over an empty tensor".into()));
    }
    let sum: f64 = eps_hat
        .iter()
        .zip(eps)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / eps.len() as f64)
}

/// Gradient of [`training_loss`] with respect to `eps_hat`, times `scale`.
pub fn training_loss_grad(eps_hat: &[f32], eps: &[f32], scale: f64) -> Vec<f32> {
    let k = (2.0 * scale / eps.len() as f64) as f32;
    eps_hat.iter().zip(eps).map(|(&a, &b)| k * (a - b)).collect()
}

/// Classifier-free guidance, written as `(1 - w) * u + w * c` so that the
/// `w = 0` and `w = 1` cases return their input bit-for-bit.
pub fn cfg_combine(eps_uncond: &[f32], eps_cond: &[f32], w: f32) -> Vec<f32> {
    assert_eq!(eps_uncond.len(), eps_cond.len(), "guidance operands differ in size");
    eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(&u, &c)| (1.0 - w) * u + w * c)
        .collect()
}

/// `(x_t - sqrt(1 - alpha_bar[t]) * eps) / sqrt(alpha_bar[t])`, optionally clamped.
pub fn predict_x0(x_t: &[f32], eps_hat: &[f32], t: usize, schedule: &NoiseSchedule, clamp: bool) -> Vec<f32> {
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let v = ((x as f64 - sb * e as f64) / sa) as f32;
            if clamp {
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect()
}

/// DDIM transition from `t` to `t_prev`; `noise` is required when `eta > 0`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: &[f32],
    eps_hat: &[f32],
    t: usize,
    t_prev: usize,
    eta: f64,
    schedule: &NoiseSchedule,
    noise: Option<&[f32]>,
    clamp: bool,
) -> Result<Vec<f32>> {
    schedule.check(t)?;
    if t_prev >= t {
        return Err(Error::InvalidSchedule(format!(
            "DDIM steps must descend, got {t} -> {t_prev}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    same_len(x_t.len(), eps_hat.len())?;
    let (ab_t, ab_p) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)).sqrt();
    let x0 = predict_x0(x_t, eps_hat, t, schedule, clamp);
    // a clamped x0 no longer matches eps_hat, so the direction uses the noise it implies
    let eps: Vec<f32> = if clamp {
        let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        x_t.iter().zip(&x0).map(|(&x, &x0)| ((x as f64 - sa * x0 as f64) / sb) as f32).collect()
    } else {
        eps_hat.to_vec()
    };
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let sp = ab_p.sqrt();
    let noise = match noise {
        Some(n) if sigma > 0.0 => {
            same_len(n.len(), x_t.len())?;
            Some(n)
        }
        None if sigma > 0.0 => {
            return Err(Error::Config("stochastic DDIM step needs noise".into()));
        }
        _ => None,
    };
    Ok((0..x_t.len())
        .map(|i| {
            let mut v = sp * x0[i] as f64 + dir * eps[i] as f64;
            if let Some(n) = noise {
                v += sigma * n[i] as f64;
            }
            v as f32
        })
        .collect())
}

/// Ancestral DDPM step from `t` to `t - 1`. No noise is added at `t = 1`.
pub fn ddpm_step(
    x_t: &[f32],
    eps_hat: &[f32],
    t: usize,
    schedule: &NoiseSchedule,
    noise: &[f32],
    clamp: bool,
) -> Result<Vec<f32>> {
    schedule.check(t)?;
    same_len(x_t.len(), eps_hat.len())?;
    same_len(x_t.len(), noise.len())?;
    let (ab_t, ab_p) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let beta = schedule.beta(t);
    let c1 = ab_p.sqrt() * beta / (1.0 - ab_t);
    let c2 = schedule.alpha(t).sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
    let std = if t == 1 { 0.0 } else { schedule.posterior_variance(t).sqrt() };
    let x0 = predict_x0(x_t, eps_hat, t, schedule, clamp);
    Ok((0..x_t.len())
        .map(|i| (c1 * x0[i] as f64 + c2 * x_t[i] as f64 + std * noise[i] as f64) as f32)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM step count. DDPM always walks every timestep.
    pub steps: usize,
    pub eta: f64,
    pub guidance_scale: f32,
    pub seed: u64,
    pub clamp_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            guidance_scale: 3.0,
            seed: 0,
            clamp_x0: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.kind == SamplerKind::Ddim && (self.steps < 1 || self.steps > schedule.timesteps()) {
            return Err(Error::Config(format!(
                "sampler steps must lie in 1..={}, got {}",
                schedule.timesteps(),
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::Config(format!(
                "guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Evenly spaced DDIM timesteps, descending: `round(k * T / S)` for `k = S..=1`.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .rev()
        .map(|k| ((k * timesteps) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Which text input the predictor should use for one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextBranch {
    Conditional,
    /// The null text embedding. Image prompts are left in place.
    Unconditional,
}

/// A noise predictor with its prompt already bound. Called with a batch
/// `x_t` of shape `(n, c, h, w)` and a shared timestep.
pub trait EpsPredictor {
    fn predict(&mut self, x_t: &Tensor<f32>, t: usize, branch: TextBranch) -> Result<Tensor<f32>>;
}

impl<F> EpsPredictor for F
where
    F: FnMut(&Tensor<f32>, usize, TextBranch) -> Result<Tensor<f32>>,
{
    fn predict(&mut self, x_t: &Tensor<f32>, t: usize, branch: TextBranch) -> Result<Tensor<f32>> {
        self(x_t, t, branch)
    }
}

/// Seed of chain `index` within a sampling call.
pub fn chain_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `n` independent chains from `x_T ~ N(0, I)`, where chain `i` draws all
/// of its noise from `chain_seed(config.seed, i)`. Returns the final
/// batch clamped to `[-1, 1]`.
pub fn sample(
    predictor: &mut dyn EpsPredictor,
    shape: [usize; 4],
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let seeds: Vec<u64> = (0..shape[0]).map(|i| chain_seed(config.seed, i)).collect();
    sample_chains(predictor, shape, config, schedule, &seeds)
}

/// As [`sample`], with an explicit noise seed per chain; `config.seed` is
/// ignored.
pub fn sample_chains(
    predictor: &mut dyn EpsPredictor,
    shape: [usize; 4],
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Tensor<f32>> {
    config.validate(schedule)?;
    let n = shape[0];
    if seeds.len() != n {
        return Err(Error::ShapeMismatch(format!("{} chain seeds for {n} chains", seeds.len())));
    }
    let per = shape[1] * shape[2] * shape[3];
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Vec<f32> {
        let mut v = Vec::with_capacity(n * per);
        for rng in rngs.iter_mut() {
            v.extend((0..per).map(|_| rng.sample::<f32, _>(StandardNormal)));
        }
        v
    };
    let mut x = draw(&mut rngs);
    let ts: Vec<(usize, usize)> = match config.kind {
        SamplerKind::Ddim => {
            let ts = ddim_timesteps(schedule.timesteps(), config.steps);
            let prev = ts.iter().skip(1).copied().chain(std::iter::once(0));
            ts.iter().copied().zip(prev).collect()
        }
        SamplerKind::Ddpm => (1..=schedule.timesteps()).rev().map(|t| (t, t - 1)).collect(),
    };
    let w = config.guidance_scale;
    for (t, t_prev) in ts {
        let xt = Tensor::from_vec(&shape, x);
        let eps = if w == 0.0 {
            predictor.predict(&xt, t, TextBranch::Unconditional)?.into_vec()
        } else if w == 1.0 {
            predictor.predict(&xt, t, TextBranch::Conditional)?.into_vec()
        } else {
            let c = predictor.predict(&xt, t, TextBranch::Conditional)?;
            let u = predictor.predict(&xt, t, TextBranch::Unconditional)?;
            cfg_combine(u.data(), c.data(), w)
        };
        let x_t = xt.into_vec();
        x = match config.kind {
            SamplerKind::Ddim => {
                let noise = (config.eta > 0.0 && t_prev > 0).then(|| draw(&mut rngs));
                ddim_step(&x_t, &eps, t, t_prev, config.eta, schedule, noise.as_deref(), config.clamp_x0)?
            }
            SamplerKind::Ddpm => {
                let noise = if t > 1 { draw(&mut rngs) } else { vec![0.0; x_t.len()] };
                ddpm_step(&x_t, &eps, t, schedule, &noise, config.clamp_x0)?
            }
        };
    }
    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(Tensor::from_vec(&shape, x))
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a} elements vs {b}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_invalid_ranges() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn schedule_is_monotone_and_matches_prefix_products() {
        let s = default_schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        for t in [1, 10, 500, 999, 1000] {
            let oracle: f64 = (1..=t).map(|i| 1.0 - s.beta(i)).product();
            assert!((s.alpha_bar(t) - oracle).abs() / oracle < 1e-10);
        }
    }

    #[test]
    fn q_sample_examples() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        let x = q_sample(&[1.0; 4], 2, &[0.0; 4], &s).unwrap();
        assert!(x.iter().all(|&v| (v - 0.84853).abs() < 1e-5));
        let s = make_schedule(10, 1e-8, 1e-8).unwrap();
        let x = q_sample(&[0.3, -0.7], 1, &[1.0, -1.0], &s).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-3 && (x[1] + 0.7).abs() < 1e-3);
        assert!(matches!(
            q_sample(&[0.0], 11, &[0.0], &s),
            Err(Error::TimestepOutOfRange { t: 11, .. })
        ));
    }

    #[test]
    fn q_sample_moments_match_closed_form() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        for (x0v, t) in [(0.0f32, 300), (0.8, 100), (-0.5, 700)] {
            let eps: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let xt = q_sample(&vec![x0v; n], t, &eps, &s).unwrap();
            let mean = xt.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = xt.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let ab = s.alpha_bar(t);
            assert!((var - (1.0 - ab)).abs() / (1.0 - ab) < 0.05, "t={t} var {var}");
            assert!((var.sqrt() - (1.0 - ab).sqrt()).abs() / (1.0 - ab).sqrt() < 0.05);
            let want = ab.sqrt() * x0v as f64;
            // standard error of the mean is sqrt((1-ab)/n) <= 0.01
            assert!((mean - want).abs() < 0.05 * want.abs().max(0.8), "t={t} mean {mean}");
        }
    }

    #[test]
    fn loss_examples_and_oracle() {
        let eps = [0.5f32, -1.0, 2.0];
        assert_eq!(training_loss(&eps, &eps).unwrap(), 0.0);
        let shifted: Vec<f32> = eps.iter().map(|v| v + 0.25).collect();
        assert!((training_loss(&shifted, &eps).unwrap() - 0.0625).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f32> = (0..257).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f32> = (0..257).map(|_| rng.sample(StandardNormal)).collect();
        let mut oracle = 0.0f64;
        for i in 0..a.len() {
            oracle += (a[i] as f64 - b[i] as f64) * (a[i] as f64 - b[i] as f64);
        }
        oracle /= a.len() as f64;
        assert!((training_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert!(training_loss(&a[..3], &b).is_err());
    }

    #[test]
    fn cfg_identities_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f32> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        let c: Vec<f32> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(cfg_combine(&u, &c, 1.0), c);
        assert_eq!(cfg_combine(&u, &c, 0.0), u);
        assert!(cfg_combine(&[0.0; 4], &[1.0; 4], 7.5).iter().all(|&v| v == 7.5));
    }

    #[test]
    fn ddim_recovers_x0_from_exact_noise() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0: Vec<f32> = (0..32).map(|_| rng.random_range(-0.9..0.9)).collect();
        let eps: Vec<f32> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        for t in [1, 250, 900] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let pred = predict_x0(&xt, &eps, t, &s, false);
            assert!(pred.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-4 * (1.0 / s.alpha_bar(t).sqrt() as f32)));
            let out = ddim_step(&xt, &eps, t, 0, 0.0, &s, None, false).unwrap();
            assert!(out.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-3));
        }
        let s = make_schedule(1, 1e-4, 1e-4).unwrap();
        let xt = q_sample(&x0, 1, &eps, &s).unwrap();
        let pred = predict_x0(&xt, &eps, 1, &s, false);
        assert!(pred.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn ddim_clamps_the_x0_prediction() {
        // alpha_bar = 0.25 in one step
        let s = make_schedule(1, 0.75, 0.75).unwrap();
        let raw = predict_x0(&[1.0], &[0.5], 1, &s, false)[0];
        assert!((raw - 1.133_974_6).abs() < 1e-5);
        assert_eq!(predict_x0(&[1.0], &[0.5], 1, &s, true)[0], 1.0);
        // stepping to t = 0 returns the clamped prediction itself
        assert_eq!(ddim_step(&[1.0], &[0.5], 1, 0, 0.0, &s, None, true).unwrap()[0], 1.0);
        assert!(ddim_step(&[1.0], &[0.5], 1, 1, 0.0, &s, None, true).is_err());
    }

    #[test]
    fn ddpm_step_examples() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        let x0 = [0.25f32, -0.5];
        let eps = [1.3f32, 0.2];
        let xt = q_sample(&x0, 1, &eps, &s).unwrap();
        let noise = [5.0f32, -5.0];
        let out = ddpm_step(&xt, &eps, 1, &s, &noise, true).unwrap();
        // t = 1: no noise, and the posterior mean collapses onto x0
        assert!(out.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-5));

        let s = default_schedule();
        for t in [2, 10, 1000] {
            let direct = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
            assert_eq!(s.posterior_variance(t), direct);
        }
        assert!(ddpm_step(&[0.0], &[0.0], 0, &s, &[0.0], true).is_err());
    }

    #[test]
    fn ddim_timesteps_are_even_and_distinct() {
        assert_eq!(ddim_timesteps(1000, 4), vec![1000, 750, 500, 250]);
        assert_eq!(ddim_timesteps(10, 10), (1..=10).rev().collect::<Vec<_>>());
        let ts = ddim_timesteps(1000, 333);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*ts.last().unwrap(), 3);
    }

    /// Exact noise predictor for 1-D data `x0 ~ N(m, s^2)`, with a text-dependent
    /// mean shift to exercise guidance.
    fn gaussian_oracle(
        schedule: NoiseSchedule,
        m: f64,
        sd: f64,
        text_shift: f64,
    ) -> impl FnMut(&Tensor<f32>, usize, TextBranch) -> Result<Tensor<f32>> {
        move |x: &Tensor<f32>, t: usize, branch: TextBranch| {
            let ab = schedule.alpha_bar(t);
            let mean = if branch == TextBranch::Conditional { m + text_shift } else { m };
            let denom = ab * sd * sd + 1.0 - ab;
            Ok(x.map(|v| ((1.0 - ab).sqrt() * (v as f64 - ab.sqrt() * mean) / denom) as f32))
        }
    }

    #[test]
    fn sampling_is_deterministic_and_ignores_text_at_zero_guidance() {
        let s = default_schedule();
        let config = SamplerConfig {
            steps: 20,
            guidance_scale: 0.0,
            seed: 9,
            ..SamplerConfig::default()
        };
        let mut a = gaussian_oracle(s.clone(), 0.1, 0.3, 0.4);
        let mut b = gaussian_oracle(s.clone(), 0.1, 0.3, -0.4);
        let xa = sample(&mut a, [3, 3, 4, 4], &config, &s).unwrap();
        let xb = sample(&mut b, [3, 3, 4, 4], &config, &s).unwrap();
        assert_eq!(xa, xb);
        let guided = SamplerConfig {
            guidance_scale: 2.0,
            ..config
        };
        let g1 = sample(&mut a, [3, 3, 4, 4], &guided, &s).unwrap();
        let g2 = sample(&mut a, [3, 3, 4, 4], &guided, &s).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.max_abs_diff(&sample(&mut b, [3, 3, 4, 4], &guided, &s).unwrap()) > 0.1);
    }

    #[test]
    fn chains_do_not_depend_on_batch_composition() {
        let s = default_schedule();
        let config = SamplerConfig {
            steps: 10,
            eta: 0.5,
            ..SamplerConfig::default()
        };
        let mut f = gaussian_oracle(s.clone(), 0.0, 0.5, 0.0);
        let big = sample(&mut f, [4, 1, 2, 2], &config, &s).unwrap();
        let small = sample(&mut f, [2, 1, 2, 2], &config, &s).unwrap();
        assert_eq!(&big.data()[..8], small.data());
    }

    #[test]
    fn full_step_ddim_with_unit_eta_matches_ddpm_statistics() {
        let s = default_schedule();
        let (m, sd) = (0.3, 0.2);
        let n = 2000;
        let mut f = gaussian_oracle(s.clone(), m, sd, 0.0);
        let mut run = |kind, seed| {
            let config = SamplerConfig {
                kind,
                steps: 1000,
                eta: 1.0,
                guidance_scale: 0.0,
                seed,
                clamp_x0: false,
            };
            sample(&mut f, [n, 1, 1, 1], &config, &s).unwrap().into_vec()
        };
        let stats = |v: &[f32]| {
            let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (mean, var)
        };
        let (m1, v1) = stats(&run(SamplerKind::Ddim, 11));
        let (m2, v2) = stats(&run(SamplerKind::Ddpm, 12));
        let se = (v1 / n as f64 + v2 / n as f64).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se, "ddim {m1} vs ddpm {m2} (se {se})");
        assert!((m1 - m).abs() < 3.0 * (v1 / n as f64).sqrt());
        assert!((v1.sqrt() - sd).abs() < 0.02 && (v2.sqrt() - sd).abs() < 0.02);
    }
}
