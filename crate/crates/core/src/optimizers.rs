//! Flip-based optimizers for binary weights, the latent-weight baseline and
//! Adam for real-valued parameters.
//!
//! Binary weights are stored directly as `{-1, +1}` values together with
//! the first (`m`) and second (`v`) raw moments of their gradients. The
//! only update a flip optimizer performs on a weight is negation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binarize::{sign, sign_binarize};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `{-1, +1}` weight tensor with its moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryParam {
    w: Tensor,
    m: Tensor,
    v: Tensor,
}

impl BinaryParam {
    /// Wraps existing binary weights with zeroed moments.
    pub fn new(w: Tensor) -> Result<Self> {
        if let Some((index, &value)) = w
            .data()
            .iter()
            .enumerate()
            .find(|(_, &x)| x != 1.0 && x != -1.0)
        {
            return Err(Error::NonBinary { index, value });
        }
        let m = Tensor::zeros(w.shape());
        let v = Tensor::zeros(w.shape());
        Ok(Self { w, m, v })
    }

    /// Random equiprobable signs.
    pub fn random(shape: &[usize], rng: &mut impl Rng) -> Self {
        let w = Tensor::from_fn(shape, |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            w,
        }
    }

    pub fn with_moments(w: Tensor, m: Tensor, v: Tensor) -> Result<Self> {
        let mut p = Self::new(w)?;
        m.expect_shape(p.w.shape(), "BinaryParam m")?;
        v.expect_shape(p.w.shape(), "BinaryParam v")?;
        if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, &x)| !(x >= 0.0)) {
            return Err(Error::State(format!(
                "second moment must be non-negative, v[{index}] = {value}"
            )));
        }
        p.m = m;
        p.v = v;
        Ok(p)
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.v
    }

    pub fn shape(&self) -> &[usize] {
        self.w.shape()
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Real-valued proxy weight whose sign is used in the forward pass.
///
/// Decomposes as `w_latent = sign * magnitude`, the magnitude acting as
/// inertia against sign changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentWeight {
    w: Tensor,
}

impl LatentWeight {
    pub fn new(w: Tensor) -> Self {
        Self { w }
    }

    pub fn latent(&self) -> &Tensor {
        &self.w
    }

    pub fn sign(&self) -> Tensor {
        sign_binarize(&self.w)
    }

    pub fn magnitude(&self) -> Tensor {
        self.w.map(f64::abs)
    }

    pub fn shape(&self) -> &[usize] {
        self.w.shape()
    }

    fn clip(&mut self, clip: Option<f64>) {
        if let Some(c) = clip {
            for x in self.w.data_mut() {
                *x = x.clamp(-c, c);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Hyperparameters of the flip optimizers plus Adam for real parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Adaptivity rate of the first moment.
    pub gamma: f64,
    /// Standard rate of the second moment.
    pub sigma: f64,
    /// Flip threshold.
    pub tau: f64,
    pub epsilon: f64,
    pub bias_mode: BiasMode,
    pub adam: AdamConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-7,
            sigma: 1e-3,
            tau: 1e-6,
            epsilon: 1e-7,
            bias_mode: BiasMode::Unbiased,
            adam: AdamConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            errors.push(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            errors.push(format!("sigma must be in (0, 1], got {}", self.sigma));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            errors.push(format!("tau must be non-negative, got {}", self.tau));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            errors.push(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// Flip counts of one optimizer step on one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepReport {
    pub flips: u64,
    pub total: u64,
}

/// Standardized momentum for one element.
///
/// Biased: `m / (sqrt(v) + eps)`. Unbiased: `(m / gamma) / (sqrt(v / sigma) + eps)`.
/// Returns 0 when `m == 0` so that an all-zero state with `eps == 0` stays finite.
#[inline]
pub fn standardized_momentum(m: f64, v: f64, gamma: f64, sigma: f64, eps: f64, mode: BiasMode) -> f64 {
    if m == 0.0 {
        return 0.0;
    }
    match mode {
        BiasMode::Biased => m / (v.sqrt() + eps),
        BiasMode::Unbiased => (m / gamma) / ((v / sigma).sqrt() + eps),
    }
}

#[inline]
fn should_flip(signal: f64, w: f64, tau: f64) -> bool {
    signal.abs() > tau && sign(signal) == w
}

fn check_grad(w: &Tensor, g: &Tensor, context: &str) -> Result<()> {
    g.expect_shape(w.shape(), context)
}

/// One Bop step: momentum update followed by thresholded sign-matching flips.
/// The second moment is neither read nor written.
pub fn bop_step(param: &mut BinaryParam, g: &Tensor, gamma: f64, tau: f64) -> Result<StepReport> {
    check_grad(&param.w, g, "bop_step gradient")?;
    let mut flips = 0;
    let w = param.w.data_mut();
    let m = param.m.data_mut();
    for ((wi, mi), &gi) in w.iter_mut().zip(m.iter_mut()).zip(g.data()) {
        *mi = (1.0 - gamma) * *mi + gamma * gi;
        if should_flip(*mi, *wi, tau) {
            *wi = -*wi;
            flips += 1;
        }
    }
    Ok(StepReport {
        flips,
        total: param.w.len() as u64,
    })
}

/// One second-order Bop step: both moments are updated, then each weight is
/// flipped iff its standardized momentum exceeds `tau` and agrees in sign.
pub fn bop2nd_step(param: &mut BinaryParam, g: &Tensor, cfg: &OptimizerConfig) -> Result<StepReport> {
    check_grad(&param.w, g, "bop2nd_step gradient")?;
    let OptimizerConfig {
        gamma,
        sigma,
        tau,
        epsilon,
        bias_mode,
        ..
    } = *cfg;
    let mut flips = 0;
    let w = param.w.data_mut();
    let m = param.m.data_mut();
    let v = param.v.data_mut();
    for (((wi, mi), vi), &gi) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
        *mi = (1.0 - gamma) * *mi + gamma * gi;
        *vi = (1.0 - sigma) * *vi + sigma * gi * gi;
        let s = standardized_momentum(*mi, *vi, gamma, sigma, epsilon, bias_mode);
        if should_flip(s, *wi, tau) {
            *wi = -*wi;
            flips += 1;
        }
    }
    Ok(StepReport {
        flips,
        total: param.w.len() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(w: &mut Tensor, g: &Tensor, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    check_grad(w, g, "adam_step gradient")?;
    state.m.expect_shape(w.shape(), "adam_step first moment")?;
    state.v.expect_shape(w.shape(), "adam_step second moment")?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((wi, mi), vi), &gi) in w
        .data_mut()
        .iter_mut()
        .zip(state.m.data_mut())
        .zip(state.v.data_mut())
        .zip(g.data())
    {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *wi -= cfg.alpha * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

fn count_sign_changes(before: &Tensor, after: &Tensor) -> u64 {
    before
        .data()
        .iter()
        .zip(after.data())
        .filter(|(&a, &b)| sign(a) != sign(b))
        .count() as u64
}

/// Latent-weight SGD: `w <- w - alpha * g`, optionally clipped to `[-clip, clip]`.
/// The report counts sign changes of the latent weights.
pub fn latent_sgd_step(param: &mut LatentWeight, g: &Tensor, alpha: f64, clip: Option<f64>) -> Result<StepReport> {
    check_grad(&param.w, g, "latent_sgd_step gradient")?;
    let before = param.w.clone();
    for (wi, &gi) in param.w.data_mut().iter_mut().zip(g.data()) {
        *wi -= alpha * gi;
    }
    param.clip(clip);
    Ok(StepReport {
        flips: count_sign_changes(&before, &param.w),
        total: param.w.len() as u64,
    })
}

/// Adam on latent weights, the usual latent-weight baseline.
pub fn latent_adam_step(
    param: &mut LatentWeight,
    g: &Tensor,
    state: &mut AdamState,
    cfg: &AdamConfig,
    clip: Option<f64>,
) -> Result<StepReport> {
    let before = param.w.clone();
    adam_step(&mut param.w, g, state, cfg)?;
    param.clip(clip);
    Ok(StepReport {
        flips: count_sign_changes(&before, &param.w),
        total: param.w.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(w: f64, m: f64, v: f64) -> BinaryParam {
        BinaryParam::with_moments(Tensor::scalar(w), Tensor::scalar(m), Tensor::scalar(v)).unwrap()
    }

    fn cfg(gamma: f64, sigma: f64, tau: f64, epsilon: f64, bias_mode: BiasMode) -> OptimizerConfig {
        OptimizerConfig {
            gamma,
            sigma,
            tau,
            epsilon,
            bias_mode,
            adam: AdamConfig::default(),
        }
    }

    #[test]
    fn bop_flips_on_matching_sign() {
        let mut p = single(1.0, 0.0, 0.0);
        let r = bop_step(&mut p, &Tensor::scalar(1.0), 0.5, 0.3).unwrap();
        assert_eq!(p.first_moment()[0], 0.5);
        assert_eq!(p.weights()[0], -1.0);
        assert_eq!(r, StepReport { flips: 1, total: 1 });
    }

    #[test]
    fn bop_keeps_weight_with_opposite_sign() {
        let mut p = single(-1.0, 0.0, 0.0);
        let r = bop_step(&mut p, &Tensor::scalar(1.0), 0.5, 0.3).unwrap();
        assert_eq!(p.weights()[0], -1.0);
        assert_eq!(r.flips, 0);
    }

    #[test]
    fn bop_zero_gradient_never_flips() {
        for tau in [0.0, 1e-9, 1.0] {
            for w in [1.0, -1.0] {
                let mut p = single(w, 0.0, 0.0);
                let r = bop_step(&mut p, &Tensor::scalar(0.0), 0.5, tau).unwrap();
                assert_eq!(p.first_moment()[0], 0.0);
                assert_eq!(r.flips, 0);
            }
        }
    }

    #[test]
    fn bop_threshold_is_strict() {
        // m = 0.5 after the update; tau equal to it must not flip.
        let mut p = single(1.0, 0.0, 0.0);
        bop_step(&mut p, &Tensor::scalar(1.0), 0.5, 0.5).unwrap();
        assert_eq!(p.weights()[0], 1.0);
    }

    #[test]
    fn bop2nd_biased_example() {
        let mut p = single(1.0, 0.0, 0.0);
        let c = cfg(0.5, 0.5, 1e-6, 0.0, BiasMode::Biased);
        let r = bop2nd_step(&mut p, &Tensor::scalar(1.0), &c).unwrap();
        assert_eq!(p.first_moment()[0], 0.5);
        assert_eq!(p.second_moment()[0], 0.5);
        let s = standardized_momentum(0.5, 0.5, 0.5, 0.5, 0.0, BiasMode::Biased);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.flips, 1);
        assert_eq!(p.weights()[0], -1.0);
    }

    #[test]
    fn bop2nd_unbiased_example() {
        let mut p = single(1.0, 0.0, 0.0);
        let c = cfg(0.5, 0.5, 0.999, 0.0, BiasMode::Unbiased);
        let s = standardized_momentum(0.5, 0.5, 0.5, 0.5, 0.0, BiasMode::Unbiased);
        assert_eq!(s, 1.0);
        let r = bop2nd_step(&mut p, &Tensor::scalar(1.0), &c).unwrap();
        assert_eq!(r.flips, 1);
    }

    #[test]
    fn bop2nd_threshold_is_strict() {
        let mut p = single(1.0, 0.0, 0.0);
        let c = cfg(0.5, 0.5, 1.0, 0.0, BiasMode::Unbiased);
        let r = bop2nd_step(&mut p, &Tensor::scalar(1.0), &c).unwrap();
        assert_eq!(r.flips, 0);
    }

    #[test]
    fn bop2nd_scaled_gradient_same_decision() {
        let c = cfg(0.5, 0.5, 1e-6, 0.0, BiasMode::Biased);
        let mut a = single(1.0, 0.0, 0.0);
        let mut b = single(1.0, 0.0, 0.0);
        bop2nd_step(&mut a, &Tensor::scalar(1.0), &c).unwrap();
        bop2nd_step(&mut b, &Tensor::scalar(2.0), &c).unwrap();
        assert_eq!(b.first_moment()[0], 1.0);
        assert_eq!(b.second_moment()[0], 2.0);
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn bop_is_not_scale_invariant() {
        let mut a = single(1.0, 0.0, 0.0);
        let mut b = single(1.0, 0.0, 0.0);
        assert_eq!(bop_step(&mut a, &Tensor::scalar(1.0), 0.5, 0.3).unwrap().flips, 1);
        assert_eq!(bop_step(&mut b, &Tensor::scalar(0.1), 0.5, 0.3).unwrap().flips, 0);
    }

    #[test]
    fn bop_leaves_second_moment_alone() {
        let mut p = single(1.0, 0.2, 0.7);
        bop_step(&mut p, &Tensor::scalar(3.0), 0.1, 0.0).unwrap();
        assert_eq!(p.second_moment()[0], 0.7);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = BinaryParam::new(Tensor::full(&[3], 1.0)).unwrap();
        assert!(matches!(
            bop_step(&mut p, &Tensor::zeros(&[2]), 0.1, 0.0),
            Err(Error::Shape { .. })
        ));
        assert!(bop2nd_step(&mut p, &Tensor::zeros(&[4]), &OptimizerConfig::default()).is_err());
        let mut w = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[3]);
        assert!(adam_step(&mut w, &Tensor::zeros(&[2]), &mut st, &AdamConfig::default()).is_err());
        let mut lw = LatentWeight::new(Tensor::zeros(&[3]));
        assert!(latent_sgd_step(&mut lw, &Tensor::zeros(&[1]), 0.1, None).is_err());
    }

    #[test]
    fn binary_param_rejects_non_binary() {
        let err = BinaryParam::new(Tensor::from_vec(vec![1.0, 0.5])).unwrap_err();
        assert!(matches!(err, Error::NonBinary { index: 1, .. }));
    }

    #[test]
    fn paper_default_flip_hyperparameters() {
        let c = OptimizerConfig::default();
        assert_eq!((c.gamma, c.sigma, c.tau), (1e-7, 1e-3, 1e-6));
        assert_eq!(c.epsilon, 1e-7);
        assert_eq!((c.adam.beta1, c.adam.beta2, c.adam.eps), (0.9, 0.999, 1e-7));
        c.validate().unwrap();
        assert!(cfg(0.0, 0.5, 0.1, 1e-7, BiasMode::Biased).validate().is_err());
        assert!(cfg(0.5, 1.5, -0.1, 0.0, BiasMode::Biased).validate().is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut w = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[1]);
        adam_step(&mut w, &Tensor::scalar(1.0), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(st.t, 1);
        let expected = -0.01 / (1.0 + 1e-7);
        assert!((w[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut w = Tensor::scalar(0.3);
        let mut st = AdamState::new(&[1]);
        adam_step(&mut w, &Tensor::scalar(0.0), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(w[0], 0.3);
    }

    #[test]
    fn adam_two_constant_steps_decrease() {
        // Hand iteration: t=1 -> m=0.1, v=0.001, m_hat=1, v_hat=1;
        // t=2 -> m=0.19, v=0.001999, m_hat=1, v_hat=1. Both steps are ~ -alpha.
        let mut w = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[1]);
        let cfg = AdamConfig::default();
        adam_step(&mut w, &Tensor::scalar(1.0), &mut st, &cfg).unwrap();
        let w1 = w[0];
        adam_step(&mut w, &Tensor::scalar(1.0), &mut st, &cfg).unwrap();
        let w2 = w[0];
        assert!(w1 < 1.0 && w2 < w1);
        assert!((w2 - (1.0 - 2.0 * 0.01 / (1.0 + 1e-7))).abs() < 1e-12);
    }

    #[test]
    fn latent_sgd_examples() {
        let mut p = LatentWeight::new(Tensor::scalar(0.1));
        let r = latent_sgd_step(&mut p, &Tensor::scalar(1.0), 0.2, None).unwrap();
        assert!((p.latent()[0] + 0.1).abs() < 1e-15);
        assert_eq!(p.sign()[0], -1.0);
        assert_eq!(r.flips, 1);

        let mut p = LatentWeight::new(Tensor::scalar(0.9));
        let r = latent_sgd_step(&mut p, &Tensor::scalar(1.0), 0.2, None).unwrap();
        assert!((p.latent()[0] - 0.7).abs() < 1e-15);
        assert_eq!(p.sign()[0], 1.0);
        assert_eq!(r.flips, 0);

        let mut p = LatentWeight::new(Tensor::scalar(0.4));
        latent_sgd_step(&mut p, &Tensor::scalar(0.0), 0.2, None).unwrap();
        assert_eq!(p.latent()[0], 0.4);

        let mut p = LatentWeight::new(Tensor::scalar(0.9));
        latent_sgd_step(&mut p, &Tensor::scalar(-1.0), 0.5, Some(1.0)).unwrap();
        assert_eq!(p.latent()[0], 1.0);
    }

    #[test]
    fn latent_weight_decomposes_into_sign_and_magnitude() {
        let p = LatentWeight::new(Tensor::from_vec(vec![0.3, -2.0, 0.0, -0.01]));
        let recomposed = p.sign().zip_map(&p.magnitude(), |s, m| s * m).unwrap();
        assert_eq!(&recomposed, p.latent());
    }

    proptest! {
        #[test]
        fn flip_optimizers_preserve_invariants(
            seed in any::<u64>(),
            steps in 1usize..20,
            gamma in 1e-4f64..1.0,
            sigma in 1e-4f64..1.0,
            tau in 0.0f64..2.0,
            unbiased in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = BinaryParam::random(&[17], &mut rng);
            let mut b = a.clone();
            let mode = if unbiased { BiasMode::Unbiased } else { BiasMode::Biased };
            let c = cfg(gamma, sigma, tau, 1e-7, mode);
            for _ in 0..steps {
                let g = Tensor::from_fn(&[17], |_| rng.random_range(-3.0..3.0));
                let ra = bop_step(&mut a, &g, gamma, tau).unwrap();
                let rb = bop2nd_step(&mut b, &g, &c).unwrap();
                prop_assert!(ra.flips <= ra.total && rb.flips <= rb.total);
                for p in [&a, &b] {
                    prop_assert!(p.weights().data().iter().all(|&x| x == 1.0 || x == -1.0));
                    prop_assert!(p.second_moment().data().iter().all(|&x| x >= 0.0));
                }
                prop_assert!(a.second_moment().data().iter().all(|&x| x == 0.0));
            }
        }

        #[test]
        fn flip_set_shrinks_with_threshold(
            seed in any::<u64>(),
            tau1 in 0.0f64..2.0,
            dtau in 0.0f64..2.0,
            unbiased in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = BinaryParam::random(&[32], &mut rng);
            let m = Tensor::from_fn(&[32], |_| rng.random_range(-1.0..1.0));
            let v = Tensor::from_fn(&[32], |_| rng.random_range(0.0..1.0));
            let g = Tensor::from_fn(&[32], |_| rng.random_range(-2.0..2.0));
            let start = BinaryParam::with_moments(w.weights().clone(), m, v).unwrap();
            let mode = if unbiased { BiasMode::Unbiased } else { BiasMode::Biased };
            let tau2 = tau1 + dtau;
            let flipped = |tau: f64| {
                let mut p = start.clone();
                bop2nd_step(&mut p, &g, &cfg(0.3, 0.2, tau, 1e-7, mode)).unwrap();
                let mut q = start.clone();
                bop_step(&mut q, &g, 0.3, tau).unwrap();
                let d = |x: &BinaryParam| -> Vec<bool> {
                    x.weights().data().iter().zip(start.weights().data()).map(|(a, b)| a != b).collect()
                };
                (d(&p), d(&q))
            };
            let (lo2, lo1) = flipped(tau1);
            let (hi2, hi1) = flipped(tau2);
            for i in 0..32 {
                prop_assert!(!hi2[i] || lo2[i]);
                prop_assert!(!hi1[i] || lo1[i]);
            }
        }

        #[test]
        fn opposing_weights_never_flip(seed in any::<u64>(), unbiased in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Tensor::from_fn(&[32], |_| rng.random_range(-5.0..5.0));
            // Fresh state: sign(s) == sign(g), so weights set to -sign(g) oppose s.
            let w = Tensor::from_fn(&[32], |i| -sign(g[i]));
            let mut p = BinaryParam::new(w.clone()).unwrap();
            let mode = if unbiased { BiasMode::Unbiased } else { BiasMode::Biased };
            let r = bop2nd_step(&mut p, &g, &cfg(0.9, 0.9, 0.0, 1e-7, mode)).unwrap();
            prop_assert_eq!(r.flips, 0);
            prop_assert_eq!(p.weights(), &w);
        }
    }
}
