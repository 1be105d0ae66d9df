//! Targeted L-infinity attacks against an embedding model: one-step FGSM,
//! fixed-budget PGD, and the similarity-driven iterative attack with
//! convergence/settlement stopping.
//!
//! Two objective functions are supported, both minimized:
//!
//! * similarity objective: the dissimilarity between the iterate's embedding
//!   and the target template;
//! * conditional binary cross-entropy (C-BCE):
//!   `-log(min{1 - d, 1 - tau} / (1 - tau))`, which is exactly zero inside
//!   the acceptance region `d <= tau`, making that region absorbing for a
//!   pure C-BCE-driven iteration.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::embedding::{EmbeddingModel, FeatureVector};
use crate::error::{Error, Result};
use crate::metrics::dissimilarity;

/// Loss driving the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Minimize dissimilarity to the target template.
    Sgadv,
    /// Minimize the conditional binary cross-entropy at a fixed threshold.
    Cbce,
}

/// Attack hyperparameters (pixel units for epsilon and alpha).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-infinity perturbation budget.
    pub epsilon: f64,
    /// Per-step size.
    pub alpha: f64,
    /// Maximum iterations.
    pub t_max: usize,
    /// Convergence threshold on loss deltas.
    pub tau_conv: f64,
    /// Seed for the random initialization.
    pub seed: u64,
    pub objective: Objective,
    /// Decision threshold for the C-BCE objective; required iff the
    /// objective is C-BCE.
    pub cbce_tau: Option<f64>,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be > 0"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be > 0"));
        }
        if self.t_max == 0 {
            return Err(Error::invalid("t_max must be positive"));
        }
        if !(self.tau_conv >= 0.0) {
            return Err(Error::invalid("tau_conv must be >= 0"));
        }
        match (self.objective, self.cbce_tau) {
            (Objective::Cbce, Some(tau)) if !(tau > 0.0 && tau < 1.0) => {
                Err(Error::invalid(format!("cbce_tau {tau} outside (0,1)")))
            }
            (Objective::Cbce, None) => Err(Error::invalid("C-BCE objective requires cbce_tau")),
            _ => Ok(()),
        }
    }

    /// The iterative attacks additionally require the budget to be reachable:
    /// `t_max >= epsilon / alpha`.
    fn validate_iterative(&self) -> Result<()> {
        self.validate()?;
        if (self.t_max as f64) < self.epsilon / self.alpha {
            return Err(Error::invalid(format!(
                "t_max {} < epsilon/alpha = {}; the perturbation cannot reach the budget border",
                self.t_max,
                self.epsilon / self.alpha
            )));
        }
        Ok(())
    }
}

/// Why an attack stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxSteps,
    Converged,
    Settled,
    OneStep,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StopReason::MaxSteps => "max_steps",
            StopReason::Converged => "converged",
            StopReason::Settled => "settled",
            StopReason::OneStep => "one_step",
        };
        f.write_str(s)
    }
}

/// Attack output: the last iterate, its loss trace (entry 0 = after
/// initialization), and bookkeeping. The best-so-far loss and its step index
/// are recorded alongside the trace since the returned image is the last
/// iterate, not the best one.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Image,
    pub loss_trace: Vec<f64>,
    pub steps_taken: usize,
    pub stop_reason: StopReason,
    pub final_dissimilarity: f64,
    pub best_loss: f64,
    pub best_step: usize,
}

/// Ring buffer of the last five loss deltas.
#[derive(Debug, Clone, Default)]
pub struct StopState {
    deltas: VecDeque<f64>,
}

impl StopState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, delta: f64) {
        if self.deltas.len() == 5 {
            self.deltas.pop_front();
        }
        self.deltas.push_back(delta);
    }

    pub fn deltas(&self) -> impl Iterator<Item = f64> + '_ {
        self.deltas.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

/// Stop decision after `t` completed steps. Precedence: max steps, then
/// convergence (all five |delta| at or below `tau_conv`), then settlement
/// (at least two distinct non-positive deltas in the window). Convergence
/// and settlement are evaluated only once five deltas are recorded.
pub fn check_stop(
    state: &StopState,
    t: usize,
    t_max: usize,
    tau_conv: f64,
) -> Option<StopReason> {
    if t >= t_max {
        return Some(StopReason::MaxSteps);
    }
    if state.len() < 5 {
        return None;
    }
    if state.deltas().all(|d| d.abs() <= tau_conv) {
        return Some(StopReason::Converged);
    }
    if state.deltas().filter(|&d| d <= 0.0).count() >= 2 {
        return Some(StopReason::Settled);
    }
    None
}

/// Similarity objective: identical to the dissimilarity metric by
/// construction.
pub fn sgadv_loss(f_adv: &FeatureVector, f_target: &FeatureVector) -> Result<f64> {
    dissimilarity(f_adv, f_target)
}

/// Partial derivative of the similarity objective with respect to the
/// (free) embedding vector: `-target / 2`. The normalization Jacobian lives
/// in the embedder's vector-Jacobian product.
pub fn sgadv_loss_cograd(
    f_adv: &FeatureVector,
    f_target: &FeatureVector,
) -> Result<Vec<f64>> {
    if f_adv.dim() != f_target.dim() {
        return Err(Error::dims(format!(
            "feature dims {} vs {}",
            f_adv.dim(),
            f_target.dim()
        )));
    }
    Ok(f_target.values().iter().map(|t| -t / 2.0).collect())
}

const CBCE_LOG_FLOOR: f64 = 1e-12;

/// Conditional binary cross-entropy at threshold `tau`:
/// `-log(min{1 - d, 1 - tau} / (1 - tau))` with d the dissimilarity to the
/// target. Zero whenever `d <= tau`; the log argument is clamped below at
/// 1e-12 as d approaches 1.
pub fn cbce_loss(f_adv: &FeatureVector, f_target: &FeatureVector, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau {tau} outside (0,1)")));
    }
    let d = dissimilarity(f_adv, f_target)?;
    if d <= tau {
        return Ok(0.0);
    }
    let arg = ((1.0 - d) / (1.0 - tau)).max(CBCE_LOG_FLOOR);
    Ok(-arg.ln())
}

/// C-BCE cograd: zero on the flat branch `d <= tau` (subgradient fixed at
/// 0), otherwise `-target / (2 (1 - d))`.
pub fn cbce_loss_cograd(
    f_adv: &FeatureVector,
    f_target: &FeatureVector,
    tau: f64,
) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau {tau} outside (0,1)")));
    }
    let d = dissimilarity(f_adv, f_target)?;
    if d <= tau {
        return Ok(vec![0.0; f_target.dim()]);
    }
    let scale = 1.0 / (2.0 * (1.0 - d).max(CBCE_LOG_FLOOR));
    Ok(f_target.values().iter().map(|t| -t * scale).collect())
}

fn objective_loss(cfg: &AttackConfig, f: &FeatureVector, f_target: &FeatureVector) -> Result<f64> {
    match cfg.objective {
        Objective::Sgadv => sgadv_loss(f, f_target),
        Objective::Cbce => cbce_loss(f, f_target, cfg.cbce_tau.unwrap_or(f64::NAN)),
    }
}

fn objective_cograd(
    cfg: &AttackConfig,
    f: &FeatureVector,
    f_target: &FeatureVector,
) -> Result<Vec<f64>> {
    match cfg.objective {
        Objective::Sgadv => sgadv_loss_cograd(f, f_target),
        Objective::Cbce => cbce_loss_cograd(f, f_target, cfg.cbce_tau.unwrap_or(f64::NAN)),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_pair(model: &dyn EmbeddingModel, source: &Image, target: &Image) -> Result<()> {
    if source.dims() != model.input_dims() || target.dims() != model.input_dims() {
        return Err(Error::dims(format!(
            "source {:?} / target {:?} vs model input {:?}",
            source.dims(),
            target.dims(),
            model.input_dims()
        )));
    }
    Ok(())
}

/// One descent step of size epsilon from the source:
/// `x' = clamp(x - epsilon * sign(grad J))`, with `sign(0) = 0`.
pub fn fgsm_attack(
    model: &dyn EmbeddingModel,
    source: &Image,
    target: &Image,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_pair(model, source, target)?;
    let f_target = model.embed(target)?;

    let f0 = model.embed(source)?;
    let loss0 = objective_loss(cfg, &f0, &f_target)?;
    let cograd = objective_cograd(cfg, &f0, &f_target)?;
    let grad = model.input_gradient(source, &cograd)?;

    let pixels: Vec<f64> = source
        .pixels()
        .iter()
        .zip(grad.values())
        .map(|(x, g)| (x - cfg.epsilon * sign(*g)).clamp(0.0, 1.0))
        .collect();
    let (w, h, c) = source.dims();
    let adversarial = Image::new(w, h, c, pixels)?;

    let f1 = model.embed(&adversarial)?;
    let loss1 = objective_loss(cfg, &f1, &f_target)?;
    let final_dissimilarity = dissimilarity(&f1, &f_target)?;
    let (best_loss, best_step) = if loss1 <= loss0 { (loss1, 1) } else { (loss0, 0) };

    Ok(AttackResult {
        adversarial,
        loss_trace: vec![loss0, loss1],
        steps_taken: 1,
        stop_reason: StopReason::OneStep,
        final_dissimilarity,
        best_loss,
        best_step,
    })
}

/// Fixed-budget projected descent: random start in the epsilon-ball, then
/// exactly `t_max` steps of `x <- clip(x - alpha * sign(grad J))`, where the
/// clip projects onto the epsilon-ball around the original source
/// intersected with [0,1].
pub fn pgd_attack(
    model: &dyn EmbeddingModel,
    source: &Image,
    target: &Image,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate_iterative()?;
    run_iterative(model, source, target, cfg, false)
}

/// Iterative similarity-driven attack: same initialization and step as
/// [`pgd_attack`], but stopping on convergence (five consecutive small loss
/// deltas) or settlement (oscillating loss) in addition to the step budget.
/// Returns the last iterate; the best-so-far loss and step index are
/// recorded in the result.
pub fn sgadv_attack(
    model: &dyn EmbeddingModel,
    source: &Image,
    target: &Image,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if cfg.objective != Objective::Sgadv {
        return Err(Error::invalid(
            "sgadv_attack requires the similarity objective",
        ));
    }
    cfg.validate_iterative()?;
    run_iterative(model, source, target, cfg, true)
}

fn run_iterative(
    model: &dyn EmbeddingModel,
    source: &Image,
    target: &Image,
    cfg: &AttackConfig,
    use_stop_criteria: bool,
) -> Result<AttackResult> {
    check_pair(model, source, target)?;
    let f_target = model.embed(target)?;
    let (w, h, c) = source.dims();

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let src = source.pixels();
    let mut x: Vec<f64> = src
        .iter()
        .map(|&p| {
            let delta = rng.gen_range(-cfg.epsilon..=cfg.epsilon);
            (p + delta).clamp(0.0, 1.0)
        })
        .collect();

    let mut current = Image::new(w, h, c, x.clone())?;
    let mut f = model.embed(&current)?;
    let mut loss = objective_loss(cfg, &f, &f_target)?;
    let mut trace = vec![loss];
    let mut best_loss = loss;
    let mut best_step = 0usize;
    let mut state = StopState::new();
    let mut t = 0usize;

    let stop_reason = loop {
        if use_stop_criteria {
            if let Some(reason) = check_stop(&state, t, cfg.t_max, cfg.tau_conv) {
                break reason;
            }
        } else if t >= cfg.t_max {
            break StopReason::MaxSteps;
        }

        let cograd = objective_cograd(cfg, &f, &f_target)?;
        let grad = model.input_gradient(&current, &cograd)?;
        for ((xi, &si), &gi) in x.iter_mut().zip(src).zip(grad.values()) {
            let stepped = *xi - cfg.alpha * sign(gi);
            // Projection onto the epsilon-ball around the original source,
            // then the pixel box.
            *xi = stepped
                .clamp(si - cfg.epsilon, si + cfg.epsilon)
                .clamp(0.0, 1.0);
        }
        current = Image::new(w, h, c, x.clone())?;
        f = model.embed(&current)?;
        let new_loss = objective_loss(cfg, &f, &f_target)?;
        state.push(loss - new_loss);
        loss = new_loss;
        trace.push(loss);
        t += 1;
        if loss < best_loss {
            best_loss = loss;
            best_step = t;
        }
    };

    let final_dissimilarity = dissimilarity(&f, &f_target)?;
    Ok(AttackResult {
        adversarial: current,
        loss_trace: trace,
        steps_taken: t,
        stop_reason,
        final_dissimilarity,
        best_loss,
        best_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::embedding::{finite_diff_gradient, GradientImage, ReferenceEmbedder};
    use crate::metrics::linf_distance;
    use approx::assert_abs_diff_eq;

    const DIMS: (usize, usize, usize) = (8, 8, 1);

    fn model() -> ReferenceEmbedder {
        ReferenceEmbedder::new(DIMS, 16, 5).unwrap()
    }

    fn images(n: usize, seed: u64) -> Vec<Image> {
        let d = generate_dataset(n, 2, DIMS, 0.0, seed).unwrap();
        d.identities.into_iter().map(|(_, mut s)| s.remove(0)).collect()
    }

    fn unit(mut v: Vec<f64>) -> FeatureVector {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= n;
        }
        FeatureVector::new(v).unwrap()
    }

    fn sgadv_cfg(seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon: 0.03,
            alpha: 0.001,
            t_max: 1000,
            tau_conv: 1e-4,
            seed,
            objective: Objective::Sgadv,
            cbce_tau: None,
        }
    }

    #[test]
    fn sgadv_loss_anchors() {
        let e0 = unit(vec![1.0, 0.0]);
        let e1 = unit(vec![0.0, 1.0]);
        let neg = unit(vec![-1.0, 0.0]);
        assert_eq!(sgadv_loss(&e0, &e0).unwrap(), 0.0);
        assert_eq!(sgadv_loss(&e0, &e1).unwrap(), 0.5);
        assert_eq!(sgadv_loss(&e0, &neg).unwrap(), 1.0);
    }

    #[test]
    fn sgadv_cograd_is_half_negated_target() {
        let a = unit(vec![0.6, 0.8]);
        let t = unit(vec![0.8, -0.6]);
        let g = sgadv_loss_cograd(&a, &t).unwrap();
        assert_eq!(g, vec![-0.4, 0.3]);
        // Independent of f_adv.
        let b = unit(vec![-1.0, 0.0]);
        assert_eq!(sgadv_loss_cograd(&b, &t).unwrap(), g);
    }

    #[test]
    fn cbce_loss_cases() {
        // d = 0.3 <= tau = 0.5 -> flat branch.
        let t = unit(vec![1.0, 0.0]);
        let a03 = unit(vec![0.4, (1.0f64 - 0.16).sqrt()]); // cos 0.4 -> d 0.3
        assert_eq!(cbce_loss(&a03, &t, 0.5).unwrap(), 0.0);
        // d = 0.75 -> -ln(0.25/0.5) = ln 2.
        let a75 = unit(vec![-0.5, (1.0f64 - 0.25).sqrt()]);
        assert_abs_diff_eq!(cbce_loss(&a75, &t, 0.5).unwrap(), 2.0f64.ln(), epsilon = 1e-12);
        // d = tau exactly -> 0.
        let a05 = unit(vec![0.0, 1.0]);
        assert_eq!(cbce_loss(&a05, &t, 0.5).unwrap(), 0.0);
        assert!(cbce_loss(&a05, &t, 1.5).is_err());
    }

    #[test]
    fn cbce_cograd_branches() {
        let t = unit(vec![1.0, 0.0]);
        let inside = unit(vec![0.4, (1.0f64 - 0.16).sqrt()]);
        assert_eq!(cbce_loss_cograd(&inside, &t, 0.5).unwrap(), vec![0.0, 0.0]);
        let outside = unit(vec![-0.5, (1.0f64 - 0.25).sqrt()]); // d 0.75
        let g = cbce_loss_cograd(&outside, &t, 0.5).unwrap();
        // -t / (2 (1 - d)) with d = 0.75.
        assert_abs_diff_eq!(g[0], -1.0 / 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn composed_sgadv_gradient_matches_finite_differences() {
        let m = model();
        let imgs = images(20, 41);
        for pair in imgs.chunks(2) {
            let (src, tgt) = (&pair[0], &pair[1]);
            let f_target = m.embed(tgt).unwrap();
            let analytic = {
                let f = m.embed(src).unwrap();
                let cograd = sgadv_loss_cograd(&f, &f_target).unwrap();
                m.input_gradient(src, &cograd).unwrap()
            };
            let numeric = finite_diff_gradient(
                |x| sgadv_loss(&m.embed(x)?, &f_target),
                src,
                1e-4,
            )
            .unwrap();
            assert_gradients_close(&analytic, &numeric, 1e-4);
        }
    }

    #[test]
    fn composed_cbce_gradient_matches_finite_differences_off_kink() {
        let m = model();
        let imgs = images(10, 43);
        let tau = 0.3;
        for pair in imgs.chunks(2) {
            let (src, tgt) = (&pair[0], &pair[1]);
            let f_target = m.embed(tgt).unwrap();
            let f = m.embed(src).unwrap();
            let d = dissimilarity(&f, &f_target).unwrap();
            if (d - tau).abs() < 1e-3 {
                continue;
            }
            let analytic = {
                let cograd = cbce_loss_cograd(&f, &f_target, tau).unwrap();
                m.input_gradient(src, &cograd).unwrap()
            };
            let numeric = finite_diff_gradient(
                |x| cbce_loss(&m.embed(x)?, &f_target, tau),
                src,
                1e-4,
            )
            .unwrap();
            assert_gradients_close(&analytic, &numeric, 1e-4);
        }
    }

    fn assert_gradients_close(a: &GradientImage, b: &GradientImage, tol: f64) {
        let err = a
            .values()
            .iter()
            .zip(b.values())
            .filter(|(_, g)| g.abs() > 1e-8)
            .map(|(x, g)| ((x - g) / g).abs())
            .fold(0.0, f64::max);
        assert!(err <= tol, "max relative error {err}");
    }

    #[test]
    fn check_stop_cases() {
        let mut s = StopState::new();
        for _ in 0..5 {
            s.push(0.0);
        }
        assert_eq!(check_stop(&s, 5, 1000, 1e-4), Some(StopReason::Converged));

        let mut s = StopState::new();
        for d in [0.01, -0.002, 0.01, -0.003, 0.01] {
            s.push(d);
        }
        assert_eq!(check_stop(&s, 5, 1000, 1e-4), Some(StopReason::Settled));

        let mut s = StopState::new();
        for d in [0.01, 0.01, 0.01, -0.002, 0.01] {
            s.push(d);
        }
        assert_eq!(check_stop(&s, 5, 1000, 1e-4), None);

        // Max steps takes precedence.
        assert_eq!(check_stop(&s, 1000, 1000, 1e-4), Some(StopReason::MaxSteps));

        // Fewer than five deltas: no stop.
        let mut s = StopState::new();
        s.push(0.0);
        assert_eq!(check_stop(&s, 1, 1000, 1e-4), None);
    }

    #[test]
    fn fgsm_zero_gradient_is_identity() {
        // The C-BCE flat branch yields an exactly-zero gradient, so the
        // step is sign(0) = 0 everywhere.
        let m = model();
        let imgs = images(2, 47);
        let cfg = AttackConfig {
            epsilon: 0.03,
            alpha: 0.001,
            t_max: 1,
            tau_conv: 0.0,
            seed: 1,
            objective: Objective::Cbce,
            cbce_tau: Some(0.99),
        };
        // d(source, target) < 0.99 with overwhelming margin -> flat branch.
        let r = fgsm_attack(&m, &imgs[0], &imgs[1], &cfg).unwrap();
        assert_eq!(r.adversarial.pixels(), imgs[0].pixels());
        assert_eq!(r.stop_reason, StopReason::OneStep);
    }

    #[test]
    fn fgsm_clamps_at_the_box() {
        let m = model();
        let imgs = images(2, 49);
        let cfg = AttackConfig {
            epsilon: 0.03,
            alpha: 0.001,
            t_max: 1,
            tau_conv: 0.0,
            seed: 1,
            objective: Objective::Sgadv,
            cbce_tau: None,
        };
        let r = fgsm_attack(&m, &imgs[0], &imgs[1], &cfg).unwrap();
        assert!(linf_distance(&r.adversarial, &imgs[0]).unwrap() <= 0.03 + 1e-12);
        assert!(r.adversarial.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn pgd_requires_reachable_budget() {
        let m = model();
        let imgs = images(2, 51);
        let mut cfg = sgadv_cfg(1);
        cfg.t_max = 10; // epsilon/alpha = 30 > 10
        assert!(pgd_attack(&m, &imgs[0], &imgs[1], &cfg).is_err());
    }

    #[test]
    fn pgd_runs_exactly_t_max_and_respects_budget() {
        let m = model();
        let imgs = images(2, 53);
        let mut cfg = sgadv_cfg(3);
        cfg.t_max = 40;
        let r = pgd_attack(&m, &imgs[0], &imgs[1], &cfg).unwrap();
        assert_eq!(r.steps_taken, 40);
        assert_eq!(r.stop_reason, StopReason::MaxSteps);
        assert_eq!(r.loss_trace.len(), 41);
        assert!(linf_distance(&r.adversarial, &imgs[0]).unwrap() <= cfg.epsilon + 1e-9);
    }

    #[test]
    fn pgd_descends_on_most_seeds() {
        let m = model();
        let imgs = images(2, 59);
        let mut wins = 0;
        for seed in 0..100 {
            let mut cfg = sgadv_cfg(seed);
            cfg.t_max = 40;
            let r = pgd_attack(&m, &imgs[0], &imgs[1], &cfg).unwrap();
            if r.loss_trace.last().unwrap() <= r.loss_trace.first().unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 95, "descent on {wins}/100 seeded runs");
    }

    #[test]
    fn sgadv_attack_is_deterministic() {
        let m = model();
        let imgs = images(2, 61);
        let cfg = sgadv_cfg(7);
        let a = sgadv_attack(&m, &imgs[0], &imgs[1], &cfg).unwrap();
        let b = sgadv_attack(&m, &imgs[0], &imgs[1], &cfg).unwrap();
        assert_eq!(a.adversarial.pixels(), b.adversarial.pixels());
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.steps_taken, b.steps_taken);
    }

    #[test]
    fn sgadv_attack_halts_and_tracks_best() {
        let m = model();
        let imgs = images(2, 67);
        let cfg = sgadv_cfg(11);
        let r = sgadv_attack(&m, &imgs[0], &imgs[1], &cfg).unwrap();
        assert!(r.steps_taken <= cfg.t_max);
        assert!(r.best_loss <= *r.loss_trace.last().unwrap() + 1e-15);
        assert_eq!(r.best_loss, r.loss_trace[r.best_step]);
        assert!(linf_distance(&r.adversarial, &imgs[0]).unwrap() <= cfg.epsilon + 1e-9);
    }

    #[test]
    fn sgadv_attack_rejects_cbce_objective() {
        let m = model();
        let imgs = images(2, 69);
        let mut cfg = sgadv_cfg(1);
        cfg.objective = Objective::Cbce;
        cfg.cbce_tau = Some(0.3);
        assert!(sgadv_attack(&m, &imgs[0], &imgs[1], &cfg).is_err());
    }

    #[test]
    fn cbce_acceptance_region_is_a_fixed_point() {
        // Once the iterate's dissimilarity is at or below tau, the C-BCE
        // cograd is exactly zero, sign(0) = 0, and one more step leaves the
        // image unchanged.
        let m = model();
        let imgs = images(2, 71);
        let f_target = m.embed(&imgs[1]).unwrap();
        let f = m.embed(&imgs[0]).unwrap();
        let d = dissimilarity(&f, &f_target).unwrap();
        let tau = (d + 0.05).min(0.99);
        let cograd = cbce_loss_cograd(&f, &f_target, tau).unwrap();
        assert!(cograd.iter().all(|&g| g == 0.0));
        let grad = m.input_gradient(&imgs[0], &cograd).unwrap();
        assert!(grad.values().iter().all(|&g| g == 0.0));
    }
}
