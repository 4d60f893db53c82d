//! Advantage and loss engines.
//!
//! Every engine returns the gradient of a loss to be minimized, so the
//! caller applies `θ ← θ − lr · grad`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::Instance;
use crate::error::{LabError, Result};
use crate::policy::{
    ConditionalPolicy, ContextKey, PolicyParams, Privileged, PrivilegedId, PromptId, Rollout,
    TokenDistribution,
};

pub const EPS_STD: f64 = 1e-8;

/// `(R_i − μ) / σ` with the population standard deviation; all zeros when
/// `σ ≤ eps_std`.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(LabError::invalid("a group needs at least two rewards"));
    }
    let (mean, std) = mean_std(rewards);
    if std <= eps_std {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rollouts of one prompt with their group-normalized advantages.
#[derive(Clone, Debug)]
pub struct GroupBatch {
    pub prompt: PromptId,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl GroupBatch {
    pub fn new(rollouts: Vec<Rollout>, eps_std: f64) -> Result<Self> {
        let prompt = rollouts
            .first()
            .map(|r| r.prompt)
            .ok_or_else(|| LabError::invalid("empty group"))?;
        if rollouts.iter().any(|r| r.prompt != prompt) {
            return Err(LabError::invalid("group mixes prompts"));
        }
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = group_advantages(&rewards, eps_std)?;
        let (mean, std) = mean_std(&rewards);
        Ok(GroupBatch {
            prompt,
            rollouts,
            rewards,
            advantages,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|a| *a == 0.0)
    }
}

/// `Δ_t = teacher_lp − student_lp`.
pub fn privileged_gain(student_lp: f64, teacher_lp: f64) -> Result<f64> {
    if !student_lp.is_finite() || !teacher_lp.is_finite() {
        return Err(LabError::NonFinite(format!(
            "log-probs ({student_lp}, {teacher_lp})"
        )));
    }
    Ok(teacher_lp - student_lp)
}

/// `exp(sign · Δ_t)`; only the sign of `adv_sign` is used.
pub fn evidence_weight(delta: f64, adv_sign: f64) -> f64 {
    let s = if adv_sign > 0.0 {
        1.0
    } else if adv_sign < 0.0 {
        -1.0
    } else {
        0.0
    };
    (s * delta).exp()
}

pub fn clip_weight(w: f64, eps_w: f64) -> f64 {
    w.clamp(1.0 - eps_w, 1.0 + eps_w)
}

/// Token advantage `A · ((1 − λ) + λ · clip(w, 1 − ε_w, 1 + ε_w))`.
pub fn rlsd_token_advantage(a: f64, w: f64, eps_w: f64, lambda: f64) -> f64 {
    a * ((1.0 - lambda) + lambda * clip_weight(w, eps_w))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlsdForm {
    /// `A · ((1 − λ) + λ · clip(w))`.
    #[default]
    Interpolated,
    /// `A · clip(w)`, independent of λ.
    Clip,
    /// `(1 − λ) · A + λ · min(w · A, clip(w) · A)`. Unbounded for `A < 0`.
    MinClip,
}

pub fn rlsd_token_advantage_with(form: RlsdForm, a: f64, w: f64, eps_w: f64, lambda: f64) -> f64 {
    match form {
        RlsdForm::Interpolated => rlsd_token_advantage(a, w, eps_w, lambda),
        RlsdForm::Clip => a * clip_weight(w, eps_w),
        RlsdForm::MinClip => (1.0 - lambda) * a + lambda * (w * a).min(clip_weight(w, eps_w) * a),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreditConfig {
    pub eps_w: f64,
    pub lambda: f64,
    pub form: RlsdForm,
}

impl CreditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_w > 0.0 && self.eps_w < 1.0) {
            return Err(LabError::invalid(format!("eps_w {} outside (0, 1)", self.eps_w)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LabError::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Per-token credit record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCredit {
    pub delta: f64,
    pub weight: f64,
    pub clipped_weight: f64,
    pub advantage: f64,
    pub clipped: bool,
}

/// Credit for every token of `rollout` given its sequence advantage `a`.
pub fn token_credits(rollout: &Rollout, a: f64, cfg: &CreditConfig) -> Result<Vec<TokenCredit>> {
    cfg.validate()?;
    rollout
        .student_lp
        .iter()
        .zip(&rollout.teacher_lp)
        .map(|(&s, &t)| {
            let delta = privileged_gain(s, t)?;
            let weight = evidence_weight(delta, a);
            let clipped_weight = clip_weight(weight, cfg.eps_w);
            Ok(TokenCredit {
                delta,
                weight,
                clipped_weight,
                advantage: rlsd_token_advantage_with(cfg.form, a, weight, cfg.eps_w, cfg.lambda),
                clipped: clipped_weight != weight,
            })
        })
        .collect()
}

/// Per-token advantages for a group: uniform `A^(i)` or explicit `Â_t`.
#[derive(Clone, Debug)]
pub enum TokenAdvantages {
    Uniform,
    PerToken(Vec<Vec<f64>>),
}

impl TokenAdvantages {
    fn get(&self, group: &GroupBatch, i: usize, t: usize) -> f64 {
        match self {
            TokenAdvantages::Uniform => group.advantages[i],
            TokenAdvantages::PerToken(a) => a[i][t],
        }
    }

    /// RLSD credit for every rollout of `group`.
    pub fn rlsd(group: &GroupBatch, cfg: &CreditConfig) -> Result<(Self, Vec<Vec<TokenCredit>>)> {
        let credits = group
            .rollouts
            .iter()
            .zip(&group.advantages)
            .map(|(r, &a)| token_credits(r, a, cfg))
            .collect::<Result<Vec<_>>>()?;
        let adv = credits
            .iter()
            .map(|c| c.iter().map(|x| x.advantage).collect())
            .collect();
        Ok((TokenAdvantages::PerToken(adv), credits))
    }
}

/// Loss gradient with importance-ratio statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateGrad {
    pub grad: Vec<f64>,
    pub loss: f64,
    pub ratio_mean: f64,
    pub clip_fraction: f64,
    pub tokens: usize,
}

impl SurrogateGrad {
    pub fn zeros(len: usize) -> Self {
        SurrogateGrad {
            grad: vec![0.0; len],
            loss: 0.0,
            ratio_mean: 1.0,
            clip_fraction: 0.0,
            tokens: 0,
        }
    }

    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }

    /// `(1 − mix) · self + mix · other`; ratio statistics stay with `self`.
    pub fn blend(&self, other: &SurrogateGrad, mix: f64) -> SurrogateGrad {
        SurrogateGrad {
            grad: self
                .grad
                .iter()
                .zip(&other.grad)
                .map(|(a, b)| (1.0 - mix) * a + mix * b)
                .collect(),
            loss: (1.0 - mix) * self.loss + mix * other.loss,
            ratio_mean: self.ratio_mean,
            clip_fraction: self.clip_fraction,
            tokens: self.tokens,
        }
    }

    /// Mean of several gradients, weighting ratio statistics by token count.
    pub fn mean(parts: &[SurrogateGrad], len: usize) -> SurrogateGrad {
        let mut out = SurrogateGrad::zeros(len);
        if parts.is_empty() {
            return out;
        }
        let n = parts.len() as f64;
        let mut ratio = 0.0;
        let mut clipped = 0.0;
        for p in parts {
            for (o, g) in out.grad.iter_mut().zip(&p.grad) {
                *o += g / n;
            }
            out.loss += p.loss / n;
            ratio += p.ratio_mean * p.tokens as f64;
            clipped += p.clip_fraction * p.tokens as f64;
            out.tokens += p.tokens;
        }
        if out.tokens > 0 {
            out.ratio_mean = ratio / out.tokens as f64;
            out.clip_fraction = clipped / out.tokens as f64;
        }
        out
    }
}

/// Gradient of `−(1/G) Σ_i (1/|y_i|) Σ_t min(ρ_t Â_t, clip(ρ_t, 1 − ε_low, 1 + ε_high) Â_t)`.
///
/// `ρ_t` is taken against the rollout's recorded sampling log-probs.
pub fn grpo_surrogate(
    params: &PolicyParams,
    group: &GroupBatch,
    token_adv: &TokenAdvantages,
    eps_low: f64,
    eps_high: f64,
) -> Result<SurrogateGrad> {
    if group.is_empty() {
        return Err(LabError::invalid("empty group"));
    }
    let vocab = params.vocab();
    let k = params.window_len();
    let mut out = SurrogateGrad::zeros(params.feature_map().len());
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let g = group.len() as f64;
    for (i, rollout) in group.rollouts.iter().enumerate() {
        let len = rollout.len();
        if len == 0 {
            continue;
        }
        let scale = 1.0 / (g * len as f64);
        for t in 0..len {
            let adv = token_adv.get(group, i, t);
            let ctx = rollout.student_context(vocab, k, t);
            let dist = params.student_dist(&ctx)?;
            let token = rollout.tokens[t];
            let ratio = (dist.log_prob(token) - rollout.student_lp[t]).exp();
            ratio_sum += ratio;
            out.tokens += 1;
            let clipped_ratio = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
            let unclipped = ratio * adv;
            let bounded = clipped_ratio * adv;
            out.loss -= scale * unclipped.min(bounded);
            if bounded < unclipped {
                clipped += 1;
                continue;
            }
            if adv != 0.0 {
                let coeffs = PolicyParams::logprob_coefficients(&dist, token);
                params.accumulate_feature_combination(&ctx, &coeffs, -scale * adv * ratio, &mut out.grad);
            }
        }
    }
    if out.tokens > 0 {
        out.ratio_mean = ratio_sum / out.tokens as f64;
        out.clip_fraction = clipped as f64 / out.tokens as f64;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpsdVariant {
    #[default]
    Full,
    TeacherTop1,
    StudentTop1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    #[default]
    ForwardKl,
    ReverseKl,
}

/// Per-position distillation loss and its coefficient vector over candidate
/// tokens (gradient = `Σ_v c_v φ(ctx, v)`).
fn distill_position(
    teacher: &TokenDistribution,
    student: &TokenDistribution,
    sampled: usize,
    variant: OpsdVariant,
    divergence: Divergence,
) -> Result<(f64, Vec<f64>)> {
    match (variant, divergence) {
        (OpsdVariant::Full, Divergence::ForwardKl) => {
            let coeffs = student
                .probs()
                .iter()
                .zip(teacher.probs())
                .map(|(s, t)| s - t)
                .collect();
            Ok((teacher.kl_to(student), coeffs))
        }
        (OpsdVariant::TeacherTop1, Divergence::ForwardKl) => {
            let v = teacher.argmax();
            let mut coeffs = student.probs().to_vec();
            coeffs[v] -= 1.0;
            Ok((-student.log_prob(v), coeffs))
        }
        (OpsdVariant::StudentTop1, Divergence::ForwardKl) => {
            let v = student.argmax();
            let weight = teacher.prob(v) / student.prob(v);
            let coeffs = student.probs().iter().map(|p| weight * p).collect::<Vec<_>>();
            let mut coeffs = coeffs;
            coeffs[v] -= weight;
            Ok((weight, coeffs))
        }
        (OpsdVariant::Full, Divergence::ReverseKl) => {
            // policy-gradient form with Â_t = Δ_t held constant
            let delta = teacher.log_prob(sampled) - student.log_prob(sampled);
            let mut coeffs: Vec<f64> = student.probs().iter().map(|p| delta * p).collect();
            coeffs[sampled] -= delta;
            Ok((-delta * student.log_prob(sampled), coeffs))
        }
        (v, d) => Err(LabError::UndefinedObjective(format!("{v:?} with {d:?}"))),
    }
}

/// Shared driver for the distillation engines: token mean per rollout, mean
/// over rollouts.
fn distill_grad(
    params: &PolicyParams,
    rollouts: &[Rollout],
    variant: OpsdVariant,
    divergence: Divergence,
    mut teacher_row: impl FnMut(&Rollout, &ContextKey) -> Result<TokenDistribution>,
) -> Result<SurrogateGrad> {
    let vocab = params.vocab();
    let k = params.window_len();
    let mut out = SurrogateGrad::zeros(params.feature_map().len());
    if rollouts.is_empty() {
        return Ok(out);
    }
    let n = rollouts.len() as f64;
    for rollout in rollouts {
        let len = rollout.len();
        if len == 0 {
            continue;
        }
        let scale = 1.0 / (n * len as f64);
        for t in 0..len {
            let ctx = rollout.student_context(vocab, k, t);
            let student = params.student_dist(&ctx)?;
            let teacher = teacher_row(rollout, &ctx)?;
            let (loss, coeffs) = distill_position(&teacher, &student, rollout.tokens[t], variant, divergence)?;
            out.loss += scale * loss;
            out.tokens += 1;
            params.accumulate_feature_combination(&ctx, &coeffs, scale, &mut out.grad);
        }
    }
    Ok(out)
}

/// Self-distillation gradient; the teacher is evaluated in teacher mode with
/// each rollout's privileged sequence and receives no gradient.
pub fn opsd_grad<T: ConditionalPolicy + ?Sized>(
    params: &PolicyParams,
    teacher: &T,
    rollouts: &[Rollout],
    variant: OpsdVariant,
    divergence: Divergence,
) -> Result<SurrogateGrad> {
    distill_grad(params, rollouts, variant, divergence, |r, ctx| {
        teacher.teacher_dist(&ctx.with_privileged(r.privileged.clone()))
    })
}

/// Distillation toward an external teacher that never sees `r`.
pub fn opd_grad<T: ConditionalPolicy + ?Sized>(
    params: &PolicyParams,
    external_teacher: &T,
    rollouts: &[Rollout],
) -> Result<SurrogateGrad> {
    distill_grad(params, rollouts, OpsdVariant::Full, Divergence::ForwardKl, |_, ctx| {
        external_teacher.student_dist(ctx)
    })
}

/// `(1 − mix) · GRPO + mix · OPSD(full, forward KL)`.
pub fn additive_combo_grad<T: ConditionalPolicy + ?Sized>(
    params: &PolicyParams,
    group: &GroupBatch,
    teacher: &T,
    mix: f64,
    eps_low: f64,
    eps_high: f64,
) -> Result<SurrogateGrad> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(LabError::invalid(format!("mix weight {mix} outside [0, 1]")));
    }
    let grpo = grpo_surrogate(params, group, &TokenAdvantages::Uniform, eps_low, eps_high)?;
    let opsd = opsd_grad(params, teacher, &group.rollouts, OpsdVariant::Full, Divergence::ForwardKl)?;
    Ok(grpo.blend(&opsd, mix))
}

/// Most recent verified-correct rollout per prompt.
#[derive(Clone, Debug, Default)]
pub struct SuccessStore {
    latest: HashMap<PromptId, Privileged>,
    next_id: u32,
}

/// Privileged ids handed out by [`SuccessStore`] start here, clear of the
/// ids used by generated suites.
pub const SDPO_ID_BASE: u32 = 1 << 30;

impl SuccessStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `rollout` if it was rewarded; trailing END is dropped.
    pub fn record(&mut self, rollout: &Rollout, end: usize) {
        if rollout.reward <= 0.0 {
            return;
        }
        let mut tokens = rollout.tokens.clone();
        if tokens.last() == Some(&end) {
            tokens.pop();
        }
        let id = PrivilegedId(SDPO_ID_BASE + self.next_id);
        self.next_id += 1;
        self.latest.insert(rollout.prompt, Privileged::new(id, tokens));
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }
}

/// Privileged context for SDPO: the latest stored success for the prompt.
pub fn sdpo_context(store: &SuccessStore, instance: &Instance) -> Option<Privileged> {
    store.latest.get(&instance.id).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn group_advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 1.0, 0.0, 0.0], EPS_STD).unwrap(), vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(group_advantages(&[1.0; 4], EPS_STD).unwrap(), vec![0.0; 4]);
        let a = group_advantages(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], EPS_STD).unwrap();
        let sd = 0.1875f64.sqrt();
        assert!(close(a[0], 0.75 / sd, 1e-12) && close(a[0], 1.7321, 1e-4));
        assert!(close(a[1], -0.25 / sd, 1e-12) && close(a[1], -0.5774, 1e-4));
        assert!(group_advantages(&[1.0], EPS_STD).is_err());
    }

    #[test]
    fn gain_and_weight_examples() {
        assert_eq!(privileged_gain(-2.0, -1.0).unwrap(), 1.0);
        assert_eq!(privileged_gain(-1.0, -1.0).unwrap(), 0.0);
        assert_eq!(privileged_gain(-1.0, -2.0).unwrap(), -1.0);
        assert!(privileged_gain(f64::NEG_INFINITY, -1.0).is_err());
        assert!(privileged_gain(-1.0, f64::NAN).is_err());
        assert!(close(evidence_weight(1.0, 1.0), std::f64::consts::E, 1e-15));
        assert!(close(evidence_weight(1.0, -1.0), (-1f64).exp(), 1e-15));
        assert_eq!(evidence_weight(0.0, 1.0), 1.0);
        assert_eq!(evidence_weight(3.0, 0.0), 1.0);
    }

    #[test]
    fn token_advantage_examples() {
        let a = 1.7321;
        assert!(close(rlsd_token_advantage(a, std::f64::consts::E, 0.2, 1.0), a * 1.2, 1e-15));
        assert!(close(rlsd_token_advantage(a, std::f64::consts::E, 0.2, 1.0), 2.0785, 1e-4));
        assert_eq!(rlsd_token_advantage(-0.7, 9.0, 0.2, 0.0), -0.7);
        assert_eq!(rlsd_token_advantage(0.4, 1.0, 0.2, 0.8), 0.4);
        let w = evidence_weight(1.0, -1.0);
        assert!(close(rlsd_token_advantage(-1.0, w, 0.2, 0.5), -0.9, 1e-15));
    }

    #[test]
    fn forms_agree_where_they_should() {
        let (a, eps) = (0.8, 0.2);
        for w in [0.3, 0.9, 1.0, 1.1, 4.0] {
            assert_eq!(
                rlsd_token_advantage_with(RlsdForm::Clip, a, w, eps, 0.3),
                rlsd_token_advantage(a, w, eps, 1.0)
            );
            assert_eq!(rlsd_token_advantage_with(RlsdForm::MinClip, a, w, eps, 0.0), a);
        }
        // min form keeps the unclipped low weight for positive advantages
        assert!(close(rlsd_token_advantage_with(RlsdForm::MinClip, 1.0, 0.5, eps, 1.0), 0.5, 1e-15));
        assert!(close(rlsd_token_advantage_with(RlsdForm::MinClip, 1.0, 3.0, eps, 1.0), 1.2, 1e-15));
    }

    #[test]
    fn store_keeps_latest_success() {
        use std::sync::Arc;
        let v = crate::policy::Vocab::new(4, 3).unwrap();
        let inst = Instance::single_for_tests(v);
        let mut store = SuccessStore::new();
        assert!(sdpo_context(&store, &inst).is_none());
        let mk = |tokens: Vec<usize>, reward: f64| Rollout {
            prompt: inst.id,
            prompt_tokens: Arc::from(inst.prompt.clone()),
            privileged: inst.privileged[0].info.clone(),
            student_lp: vec![-1.0; tokens.len()],
            teacher_lp: vec![-1.0; tokens.len()],
            tokens,
            reward,
        };
        store.record(&mk(vec![1, 0, 3], 1.0), 3);
        assert_eq!(&*sdpo_context(&store, &inst).unwrap().tokens, &[1, 0]);
        store.record(&mk(vec![2, 2], 0.0), 3);
        assert_eq!(&*sdpo_context(&store, &inst).unwrap().tokens, &[1, 0]);
        store.record(&mk(vec![2, 0], 1.0), 3);
        assert_eq!(&*sdpo_context(&store, &inst).unwrap().tokens, &[2, 0]);
    }

    #[test]
    fn undefined_combinations_error() {
        let d = TokenDistribution::from_scores(&[0.0, 1.0]);
        for v in [OpsdVariant::TeacherTop1, OpsdVariant::StudentTop1] {
            assert!(matches!(
                distill_position(&d, &d, 0, v, Divergence::ReverseKl),
                Err(LabError::UndefinedObjective(_))
            ));
        }
    }
}
