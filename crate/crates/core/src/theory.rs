//! Exact numerical checks: the KL and gradient decompositions, the
//! bandwidth variants, the belief-update identity, the leakage guarantees
//! and the trilemma grid.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    grpo_surrogate, GroupBatch, OpsdVariant, RlsdForm, TokenAdvantages, CreditConfig, EPS_STD,
};
use crate::env::{exact_accuracy, Instance, JointModel, privileged_posterior};
use crate::error::{LabError, Result};
use crate::policy::{
    sample_rollout, ConditionalPolicy, ContextKey, PolicyParams, Privileged, SampleMode, TokenDistribution, Vocab,
};
use crate::trainer::{
    answer_context, rescore_teacher, rollout_seed, CreditTrace, Method, RlsdContext, TeacherStrategy, Trainer,
    TrainerConfig,
};

pub const DECOMPOSITION_TOL: f64 = 1e-9;
pub const MEAN_DELTA_TOL: f64 = 1e-10;
pub const BAYES_STEP_TOL: f64 = 1e-10;
pub const BAYES_PRODUCT_TOL: f64 = 1e-9;
pub const CEILING_GRAD_TOL: f64 = 1e-10;
/// Gradient norm below which the learning signal counts as vanished.
pub const SIGNAL_FLOOR: f64 = 1e-6;
/// Train accuracy treated as the solved plateau.
pub const PLATEAU_ACCURACY: f64 = 0.95;

fn check_row(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(LabError::InvalidDistribution(format!("{what} has length {} not {len}", row.len())));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(LabError::InvalidDistribution(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(LabError::InvalidDistribution(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// `KL(p ‖ q)` in nats by direct summation.
fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut out = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Err(LabError::InvalidDistribution("support not covered by the reference row".into()));
        }
        out += a * (a / b).ln();
    }
    Ok(out)
}

fn mix(rows: &[Vec<f64>], prior: &[f64]) -> Vec<f64> {
    if !rows.is_empty() && rows.iter().all(|r| *r == rows[0]) {
        return rows[0].clone();
    }
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for (row, &w) in rows.iter().zip(prior) {
        for (o, p) in out.iter_mut().zip(row) {
            *o += w * p;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in row.iter().enumerate() {
        if *p > row[best] {
            best = i;
        }
    }
    best
}

/// `Σ_r p_r KL(T_r ‖ P̄)`.
fn mutual_information(rows: &[Vec<f64>], prior: &[f64]) -> Result<f64> {
    let bar = mix(rows, prior);
    let mut out = 0.0;
    for (row, &w) in rows.iter().zip(prior) {
        if w > 0.0 {
            out += w * kl(row, &bar)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub l_opsd: f64,
    pub l_star: f64,
    pub mutual_information: f64,
    pub residual: f64,
}

/// Computes `L_OPSD = E_r KL(T_r ‖ S)`, `L* = KL(P̄_T ‖ S)` and
/// `I = E_r KL(T_r ‖ P̄_T)` independently and reports the residual.
pub fn check_kl_decomposition(teacher_rows: &[Vec<f64>], prior: &[f64], student: &[f64]) -> Result<DecompositionReport> {
    if teacher_rows.is_empty() || teacher_rows.len() != prior.len() {
        return Err(LabError::invalid("need one prior weight per teacher row"));
    }
    let n = student.len();
    check_row(student, n, "student row")?;
    check_row(prior, prior.len(), "prior")?;
    for row in teacher_rows {
        check_row(row, n, "teacher row")?;
    }
    let mut l_opsd = 0.0;
    for (row, &w) in teacher_rows.iter().zip(prior) {
        if w > 0.0 {
            l_opsd += w * kl(row, student)?;
        }
    }
    let l_star = kl(&mix(teacher_rows, prior), student)?;
    let mutual_information = mutual_information(teacher_rows, prior)?;
    Ok(DecompositionReport {
        l_opsd,
        l_star,
        mutual_information,
        residual: (l_opsd - l_star - mutual_information).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradDecompositionReport {
    pub g_star: Vec<f64>,
    pub per_r: Vec<Vec<f64>>,
    pub deltas: Vec<Vec<f64>>,
    /// `max_r ‖g(θ; r) − g* − δ(θ; r)‖_∞`.
    pub reconstruction_error: f64,
    pub mean_delta_norm: f64,
    pub diagonal_variance: f64,
    pub measured_variance: f64,
    pub mutual_information: f64,
}

/// One context's contribution: teacher rows per r and `∇ log P_S(v)` per
/// candidate `v` as dense vectors.
pub struct ScoreContext {
    pub teacher_rows: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
}

/// Decomposes `g(θ; r) = −Σ_ctx Σ_v P_T(v | r) ∇ log P_S(v)` into `g*` and
/// `δ(θ; r)`, each computed from its own formula.
pub fn gradient_decomposition(contexts: &[ScoreContext], prior: &[f64]) -> Result<GradDecompositionReport> {
    check_row(prior, prior.len(), "prior")?;
    let dim = contexts
        .iter()
        .flat_map(|c| c.scores.first())
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    let n_r = prior.len();
    let mut per_r = vec![vec![0.0; dim]; n_r];
    let mut g_star = vec![0.0; dim];
    let mut deltas = vec![vec![0.0; dim]; n_r];
    let mut diagonal_variance = 0.0;
    let mut mi = 0.0;
    for c in contexts {
        if c.teacher_rows.len() != n_r {
            return Err(LabError::invalid("every context needs one teacher row per r"));
        }
        let n = c.scores.len();
        for row in &c.teacher_rows {
            check_row(row, n, "teacher row")?;
        }
        if c.scores.iter().any(|s| s.len() != dim) {
            return Err(LabError::invalid("score vectors differ in length"));
        }
        let bar = mix(&c.teacher_rows, prior);
        mi += mutual_information(&c.teacher_rows, prior)?;
        for v in 0..n {
            let s = &c.scores[v];
            for (g, x) in g_star.iter_mut().zip(s) {
                *g -= bar[v] * x;
            }
            let mut var = 0.0;
            for r in 0..n_r {
                let p = c.teacher_rows[r][v];
                let dev = p - bar[v];
                var += prior[r] * dev * dev;
                for (i, x) in s.iter().enumerate() {
                    per_r[r][i] -= p * x;
                    deltas[r][i] -= dev * x;
                }
            }
            diagonal_variance += var * s.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let mut reconstruction_error: f64 = 0.0;
    let mut mean_delta = vec![0.0; dim];
    let mut measured_variance = 0.0;
    for r in 0..n_r {
        for i in 0..dim {
            reconstruction_error = reconstruction_error.max((per_r[r][i] - g_star[i] - deltas[r][i]).abs());
            mean_delta[i] += prior[r] * deltas[r][i];
        }
        measured_variance += prior[r] * deltas[r].iter().map(|x| x * x).sum::<f64>();
    }
    Ok(GradDecompositionReport {
        g_star,
        per_r,
        deltas,
        reconstruction_error,
        mean_delta_norm: norm(&mean_delta),
        diagonal_variance,
        measured_variance,
        mutual_information: mi,
    })
}

/// Score vectors `c_v e_v`: pairwise orthogonal, so the diagonal variance
/// formula is exact.
pub fn orthogonal_scores(lengths: &[f64]) -> Vec<Vec<f64>> {
    let n = lengths.len();
    (0..n)
        .map(|v| {
            let mut e = vec![0.0; n];
            e[v] = lengths[v];
            e
        })
        .collect()
}

fn dense_score(params: &PolicyParams, ctx: &ContextKey, v: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; params.feature_map().len()];
    params.logprob_grad(ctx, v)?.add_scaled_to(&mut out, 1.0);
    Ok(out)
}

fn teacher_rows(params: &PolicyParams, ctx: &ContextKey, privileged: &[(Privileged, f64)]) -> Result<Vec<Vec<f64>>> {
    privileged
        .iter()
        .map(|(r, _)| Ok(params.teacher_dist(&ctx.with_privileged(r.clone()))?.probs().to_vec()))
        .collect()
}

/// Decomposition of the self-distillation gradient of `params` summed over
/// student contexts `contexts`.
pub fn check_gradient_decomposition(
    params: &PolicyParams,
    contexts: &[ContextKey],
    privileged: &[(Privileged, f64)],
) -> Result<GradDecompositionReport> {
    let prior: Vec<f64> = privileged.iter().map(|(_, w)| *w).collect();
    let n = params.vocab().size();
    let mut parts = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let ctx = ctx.student();
        parts.push(ScoreContext {
            teacher_rows: teacher_rows(params, &ctx, privileged)?,
            scores: (0..n).map(|v| dense_score(params, &ctx, v)).collect::<Result<_>>()?,
        });
    }
    gradient_decomposition(&parts, &prior)
}

/// Student contexts reached by emitting prefixes of each privileged
/// sequence, position 0 first, without duplicates.
pub fn derivation_prefix_contexts(instance: &Instance, vocab: Vocab, k: usize) -> Vec<ContextKey> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in &instance.privileged {
        let toks = &e.info.tokens;
        for l in 0..toks.len().min(instance.max_len) {
            let ctx = ContextKey::new(vocab, k, instance.id, None, &instance.prompt, &toks[..l]);
            if seen.insert(ctx.clone()) {
                out.push(ctx);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantCheck {
    pub variant: OpsdVariant,
    /// Tokens receiving nonzero target weight, summed over contexts and r.
    pub bandwidth: usize,
    /// Largest relative error of the derived form against central differences.
    pub max_relative_error: f64,
    /// Largest `‖g(r) − g(r')‖_∞` over contexts and r pairs.
    pub max_r_spread: f64,
    pub r_dependent: bool,
    pub expected_r_dependent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub contexts: usize,
    pub mutual_information: f64,
    pub variants: Vec<VariantCheck>,
    pub passed: bool,
}

pub const BANDWIDTH_FD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const SPREAD_TOL: f64 = 1e-12;

/// Loss of one variant at a context as a function of the student row, with
/// the selected token fixed.
fn variant_loss(variant: OpsdVariant, teacher: &[f64], student: &TokenDistribution, pick: usize) -> f64 {
    match variant {
        OpsdVariant::Full => teacher
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(v, p)| p * (p.ln() - student.log_prob(v)))
            .sum(),
        OpsdVariant::TeacherTop1 => -student.log_prob(pick),
        OpsdVariant::StudentTop1 => teacher[pick] / student.prob(pick),
    }
}

/// Derived gradient form: full `−Σ_v P_T(v|r) ∇log P_S(v)`, teacher top-1
/// `−∇log P_S(v*_T)`, student top-1 `−(P_T(v*_S|r)/P_S(v*_S)) ∇log P_S(v*_S)`.
fn variant_gradient(
    variant: OpsdVariant,
    teacher: &[f64],
    student: &TokenDistribution,
    scores: &[Vec<f64>],
) -> (Vec<f64>, usize, usize) {
    let dim = scores[0].len();
    let mut g = vec![0.0; dim];
    let (pick, width) = match variant {
        OpsdVariant::Full => {
            for (v, s) in scores.iter().enumerate() {
                for (o, x) in g.iter_mut().zip(s) {
                    *o -= teacher[v] * x;
                }
            }
            (0, teacher.iter().filter(|p| **p > 0.0).count())
        }
        OpsdVariant::TeacherTop1 => {
            let v = argmax(teacher);
            for (o, x) in g.iter_mut().zip(&scores[v]) {
                *o -= x;
            }
            (v, 1)
        }
        OpsdVariant::StudentTop1 => {
            let v = student.argmax();
            let w = teacher[v] / student.prob(v);
            for (o, x) in g.iter_mut().zip(&scores[v]) {
                *o -= w * x;
            }
            (v, 1)
        }
    };
    (g, pick, width)
}

/// Checks the three bandwidth variants on the derivation contexts of
/// `instance`: derived forms against central differences, and whether each
/// form changes with r exactly when its r-dependent ingredient does.
pub fn check_bandwidth_variants(params: &PolicyParams, instance: &Instance) -> Result<BandwidthReport> {
    let vocab = params.vocab();
    let contexts = derivation_prefix_contexts(instance, vocab, params.window_len());
    let privileged: Vec<(Privileged, f64)> = instance.priors().map(|(r, w)| (r.clone(), w)).collect();
    let prior: Vec<f64> = privileged.iter().map(|(_, w)| *w).collect();
    let n = vocab.size();
    let mut checks: Vec<VariantCheck> = [OpsdVariant::Full, OpsdVariant::TeacherTop1, OpsdVariant::StudentTop1]
        .into_iter()
        .map(|variant| VariantCheck {
            variant,
            bandwidth: 0,
            max_relative_error: 0.0,
            max_r_spread: 0.0,
            r_dependent: false,
            expected_r_dependent: false,
        })
        .collect();
    let mut mi = 0.0;
    for ctx in &contexts {
        let student = params.student_dist(ctx)?;
        let scores: Vec<Vec<f64>> = (0..n).map(|v| dense_score(params, ctx, v)).collect::<Result<_>>()?;
        let rows = teacher_rows(params, ctx, &privileged)?;
        mi += mutual_information(&rows, &prior)?;
        let feats = params.active_features(ctx);
        for check in checks.iter_mut() {
            let mut grads = Vec::with_capacity(rows.len());
            for row in &rows {
                let (g, pick, width) = variant_gradient(check.variant, row, &student, &scores);
                check.bandwidth += width;
                // brute force over every feature the student row depends on
                let mut probe = params.clone();
                let mut err = 0.0;
                let mut scale: f64 = 0.0;
                for &f in &feats {
                    let orig = probe.weight(f);
                    probe.set_weight(f, orig + FD_STEP);
                    let up = variant_loss(check.variant, row, &probe.student_dist(ctx)?, pick);
                    probe.set_weight(f, orig - FD_STEP);
                    let down = variant_loss(check.variant, row, &probe.student_dist(ctx)?, pick);
                    probe.set_weight(f, orig);
                    let fd = (up - down) / (2.0 * FD_STEP);
                    err += (fd - g[f]).powi(2);
                    scale = scale.max(fd.abs());
                }
                let rel = err.sqrt() / scale.max(1e-12);
                check.max_relative_error = check.max_relative_error.max(rel);
                grads.push(g);
            }
            for a in 0..grads.len() {
                for b in a + 1..grads.len() {
                    let spread = grads[a]
                        .iter()
                        .zip(&grads[b])
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                    check.max_r_spread = check.max_r_spread.max(spread);
                }
            }
            let ingredient_varies = match check.variant {
                OpsdVariant::Full => rows.iter().any(|r| max_diff(r, &rows[0]) > SPREAD_TOL),
                OpsdVariant::TeacherTop1 => rows.iter().any(|r| argmax(r) != argmax(&rows[0])),
                OpsdVariant::StudentTop1 => {
                    let v = student.argmax();
                    rows.iter().any(|r| (r[v] - rows[0][v]).abs() > SPREAD_TOL)
                }
            };
            check.expected_r_dependent |= ingredient_varies;
        }
    }
    for check in checks.iter_mut() {
        check.r_dependent = check.max_r_spread > SPREAD_TOL;
    }
    let passed = checks
        .iter()
        .all(|c| c.max_relative_error <= BANDWIDTH_FD_TOL && c.r_dependent == c.expected_r_dependent);
    Ok(BandwidthReport {
        contexts: contexts.len(),
        mutual_information: mi,
        variants: checks,
        passed,
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesReport {
    pub trajectories: usize,
    pub tokens: usize,
    /// Zero-probability trajectories, not checked.
    pub skipped: usize,
    pub max_step_violation: f64,
    pub max_product_violation: f64,
}

impl BayesReport {
    pub fn passed(&self) -> bool {
        self.max_step_violation <= BAYES_STEP_TOL && self.max_product_violation <= BAYES_PRODUCT_TOL
    }
}

/// For every positive-probability `(r, y)` of the joint, compares
/// `w_t = P_T(y_t)/P_S(y_t)` under the exact-tabular policy with the
/// posterior ratio `P(r | y_≤t)/P(r | y_<t)`, and `Π_t w_t` with
/// `P(r | y)/P(r)`.
pub fn check_bayesian_identity(joint: &JointModel) -> Result<BayesReport> {
    let policy = joint.exact_policy()?;
    let x = joint.prompt();
    let mut posteriors: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    let mut posterior = |prefix: &[usize]| -> Result<Vec<f64>> {
        if let Some(p) = posteriors.get(prefix) {
            return Ok(p.clone());
        }
        let p: Vec<f64> = privileged_posterior(joint, x, prefix)?.into_iter().map(|(_, w)| w).collect();
        posteriors.insert(prefix.to_vec(), p.clone());
        Ok(p)
    };
    let mut report = BayesReport {
        trajectories: 0,
        tokens: 0,
        skipped: 0,
        max_step_violation: 0.0,
        max_product_violation: 0.0,
    };
    for entry in joint.entries() {
        if entry.prob <= 0.0 {
            report.skipped += 1;
            continue;
        }
        report.trajectories += 1;
        let (r, prior) = &joint.privileged()[entry.r];
        let mut product = 1.0;
        for t in 0..entry.tokens.len() {
            let prefix = &entry.tokens[..t];
            let y = entry.tokens[t];
            let s = policy.student_dist(&joint.context(None, prefix))?.prob(y);
            let tp = policy.teacher_dist(&joint.context(Some(r.clone()), prefix))?.prob(y);
            let w = tp / s;
            let before = posterior(prefix)?[entry.r];
            let after = posterior(&entry.tokens[..=t])?[entry.r];
            report.max_step_violation = report.max_step_violation.max((w - after / before).abs());
            product *= w;
            report.tokens += 1;
        }
        let end = posterior(&entry.tokens)?[entry.r];
        report.max_product_violation = report.max_product_violation.max((product - end / prior).abs());
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub tokens: usize,
    /// Tokens with `sign(Â_t) ≠ sign(A)`.
    pub sign_violations: usize,
    /// Tokens whose stored clipped weight leaves `[1 − ε_w, 1 + ε_w]`.
    pub bound_violations: usize,
    /// Tokens with `|Â_t − A| > |A| · max(|w_t − 1|, |clip(w_t) − 1|)`.
    pub degradation_violations: usize,
    pub max_weight: f64,
    pub max_clipped_weight: f64,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.sign_violations == 0 && self.bound_violations == 0 && self.degradation_violations == 0
    }
}

/// Scans RLSD credit traces for the directional, boundedness and
/// degradation guarantees.
pub fn check_leakage_free(traces: &[CreditTrace], eps_w: f64) -> LeakageReport {
    let mut rep = LeakageReport::default();
    let (lo, hi) = (1.0 - eps_w, 1.0 + eps_w);
    for trace in traces {
        let a = trace.advantage;
        for c in &trace.credits {
            rep.tokens += 1;
            let same_sign = if a > 0.0 {
                c.advantage > 0.0
            } else if a < 0.0 {
                c.advantage < 0.0
            } else {
                c.advantage == 0.0
            };
            if !same_sign {
                rep.sign_violations += 1;
            }
            if !(lo..=hi).contains(&c.clipped_weight) {
                rep.bound_violations += 1;
            }
            let reach = (c.weight - 1.0).abs().max((c.clipped_weight - 1.0).abs());
            if (c.advantage - a).abs() > a.abs() * reach * (1.0 + 1e-12) + 1e-15 {
                rep.degradation_violations += 1;
            }
            rep.max_weight = rep.max_weight.max(c.weight);
            rep.max_clipped_weight = rep.max_clipped_weight.max(c.clipped_weight);
        }
    }
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub nonzero: usize,
    /// Nonzero gradient entries outside the student features of the sampled contexts.
    pub outside: usize,
    /// Nonzero gradient entries on teacher-only features.
    pub teacher_only: usize,
}

impl SupportReport {
    pub fn passed(&self) -> bool {
        self.outside == 0 && self.teacher_only == 0
    }
}

/// Support of the RLSD gradient for one group per training instance at the
/// initial parameters of `config`.
pub fn check_support_isolation(config: &TrainerConfig) -> Result<SupportReport> {
    let trainer = Trainer::new(TrainerConfig {
        method: Method::Rlsd,
        ..config.clone()
    })?;
    let params = trainer.initial_params();
    let fmap = params.feature_map();
    let (vocab, k) = (params.vocab(), params.window_len());
    let credit = CreditConfig {
        eps_w: config.eps_w,
        lambda: config.lambda0,
        form: config.rlsd_form,
    };
    let mut grad = vec![0.0; fmap.len()];
    let mut allowed = HashSet::new();
    for (ii, inst) in trainer.train_instances().into_iter().enumerate() {
        let r = match config.rlsd_context {
            RlsdContext::Answer => answer_context(inst),
            RlsdContext::Derivation => inst.privileged[0].info.clone(),
        };
        let mut rollouts = Vec::with_capacity(config.group_size);
        for g in 0..config.group_size {
            let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(config.seed, 0, ii, g));
            let mut ro = sample_rollout(params, inst, &SampleMode::Student, &r, &mut rng, inst.max_len)?;
            rescore_teacher(params, &mut ro)?;
            for t in 0..ro.len() {
                allowed.extend(params.active_features(&ro.student_context(vocab, k, t)));
            }
            rollouts.push(ro);
        }
        let group = GroupBatch::new(rollouts, EPS_STD)?;
        let (adv, _) = TokenAdvantages::rlsd(&group, &credit)?;
        let part = grpo_surrogate(params, &group, &adv, config.eps_low, config.eps_high)?;
        for (o, x) in grad.iter_mut().zip(&part.grad) {
            *o += x;
        }
    }
    let mut rep = SupportReport {
        nonzero: 0,
        outside: 0,
        teacher_only: 0,
    };
    for (id, g) in grad.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        rep.nonzero += 1;
        if !allowed.contains(&id) {
            rep.outside += 1;
        }
        if fmap.is_teacher_only(id) {
            rep.teacher_only += 1;
        }
    }
    Ok(rep)
}

/// Runs RLSD with `λ = 0` and GRPO side by side and returns the largest
/// per-step parameter difference.
pub fn lambda_zero_deviation(config: &TrainerConfig, steps: usize) -> Result<f64> {
    let base = TrainerConfig {
        steps,
        rlsd_form: RlsdForm::Interpolated,
        ..config.clone()
    };
    let mut rlsd = Trainer::new(TrainerConfig {
        method: Method::Rlsd,
        lambda_override: Some(0.0),
        ..base.clone()
    })?;
    let mut grpo = Trainer::new(TrainerConfig {
        method: Method::Grpo,
        ..base
    })?;
    let mut worst: f64 = 0.0;
    for update in 0..steps {
        rlsd.step(update)?;
        grpo.step(update)?;
        worst = worst.max(max_diff(rlsd.params.weights(), grpo.params.weights()));
    }
    Ok(worst)
}

/// Student mode is the prior-weighted teacher mixture `P̄_T` of fixed
/// parameters: the optimum of self-distillation against a frozen teacher.
pub struct MarginalTeacher<'a> {
    params: &'a PolicyParams,
    priors: HashMap<u32, Vec<(Privileged, f64)>>,
}

impl<'a> MarginalTeacher<'a> {
    pub fn new(params: &'a PolicyParams, instances: &[&Instance]) -> Self {
        let priors = instances
            .iter()
            .map(|i| (i.id.0, i.priors().map(|(r, w)| (r.clone(), w)).collect()))
            .collect();
        MarginalTeacher { params, priors }
    }

    fn rows(&self, ctx: &ContextKey) -> Result<(Vec<(Privileged, f64)>, Vec<TokenDistribution>)> {
        let priv_ = self
            .priors
            .get(&ctx.prompt.0)
            .ok_or_else(|| LabError::MissingContext(format!("prompt {}", ctx.prompt.0)))?
            .clone();
        let rows = priv_
            .iter()
            .map(|(r, _)| self.params.teacher_dist(&ctx.with_privileged(r.clone())))
            .collect::<Result<_>>()?;
        Ok((priv_, rows))
    }
}

impl ConditionalPolicy for MarginalTeacher<'_> {
    fn vocab(&self) -> Vocab {
        self.params.vocab()
    }

    fn window_len(&self) -> usize {
        self.params.window_len()
    }

    fn student_dist(&self, ctx: &ContextKey) -> Result<TokenDistribution> {
        if !ctx.is_student() {
            return Err(LabError::ModeMismatch("student_dist called with a privileged context"));
        }
        let (priv_, rows) = self.rows(ctx)?;
        let parts: Vec<(f64, &TokenDistribution)> = priv_.iter().map(|(_, w)| *w).zip(&rows).collect();
        TokenDistribution::mixture(&parts)
    }

    fn teacher_dist(&self, ctx: &ContextKey) -> Result<TokenDistribution> {
        self.params.teacher_dist(ctx)
    }
}

/// Gradient of the frozen-teacher objective with respect to tabular student
/// logits, evaluated at `P_S = P̄_T` on the derivation contexts, and the
/// exact train accuracy of that optimum.
pub fn capacity_ceiling(teacher: &PolicyParams, instances: &[&Instance]) -> Result<(f64, f64)> {
    let optimum = MarginalTeacher::new(teacher, instances);
    let mut sq = 0.0;
    for inst in instances {
        let priv_: Vec<(Privileged, f64)> = inst.priors().map(|(r, w)| (r.clone(), w)).collect();
        for ctx in derivation_prefix_contexts(inst, teacher.vocab(), teacher.window_len()) {
            let s = optimum.student_dist(&ctx)?;
            let mut g = vec![0.0; s.len()];
            for (r, w) in &priv_ {
                let t = teacher.teacher_dist(&ctx.with_privileged(r.clone()))?;
                for (v, gv) in g.iter_mut().enumerate() {
                    *gv += w * (s.prob(v) - t.prob(v));
                }
            }
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    Ok((sq.sqrt(), exact_accuracy(&optimum, instances)?))
}

/// Series recorded for one strategy and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub seed: u64,
    pub delta_s: Vec<f64>,
    pub delta_t: Vec<f64>,
    pub rho: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub grad_norm: Vec<f64>,
    /// Exact train accuracy at step 0 and at every checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
    /// Steps with `Δ_T > |Δ_S|`.
    pub instability_events: usize,
    pub leakage: Option<LeakageReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub stability: bool,
    pub improvement: bool,
    pub leakage_free: bool,
    pub runs: Vec<StrategyRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrilemmaReport {
    pub steps: usize,
    pub checkpoint_every: usize,
    /// Gradient norm of the frozen objective at `P_S = P̄_T`.
    pub ceiling_grad_norm: f64,
    /// Train accuracy of `P̄_T` itself.
    pub ceiling_accuracy: f64,
    pub support: SupportReport,
    pub rows: Vec<StrategyRow>,
    pub matches_expected: bool,
}

impl TrilemmaReport {
    pub fn row(&self, strategy: &str) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

/// Expected `(stability, improvement, leakage-free)` pattern.
pub const TRILEMMA_GRID: [(&str, [bool; 3]); 3] = [
    ("frozen", [true, false, false]),
    ("online", [false, true, false]),
    ("rlsd", [true, true, true]),
];

fn strategy_run(config: &TrainerConfig, checkpoint_every: usize) -> Result<StrategyRun> {
    let cfg = TrainerConfig {
        eval_every: checkpoint_every,
        ..config.clone()
    };
    let log = crate::trainer::run(&cfg)?;
    let steps = &log.records[1..];
    let delta_s: Vec<f64> = steps.iter().map(|r| r.delta_s.unwrap_or(0.0)).collect();
    let delta_t: Vec<f64> = steps.iter().map(|r| r.delta_t.unwrap_or(0.0)).collect();
    let instability_events = delta_s.iter().zip(&delta_t).filter(|(s, t)| **t > s.abs()).count();
    let leakage = (cfg.method == Method::Rlsd).then(|| check_leakage_free(&log.credit_traces, cfg.eps_w));
    Ok(StrategyRun {
        seed: cfg.seed,
        rho: steps.iter().map(|r| r.rho.unwrap_or(0.0)).collect(),
        sensitivity: log.records.iter().map(|r| r.sensitivity).collect(),
        grad_norm: steps.iter().map(|r| r.grad_norm.unwrap_or(0.0)).collect(),
        checkpoints: log
            .records
            .iter()
            .filter_map(|r| r.train_accuracy.map(|a| (r.step, a)))
            .collect(),
        delta_s,
        delta_t,
        instability_events,
        leakage,
    })
}

/// Gradient norm stays above [`SIGNAL_FLOOR`] on every step taken before the
/// accuracy plateau.
fn signal_persists(run: &StrategyRun) -> bool {
    let mut solved = false;
    for (i, g) in run.grad_norm.iter().enumerate() {
        let step = i + 1;
        if run.checkpoints.iter().any(|(s, a)| *s < step && *a >= PLATEAU_ACCURACY) {
            solved = true;
        }
        if !solved && *g < SIGNAL_FLOOR {
            return false;
        }
    }
    true
}

/// Train accuracy strictly increases between consecutive checkpoints until
/// it reaches the plateau.
fn accuracy_rises(run: &StrategyRun) -> bool {
    run.checkpoints
        .windows(2)
        .all(|w| w[0].1 >= PLATEAU_ACCURACY || w[1].1 > w[0].1)
}

/// Fills the trilemma grid from short seeded runs of OPSD with a frozen and
/// an online teacher and of RLSD.
pub fn check_trilemma(
    base: &TrainerConfig,
    seeds: &[u64],
    steps: usize,
    checkpoint_every: usize,
) -> Result<TrilemmaReport> {
    if seeds.is_empty() || checkpoint_every == 0 {
        return Err(LabError::invalid("need at least one seed and a positive checkpoint interval"));
    }
    let trainer = Trainer::new(base.clone())?;
    let (ceiling_grad_norm, ceiling_accuracy) =
        capacity_ceiling(trainer.initial_params(), &trainer.train_instances())?;
    let support = check_support_isolation(base)?;
    let variants = [
        ("frozen", Method::Opsd, TeacherStrategy::Frozen),
        ("online", Method::Opsd, TeacherStrategy::Online),
        ("rlsd", Method::Rlsd, base.teacher),
    ];
    let mut rows = Vec::new();
    for (name, method, teacher) in variants {
        let runs = seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainerConfig {
                    method,
                    teacher,
                    seed,
                    steps,
                    ..base.clone()
                };
                strategy_run(&cfg, checkpoint_every)
            })
            .collect::<Result<Vec<_>>>()?;
        let teacher_still = runs.iter().all(|r| r.delta_t.iter().all(|d| *d == 0.0));
        let no_r_direction = runs.iter().all(|r| r.rho.iter().all(|x| *x <= 1e-12));
        let (stability, improvement, leakage_free) = match name {
            "rlsd" => (
                // the objective is the verifier reward, which no teacher update moves
                true,
                runs.iter().all(|r| signal_persists(r) && accuracy_rises(r)),
                support.passed() && runs.iter().all(|r| r.leakage.as_ref().is_some_and(LeakageReport::passed)),
            ),
            "frozen" => (
                teacher_still,
                ceiling_accuracy >= PLATEAU_ACCURACY && runs.iter().all(signal_persists),
                no_r_direction,
            ),
            _ => (teacher_still, runs.iter().all(signal_persists), no_r_direction),
        };
        rows.push(StrategyRow {
            strategy: name.to_string(),
            stability,
            improvement,
            leakage_free,
            runs,
        });
    }
    let matches_expected = TRILEMMA_GRID.iter().all(|(name, want)| {
        rows.iter()
            .find(|r| r.strategy == *name)
            .is_some_and(|r| [r.stability, r.improvement, r.leakage_free] == *want)
    });
    Ok(TrilemmaReport {
        steps,
        checkpoint_every,
        ceiling_grad_norm,
        ceiling_accuracy,
        support,
        rows,
        matches_expected,
    })
}

/// Random distribution over `n` entries; with `zeros`, roughly a fifth of
/// the entries are zero.
pub fn random_row<R: Rng + ?Sized>(rng: &mut R, n: usize, zeros: bool) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|_| if zeros && rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.01..1.0) })
        .collect();
    if row.iter().all(|p| *p == 0.0) {
        row[rng.gen_range(0..n)] = 1.0;
    }
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
    row
}

/// One named pass/fail line of the suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub seed: u64,
    pub kl_draws: usize,
    pub gradient_draws: usize,
    pub joints: usize,
    pub leakage_steps: usize,
    pub trilemma_seeds: Vec<u64>,
    pub trilemma_steps: usize,
    pub checkpoint_every: usize,
    pub trainer: TrainerConfig,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            seed: 0,
            kl_draws: 200,
            gradient_draws: 100,
            joints: 40,
            leakage_steps: 40,
            trilemma_seeds: vec![0, 1],
            trilemma_steps: 60,
            checkpoint_every: 10,
            trainer: TrainerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
}

impl TheoryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One `PASS`/`FAIL` line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let metrics: Vec<String> = c.metrics.iter().map(|(k, v)| format!("{k}={v:.3e}")).collect();
            out.push_str(&format!(
                "{} {:<22} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                metrics.join(" ")
            ));
        }
        out
    }
}

fn outcome(name: &str, passed: bool, metrics: &[(&str, f64)]) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// Runs every check with the draws and runs described by `cfg`.
pub fn run_suite(cfg: &TheoryConfig) -> Result<TheoryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..cfg.kl_draws {
        let n = rng.gen_range(2..=12);
        let n_r = rng.gen_range(1..=8);
        let rows: Vec<Vec<f64>> = (0..n_r).map(|_| random_row(&mut rng, n, true)).collect();
        let prior = random_row(&mut rng, n_r, false);
        let student = random_row(&mut rng, n, false);
        worst = worst.max(check_kl_decomposition(&rows, &prior, &student)?.residual);
    }
    checks.push(outcome(
        "kl_decomposition",
        worst <= DECOMPOSITION_TOL,
        &[("draws", cfg.kl_draws as f64), ("max_residual", worst)],
    ));

    let (mut mean_delta, mut recon, mut diag_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..cfg.gradient_draws {
        let n = rng.gen_range(2..=12);
        let n_r = rng.gen_range(1..=8);
        let prior = random_row(&mut rng, n_r, false);
        let lengths: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..3.0)).collect();
        let ctx = ScoreContext {
            teacher_rows: (0..n_r).map(|_| random_row(&mut rng, n, true)).collect(),
            scores: orthogonal_scores(&lengths),
        };
        let rep = gradient_decomposition(&[ctx], &prior)?;
        mean_delta = mean_delta.max(rep.mean_delta_norm);
        recon = recon.max(rep.reconstruction_error);
        diag_gap = diag_gap.max((rep.measured_variance - rep.diagonal_variance).abs());
    }
    let trainer = Trainer::new(cfg.trainer.clone())?;
    let params = trainer.initial_params();
    let inst = trainer.train_instances()[0];
    let privileged: Vec<(Privileged, f64)> = inst.priors().map(|(r, w)| (r.clone(), w)).collect();
    let contexts = derivation_prefix_contexts(inst, params.vocab(), params.window_len());
    let policy_rep = check_gradient_decomposition(params, &contexts, &privileged)?;
    mean_delta = mean_delta.max(policy_rep.mean_delta_norm);
    recon = recon.max(policy_rep.reconstruction_error);
    checks.push(outcome(
        "gradient_decomposition",
        mean_delta <= MEAN_DELTA_TOL && recon <= 1e-12 && diag_gap <= MEAN_DELTA_TOL,
        &[
            ("max_mean_delta", mean_delta),
            ("max_reconstruction", recon),
            ("max_diagonal_gap", diag_gap),
            ("policy_measured_variance", policy_rep.measured_variance),
            ("policy_diagonal_variance", policy_rep.diagonal_variance),
        ],
    ));

    let band = check_bandwidth_variants(params, inst)?;
    let mut metrics = vec![("mutual_information", band.mutual_information)];
    let names = ["full_rel_error", "teacher_top1_rel_error", "student_top1_rel_error"];
    for (v, name) in band.variants.iter().zip(names) {
        metrics.push((name, v.max_relative_error));
    }
    checks.push(outcome("bandwidth_variants", band.passed, &metrics));

    let (mut step_v, mut prod_v, mut tokens): (f64, f64, usize) = (0.0, 0.0, 0);
    for _ in 0..cfg.joints {
        let v = rng.gen_range(2..=JointModel::MAX_VOCAB);
        let len = rng.gen_range(1..=JointModel::MAX_LEN);
        let n_r = rng.gen_range(1..=4);
        let joint = JointModel::random(&mut rng, v, len, n_r)?;
        let rep = check_bayesian_identity(&joint)?;
        step_v = step_v.max(rep.max_step_violation);
        prod_v = prod_v.max(rep.max_product_violation);
        tokens += rep.tokens;
    }
    checks.push(outcome(
        "bayesian_identity",
        step_v <= BAYES_STEP_TOL && prod_v <= BAYES_PRODUCT_TOL,
        &[("tokens", tokens as f64), ("max_step", step_v), ("max_product", prod_v)],
    ));

    let rlsd_cfg = TrainerConfig {
        method: Method::Rlsd,
        steps: cfg.leakage_steps,
        ..cfg.trainer.clone()
    };
    let log = crate::trainer::run(&rlsd_cfg)?;
    let leak = check_leakage_free(&log.credit_traces, rlsd_cfg.eps_w);
    let support = check_support_isolation(&rlsd_cfg)?;
    let lambda0 = lambda_zero_deviation(&rlsd_cfg, cfg.leakage_steps)?;
    checks.push(outcome(
        "leakage_free",
        leak.passed() && support.passed() && lambda0 <= 1e-12,
        &[
            ("tokens", leak.tokens as f64),
            ("sign_violations", leak.sign_violations as f64),
            ("bound_violations", leak.bound_violations as f64),
            ("support_outside", support.outside as f64),
            ("lambda_zero_deviation", lambda0),
        ],
    ));

    let tri = check_trilemma(&cfg.trainer, &cfg.trilemma_seeds, cfg.trilemma_steps, cfg.checkpoint_every)?;
    let events: usize = tri
        .row("online")
        .map_or(0, |r| r.runs.iter().map(|x| x.instability_events).sum());
    checks.push(outcome(
        "trilemma",
        tri.matches_expected && tri.ceiling_grad_norm <= CEILING_GRAD_TOL,
        &[
            ("ceiling_grad_norm", tri.ceiling_grad_norm),
            ("ceiling_accuracy", tri.ceiling_accuracy),
            ("online_instability_events", events as f64),
        ],
    ));

    let passed = checks.iter().all(|c| c.passed);
    Ok(TheoryReport { checks, passed })
}
