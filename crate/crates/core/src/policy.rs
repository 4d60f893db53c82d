//! Small autoregressive softmax policies.
//!
//! One parameter vector backs two conditional distributions: the student
//! mode, which sees the prompt and its own prefix, and the teacher mode,
//! which additionally sees a privileged token sequence. The featurized
//! linear backend ([`PolicyParams`]) is what the trainer optimizes; the
//! exact tabular backend ([`TabularPolicy`]) stores true conditionals and
//! is used to verify identities that only hold for exact models.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{verify, Instance};
use crate::error::{LabError, Result};

pub type Token = usize;

/// Version tag written into checkpoints; bump when the feature layout changes.
pub const FEATURE_MAP_VERSION: u32 = 1;

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    end: Token,
}

impl Vocab {
    pub const MAX_SIZE: usize = 64;

    pub fn new(size: usize, end: Token) -> Result<Self> {
        if !(2..=Self::MAX_SIZE).contains(&size) {
            return Err(LabError::invalid(format!(
                "vocab size {size} outside [2, {}]",
                Self::MAX_SIZE
            )));
        }
        if end >= size {
            return Err(LabError::invalid(format!("END id {end} not below vocab size {size}")));
        }
        Ok(Vocab { size, end })
    }

    pub fn size(self) -> usize {
        self.size
    }

    pub fn end(self) -> Token {
        self.end
    }

    /// Padding marker used to fill context windows that reach before the
    /// start of the sequence. Never sampled.
    pub fn pad(self) -> Token {
        self.size
    }

    pub fn contains(self, token: Token) -> bool {
        token < self.size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrivilegedId(pub u32);

/// A privileged token sequence visible only to the teacher.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Privileged {
    pub id: PrivilegedId,
    pub tokens: Arc<[Token]>,
}

impl Privileged {
    pub fn new(id: PrivilegedId, tokens: impl Into<Arc<[Token]>>) -> Self {
        Privileged {
            id,
            tokens: tokens.into(),
        }
    }

    fn contains(&self, token: Token) -> bool {
        self.tokens.contains(&token)
    }

    /// Bit `v` set iff `v` occurs in the sequence.
    fn member_mask(&self) -> u64 {
        self.tokens.iter().fold(0, |m, &t| m | 1 << t)
    }

    /// Bit `v` set iff `v` directly follows `prev` in `pad ++ tokens ++ end`.
    fn successor_mask(&self, pad: Token, end: Token, prev: Token) -> u64 {
        let mut mask = 0;
        let mut last = pad;
        for &t in self.tokens.iter().chain(std::iter::once(&end)) {
            if last == prev {
                mask |= 1 << t;
            }
            last = t;
        }
        mask
    }

    /// Whether `next` directly follows `prev` in the sequence, read as if
    /// preceded by the padding marker `pad` and terminated by `end`.
    fn has_transition(&self, pad: Token, end: Token, prev: Token, next: Token) -> bool {
        self.successor_mask(pad, end, prev) >> next & 1 == 1
    }
}

/// Conditioning tuple for one next-token distribution.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContextKey {
    pub prompt: PromptId,
    /// `None` selects student mode.
    pub privileged: Option<Privileged>,
    /// Last `k` tokens of prompt ++ response prefix, left-padded.
    pub window: Vec<Token>,
    /// Index of the response token being predicted.
    pub position: usize,
}

impl ContextKey {
    /// Builds the key for predicting response token `prefix.len()` after
    /// `prompt_tokens ++ prefix`.
    pub fn new(
        vocab: Vocab,
        k: usize,
        prompt: PromptId,
        privileged: Option<Privileged>,
        prompt_tokens: &[Token],
        prefix: &[Token],
    ) -> Self {
        let mut window = vec![vocab.pad(); k];
        let total = prompt_tokens.len() + prefix.len();
        for (slot, idx) in (total.saturating_sub(k)..total).enumerate() {
            let tok = if idx < prompt_tokens.len() {
                prompt_tokens[idx]
            } else {
                prefix[idx - prompt_tokens.len()]
            };
            window[k - total.min(k) + slot] = tok;
        }
        ContextKey {
            prompt,
            privileged,
            window,
            position: prefix.len(),
        }
    }

    pub fn is_student(&self) -> bool {
        self.privileged.is_none()
    }

    pub fn student(&self) -> ContextKey {
        ContextKey {
            privileged: None,
            ..self.clone()
        }
    }

    pub fn with_privileged(&self, r: Privileged) -> ContextKey {
        ContextKey {
            privileged: Some(r),
            ..self.clone()
        }
    }

    /// Key for the next position after emitting `token`.
    pub fn advance(&self, token: Token) -> ContextKey {
        let mut window = self.window.clone();
        window.rotate_left(1);
        if let Some(last) = window.last_mut() {
            *last = token;
        }
        ContextKey {
            prompt: self.prompt,
            privileged: self.privileged.clone(),
            window,
            position: self.position + 1,
        }
    }

    /// Most recent token in the window (a prompt token at position 0).
    pub fn last_token(&self) -> Token {
        *self.window.last().expect("window is never empty")
    }
}

/// A normalized next-token distribution with cached log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl TokenDistribution {
    /// Softmax of `scores`, max-shifted before exponentiation.
    pub fn from_scores(scores: &[f64]) -> Self {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        let log_probs: Vec<f64> = scores.iter().map(|s| s - lse).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        TokenDistribution { probs, log_probs }
    }

    /// Validates a probability row; it must sum to 1 within 1e-9 and is
    /// renormalized exactly.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(LabError::InvalidDistribution("empty row".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LabError::InvalidDistribution(format!(
                "negative or non-finite entry in {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(LabError::InvalidDistribution(format!("row sums to {sum}")));
        }
        let probs: Vec<f64> = probs.into_iter().map(|p| p / sum).collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(TokenDistribution { probs, log_probs })
    }

    /// Convex combination `Σ_i w_i · d_i`.
    pub fn mixture(components: &[(f64, &TokenDistribution)]) -> Result<Self> {
        let Some((_, first)) = components.first() else {
            return Err(LabError::invalid("empty mixture"));
        };
        let n = first.len();
        let total: f64 = components.iter().map(|(w, _)| *w).sum();
        if components.iter().any(|(w, d)| *w < 0.0 || !w.is_finite() || d.len() != n) {
            return Err(LabError::invalid("mixture weights must be finite, non-negative, same length"));
        }
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(LabError::invalid(format!("mixture weights sum to {total}")));
        }
        let mut probs = vec![0.0; n];
        for (w, d) in components {
            for (acc, p) in probs.iter_mut().zip(&d.probs) {
                *acc += w / total * p;
            }
        }
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(TokenDistribution { probs, log_probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.probs[token]
    }

    pub fn log_prob(&self, token: Token) -> f64 {
        self.log_probs[token]
    }

    /// Most probable token, lowest id on ties.
    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| -p * l)
            .sum()
    }

    /// KL(self ‖ other) in nats.
    pub fn kl_to(&self, other: &TokenDistribution) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .zip(&other.log_probs)
            .filter(|((p, _), _)| **p > 0.0)
            .map(|((p, lp), lq)| p * (lp - lq))
            .sum()
    }

    /// Inverse-CDF draw from a uniform variate in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> Token {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > 0.0 {
                last_positive = i;
            }
            acc += p;
            if u < acc {
                return i;
            }
        }
        last_positive
    }
}

/// Additive score offsets `b` on the tokens in `mask`; the shifted row is
/// `P(v)·e^{b_v}/Z` with `Z = 1 + Σ_{v∈mask} P(v)(e^{b_v} − 1)`.
#[derive(Clone, Debug)]
pub struct PrivilegedShift {
    pub mask: u64,
    pub bonus: [f64; Vocab::MAX_SIZE],
    /// `e^{b_v}`.
    pub scale: [f64; Vocab::MAX_SIZE],
}

impl PrivilegedShift {
    /// Iterates over the tokens in the mask.
    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        let mut m = self.mask;
        std::iter::from_fn(move || {
            (m != 0).then(|| {
                let v = m.trailing_zeros() as usize;
                m &= m - 1;
                v
            })
        })
    }

    /// `ln Z` for the base row `base`.
    pub fn log_normalizer(&self, base: &TokenDistribution) -> f64 {
        self.tokens().map(|v| base.probs[v] * self.bonus[v].exp_m1()).sum::<f64>().ln_1p()
    }

    pub fn apply(&self, base: &TokenDistribution) -> TokenDistribution {
        let lz = self.log_normalizer(base);
        let z_inv = (-lz).exp();
        let mut log_probs = Vec::with_capacity(base.len());
        let mut probs = Vec::with_capacity(base.len());
        for (v, (&p, &lp)) in base.probs.iter().zip(&base.log_probs).enumerate() {
            if self.mask >> v & 1 == 1 {
                let l = lp + self.bonus[v] - lz;
                log_probs.push(l);
                probs.push(l.exp());
            } else {
                log_probs.push(lp - lz);
                probs.push(p * z_inv);
            }
        }
        TokenDistribution { probs, log_probs }
    }
}

/// Anything that provides student and teacher conditionals.
pub trait ConditionalPolicy {
    fn vocab(&self) -> Vocab;
    /// Number of trailing tokens kept in each [`ContextKey`] window.
    fn window_len(&self) -> usize;
    fn student_dist(&self, ctx: &ContextKey) -> Result<TokenDistribution>;
    fn teacher_dist(&self, ctx: &ContextKey) -> Result<TokenDistribution>;

    fn dist(&self, ctx: &ContextKey) -> Result<TokenDistribution> {
        if ctx.is_student() {
            self.student_dist(ctx)
        } else {
            self.teacher_dist(ctx)
        }
    }

    fn context(
        &self,
        prompt: PromptId,
        privileged: Option<Privileged>,
        prompt_tokens: &[Token],
        prefix: &[Token],
    ) -> ContextKey {
        ContextKey::new(
            self.vocab(),
            self.window_len(),
            prompt,
            privileged,
            prompt_tokens,
            prefix,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// `(last-order tokens, candidate)`; order runs 1..=k.
    Window { order: usize },
    Position,
    /// Candidate appears anywhere in the privileged sequence.
    PrivilegedMember,
    /// Candidate follows the last response token inside the privileged
    /// sequence, which is read as terminated by END.
    PrivilegedTransition,
}

/// Layout of the sparse linear features.
///
/// Shared features (both modes): `(last-j window, v)` for every order
/// `j in 1..=k`, and `(position bucket, v)`. Teacher-only features read the
/// content of the privileged sequence: `(v in r, v)` and
/// `(last response token -> v is a bigram of pad ++ r ++ END, last, v)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    vocab: Vocab,
    k: usize,
    position_buckets: usize,
}

impl FeatureMap {
    pub fn new(vocab: Vocab, k: usize, position_buckets: usize) -> Result<Self> {
        if k == 0 || k > 4 {
            return Err(LabError::invalid(format!("window length {k} outside [1, 4]")));
        }
        if position_buckets == 0 {
            return Err(LabError::invalid("need at least one position bucket"));
        }
        Ok(FeatureMap {
            vocab,
            k,
            position_buckets,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn position_buckets(&self) -> usize {
        self.position_buckets
    }

    fn alphabet(&self) -> usize {
        self.vocab.size() + 1
    }

    fn window_offset(&self, order: usize) -> usize {
        let v = self.vocab.size();
        (1..order).map(|j| self.alphabet().pow(j as u32) * v).sum()
    }

    fn position_offset(&self) -> usize {
        self.window_offset(self.k + 1)
    }

    fn member_offset(&self) -> usize {
        self.position_offset() + self.position_buckets * self.vocab.size()
    }

    fn transition_offset(&self) -> usize {
        self.member_offset() + self.vocab.size()
    }

    pub fn len(&self) -> usize {
        self.transition_offset() + self.alphabet() * self.vocab.size()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Feature id of `(gram, v)`, `gram` ordered oldest to newest.
    pub fn window_feature(&self, gram: &[Token], v: Token) -> usize {
        debug_assert!(!gram.is_empty() && gram.len() <= self.k);
        let idx = gram.iter().fold(0, |acc, &t| acc * self.alphabet() + t);
        self.window_offset(gram.len()) + idx * self.vocab.size() + v
    }

    pub fn position_feature(&self, position: usize, v: Token) -> usize {
        let bucket = position.min(self.position_buckets - 1);
        self.position_offset() + bucket * self.vocab.size() + v
    }

    pub fn member_feature(&self, v: Token) -> usize {
        self.member_offset() + v
    }

    pub fn transition_feature(&self, prev: Token, v: Token) -> usize {
        self.transition_offset() + prev * self.vocab.size() + v
    }

    pub fn kind(&self, id: usize) -> FeatureKind {
        if id >= self.transition_offset() {
            FeatureKind::PrivilegedTransition
        } else if id >= self.member_offset() {
            FeatureKind::PrivilegedMember
        } else if id >= self.position_offset() {
            FeatureKind::Position
        } else {
            let order = (1..=self.k)
                .rev()
                .find(|&j| id >= self.window_offset(j))
                .unwrap_or(1);
            FeatureKind::Window { order }
        }
    }

    pub fn is_teacher_only(&self, id: usize) -> bool {
        id >= self.member_offset()
    }

    /// Last response token for the transition feature; the padding marker
    /// at position 0 so that the first privileged token can be matched.
    pub(crate) fn transition_source(&self, ctx: &ContextKey) -> Token {
        if ctx.position == 0 {
            self.vocab.pad()
        } else {
            *ctx.window.last().expect("window is never empty")
        }
    }

    /// Appends the shared features active for `(ctx, v)`.
    pub fn shared_features(&self, ctx: &ContextKey, v: Token, out: &mut Vec<usize>) {
        for order in 1..=self.k {
            out.push(self.window_feature(&ctx.window[self.k - order..], v));
        }
        out.push(self.position_feature(ctx.position, v));
    }

    /// Appends the teacher-only features active for `(ctx, v)`; none in
    /// student mode.
    pub fn privileged_features(&self, ctx: &ContextKey, v: Token, out: &mut Vec<usize>) {
        if let Some(r) = &ctx.privileged {
            if r.contains(v) {
                out.push(self.member_feature(v));
            }
            if r.has_transition(self.vocab.pad(), self.vocab.end(), self.transition_source(ctx), v) {
                out.push(self.transition_feature(self.transition_source(ctx), v));
            }
        }
    }

    pub fn active_features(&self, ctx: &ContextKey, v: Token, out: &mut Vec<usize>) {
        self.shared_features(ctx, v, out);
        self.privileged_features(ctx, v, out);
    }
}

/// Sparse gradient: sorted, duplicate-free `(feature id, value)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGrad {
    entries: Vec<(usize, f64)>,
}

impl SparseGrad {
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|(id, _)| *id);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (id, v) in pairs {
            match entries.last_mut() {
                Some((last, acc)) if *last == id => *acc += v,
                _ => entries.push((id, v)),
            }
        }
        SparseGrad { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> f64 {
        self.entries
            .binary_search_by_key(&id, |(i, _)| *i)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }

    pub fn add_scaled_to(&self, dense: &mut [f64], scale: f64) {
        for (id, v) in &self.entries {
            dense[*id] += scale * v;
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }
}

/// Weights of the featurized-linear policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    fmap: FeatureMap,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(fmap: FeatureMap) -> Self {
        let weights = vec![0.0; fmap.len()];
        PolicyParams { fmap, weights }
    }

    pub fn from_weights(fmap: FeatureMap, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != fmap.len() {
            return Err(LabError::invalid(format!(
                "expected {} weights, got {}",
                fmap.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(LabError::NonFinite("policy weights".into()));
        }
        Ok(PolicyParams { fmap, weights })
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.fmap
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, id: usize) -> f64 {
        self.weights[id]
    }

    pub fn set_weight(&mut self, id: usize, value: f64) {
        self.weights[id] = value;
    }

    pub fn add_weight(&mut self, id: usize, delta: f64) {
        self.weights[id] += delta;
    }

    /// `θ ← θ − lr · grad`.
    pub fn descend(&mut self, grad: &[f64], lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= lr * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Linear scores for every candidate token under the mode of `ctx`.
    pub fn scores(&self, ctx: &ContextKey) -> Vec<f64> {
        let mut out = vec![0.0; self.fmap.vocab().size()];
        self.for_each_block(ctx, |base, mask| match mask {
            None => {
                for (o, w) in out.iter_mut().zip(&self.weights[base..]) {
                    *o += w;
                }
            }
            Some(mut m) => {
                while m != 0 {
                    let v = m.trailing_zeros() as usize;
                    out[v] += self.weights[base + v];
                    m &= m - 1;
                }
            }
        });
        out
    }

    /// Calls `f(base, mask)` for every block of active features under `ctx`:
    /// feature `base + v` is active for candidate `v` when `mask` is `None`
    /// or has bit `v` set. Matches [`FeatureMap::active_features`].
    fn for_each_block(&self, ctx: &ContextKey, mut f: impl FnMut(usize, Option<u64>)) {
        let fm = &self.fmap;
        let k = fm.k();
        for order in 1..=k {
            f(fm.window_feature(&ctx.window[k - order..], 0), None);
        }
        f(fm.position_feature(ctx.position, 0), None);
        if let Some(r) = &ctx.privileged {
            f(fm.member_feature(0), Some(r.member_mask()));
            let src = fm.transition_source(ctx);
            f(fm.transition_feature(src, 0), Some(r.successor_mask(fm.vocab().pad(), fm.vocab().end(), src)));
        }
    }

    /// Adds `scale · Σ_v coeffs[v] · φ(ctx, v)` into `out`.
    ///
    /// Every log-softmax gradient is of this form: `∇ log π(y) = φ(y) − Σ_v π(v) φ(v)`.
    pub fn accumulate_feature_combination(
        &self,
        ctx: &ContextKey,
        coeffs: &[f64],
        scale: f64,
        out: &mut [f64],
    ) {
        self.for_each_block(ctx, |base, mask| match mask {
            None => {
                for (o, c) in out[base..].iter_mut().zip(coeffs) {
                    *o += scale * c;
                }
            }
            Some(mut m) => {
                while m != 0 {
                    let v = m.trailing_zeros() as usize;
                    out[base + v] += scale * coeffs[v];
                    m &= m - 1;
                }
            }
        });
    }

    /// Coefficients `e_token − π` for `∇ log π(token)`.
    pub fn logprob_coefficients(dist: &TokenDistribution, token: Token) -> Vec<f64> {
        let mut coeffs: Vec<f64> = dist.probs().iter().map(|p| -p).collect();
        coeffs[token] += 1.0;
        coeffs
    }

    /// Analytic gradient of `log π(token | ctx)` with respect to the weights.
    pub fn logprob_grad(&self, ctx: &ContextKey, token: Token) -> Result<SparseGrad> {
        self.check_token(token)?;
        let dist = self.dist_unchecked(ctx);
        let coeffs = Self::logprob_coefficients(&dist, token);
        let mut pairs = Vec::new();
        let mut feats = Vec::new();
        for (v, c) in coeffs.iter().enumerate() {
            feats.clear();
            self.fmap.active_features(ctx, v, &mut feats);
            pairs.extend(feats.iter().map(|&f| (f, *c)));
        }
        Ok(SparseGrad::from_pairs(pairs))
    }

    /// Central-difference gradient of `log π(token | ctx)` over the
    /// features active for `ctx`.
    pub fn finite_diff_grad(&self, ctx: &ContextKey, token: Token, step: f64) -> Result<SparseGrad> {
        self.check_token(token)?;
        if !(1e-7..=1e-4).contains(&step) {
            return Err(LabError::invalid(format!("finite-difference step {step} outside [1e-7, 1e-4]")));
        }
        let mut probe = self.clone();
        let mut pairs = Vec::new();
        for id in self.active_features(ctx) {
            let orig = probe.weights[id];
            probe.weights[id] = orig + step;
            let up = probe.dist_unchecked(ctx).log_prob(token);
            probe.weights[id] = orig - step;
            let down = probe.dist_unchecked(ctx).log_prob(token);
            probe.weights[id] = orig;
            let d = (up - down) / (2.0 * step);
            if !d.is_finite() {
                return Err(LabError::NonFinite(format!("finite difference at feature {id}")));
            }
            pairs.push((id, d));
        }
        Ok(SparseGrad::from_pairs(pairs))
    }

    /// Union of the features active for any candidate under `ctx`, sorted.
    pub fn active_features(&self, ctx: &ContextKey) -> Vec<usize> {
        let mut feats = Vec::new();
        for v in 0..self.fmap.vocab().size() {
            self.fmap.active_features(ctx, v, &mut feats);
        }
        feats.sort_unstable();
        feats.dedup();
        feats
    }

    fn check_token(&self, token: Token) -> Result<()> {
        if self.fmap.vocab().contains(token) {
            Ok(())
        } else {
            Err(LabError::invalid(format!("token {token} outside vocabulary")))
        }
    }

    fn dist_unchecked(&self, ctx: &ContextKey) -> TokenDistribution {
        TokenDistribution::from_scores(&self.scores(ctx))
    }

    /// Score offsets the privileged blocks add for `r` at the student
    /// context `ctx`: the only difference between the two modes.
    pub fn privileged_shift(&self, ctx: &ContextKey, r: &Privileged) -> PrivilegedShift {
        let fm = &self.fmap;
        let src = fm.transition_source(ctx);
        let members = r.member_mask();
        let successors = r.successor_mask(fm.vocab().pad(), fm.vocab().end(), src);
        let (m_base, t_base) = (fm.member_feature(0), fm.transition_feature(src, 0));
        let mut shift = PrivilegedShift {
            mask: members | successors,
            bonus: [0.0; Vocab::MAX_SIZE],
            scale: [1.0; Vocab::MAX_SIZE],
        };
        let mut mask = shift.mask;
        while mask != 0 {
            let v = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            if members >> v & 1 == 1 {
                shift.bonus[v] += self.weights[m_base + v];
            }
            if successors >> v & 1 == 1 {
                shift.bonus[v] += self.weights[t_base + v];
            }
            shift.scale[v] = shift.bonus[v].exp();
        }
        shift
    }

    /// Teacher row for `r` at the student context `ctx`, given `student`,
    /// the student row of these parameters at `ctx`.
    pub fn teacher_from_student(&self, ctx: &ContextKey, student: &TokenDistribution, r: &Privileged) -> TokenDistribution {
        self.privileged_shift(ctx, r).apply(student)
    }

    /// Serializes to the line-oriented checkpoint format: a header, then one
    /// `feature_id weight` pair per line for every non-zero weight.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let vocab = self.fmap.vocab();
        let _ = writeln!(out, "# rlsd-lab checkpoint");
        let _ = writeln!(out, "format 1");
        let _ = writeln!(out, "feature_map_version {FEATURE_MAP_VERSION}");
        let _ = writeln!(out, "vocab {}", vocab.size());
        let _ = writeln!(out, "end {}", vocab.end());
        let _ = writeln!(out, "k {}", self.fmap.k());
        let _ = writeln!(out, "position_buckets {}", self.fmap.position_buckets());
        let _ = writeln!(out, "features {}", self.fmap.len());
        for (id, w) in self.weights.iter().enumerate() {
            if *w != 0.0 {
                let _ = writeln!(out, "{id} {w:?}");
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut header: HashMap<&str, usize> = HashMap::new();
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(LabError::Parse {
                    line: line_no,
                    message: format!("expected two fields, got `{line}`"),
                });
            };
            let parse_err = |what: &str| LabError::Parse {
                line: line_no,
                message: format!("bad {what} in `{line}`"),
            };
            if a.chars().all(|c| c.is_ascii_digit()) {
                let id: usize = a.parse().map_err(|_| parse_err("feature id"))?;
                let w: f64 = b.parse().map_err(|_| parse_err("weight"))?;
                pairs.push((line_no, id, w));
            } else {
                let v: usize = b.parse().map_err(|_| parse_err("header value"))?;
                header.insert(a, v);
            }
        }
        let get = |key: &str| {
            header.get(key).copied().ok_or_else(|| LabError::Parse {
                line: 0,
                message: format!("missing header field `{key}`"),
            })
        };
        if get("format")? != 1 {
            return Err(LabError::Parse { line: 0, message: "unsupported checkpoint format".into() });
        }
        if get("feature_map_version")? != FEATURE_MAP_VERSION as usize {
            return Err(LabError::Parse { line: 0, message: "feature map version mismatch".into() });
        }
        let vocab = Vocab::new(get("vocab")?, get("end")?)?;
        let fmap = FeatureMap::new(vocab, get("k")?, get("position_buckets")?)?;
        if get("features")? != fmap.len() {
            return Err(LabError::Parse { line: 0, message: "feature count mismatch".into() });
        }
        let mut weights = vec![0.0; fmap.len()];
        for (line, id, w) in pairs {
            if id >= weights.len() || !w.is_finite() {
                return Err(LabError::Parse { line, message: format!("invalid pair {id} {w}") });
            }
            weights[id] = w;
        }
        PolicyParams::from_weights(fmap, weights)
    }
}

impl ConditionalPolicy for PolicyParams {
    fn vocab(&self) -> Vocab {
        self.fmap.vocab()
    }

    fn window_len(&self) -> usize {
        self.fmap.k()
    }

    fn student_dist(&self, ctx: &ContextKey) -> Result<TokenDistribution> {
        if !ctx.is_student() {
            return Err(LabError::ModeMismatch("student_dist called with a privileged context"));
        }
        Ok(self.dist_unchecked(ctx))
    }

    fn teacher_dist(&self, ctx: &ContextKey) -> Result<TokenDistribution> {
        if ctx.is_student() {
            return Err(LabError::ModeMismatch("teacher_dist called without privileged context"));
        }
        Ok(self.dist_unchecked(ctx))
    }
}

/// `Σ_r posterior(r) · P_T(· | x, r, y_<t)` for the student context `ctx`.
pub fn marginal_teacher_dist<P: ConditionalPolicy + ?Sized>(
    policy: &P,
    ctx: &ContextKey,
    posterior: &[(Privileged, f64)],
) -> Result<TokenDistribution> {
    if posterior.is_empty() {
        return Err(LabError::invalid("empty posterior"));
    }
    let rows = posterior
        .iter()
        .map(|(r, w)| Ok((*w, policy.teacher_dist(&ctx.with_privileged(r.clone()))?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(f64, &TokenDistribution)> = rows.iter().map(|(w, d)| (*w, d)).collect();
    TokenDistribution::mixture(&refs)
}

/// Policy that stores exact conditionals per context.
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    vocab: Vocab,
    k: usize,
    rows: HashMap<ContextKey, TokenDistribution>,
}

/// Builds an exact-tabular policy from `(context, row)` pairs. Each row must
/// be a distribution over the vocabulary, normalized within 1e-9.
pub fn set_exact_tabular(
    vocab: Vocab,
    k: usize,
    table: impl IntoIterator<Item = (ContextKey, Vec<f64>)>,
) -> Result<TabularPolicy> {
    let mut rows = HashMap::new();
    for (ctx, row) in table {
        if row.len() != vocab.size() {
            return Err(LabError::InvalidDistribution(format!(
                "row of length {} for vocab {}",
                row.len(),
                vocab.size()
            )));
        }
        if ctx.window.len() != k {
            return Err(LabError::invalid("context window length differs from table k"));
        }
        rows.insert(ctx, TokenDistribution::from_probs(row)?);
    }
    Ok(TabularPolicy { vocab, k, rows })
}

impl TabularPolicy {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn lookup(&self, ctx: &ContextKey) -> Result<TokenDistribution> {
        self.rows
            .get(ctx)
            .cloned()
            .ok_or_else(|| LabError::MissingContext(format!("{ctx:?}")))
    }
}

impl ConditionalPolicy for TabularPolicy {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn window_len(&self) -> usize {
        self.k
    }

    fn student_dist(&self, ctx: &ContextKey) -> Result<TokenDistribution> {
        if !ctx.is_student() {
            return Err(LabError::ModeMismatch("student_dist called with a privileged context"));
        }
        self.lookup(ctx)
    }

    fn teacher_dist(&self, ctx: &ContextKey) -> Result<TokenDistribution> {
        if ctx.is_student() {
            return Err(LabError::ModeMismatch("teacher_dist called without privileged context"));
        }
        self.lookup(ctx)
    }
}

/// One sampled response with log-probabilities under both modes.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub prompt: PromptId,
    pub prompt_tokens: Arc<[Token]>,
    /// The privileged sequence the teacher-mode log-probs were scored with.
    pub privileged: Privileged,
    pub tokens: Vec<Token>,
    pub student_lp: Vec<f64>,
    pub teacher_lp: Vec<f64>,
    pub reward: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn student_context(&self, vocab: Vocab, k: usize, t: usize) -> ContextKey {
        ContextKey::new(vocab, k, self.prompt, None, &self.prompt_tokens, &self.tokens[..t])
    }

    pub fn teacher_context(&self, vocab: Vocab, k: usize, t: usize, r: &Privileged) -> ContextKey {
        ContextKey::new(
            vocab,
            k,
            self.prompt,
            Some(r.clone()),
            &self.prompt_tokens,
            &self.tokens[..t],
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleMode {
    Student,
    Teacher(Privileged),
}

/// Samples until END or `t_max` tokens, recording student and teacher
/// log-probabilities (the teacher scored with `realized`) at every step.
pub fn sample_rollout<P, R>(
    policy: &P,
    instance: &Instance,
    mode: &SampleMode,
    realized: &Privileged,
    rng: &mut R,
    t_max: usize,
) -> Result<Rollout>
where
    P: ConditionalPolicy + ?Sized,
    R: Rng + ?Sized,
{
    if t_max == 0 {
        return Err(LabError::invalid("t_max must be at least 1"));
    }
    let vocab = policy.vocab();
    let k = policy.window_len();
    let prompt_tokens: Arc<[Token]> = instance.prompt.clone().into();
    let mut tokens = Vec::with_capacity(t_max);
    let mut student_lp = Vec::with_capacity(t_max);
    let mut teacher_lp = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        let s_ctx = ContextKey::new(vocab, k, instance.id, None, &prompt_tokens, &tokens);
        let t_ctx = s_ctx.with_privileged(realized.clone());
        let s_dist = policy.student_dist(&s_ctx)?;
        let t_dist = policy.teacher_dist(&t_ctx)?;
        let u: f64 = rng.gen();
        let token = match mode {
            SampleMode::Student => s_dist.sample_with(u),
            SampleMode::Teacher(r) if r == realized => t_dist.sample_with(u),
            SampleMode::Teacher(r) => policy.teacher_dist(&s_ctx.with_privileged(r.clone()))?.sample_with(u),
        };
        student_lp.push(s_dist.log_prob(token));
        teacher_lp.push(t_dist.log_prob(token));
        tokens.push(token);
        if token == vocab.end() {
            break;
        }
    }
    let reward = verify(instance, &tokens).reward;
    Ok(Rollout {
        prompt: instance.id,
        prompt_tokens,
        privileged: realized.clone(),
        tokens,
        student_lp,
        teacher_lp,
        reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: usize) -> Vocab {
        Vocab::new(n, n - 1).unwrap()
    }

    fn ctx(v: Vocab, k: usize, priv_: Option<Privileged>, prefix: &[Token]) -> ContextKey {
        ContextKey::new(v, k, PromptId(0), priv_, &[0, 1], prefix)
    }

    fn r(id: u32, toks: &[Token]) -> Privileged {
        Privileged::new(PrivilegedId(id), toks.to_vec())
    }

    #[test]
    fn zero_weights_give_uniform() {
        let v = vocab(12);
        let p = PolicyParams::zeros(FeatureMap::new(v, 2, 8).unwrap());
        let d = p.student_dist(&ctx(v, 2, None, &[3])).unwrap();
        for q in d.probs() {
            assert!((q - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn window_pads_and_scrolls() {
        let v = vocab(5);
        let c = ContextKey::new(v, 3, PromptId(0), None, &[2], &[]);
        assert_eq!(c.window, vec![5, 5, 2]);
        let c = ContextKey::new(v, 2, PromptId(0), None, &[2, 3], &[1, 0]);
        assert_eq!(c.window, vec![1, 0]);
        assert_eq!(c.position, 2);
        let c = ContextKey::new(v, 2, PromptId(0), None, &[2, 3], &[1]);
        assert_eq!(c.window, vec![3, 1]);
    }

    #[test]
    fn ln2_bias_gives_one_third_two_thirds() {
        let v = vocab(2);
        let fmap = FeatureMap::new(v, 1, 1).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        let c = ctx(v, 1, None, &[]);
        p.set_weight(fmap.position_feature(0, 1), 2f64.ln());
        let d = p.student_dist(&c).unwrap();
        assert!((d.prob(0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((d.prob(1) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ln3_privileged_weight_gives_quarter_three_quarters() {
        let v = vocab(2);
        let fmap = FeatureMap::new(v, 1, 1).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        p.set_weight(fmap.member_feature(1), 3f64.ln());
        let c = ctx(v, 1, Some(r(0, &[1])), &[]);
        let d = p.teacher_dist(&c).unwrap();
        assert!((d.prob(0) - 0.25).abs() < 1e-12);
        assert!((d.prob(1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn modes_are_checked() {
        let v = vocab(4);
        let p = PolicyParams::zeros(FeatureMap::new(v, 2, 4).unwrap());
        let s = ctx(v, 2, None, &[]);
        let t = ctx(v, 2, Some(r(0, &[1, 2])), &[]);
        assert!(matches!(p.student_dist(&t), Err(LabError::ModeMismatch(_))));
        assert!(matches!(p.teacher_dist(&s), Err(LabError::ModeMismatch(_))));
    }

    #[test]
    fn inactive_feature_does_not_move_distribution() {
        let v = vocab(6);
        let fmap = FeatureMap::new(v, 2, 4).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        let c = ctx(v, 2, None, &[3]);
        let before = p.student_dist(&c).unwrap();
        // a window feature for a gram this context does not end with
        p.set_weight(fmap.window_feature(&[4], 2), 5.0);
        p.set_weight(fmap.member_feature(2), 5.0);
        assert_eq!(before, p.student_dist(&c).unwrap());
        let g = p.logprob_grad(&c, 1).unwrap();
        assert_eq!(g.get(fmap.window_feature(&[4], 2)), 0.0);
        let fd = p.finite_diff_grad(&c, 1, 1e-6).unwrap();
        assert_eq!(fd.get(fmap.window_feature(&[4], 2)), 0.0);
    }

    #[test]
    fn zero_privileged_weights_make_teacher_equal_student() {
        let v = vocab(6);
        let fmap = FeatureMap::new(v, 2, 4).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        p.set_weight(fmap.window_feature(&[1, 3], 2), 0.7);
        p.set_weight(fmap.position_feature(1, 4), -0.3);
        let s = ctx(v, 2, None, &[3]);
        let t = s.with_privileged(r(1, &[3, 2, 5]));
        assert_eq!(p.student_dist(&s).unwrap(), p.teacher_dist(&t).unwrap());
    }

    #[test]
    fn shared_update_moves_both_modes_equally_in_score_space() {
        let v = vocab(6);
        let fmap = FeatureMap::new(v, 2, 4).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        p.set_weight(fmap.member_feature(2), 1.5);
        p.set_weight(fmap.transition_feature(3, 2), 0.5);
        let s = ctx(v, 2, None, &[3]);
        let t = s.with_privileged(r(1, &[3, 2, 5]));
        let (s0, t0) = (p.scores(&s), p.scores(&t));
        p.add_weight(fmap.window_feature(&[3], 4), 0.9);
        let (s1, t1) = (p.scores(&s), p.scores(&t));
        for v in 0..6 {
            assert!(((s1[v] - s0[v]) - (t1[v] - t0[v])).abs() < 1e-15);
        }
        // privileged-only update leaves the student alone
        p.add_weight(fmap.member_feature(5), 2.0);
        assert_eq!(p.scores(&s), s1);
        assert_ne!(p.scores(&t), t1);
    }

    #[test]
    fn logprob_grad_uniform_two_tokens() {
        let v = vocab(2);
        let fmap = FeatureMap::new(v, 1, 1).unwrap();
        let p = PolicyParams::zeros(fmap.clone());
        let c = ctx(v, 1, None, &[]);
        let g = p.logprob_grad(&c, 0).unwrap();
        assert!((g.get(fmap.position_feature(0, 0)) - 0.5).abs() < 1e-15);
        assert!((g.get(fmap.position_feature(0, 1)) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_identity_sums_to_zero() {
        let v = vocab(5);
        let fmap = FeatureMap::new(v, 2, 3).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        for (i, w) in p.weights.iter_mut().enumerate() {
            *w = ((i * 37 % 11) as f64 - 5.0) / 7.0;
        }
        let c = ctx(v, 2, None, &[2, 3]);
        let d = p.student_dist(&c).unwrap();
        let mut acc = vec![0.0; fmap.len()];
        for tok in 0..5 {
            p.logprob_grad(&c, tok).unwrap().add_scaled_to(&mut acc, d.prob(tok));
        }
        assert!(acc.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let v = vocab(3);
        let p = PolicyParams::zeros(FeatureMap::new(v, 1, 1).unwrap());
        let c = ctx(v, 1, None, &[]);
        assert!(p.finite_diff_grad(&c, 0, 0.0).is_err());
        assert!(p.finite_diff_grad(&c, 0, 1e-2).is_err());
        assert!(p.logprob_grad(&c, 3).is_err());
    }

    #[test]
    fn marginal_teacher_examples() {
        let v = vocab(2);
        let k = 1;
        let s = ctx(v, k, None, &[]);
        let r1 = r(1, &[0]);
        let r2 = r(2, &[1]);
        let table = vec![
            (s.with_privileged(r1.clone()), vec![0.9, 0.1]),
            (s.with_privileged(r2.clone()), vec![0.1, 0.9]),
        ];
        let tab = set_exact_tabular(v, k, table).unwrap();
        let m = marginal_teacher_dist(&tab, &s, &[(r1.clone(), 0.5), (r2.clone(), 0.5)]).unwrap();
        assert!((m.prob(0) - 0.5).abs() < 1e-15);
        let single = marginal_teacher_dist(&tab, &s, &[(r1.clone(), 1.0)]).unwrap();
        assert_eq!(single.probs(), tab.teacher_dist(&s.with_privileged(r1)).unwrap().probs());
        assert!(marginal_teacher_dist(&tab, &s, &[]).is_err());
    }

    #[test]
    fn tabular_rows_are_stored_and_validated() {
        let v = vocab(2);
        let s = ctx(v, 1, None, &[]);
        let tab = set_exact_tabular(v, 1, vec![(s.clone(), vec![0.25, 0.75])]).unwrap();
        let d = tab.student_dist(&s).unwrap();
        assert!((d.prob(1) - 0.75).abs() < 1e-12);
        let other = ctx(v, 1, None, &[0]);
        assert!(matches!(tab.student_dist(&other), Err(LabError::MissingContext(_))));
        assert!(set_exact_tabular(v, 1, vec![(s, vec![0.3, 0.3])]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let v = vocab(6);
        let fmap = FeatureMap::new(v, 2, 4).unwrap();
        let mut p = PolicyParams::zeros(fmap);
        for (i, w) in p.weights.iter_mut().enumerate().step_by(7) {
            *w = (i as f64).sin() / 3.0;
        }
        let text = p.to_checkpoint();
        assert_eq!(PolicyParams::from_checkpoint(&text).unwrap(), p);
        assert!(matches!(
            PolicyParams::from_checkpoint("format 1\nvocab x\n"),
            Err(LabError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn feature_kinds_partition_the_layout() {
        let v = vocab(5);
        let fmap = FeatureMap::new(v, 2, 3).unwrap();
        assert_eq!(fmap.kind(fmap.window_feature(&[1], 2)), FeatureKind::Window { order: 1 });
        assert_eq!(fmap.kind(fmap.window_feature(&[1, 5], 4)), FeatureKind::Window { order: 2 });
        assert_eq!(fmap.kind(fmap.position_feature(9, 0)), FeatureKind::Position);
        assert_eq!(fmap.kind(fmap.member_feature(4)), FeatureKind::PrivilegedMember);
        assert_eq!(fmap.kind(fmap.transition_feature(5, 4)), FeatureKind::PrivilegedTransition);
        assert_eq!(fmap.transition_feature(5, 4), fmap.len() - 1);
    }

    #[test]
    fn sampling_is_deterministic_and_replayable() {
        let v = vocab(6);
        let fmap = FeatureMap::new(v, 2, 4).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        p.set_weight(fmap.member_feature(2), 1.0);
        p.set_weight(fmap.position_feature(2, 5), 1.0);
        let inst = Instance::single_for_tests(v);
        let realized = inst.privileged[0].info.clone();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let ra = sample_rollout(&p, &inst, &SampleMode::Student, &realized, &mut a, 8).unwrap();
        let rb = sample_rollout(&p, &inst, &SampleMode::Student, &realized, &mut b, 8).unwrap();
        assert_eq!(ra, rb);
        for t in 0..ra.len() {
            let c = ra.student_context(v, 2, t);
            assert_eq!(p.student_dist(&c).unwrap().log_prob(ra.tokens[t]), ra.student_lp[t]);
            let tc = ra.teacher_context(v, 2, t, &realized);
            assert_eq!(p.teacher_dist(&tc).unwrap().log_prob(ra.tokens[t]), ra.teacher_lp[t]);
        }
    }

    #[test]
    fn near_deterministic_policy_repeats_until_end() {
        let v = vocab(4);
        let fmap = FeatureMap::new(v, 1, 8).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        for pos in 0..8 {
            let tok = if pos < 3 { 1 } else { v.end() };
            p.set_weight(fmap.position_feature(pos, tok), 60.0);
        }
        let inst = Instance::single_for_tests(v);
        let realized = inst.privileged[0].info.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ro = sample_rollout(&p, &inst, &SampleMode::Student, &realized, &mut rng, 8).unwrap();
        assert_eq!(ro.tokens, vec![1, 1, 1, v.end()]);
    }
}
