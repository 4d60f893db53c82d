//! Synthetic verifiable tasks.
//!
//! Each instance carries an enumerable set of privileged derivations with
//! prior weights, a binary final-token verifier and a set of probe tokens:
//! tokens that occur in the derivations but that the verifier never needs.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{
    set_exact_tabular, ConditionalPolicy, ContextKey, Privileged, PrivilegedId, PromptId,
    TabularPolicy, Token, TokenDistribution, Vocab,
};

#[derive(Clone, Debug, PartialEq)]
pub struct PrivilegedEntry {
    pub info: Privileged,
    pub prior: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: PromptId,
    pub prompt: Vec<Token>,
    pub privileged: Vec<PrivilegedEntry>,
    pub gold: Token,
    pub probe: BTreeSet<Token>,
    pub max_len: usize,
    pub end: Token,
}

impl Instance {
    pub fn priors(&self) -> impl Iterator<Item = (&Privileged, f64)> {
        self.privileged.iter().map(|e| (&e.info, e.prior))
    }

    /// Draws a privileged sequence from the prior.
    pub fn sample_privileged<R: Rng + ?Sized>(&self, rng: &mut R) -> &Privileged {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for e in &self.privileged {
            acc += e.prior;
            if u < acc {
                return &e.info;
            }
        }
        &self.privileged.last().expect("non-empty privileged set").info
    }

    pub fn validate(&self, vocab: Vocab) -> Result<()> {
        let bad = |m: String| Err(LabError::invalid(format!("instance {}: {m}", self.id.0)));
        if !(1..=8).contains(&self.privileged.len()) {
            return bad(format!("{} privileged entries, need 1..=8", self.privileged.len()));
        }
        let total: f64 = self.privileged.iter().map(|e| e.prior).sum();
        if self.privileged.iter().any(|e| !(e.prior >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("priors sum to {total}"));
        }
        if !vocab.contains(self.gold) || self.gold == vocab.end() {
            return bad(format!("gold token {} invalid", self.gold));
        }
        if self.probe.contains(&self.gold) {
            return bad("gold answer listed as a probe token".into());
        }
        let all = self
            .prompt
            .iter()
            .chain(self.probe.iter())
            .chain(self.privileged.iter().flat_map(|e| e.info.tokens.iter()));
        if let Some(t) = all.copied().find(|t| !vocab.contains(*t)) {
            return bad(format!("token {t} outside vocabulary"));
        }
        if self.max_len == 0 || self.end != vocab.end() {
            return bad("bad max_len or END token".into());
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn single_for_tests(vocab: Vocab) -> Instance {
        Instance {
            id: PromptId(0),
            prompt: vec![0, 1],
            privileged: vec![PrivilegedEntry {
                info: Privileged::new(PrivilegedId(0), vec![1, 2, 0]),
                prior: 1.0,
            }],
            gold: 0,
            probe: BTreeSet::from([2]),
            max_len: 8,
            end: vocab.end(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifierResult {
    pub reward: f64,
    pub matched: bool,
}

/// Reward 1 iff the final non-END token of `y` is the gold answer.
pub fn verify(instance: &Instance, y: &[Token]) -> VerifierResult {
    let matched = y.iter().rev().find(|t| **t != instance.end) == Some(&instance.gold);
    VerifierResult {
        reward: if matched { 1.0 } else { 0.0 },
        matched,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    ModularArithmeticChain,
    HiddenRuleSequence,
}

impl FromStr for TaskFamily {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modular-arithmetic-chain" => Ok(TaskFamily::ModularArithmeticChain),
            "hidden-rule-sequence" => Ok(TaskFamily::HiddenRuleSequence),
            other => Err(LabError::UnknownFamily(other.to_string())),
        }
    }
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::ModularArithmeticChain => "modular-arithmetic-chain",
            TaskFamily::HiddenRuleSequence => "hidden-rule-sequence",
        }
    }
}

fn default_vocab_size() -> usize {
    12
}
fn default_modulus() -> usize {
    6
}
fn default_max_len() -> usize {
    8
}
fn default_min_privileged() -> usize {
    2
}
fn default_max_privileged() -> usize {
    4
}

/// Parameters of a generated suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub family: String,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    /// Number of digit tokens; the remaining non-END tokens are symbols.
    #[serde(default = "default_modulus")]
    pub modulus: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_min_privileged")]
    pub min_privileged: usize,
    #[serde(default = "default_max_privileged")]
    pub max_privileged: usize,
}

impl SuiteConfig {
    pub fn new(family: TaskFamily, count: usize, seed: u64) -> Self {
        SuiteConfig {
            family: family.name().to_string(),
            count,
            seed,
            vocab_size: default_vocab_size(),
            modulus: default_modulus(),
            max_len: default_max_len(),
            min_privileged: default_min_privileged(),
            max_privileged: default_max_privileged(),
        }
    }

    /// The END token is the last id of the vocabulary.
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size, self.vocab_size - 1)
    }
}

/// Generated instances together with their vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub vocab: Vocab,
    pub instances: Vec<Instance>,
}

impl Suite {
    /// 80/20 split by a fixed hash of the instance id: `(train, held_out)`.
    pub fn split(&self) -> (Vec<&Instance>, Vec<&Instance>) {
        self.instances.iter().partition(|i| !is_held_out(i.id))
    }
}

pub fn is_held_out(id: PromptId) -> bool {
    splitmix64(u64::from(id.0) ^ 0x5eed_5eed).is_multiple_of(5)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds a deterministic suite for `config`.
pub fn make_suite(config: &SuiteConfig) -> Result<Suite> {
    let family: TaskFamily = config.family.parse()?;
    let vocab = config.vocab()?;
    let m = config.modulus;
    let symbols: Vec<Token> = (m..vocab.end()).collect();
    if m < 2 || symbols.len() < 4 {
        return Err(LabError::invalid(format!(
            "modulus {m} leaves {} symbol tokens; need at least 4",
            symbols.len()
        )));
    }
    if config.min_privileged == 0
        || config.min_privileged > config.max_privileged
        || config.max_privileged > 4
    {
        return Err(LabError::invalid("privileged set size must satisfy 1 <= min <= max <= 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut prompts: Vec<(Token, Token)> = (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).collect();
    let mut instances = Vec::with_capacity(config.count);
    for i in 0..config.count {
        // every prompt pair appears once per cycle, in a fresh order each cycle
        if i % prompts.len() == 0 {
            prompts.shuffle(&mut rng);
        }
        let (a, b) = prompts[i % prompts.len()];
        // reference solutions state the answer, a connective, the steps,
        // and the answer again; which steps appear depends on the prompt
        let s = &symbols;
        let (gold, templates) = match family {
            TaskFamily::ModularArithmeticChain => {
                let g = (a + b) % m;
                let reduce: &[Token] = if a + b >= m { &[s[1]] } else { &[] };
                let steps = |mid: &[Token]| [&[g, s[0]], mid, reduce, &[g]].concat();
                (g, vec![steps(&[]), steps(&[s[2]]), steps(&[s[3]]), steps(&[s[2], s[3]])])
            }
            TaskFamily::HiddenRuleSequence => {
                // cue a selects the rule: successor for even cues, double successor for odd
                let g = (b + 1 + a % 2) % m;
                let rule = s[1 + a % 2];
                (g, vec![
                    vec![g, s[0], rule, g],
                    vec![g, s[0], s[3], rule, g],
                    vec![g, s[0], rule, s[3], g],
                    vec![g, s[0], s[3], rule, s[3], g],
                ])
            }
        };
        let n_r = rng.gen_range(config.min_privileged..=config.max_privileged);
        let mut order: Vec<usize> = (0..templates.len()).collect();
        order.shuffle(&mut rng);
        let raw: Vec<f64> = (0..n_r).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let privileged: Vec<PrivilegedEntry> = order[..n_r]
            .iter()
            .zip(&raw)
            .enumerate()
            .map(|(j, (&tpl, w))| PrivilegedEntry {
                info: Privileged::new(PrivilegedId((i * 8 + j) as u32), templates[tpl].clone()),
                prior: w / total,
            })
            .collect();
        let probe: BTreeSet<Token> = privileged
            .iter()
            .flat_map(|e| e.info.tokens.iter().copied())
            .filter(|t| symbols.contains(t))
            .collect();
        let inst = Instance {
            id: PromptId(i as u32),
            prompt: vec![a, b],
            privileged,
            gold,
            probe,
            max_len: config.max_len,
            end: vocab.end(),
        };
        inst.validate(vocab)?;
        instances.push(inst);
    }
    Ok(Suite { vocab, instances })
}

const SUITE_HEADER: &str = "# rlsd-lab suite v1";

fn join(tokens: impl IntoIterator<Item = Token>) -> String {
    tokens.into_iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

/// Line-oriented text form: a header, a vocab line, then one instance per line.
pub fn write_suite(suite: &Suite) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SUITE_HEADER}");
    let _ = writeln!(out, "vocab {} end {}", suite.vocab.size(), suite.vocab.end());
    for inst in &suite.instances {
        let rs: Vec<String> = inst
            .privileged
            .iter()
            .map(|e| format!("{}:{}@{:?}", e.info.id.0, join(e.info.tokens.iter().copied()), e.prior))
            .collect();
        let _ = writeln!(
            out,
            "instance id={} prompt={} gold={} probe={} max_len={} r={}",
            inst.id.0,
            join(inst.prompt.iter().copied()),
            inst.gold,
            join(inst.probe.iter().copied()),
            inst.max_len,
            rs.join("|")
        );
    }
    out
}

pub fn parse_suite(text: &str) -> Result<Suite> {
    let mut vocab = None;
    let mut instances = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |m: String| LabError::Parse { line: line_no, message: m };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut words = line.split_whitespace();
        match words.next() {
            Some("vocab") => {
                let f: Vec<&str> = words.collect();
                let (Some(size), Some(end)) = (
                    f.first().and_then(|s| s.parse().ok()),
                    f.get(2).and_then(|s| s.parse().ok()),
                ) else {
                    return Err(err(format!("bad vocab line `{line}`")));
                };
                vocab = Some(Vocab::new(size, end).map_err(|e| err(e.to_string()))?);
            }
            Some("instance") => {
                let v = vocab.ok_or_else(|| err("instance before vocab line".into()))?;
                let mut fields: HashMap<&str, &str> = HashMap::new();
                for w in words {
                    let (k, val) = w.split_once('=').ok_or_else(|| err(format!("bad field `{w}`")))?;
                    fields.insert(k, val);
                }
                let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("missing field `{k}`")));
                let tokens = |s: &str| -> Result<Vec<Token>> {
                    if s.is_empty() {
                        return Ok(Vec::new());
                    }
                    s.split(',')
                        .map(|t| t.parse().map_err(|_| err(format!("bad token `{t}`"))))
                        .collect()
                };
                let number = |s: &str| -> Result<usize> { s.parse().map_err(|_| err(format!("bad number `{s}`"))) };
                let mut privileged = Vec::new();
                for entry in get("r")?.split('|') {
                    let (id, rest) = entry.split_once(':').ok_or_else(|| err(format!("bad r entry `{entry}`")))?;
                    let (toks, prior) = rest.split_once('@').ok_or_else(|| err(format!("bad r entry `{entry}`")))?;
                    let prior: f64 = prior.parse().map_err(|_| err(format!("bad prior `{prior}`")))?;
                    privileged.push(PrivilegedEntry {
                        info: Privileged::new(PrivilegedId(number(id)? as u32), tokens(toks)?),
                        prior,
                    });
                }
                let inst = Instance {
                    id: PromptId(number(get("id")?)? as u32),
                    prompt: tokens(get("prompt")?)?,
                    privileged,
                    gold: number(get("gold")?)?,
                    probe: tokens(get("probe")?)?.into_iter().collect(),
                    max_len: number(get("max_len")?)?,
                    end: v.end(),
                };
                inst.validate(v).map_err(|e| err(e.to_string()))?;
                instances.push(inst);
            }
            Some(other) => return Err(err(format!("unknown record `{other}`"))),
            None => {}
        }
    }
    let vocab = vocab.ok_or(LabError::Parse { line: 0, message: "missing vocab line".into() })?;
    Ok(Suite { vocab, instances })
}

/// Exhaustive forward expansion of the student's prefix tree, merging
/// prefixes that share a [`ContextKey`]. Since every [`ConditionalPolicy`]
/// is a function of its key, merged states evolve identically and the
/// expansion is exact.
pub struct PrefixExpansion {
    /// Per position: `(state, reach probability, next-token distribution)`.
    pub levels: Vec<Vec<(ContextKey, f64, TokenDistribution)>>,
}

/// Child-window lookup keyed by the base-`alphabet` code of the window.
enum WindowIndex {
    Dense { slots: Vec<u32>, modulus: u64, alphabet: u64 },
    Sparse { map: HashMap<u64, usize>, modulus: u64, alphabet: u64 },
}

impl WindowIndex {
    const DENSE_LIMIT: u64 = 1 << 16;

    fn new(alphabet: usize, k: usize) -> Self {
        let a = alphabet as u64;
        let modulus = a.checked_pow(k.saturating_sub(1) as u32).expect("window code fits in u64");
        match modulus.checked_mul(a) {
            Some(n) if n <= Self::DENSE_LIMIT => WindowIndex::Dense {
                slots: vec![u32::MAX; n as usize],
                modulus,
                alphabet: a,
            },
            _ => WindowIndex::Sparse {
                map: HashMap::new(),
                modulus,
                alphabet: a,
            },
        }
    }

    /// Code of the window without its oldest token.
    fn tail_code(&self, window: &[Token]) -> u64 {
        let (modulus, a) = match self {
            WindowIndex::Dense { modulus, alphabet, .. } | WindowIndex::Sparse { modulus, alphabet, .. } => {
                (*modulus, *alphabet)
            }
        };
        window.iter().fold(0, |c, &t| c * a + t as u64) % modulus
    }

    fn get(&self, code: u64) -> Option<usize> {
        match self {
            WindowIndex::Dense { slots, .. } => match slots[code as usize] {
                u32::MAX => None,
                i => Some(i as usize),
            },
            WindowIndex::Sparse { map, .. } => map.get(&code).copied(),
        }
    }

    fn insert(&mut self, code: u64, i: usize) {
        match self {
            WindowIndex::Dense { slots, .. } => slots[code as usize] = i as u32,
            WindowIndex::Sparse { map, .. } => {
                map.insert(code, i);
            }
        }
    }
}

impl PrefixExpansion {
    pub fn run<P: ConditionalPolicy + ?Sized>(policy: &P, instance: &Instance) -> Result<Self> {
        let vocab = policy.vocab();
        let root = policy.context(instance.id, None, &instance.prompt, &[]);
        let (alphabet, k) = (vocab.size() + 1, root.window.len());
        let mut frontier: Vec<(ContextKey, f64)> = vec![(root, 1.0)];
        let mut levels = Vec::with_capacity(instance.max_len);
        for t in 0..instance.max_len {
            let mut level = Vec::with_capacity(frontier.len());
            let mut next: Vec<(ContextKey, f64)> = Vec::new();
            // keys of one level differ only in their window
            let mut index = WindowIndex::new(alphabet, k);
            for (key, mass) in frontier {
                let dist = policy.student_dist(&key)?;
                if t + 1 < instance.max_len {
                    let tail = index.tail_code(&key.window);
                    for (tok, p) in dist.probs().iter().enumerate() {
                        if tok == vocab.end() || *p == 0.0 {
                            continue;
                        }
                        let code = tail * alphabet as u64 + tok as u64;
                        match index.get(code) {
                            Some(i) => next[i].1 += mass * p,
                            None => {
                                index.insert(code, next.len());
                                next.push((key.advance(tok), mass * p));
                            }
                        }
                    }
                }
                level.push((key, mass, dist));
            }
            levels.push(level);
            frontier = next;
            if frontier.is_empty() {
                break;
            }
        }
        Ok(PrefixExpansion { levels })
    }

    /// Exact probability that a sampled response is rewarded.
    pub fn accuracy(&self, instance: &Instance) -> f64 {
        let last_t = instance.max_len - 1;
        let mut acc = 0.0;
        for (t, level) in self.levels.iter().enumerate() {
            for (key, mass, dist) in level {
                if t > 0 && key.last_token() == instance.gold {
                    acc += mass * dist.prob(instance.end);
                }
                if t == last_t {
                    acc += mass * dist.prob(instance.gold);
                }
            }
        }
        acc
    }

    /// Mean over positions of the expected probe mass given the response is
    /// still running at that position.
    pub fn probe_mass(&self, probe: &BTreeSet<Token>) -> f64 {
        let mut total = 0.0;
        let mut positions = 0usize;
        for level in &self.levels {
            let alive: f64 = level.iter().map(|(_, m, _)| m).sum();
            if alive <= 0.0 {
                continue;
            }
            let weighted: f64 = level
                .iter()
                .map(|(_, m, d)| m * probe.iter().map(|&p| d.prob(p)).sum::<f64>())
                .sum();
            total += weighted / alive;
            positions += 1;
        }
        if positions == 0 {
            0.0
        } else {
            total / positions as f64
        }
    }

    /// Expected per-position student entropy given the response is running.
    pub fn entropy(&self) -> f64 {
        let mut total = 0.0;
        for level in &self.levels {
            let alive: f64 = level.iter().map(|(_, m, _)| m).sum();
            total += level.iter().map(|(_, m, d)| m * d.entropy()).sum::<f64>() / alive;
        }
        total / self.levels.len() as f64
    }
}

/// Mean student-mode probability mass on each instance's probe tokens,
/// averaged over instances and response positions.
pub fn leakage_probe_score<P: ConditionalPolicy + ?Sized>(policy: &P, instances: &[&Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(LabError::invalid("leakage probe needs at least one instance"));
    }
    let mut total = 0.0;
    for inst in instances {
        if inst.probe.is_empty() {
            continue;
        }
        total += PrefixExpansion::run(policy, inst)?.probe_mass(&inst.probe);
    }
    Ok(total / instances.len() as f64)
}

/// Mean exact accuracy of the student over `instances`.
pub fn exact_accuracy<P: ConditionalPolicy + ?Sized>(policy: &P, instances: &[&Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for inst in instances {
        total += PrefixExpansion::run(policy, inst)?.accuracy(inst);
    }
    Ok(total / instances.len() as f64)
}

/// One complete trajectory of a [`JointModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct JointEntry {
    pub r: usize,
    pub tokens: Vec<Token>,
    pub prob: f64,
}

/// Explicit joint table `P(r, y | x)` over every trajectory that ends in END
/// or reaches `max_len`.
#[derive(Clone, Debug)]
pub struct JointModel {
    vocab: Vocab,
    prompt: PromptId,
    prompt_tokens: Vec<Token>,
    privileged: Vec<(Privileged, f64)>,
    max_len: usize,
    entries: Vec<JointEntry>,
    /// Prefix masses keyed by `(Some(r) | None, prefix)`.
    prefix_mass: HashMap<(Option<usize>, Vec<Token>), f64>,
}

impl JointModel {
    pub const MAX_VOCAB: usize = 6;
    pub const MAX_LEN: usize = 5;

    /// Enumerates the joint induced by prior `privileged` and per-r
    /// autoregressive conditionals `cond(r, prefix)`.
    pub fn from_conditionals(
        vocab: Vocab,
        prompt: PromptId,
        prompt_tokens: Vec<Token>,
        privileged: Vec<(Privileged, f64)>,
        max_len: usize,
        mut cond: impl FnMut(usize, &[Token]) -> Vec<f64>,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        for (ri, (_, prior)) in privileged.iter().enumerate() {
            let mut stack: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), *prior)];
            while let Some((prefix, mass)) = stack.pop() {
                if mass == 0.0 {
                    continue;
                }
                let done = prefix.len() == max_len || prefix.last() == Some(&vocab.end());
                if done {
                    entries.push(JointEntry { r: ri, tokens: prefix, prob: mass });
                    continue;
                }
                let row = TokenDistribution::from_probs(cond(ri, &prefix))?;
                if row.len() != vocab.size() {
                    return Err(LabError::InvalidDistribution("row length differs from vocab".into()));
                }
                for tok in (0..vocab.size()).rev() {
                    let p = row.prob(tok);
                    if p > 0.0 {
                        let mut child = prefix.clone();
                        child.push(tok);
                        stack.push((child, mass * p));
                    }
                }
            }
        }
        Self::from_entries(vocab, prompt, prompt_tokens, privileged, max_len, entries)
    }

    pub fn from_entries(
        vocab: Vocab,
        prompt: PromptId,
        prompt_tokens: Vec<Token>,
        privileged: Vec<(Privileged, f64)>,
        max_len: usize,
        entries: Vec<JointEntry>,
    ) -> Result<Self> {
        let total: f64 = entries.iter().map(|e| e.prob).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidDistribution(format!("joint mass {total}")));
        }
        let mut prefix_mass: HashMap<(Option<usize>, Vec<Token>), f64> = HashMap::new();
        let mut r_mass = vec![0.0; privileged.len()];
        for e in &entries {
            if e.r >= privileged.len() || e.prob < 0.0 || e.tokens.len() > max_len {
                return Err(LabError::invalid("malformed joint entry"));
            }
            r_mass[e.r] += e.prob;
            for l in 0..=e.tokens.len() {
                let prefix = e.tokens[..l].to_vec();
                *prefix_mass.entry((Some(e.r), prefix.clone())).or_insert(0.0) += e.prob;
                *prefix_mass.entry((None, prefix)).or_insert(0.0) += e.prob;
            }
        }
        for ((_, prior), m) in privileged.iter().zip(&r_mass) {
            if (prior - m).abs() > 1e-12 {
                return Err(LabError::InvalidDistribution(format!(
                    "r marginal {m} disagrees with prior {prior}"
                )));
            }
        }
        Ok(JointModel {
            vocab,
            prompt,
            prompt_tokens,
            privileged,
            max_len,
            entries,
            prefix_mass,
        })
    }

    /// Random joint with `n_r` privileged values; roughly a quarter of the
    /// conditional entries are zeroed so that some prefixes are impossible.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize, max_len: usize, n_r: usize) -> Result<Self> {
        if vocab_size > Self::MAX_VOCAB || max_len > Self::MAX_LEN || n_r == 0 {
            return Err(LabError::invalid("joint model too large for exhaustive checks"));
        }
        let vocab = Vocab::new(vocab_size, vocab_size - 1)?;
        let raw: Vec<f64> = (0..n_r).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let privileged = raw
            .iter()
            .enumerate()
            .map(|(i, w)| (Privileged::new(PrivilegedId(i as u32), vec![i % vocab_size]), w / total))
            .collect();
        let mut cache: HashMap<(usize, Vec<Token>), Vec<f64>> = HashMap::new();
        let mut draw = |r: usize, prefix: &[Token]| -> Vec<f64> {
            cache
                .entry((r, prefix.to_vec()))
                .or_insert_with(|| {
                    let mut row: Vec<f64> = (0..vocab_size)
                        .map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.05..1.0) })
                        .collect();
                    if row.iter().all(|p| *p == 0.0) {
                        row[vocab_size - 1] = 1.0;
                    }
                    let s: f64 = row.iter().sum();
                    row.iter().map(|p| p / s).collect()
                })
                .clone()
        };
        Self::from_conditionals(vocab, PromptId(0), vec![0], privileged, max_len, &mut draw)
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn prompt(&self) -> PromptId {
        self.prompt
    }

    pub fn prompt_tokens(&self) -> &[Token] {
        &self.prompt_tokens
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn privileged(&self) -> &[(Privileged, f64)] {
        &self.privileged
    }

    pub fn entries(&self) -> &[JointEntry] {
        &self.entries
    }

    /// `P(r, prefix)` (or `P(prefix)` for `None`): mass of every trajectory
    /// extending `prefix`.
    pub fn mass(&self, r: Option<usize>, prefix: &[Token]) -> f64 {
        self.prefix_mass.get(&(r, prefix.to_vec())).copied().unwrap_or(0.0)
    }

    /// `P(y_t | x, [r,] y_<t)` derived from the table.
    pub fn conditional(&self, r: Option<usize>, prefix: &[Token]) -> Result<Vec<f64>> {
        let base = self.mass(r, prefix);
        if base <= 0.0 {
            return Err(LabError::ZeroProbabilityPrefix);
        }
        let mut ext = prefix.to_vec();
        ext.push(0);
        Ok((0..self.vocab.size())
            .map(|tok| {
                *ext.last_mut().unwrap() = tok;
                self.mass(r, &ext) / base
            })
            .collect())
    }

    /// Every non-terminal prefix with positive marginal probability, in a
    /// deterministic order.
    pub fn live_prefixes(&self) -> Vec<Vec<Token>> {
        let mut out: Vec<Vec<Token>> = self
            .prefix_mass
            .iter()
            .filter(|((r, p), m)| {
                r.is_none() && **m > 0.0 && p.len() < self.max_len && p.last() != Some(&self.vocab.end())
            })
            .map(|((_, p), _)| p.clone())
            .collect();
        out.sort();
        out
    }

    pub fn context(&self, privileged: Option<Privileged>, prefix: &[Token]) -> ContextKey {
        ContextKey::new(
            self.vocab,
            self.window_len(),
            self.prompt,
            privileged,
            &self.prompt_tokens,
            prefix,
        )
    }

    /// Window long enough that a key identifies its whole prefix.
    pub fn window_len(&self) -> usize {
        self.max_len.max(1)
    }

    /// Exact-tabular policy whose student and teacher rows are the true
    /// conditionals of this joint on every reachable context.
    pub fn exact_policy(&self) -> Result<TabularPolicy> {
        let mut table = Vec::new();
        for prefix in self.live_prefixes() {
            table.push((self.context(None, &prefix), self.conditional(None, &prefix)?));
            for (ri, (r, _)) in self.privileged.iter().enumerate() {
                if self.mass(Some(ri), &prefix) > 0.0 {
                    table.push((self.context(Some(r.clone()), &prefix), self.conditional(Some(ri), &prefix)?));
                }
            }
        }
        set_exact_tabular(self.vocab, self.window_len(), table)
    }
}

/// Exact posterior `P(r | x, y_prefix)` by enumeration of the joint.
pub fn privileged_posterior(joint: &JointModel, x: PromptId, y_prefix: &[Token]) -> Result<Vec<(Privileged, f64)>> {
    if x != joint.prompt {
        return Err(LabError::invalid("prompt does not match the joint model"));
    }
    let total = joint.mass(None, y_prefix);
    if total <= 0.0 {
        return Err(LabError::ZeroProbabilityPrefix);
    }
    Ok(joint
        .privileged
        .iter()
        .enumerate()
        .map(|(ri, (r, _))| (r.clone(), joint.mass(Some(ri), y_prefix) / total))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{marginal_teacher_dist, FeatureMap, PolicyParams};

    fn suite(family: TaskFamily, n: usize, seed: u64) -> Suite {
        make_suite(&SuiteConfig::new(family, n, seed)).unwrap()
    }

    #[test]
    fn same_seed_same_suite() {
        for fam in [TaskFamily::ModularArithmeticChain, TaskFamily::HiddenRuleSequence] {
            assert_eq!(suite(fam, 20, 7), suite(fam, 20, 7));
            assert_ne!(suite(fam, 20, 7), suite(fam, 20, 8));
        }
    }

    #[test]
    fn derivations_verify() {
        for fam in [TaskFamily::ModularArithmeticChain, TaskFamily::HiddenRuleSequence] {
            for inst in suite(fam, 50, 3).instances {
                for e in &inst.privileged {
                    assert_eq!(verify(&inst, &e.info.tokens).reward, 1.0);
                }
                assert!(!inst.probe.is_empty());
            }
        }
    }

    #[test]
    fn empty_suite_and_unknown_family() {
        assert!(suite(TaskFamily::HiddenRuleSequence, 0, 1).instances.is_empty());
        let mut cfg = SuiteConfig::new(TaskFamily::HiddenRuleSequence, 3, 1);
        cfg.family = "sudoku".into();
        assert!(matches!(make_suite(&cfg), Err(LabError::UnknownFamily(_))));
    }

    #[test]
    fn verifier_final_token_rule() {
        let v = Vocab::new(12, 11).unwrap();
        let mut inst = Instance::single_for_tests(v);
        inst.gold = 3;
        assert_eq!(verify(&inst, &[5, 3, 11]).reward, 1.0);
        assert_eq!(verify(&inst, &[5, 3]).reward, 1.0);
        assert_eq!(verify(&inst, &[]).reward, 0.0);
        assert_eq!(verify(&inst, &[11]).reward, 0.0);
        assert_eq!(verify(&inst, &[3, 5, 11]).reward, 0.0);
        let first = verify(&inst, &[1, 3]);
        assert!((0..10_000).all(|_| verify(&inst, &[1, 3]) == first));
    }

    #[test]
    fn probe_tokens_never_change_reward() {
        for inst in suite(TaskFamily::ModularArithmeticChain, 30, 11).instances {
            for e in &inst.privileged {
                let y: Vec<Token> = e.info.tokens.to_vec();
                for (i, t) in y.iter().enumerate() {
                    if !inst.probe.contains(t) {
                        continue;
                    }
                    for repl in (0..11).filter(|r| *r != inst.gold) {
                        let mut z = y.clone();
                        z[i] = repl;
                        assert_eq!(verify(&inst, &z).reward, 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn split_is_roughly_80_20_and_stable() {
        let s = suite(TaskFamily::HiddenRuleSequence, 36, 0);
        let (train, held) = s.split();
        assert_eq!(train.len() + held.len(), 36);
        assert!((4..=12).contains(&held.len()), "held out {}", held.len());
        assert_eq!(s.split().1, held);
    }

    #[test]
    fn suite_text_round_trip_and_errors() {
        let s = suite(TaskFamily::ModularArithmeticChain, 12, 5);
        let text = write_suite(&s);
        assert_eq!(parse_suite(&text).unwrap(), s);
        let broken = text.replacen("gold=", "gold=x", 1);
        assert!(matches!(parse_suite(&broken), Err(LabError::Parse { line: 3, .. })));
    }

    #[test]
    fn probe_score_uniform_policy() {
        let s = suite(TaskFamily::HiddenRuleSequence, 6, 2);
        let p = PolicyParams::zeros(FeatureMap::new(s.vocab, 2, 8).unwrap());
        for inst in &s.instances {
            let score = leakage_probe_score(&p, &[inst]).unwrap();
            let expected = inst.probe.len() as f64 / 12.0;
            assert!((score - expected).abs() < 1e-12, "{score} vs {expected}");
        }
    }

    #[test]
    fn probe_score_empty_probe_set_and_half_mass() {
        let v = Vocab::new(4, 3).unwrap();
        let mut inst = Instance::single_for_tests(v);
        inst.probe.clear();
        let fmap = FeatureMap::new(v, 1, 8).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        assert_eq!(leakage_probe_score(&p, &[&inst]).unwrap(), 0.0);
        // mass 0.5 on probe token 2 at every position: score(2) = ln 3 + others 0 over 4 tokens
        inst.probe.insert(2);
        for pos in 0..8 {
            p.set_weight(fmap.position_feature(pos, 2), 3f64.ln());
        }
        let score = leakage_probe_score(&p, &[&inst]).unwrap();
        assert!((score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exact_accuracy_matches_enumeration() {
        let v = Vocab::new(4, 3).unwrap();
        let mut inst = Instance::single_for_tests(v);
        inst.max_len = 3;
        inst.gold = 1;
        let fmap = FeatureMap::new(v, 2, 4).unwrap();
        let mut p = PolicyParams::zeros(fmap.clone());
        p.set_weight(fmap.window_feature(&[1], 3), 0.8);
        p.set_weight(fmap.position_feature(0, 1), 0.4);
        p.set_weight(fmap.window_feature(&[0, 1], 2), -0.6);
        // brute force over all sequences
        let mut brute = 0.0;
        let mut stack: Vec<(Vec<Token>, f64)> = vec![(vec![], 1.0)];
        while let Some((y, m)) = stack.pop() {
            if y.len() == 3 || y.last() == Some(&3) {
                brute += m * verify(&inst, &y).reward;
                continue;
            }
            let d = p.student_dist(&p.context(inst.id, None, &inst.prompt, &y)).unwrap();
            for t in 0..4 {
                let mut z = y.clone();
                z.push(t);
                stack.push((z, m * d.prob(t)));
            }
        }
        let exact = exact_accuracy(&p, &[&inst]).unwrap();
        assert!((exact - brute).abs() < 1e-14, "{exact} vs {brute}");
    }

    fn two_r_joint(lik: [f64; 2]) -> JointModel {
        let v = Vocab::new(3, 2).unwrap();
        let privileged = vec![
            (Privileged::new(PrivilegedId(0), vec![0]), 0.5),
            (Privileged::new(PrivilegedId(1), vec![1]), 0.5),
        ];
        JointModel::from_conditionals(v, PromptId(0), vec![0], privileged, 2, |r, prefix| {
            if prefix.is_empty() {
                let p = lik[r];
                vec![p, 1.0 - p, 0.0]
            } else {
                vec![0.0, 0.0, 1.0]
            }
        })
        .unwrap()
    }

    #[test]
    fn posterior_examples() {
        let j = two_r_joint([0.9, 0.1]);
        let prior = privileged_posterior(&j, PromptId(0), &[]).unwrap();
        assert!((prior[0].1 - 0.5).abs() < 1e-15);
        let post = privileged_posterior(&j, PromptId(0), &[0]).unwrap();
        assert!((post[0].1 - 0.9).abs() < 1e-12 && (post[1].1 - 0.1).abs() < 1e-12);
        let point = two_r_joint([0.0, 0.6]);
        let post = privileged_posterior(&point, PromptId(0), &[1]).unwrap();
        assert!((post[0].1 - 5.0 / 7.0).abs() < 1e-12);
        let post = privileged_posterior(&point, PromptId(0), &[0]).unwrap();
        assert_eq!(post[1].1, 1.0);
        assert!(matches!(
            privileged_posterior(&j, PromptId(0), &[2]),
            Err(LabError::ZeroProbabilityPrefix)
        ));
    }

    #[test]
    fn random_joint_posterior_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let j = JointModel::random(&mut rng, 4, 4, 3).unwrap();
        for prefix in j.live_prefixes() {
            let post = privileged_posterior(&j, j.prompt(), &prefix).unwrap();
            let sum: f64 = post.iter().map(|(_, w)| w).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (ri, (_, w)) in post.iter().enumerate() {
                let direct: f64 = j
                    .entries()
                    .iter()
                    .filter(|e| e.r == ri && e.tokens.starts_with(&prefix))
                    .map(|e| e.prob)
                    .sum();
                assert!((w * j.mass(None, &prefix) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_policy_reproduces_generating_conditionals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let j = JointModel::random(&mut rng, 4, 3, 2).unwrap();
        let pol = j.exact_policy().unwrap();
        for prefix in j.live_prefixes() {
            let s = j.context(None, &prefix);
            let post = privileged_posterior(&j, j.prompt(), &prefix).unwrap();
            let mix = marginal_teacher_dist(&pol, &s, &post
                .iter()
                .filter(|(r, _)| j.mass(Some(r.id.0 as usize), &prefix) > 0.0)
                .cloned()
                .collect::<Vec<_>>())
            .unwrap();
            let student = pol.student_dist(&s).unwrap();
            for (a, b) in mix.probs().iter().zip(student.probs()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
