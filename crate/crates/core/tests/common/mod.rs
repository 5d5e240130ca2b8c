#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use omniguide::source::toy::{ToyModel, ToySpec};
use omniguide::{LogitSource, OmniPayload, PromptInput, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random n-gram table over `vocab` tokens with contexts up to length 3 and an
/// omni section keyed `img`.
pub fn random_spec(seed: u64, vocab: usize) -> ToySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..vocab).map(|i| format!("w{i}")).collect();
    let mut spec = ToySpec::new(&names).unwrap();
    let mut seen = std::collections::HashSet::new();
    for section in [None, Some("img")] {
        let rules = if section.is_none() { 4 * vocab } else { vocab };
        for _ in 0..rules {
            let len = rng.random_range(0..=3);
            let ctx: Vec<String> = (0..len)
                .map(|_| names[rng.random_range(0..vocab)].clone())
                .collect();
            let next = names[rng.random_range(0..vocab)].clone();
            if !seen.insert((section, ctx.clone(), next.clone())) {
                continue;
            }
            let score = rng.random_range(-5.0..5.0);
            spec = match section {
                None => spec.rule(&ctx, &next, score).unwrap(),
                Some(k) => spec.omni_rule(k, &ctx, &next, score).unwrap(),
            };
        }
    }
    spec
}

pub fn random_prompt(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<TokenId> {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

pub fn img_payload() -> OmniPayload {
    OmniPayload::new("image/x-toy", b"img\nsome pixels".to_vec())
}

/// Fusion testbed: the base model perceives a fact only through the payload,
/// the guide knows a two-step chain from that fact to the answer.
pub const FACTS: usize = 4;

pub fn testbed_vocab() -> Vec<String> {
    let mut v = vec!["Q1".to_string(), "Q2".into(), "THINK".into(), "GUESS".into(), "EOS".into()];
    for prefix in ["v", "m", "a"] {
        for i in 0..FACTS {
            v.push(format!("{prefix}{i}"));
        }
    }
    v
}

/// Intermediate and answer index for question `q` (1 or 2) and fact `i`.
pub fn chain(q: usize, i: usize) -> (usize, usize) {
    match q {
        1 => (i, i),
        _ => ((i + 1) % FACTS, (i + 2) % FACTS),
    }
}

pub fn testbed_base_spec() -> ToySpec {
    let mut s = ToySpec::new(&testbed_vocab()).unwrap();
    for i in 0..FACTS {
        s = s.rule(&[format!("v{i}")], "GUESS", 2.0).unwrap();
        for q in ["Q1", "Q2"] {
            s = s.omni_rule(&format!("fact{i}"), &[q], &format!("v{i}"), 10.0).unwrap();
        }
    }
    s.rule(&["GUESS"], "EOS", 5.0).unwrap()
}

pub fn testbed_guide_spec() -> ToySpec {
    let mut s = ToySpec::new(&testbed_vocab()).unwrap();
    for q in 1..=2 {
        let qn = format!("Q{q}");
        s = s.rule(&[qn.as_str(), "THINK"], "v0", 3.0).unwrap();
        for i in 0..FACTS {
            let (m, a) = chain(q, i);
            s = s
                .rule(&[qn.clone(), "THINK".into(), format!("v{i}")], &format!("m{m}"), 20.0)
                .unwrap()
                .rule(&[format!("v{i}"), format!("m{m}")], &format!("a{a}"), 20.0)
                .unwrap();
        }
    }
    for a in 0..FACTS {
        s = s.rule(&[format!("a{a}")], "EOS", 20.0).unwrap();
    }
    s
}

pub struct Testbed {
    pub base: Arc<ToyModel>,
    pub guide: Arc<ToyModel>,
    pub vocab: Vec<String>,
}

impl Testbed {
    pub fn new() -> Self {
        Self {
            base: Arc::new(ToyModel::new("testbed-base", testbed_base_spec())),
            guide: Arc::new(ToyModel::new("testbed-guide", testbed_guide_spec())),
            vocab: testbed_vocab(),
        }
    }

    pub fn id(&self, tok: &str) -> TokenId {
        self.vocab.iter().position(|t| t == tok).unwrap() as TokenId
    }

    pub fn prompt(&self, q: usize, fact: usize) -> PromptInput {
        PromptInput::with_omni(
            vec![self.id(&format!("Q{q}"))],
            OmniPayload::new("image/x-toy", format!("fact{fact}\n<pixels>").into_bytes()),
        )
    }

    /// Last answer-like token (a*, GUESS) of a generation.
    pub fn answer(&self, tokens: &[TokenId]) -> Option<String> {
        tokens
            .iter()
            .rev()
            .map(|&t| self.vocab[t as usize].clone())
            .find(|s| s.starts_with('a') || s == "GUESS")
    }

    pub fn base_dyn(&self) -> Arc<dyn LogitSource> {
        self.base.clone()
    }

    pub fn guide_dyn(&self) -> Arc<dyn LogitSource> {
        self.guide.clone()
    }
}

/// Independent oracle for the testbed: plain maps, naive softmax/JS, and the
/// expanded two-term mixing formula, enumerating the greedy path.
pub mod oracle {
    use super::*;

    type Rules = HashMap<Vec<String>, Vec<(String, f64)>>;

    pub struct Table {
        vocab: Vec<String>,
        rules: Rules,
        omni: HashMap<String, Rules>,
    }

    fn suffix_row<'a>(
        rules: &'a HashMap<Vec<String>, Vec<(String, f64)>>,
        prefix: &[String],
    ) -> Option<&'a Vec<(String, f64)>> {
        (0..=prefix.len()).rev().find_map(|k| rules.get(&prefix[prefix.len() - k..]))
    }

    impl Table {
        pub fn scores(&self, prefix: &[String], key: Option<&str>) -> Vec<f64> {
            let mut z = vec![0.0; self.vocab.len()];
            let idx = |t: &str| self.vocab.iter().position(|v| v == t).unwrap();
            if let Some(row) = suffix_row(&self.rules, prefix) {
                for (t, s) in row {
                    z[idx(t)] = *s;
                }
            }
            if let Some(rows) = key.and_then(|k| self.omni.get(k)) {
                if let Some(row) = suffix_row(rows, prefix) {
                    for (t, s) in row {
                        z[idx(t)] = *s;
                    }
                }
            }
            z
        }
    }

    fn rule(ctx: &[&str], next: &str, s: f64) -> (Vec<String>, (String, f64)) {
        (ctx.iter().map(|c| c.to_string()).collect(), (next.to_string(), s))
    }

    fn collect(rules: Vec<(Vec<String>, (String, f64))>) -> HashMap<Vec<String>, Vec<(String, f64)>> {
        let mut m: HashMap<Vec<String>, Vec<(String, f64)>> = HashMap::new();
        for (c, r) in rules {
            m.entry(c).or_default().push(r);
        }
        m
    }

    pub fn base_table() -> Table {
        let mut rules = vec![rule(&["GUESS"], "EOS", 5.0)];
        let mut omni = HashMap::new();
        for i in 0..FACTS {
            let v = format!("v{i}");
            rules.push(rule(&[&v], "GUESS", 2.0));
            omni.insert(
                format!("fact{i}"),
                collect(vec![rule(&["Q1"], &v, 10.0), rule(&["Q2"], &v, 10.0)]),
            );
        }
        Table { vocab: testbed_vocab(), rules: collect(rules), omni }
    }

    pub fn guide_table() -> Table {
        let mut rules = Vec::new();
        for q in 1..=2 {
            let qn = format!("Q{q}");
            rules.push(rule(&[&qn, "THINK"], "v0", 3.0));
            for i in 0..FACTS {
                let (m, a) = chain(q, i);
                let (v, m, a) = (format!("v{i}"), format!("m{m}"), format!("a{a}"));
                rules.push(rule(&[&qn, "THINK", &v], &m, 20.0));
                rules.push(rule(&[&v, &m], &a, 20.0));
            }
        }
        for a in 0..FACTS {
            rules.push(rule(&[&format!("a{a}")], "EOS", 20.0));
        }
        Table { vocab: testbed_vocab(), rules: collect(rules), omni: HashMap::new() }
    }

    fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
    }

    pub fn js(p: &[f64], q: &[f64]) -> f64 {
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
        0.5 * kl(p, &m) + 0.5 * kl(q, &m)
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        best
    }

    /// Greedy penalized argmax, same convention as the engine's sampler.
    fn pick(z: &[f64], history: &[usize], penalty: f64) -> usize {
        let mut z = z.to_vec();
        let mut seen = std::collections::HashSet::new();
        for &h in history {
            if seen.insert(h) {
                z[h] = if z[h] > 0.0 { z[h] / penalty } else { z[h] * penalty };
            }
        }
        argmax(&z)
    }

    pub enum Mode {
        BaseOnly,
        GuideOnly,
        Stepwise,
    }

    pub fn greedy_path(q: usize, fact: usize, mode: Mode, max_len: usize) -> Vec<String> {
        let base = base_table();
        let guide = guide_table();
        let vocab = testbed_vocab();
        let key = format!("fact{fact}");
        let question = format!("Q{q}");
        let mut out: Vec<String> = Vec::new();
        let idx = |t: &str| vocab.iter().position(|v| v == t).unwrap();
        let mut history = vec![idx(&question)];
        if matches!(mode, Mode::GuideOnly) {
            history.push(idx("THINK"));
        }
        for t in 1..=max_len {
            let mut base_prefix = vec![question.clone()];
            base_prefix.extend(out.iter().cloned());
            let mut guide_prefix = vec![question.clone(), "THINK".to_string()];
            guide_prefix.extend(out.iter().cloned());
            let z = match mode {
                Mode::BaseOnly => base.scores(&base_prefix, Some(&key)),
                Mode::GuideOnly => guide.scores(&guide_prefix, None),
                Mode::Stepwise => {
                    let zb = base.scores(&base_prefix, Some(&key));
                    let zn = base.scores(&base_prefix, None);
                    let zr = guide.scores(&guide_prefix, None);
                    let (pb, pn, pr) = (softmax(&zb), softmax(&zn), softmax(&zr));
                    let surplus = js(&pr, &pn) - js(&pb, &pn);
                    let mut ar = surplus.clamp(0.0, 1.0);
                    if t <= 5 {
                        ar = ar.min(0.1 * t as f64);
                    }
                    let ap = 1.0 - ar;
                    (0..zb.len())
                        .map(|i| zb[i] + ar * (zr[i] - zn[i]) + ap * (zb[i] - zn[i]))
                        .collect()
                }
            };
            let tok = pick(&z, &history, 1.03);
            history.push(tok);
            out.push(vocab[tok].clone());
            if vocab[tok] == "EOS" {
                break;
            }
        }
        out
    }
}

/// Frozen greedy outcomes of the testbed for (question, fact), produced by
/// [`oracle::greedy_path`] and checked by hand: (stepwise, base-only, guide-only).
pub fn frozen_paths(q: usize, fact: usize) -> [Vec<String>; 3] {
    let s = |v: &[&str]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    let (m, a) = chain(q, fact);
    let (gm, ga) = chain(q, 0);
    [
        s(&[&format!("v{fact}"), &format!("m{m}"), &format!("a{a}"), "EOS"]),
        s(&[&format!("v{fact}"), "GUESS", "EOS"]),
        s(&["v0", &format!("m{gm}"), &format!("a{ga}"), "EOS"]),
    ]
}

/// Run the engine on one testbed case and return the generated token strings.
pub fn engine_path(bed: &Testbed, q: usize, fact: usize, mode: &str) -> Vec<String> {
    use omniguide::{decode, DecodeJob, GuidanceConfig, SamplerConfig, Strategy};
    let think = vec![bed.id("THINK")];
    let job = match mode {
        "stepwise" => DecodeJob::new(bed.base_dyn(), bed.prompt(q, fact))
            .with_guide(bed.guide_dyn())
            .with_think_tag(think),
        "base" => DecodeJob::new(bed.base_dyn(), bed.prompt(q, fact))
            .with_guidance(GuidanceConfig::with_strategy(Strategy::None)),
        "guide" => {
            let mut tokens = bed.prompt(q, fact).text_tokens;
            tokens.extend(think);
            DecodeJob::new(bed.guide_dyn(), PromptInput::text(tokens))
                .with_guidance(GuidanceConfig::with_strategy(Strategy::None))
        }
        other => panic!("unknown mode {other}"),
    }
    .with_sampler(SamplerConfig::greedy())
    .with_stop_tokens([bed.id("EOS")])
    .with_max_new_tokens(8);
    let r = decode(&job).unwrap();
    assert!(!r.is_error(), "{:?}", r.error);
    r.tokens.iter().map(|&t| bed.vocab[t as usize].clone()).collect()
}
