// SPDX-License-Identifier: MIT OR Apache-2.0

//! Three-digit addition instances, prompt templates, the toy tokenizer and
//! the one-token answer readout.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SubjectModel;
use crate::rng::stream;
use crate::stats::Count;

/// Largest integer with its own token.
pub const MAX_INT_TOKEN: u32 = 1000;

/// Operand range.
pub const OPERAND_MIN: u32 = 1;
pub const OPERAND_MAX: u32 = 999;

/// Default gold-sum range: three-digit sums only.
pub const DEFAULT_SUM_RANGE: (u32, u32) = (200, 999);

/// One addition problem with its digit and context labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdditionInstance {
    pub id: u64,
    pub a: u32,
    pub b: u32,
    /// Gold sum.
    pub s: u32,
    /// Hundreds, tens and ones digits of `s`.
    pub h: u32,
    pub x: u32,
    pub y: u32,
    /// Ones-sum bucket `(a mod 10) + (b mod 10)`.
    pub k: u32,
    /// Stripped-tens context `(⌊a/10⌋ + ⌊b/10⌋) mod 10`.
    #[serde(rename = "T")]
    pub stripped_tens: u32,
    /// Hundreds digit of `s`, the context for tens editing.
    #[serde(rename = "H")]
    pub hundreds_ctx: u32,
    pub template_id: String,
}

impl AdditionInstance {
    pub fn new(id: u64, a: u32, b: u32, template_id: &str) -> Self {
        let s = a + b;
        Self {
            id,
            a,
            b,
            s,
            h: (s / 100) % 10,
            x: (s / 10) % 10,
            y: s % 10,
            k: a % 10 + b % 10,
            stripped_tens: (a / 10 + b / 10) % 10,
            hundreds_ctx: (s / 100) % 10,
            template_id: template_id.to_owned(),
        }
    }

    /// Same operands under another template.
    pub fn with_template(&self, template_id: &str) -> Self {
        Self {
            template_id: template_id.to_owned(),
            ..self.clone()
        }
    }
}

/// Digit place of the gold sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Place {
    Hundreds,
    Tens,
    Ones,
}

impl Place {
    pub fn exponent(self) -> u32 {
        match self {
            Place::Hundreds => 2,
            Place::Tens => 1,
            Place::Ones => 0,
        }
    }

    pub fn weight(self) -> i64 {
        10_i64.pow(self.exponent())
    }

    pub fn digit_of(self, n: u32) -> u32 {
        (n / 10_u32.pow(self.exponent())) % 10
    }

    pub fn all() -> [Place; 3] {
        [Place::Hundreds, Place::Tens, Place::Ones]
    }
}

impl fmt::Display for Place {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Place::Hundreds => "hundreds",
            Place::Tens => "tens",
            Place::Ones => "ones",
        })
    }
}

/// Result of the one-token readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Value(u32),
    ParseFailure,
}

impl Answer {
    pub fn value(self) -> Option<u32> {
        match self {
            Answer::Value(v) => Some(v),
            Answer::ParseFailure => None,
        }
    }

    /// Parse decoded text as a whole integer in the single-token range.
    /// Surrounding whitespace is ignored (real tokenizers fold it into the token).
    pub fn from_text(text: &str) -> Answer {
        let t = text.trim();
        let canonical = !t.is_empty()
            && t.bytes().all(|b| b.is_ascii_digit())
            && (t == "0" || !t.starts_with('0'));
        match t.parse::<u32>() {
            Ok(v) if canonical && v <= MAX_INT_TOKEN => Answer::Value(v),
            _ => Answer::ParseFailure,
        }
    }
}

/// A prompt format with `{a}` and `{b}` operand slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub format: String,
}

impl PromptTemplate {
    pub fn new(id: &str, format: &str) -> Result<Self> {
        let a = format.matches("{a}").count();
        let b = format.matches("{b}").count();
        if a != 1 || b != 1 {
            return Err(Error::Config(format!(
                "template {id:?} needs exactly one {{a}} and one {{b}} slot"
            )));
        }
        Ok(Self {
            id: id.to_owned(),
            format: format.to_owned(),
        })
    }

    /// Whether the prompt ends on a space so the answer starts a fresh token.
    pub fn trailing_space(&self) -> bool {
        self.format.ends_with(' ')
    }

    pub fn render(&self, a: u32, b: u32) -> String {
        self.format
            .replace("{a}", &a.to_string())
            .replace("{b}", &b.to_string())
    }
}

pub const CANONICAL_TEMPLATE: &str = "canonical";

/// Template registry keyed by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateRegistry {
    /// The canonical prompt and three paraphrases. The paraphrases change only
    /// the leading scaffold, so every template tokenizes to the same length.
    fn default() -> Self {
        let mut reg = TemplateRegistry {
            templates: BTreeMap::new(),
        };
        for (id, fmt) in [
            (CANONICAL_TEMPLATE, "Calculate: {a}+{b} = "),
            ("prompt1", "Compute: {a}+{b} = "),
            ("prompt2", "Please calculate: {a}+{b} = "),
            ("prompt3", "Q: {a}+{b} = "),
        ] {
            reg.insert(PromptTemplate::new(id, fmt).expect("built-in template"));
        }
        reg
    }
}

impl TemplateRegistry {
    pub fn empty() -> Self {
        Self {
            templates: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, t: PromptTemplate) {
        self.templates.insert(t.id.clone(), t);
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(id)
            .ok_or_else(|| Error::Config(format!("template {id:?} not registered")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    /// Render an instance with its own template.
    pub fn render_text(&self, inst: &AdditionInstance) -> Result<String> {
        Ok(self.get(&inst.template_id)?.render(inst.a, inst.b))
    }
}

/// Multi-character scaffold pieces with their own tokens.
const SCAFFOLD_PIECES: &[&str] = &[
    "Calculate: ",
    "Compute: ",
    "Please calculate: ",
    "Q: ",
    " = ",
    "+",
];

/// Toy vocabulary: token `n` is the integer `n` for `n ≤ 1000`, followed by
/// scaffold pieces and single printable ASCII characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    pieces: Vec<String>,
    by_piece: BTreeMap<String, u32>,
    max_piece_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut pieces: Vec<String> = SCAFFOLD_PIECES.iter().map(|s| s.to_string()).collect();
        for byte in 0x20u8..0x7f {
            let c = byte as char;
            if !c.is_ascii_digit() && !pieces.iter().any(|p| p == &c.to_string()) {
                pieces.push(c.to_string());
            }
        }
        let by_piece = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), MAX_INT_TOKEN + 1 + i as u32))
            .collect();
        let max_piece_len = pieces.iter().map(String::len).max().unwrap_or(1);
        Self {
            pieces,
            by_piece,
            max_piece_len,
        }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        (MAX_INT_TOKEN as usize + 1) + self.pieces.len()
    }

    pub fn int_token(&self, n: u32) -> Result<u32> {
        if n <= MAX_INT_TOKEN {
            Ok(n)
        } else {
            Err(Error::Tokenizer(format!("integer {n} has no single token")))
        }
    }

    /// Integer value of a token, if it is an integer token.
    pub fn int_value(&self, token: u32) -> Option<u32> {
        (token <= MAX_INT_TOKEN).then_some(token)
    }

    /// Greedy longest-match tokenization. Digit runs become integer tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        if !text.is_ascii() {
            return Err(Error::Tokenizer("toy tokenizer accepts ASCII only".into()));
        }
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i].is_ascii_digit() {
                let end = bytes[i..]
                    .iter()
                    .position(|b| !b.is_ascii_digit())
                    .map_or(bytes.len(), |p| i + p);
                let run = &text[i..end];
                if run.len() > 1 && run.starts_with('0') {
                    return Err(Error::Tokenizer(format!("non-canonical integer {run:?}")));
                }
                let value: u32 = run
                    .parse()
                    .map_err(|_| Error::Tokenizer(format!("integer {run:?} out of range")))?;
                out.push(self.int_token(value)?);
                i = end;
                continue;
            }
            let longest = (1..=self.max_piece_len.min(bytes.len() - i))
                .rev()
                .find_map(|len| self.by_piece.get(&text[i..i + len]).map(|&id| (id, len)));
            match longest {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    return Err(Error::Tokenizer(format!(
                        "no token for {:?}",
                        &text[i..i + 1]
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn piece(&self, token: u32) -> Result<String> {
        if token <= MAX_INT_TOKEN {
            return Ok(token.to_string());
        }
        self.pieces
            .get((token - MAX_INT_TOKEN - 1) as usize)
            .cloned()
            .ok_or_else(|| Error::Tokenizer(format!("token id {token} out of vocabulary")))
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        tokens.iter().map(|t| self.piece(*t)).collect()
    }

    /// One-token readout: integer tokens parse to their value, everything else
    /// is a parse failure.
    pub fn parse_answer(&self, token: u32) -> Answer {
        match self.int_value(token) {
            Some(v) => Answer::Value(v),
            None => Answer::ParseFailure,
        }
    }
}

/// Instance with rendered text and toy tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub tokens: Vec<u32>,
}

pub fn render(
    inst: &AdditionInstance,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
) -> Result<RenderedPrompt> {
    let text = template.render(inst.a, inst.b);
    let tokens = tokenizer.encode(&text)?;
    Ok(RenderedPrompt { text, tokens })
}

fn check_range(lo: u32, hi: u32) -> Result<()> {
    if lo > hi || hi < 2 * OPERAND_MIN || lo > 2 * OPERAND_MAX {
        return Err(Error::InvalidArgument(format!(
            "empty feasible sum range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Sample `n` instances with operands uniform on `[1, 999]` conditioned on
/// `s ∈ [lo, hi]` (rejection sampling). Deterministic per seed.
pub fn sample_instances(
    n: usize,
    seed: u64,
    sum_range: (u32, u32),
) -> Result<Vec<AdditionInstance>> {
    sample_where(n, seed, sum_range, |_| true)
}

/// Like [`sample_instances`] but additionally conditioned on `keep`.
/// Gives up with an error when the acceptance rate looks like zero.
pub fn sample_where(
    n: usize,
    seed: u64,
    (lo, hi): (u32, u32),
    keep: impl Fn(&AdditionInstance) -> bool,
) -> Result<Vec<AdditionInstance>> {
    check_range(lo, hi)?;
    let mut rng = stream(seed, "instances", 0);
    let mut out = Vec::with_capacity(n);
    let mut misses = 0usize;
    while out.len() < n {
        let a = rng.gen_range(OPERAND_MIN..=OPERAND_MAX);
        let b = rng.gen_range(OPERAND_MIN..=OPERAND_MAX);
        let inst = AdditionInstance::new(out.len() as u64, a, b, CANONICAL_TEMPLATE);
        if (lo..=hi).contains(&inst.s) && keep(&inst) {
            out.push(inst);
            misses = 0;
        } else {
            misses += 1;
            if misses > 1_000_000 {
                return Err(Error::InvalidArgument(
                    "sampling predicate has no support".into(),
                ));
            }
        }
    }
    Ok(out)
}

/// Disjoint source/target pairs with distinct gold sums.
pub fn sample_pairs(
    n: usize,
    seed: u64,
    sum_range: (u32, u32),
) -> Result<Vec<(AdditionInstance, AdditionInstance)>> {
    let pool = sample_instances(2 * n + 64, seed, sum_range)?;
    let mut pairs = Vec::with_capacity(n);
    let mut it = pool.into_iter();
    let mut pending: Option<AdditionInstance> = None;
    for inst in it.by_ref() {
        match pending.take() {
            None => pending = Some(inst),
            Some(src) if src.s != inst.s && (src.a, src.b) != (inst.a, inst.b) => {
                pairs.push((src, inst));
                if pairs.len() == n {
                    break;
                }
            }
            Some(src) => pending = Some(src),
        }
    }
    if pairs.len() < n {
        return Err(Error::InvalidArgument(format!(
            "could only form {} pairs",
            pairs.len()
        )));
    }
    for (i, (src, tgt)) in pairs.iter_mut().enumerate() {
        src.id = 2 * i as u64;
        tgt.id = 2 * i as u64 + 1;
    }
    Ok(pairs)
}

/// Instances the subject answers correctly, plus the baseline accuracy.
#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub correct: Vec<AdditionInstance>,
    pub count: Count,
}

pub fn greedy_instance_answer(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    inst: &AdditionInstance,
) -> Result<Answer> {
    let tokens = model.tokenize(&registry.render_text(inst)?)?;
    Ok(model
        .forward(&tokens, &crate::model::InterventionPlan::default(), &[])?
        .answer)
}

/// Keep exactly the instances whose greedy one-token answer equals the gold sum.
pub fn baseline_filter(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    instances: &[AdditionInstance],
) -> Result<BaselineReport> {
    use rayon::prelude::*;
    let flags: Vec<bool> = instances
        .par_iter()
        .map(|inst| Ok(greedy_instance_answer(model, registry, inst)? == Answer::Value(inst.s)))
        .collect::<Result<_>>()?;
    let mut count = Count::default();
    let mut correct = Vec::new();
    for (inst, ok) in instances.iter().zip(flags) {
        count.record(ok);
        if ok {
            correct.push(inst.clone());
        }
    }
    Ok(BaselineReport { correct, count })
}

/// Keep a pair only when both members pass the baseline.
pub fn baseline_filter_pairs(
    model: &dyn SubjectModel,
    registry: &TemplateRegistry,
    pairs: &[(AdditionInstance, AdditionInstance)],
) -> Result<Vec<(AdditionInstance, AdditionInstance)>> {
    let mut out = Vec::new();
    for (src, tgt) in pairs {
        let ok_src = greedy_instance_answer(model, registry, src)? == Answer::Value(src.s);
        let ok_tgt = greedy_instance_answer(model, registry, tgt)? == Answer::Value(tgt.s);
        if ok_src && ok_tgt {
            out.push((src.clone(), tgt.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn labels_for_worked_examples() {
        let i = AdditionInstance::new(0, 123, 456, CANONICAL_TEMPLATE);
        assert_eq!(
            (i.s, i.h, i.x, i.y, i.k, i.stripped_tens),
            (579, 5, 7, 9, 9, 7)
        );
        let j = AdditionInstance::new(0, 47, 85, CANONICAL_TEMPLATE);
        assert_eq!((j.s, j.k, j.stripped_tens), (132, 12, 2));
    }

    #[test]
    fn default_range_excludes_small_sums() {
        let xs = sample_instances(2000, 1, DEFAULT_SUM_RANGE).unwrap();
        assert!(xs.iter().all(|i| (200..=999).contains(&i.s)));
        let wide = sample_instances(2000, 1, (100, 999)).unwrap();
        assert!(wide.iter().any(|i| i.s < 200));
        assert_eq!(xs, sample_instances(2000, 1, DEFAULT_SUM_RANGE).unwrap());
        assert!(sample_instances(1, 1, (999, 200)).is_err());
        assert!(sample_instances(1, 1, (2000, 3000)).is_err());
    }

    #[test]
    fn labels_match_independent_arithmetic() {
        for inst in sample_instances(100_000, 9, (2, 1998)).unwrap() {
            let digits: Vec<u32> = format!("{:03}", inst.s)
                .chars()
                .map(|c| c.to_digit(10).unwrap())
                .collect();
            let n = digits.len();
            assert_eq!(inst.y, digits[n - 1]);
            assert_eq!(inst.x, digits[n - 2]);
            assert_eq!(inst.h, digits[n - 3]);
            let ad: Vec<u32> = inst
                .a
                .to_string()
                .chars()
                .map(|c| c.to_digit(10).unwrap())
                .collect();
            let bd: Vec<u32> = inst
                .b
                .to_string()
                .chars()
                .map(|c| c.to_digit(10).unwrap())
                .collect();
            assert_eq!(inst.k, ad[ad.len() - 1] + bd[bd.len() - 1]);
            let strip = |v: u32| v / 10;
            assert_eq!(inst.stripped_tens, (strip(inst.a) + strip(inst.b)) % 10);
        }
    }

    #[test]
    fn canonical_render_and_parse() {
        let reg = TemplateRegistry::default();
        let tok = Tokenizer::default();
        let inst = AdditionInstance::new(0, 2, 3, CANONICAL_TEMPLATE);
        let r = render(&inst, reg.get(CANONICAL_TEMPLATE).unwrap(), &tok).unwrap();
        assert_eq!(r.text, "Calculate: 2+3 = ");
        assert!(reg.get(CANONICAL_TEMPLATE).unwrap().trailing_space());
        assert_eq!(r.tokens.len(), 5);
        assert_eq!(r.tokens[1], 2);
        assert_eq!(r.tokens[3], 3);
        assert_eq!(
            tok.parse_answer(tok.int_token(579).unwrap()),
            Answer::Value(579)
        );
        assert_eq!(
            tok.parse_answer(tok.int_token(1000).unwrap()),
            Answer::Value(1000)
        );
        let eq = tok.encode("=").unwrap()[0];
        assert_eq!(tok.parse_answer(eq), Answer::ParseFailure);
        assert!(tok.vocab_size() > 1001 && tok.vocab_size() < 1200);
    }

    #[test]
    fn paraphrases_share_operand_tokens_and_length() {
        let reg = TemplateRegistry::default();
        let tok = Tokenizer::default();
        let inst = AdditionInstance::new(0, 321, 45, CANONICAL_TEMPLATE);
        let canon = render(&inst, reg.get(CANONICAL_TEMPLATE).unwrap(), &tok).unwrap();
        for t in reg.iter().filter(|t| t.id != CANONICAL_TEMPLATE) {
            let r = render(&inst, t, &tok).unwrap();
            assert_ne!(r.text, canon.text);
            assert_eq!(r.tokens.len(), canon.tokens.len());
            assert_eq!(r.tokens[1..], canon.tokens[1..]);
        }
    }

    #[test]
    fn tokenizer_rejects_unrepresentable() {
        let tok = Tokenizer::default();
        assert!(tok.encode("1001+2").is_err());
        assert!(tok.encode("007").is_err());
        assert!(tok.encode("é").is_err());
        assert!(PromptTemplate::new("bad", "{a} only").is_err());
    }

    #[test]
    fn tokenizer_injective_on_integers() {
        let tok = Tokenizer::default();
        let ids: std::collections::BTreeSet<u32> = (0..=1000)
            .map(|n| tok.encode(&n.to_string()).unwrap()[0])
            .collect();
        assert_eq!(ids.len(), 1001);
    }

    #[test]
    fn answer_from_text() {
        assert_eq!(Answer::from_text(" 579"), Answer::Value(579));
        assert_eq!(Answer::from_text("1000"), Answer::Value(1000));
        assert_eq!(Answer::from_text("1001"), Answer::ParseFailure);
        assert_eq!(Answer::from_text("05"), Answer::ParseFailure);
        assert_eq!(Answer::from_text("="), Answer::ParseFailure);
    }

    #[test]
    fn pairs_are_disjoint_with_distinct_sums() {
        let pairs = sample_pairs(200, 4, DEFAULT_SUM_RANGE).unwrap();
        assert_eq!(pairs.len(), 200);
        assert!(pairs.iter().all(|(s, t)| s.s != t.s));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn render_round_trips(a in 1u32..=999, b in 1u32..=999, t in 0usize..4) {
            let reg = TemplateRegistry::default();
            let tok = Tokenizer::default();
            let template = reg.iter().nth(t).unwrap();
            let inst = AdditionInstance::new(0, a, b, &template.id);
            let r = render(&inst, template, &tok).unwrap();
            prop_assert_eq!(tok.decode(&r.tokens).unwrap(), r.text);
        }
    }
}
