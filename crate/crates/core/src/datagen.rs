//! Tokenized dataset construction: exact input/output formats, domain
//! sampling, complexity-stratified and mixture distributions, zero-shift
//! augmentation, and text interleaving.

use crate::complexity::{cascade_complexity, mul_dependency_levels};
use crate::digits::{school_add, school_mul, Digits};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub mod dataset;

/// Arithmetic operation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Add,
    Mul,
}

/// Token-id table. Digit `d` maps to id `d`; the remaining symbols follow
/// densely so the table is fully determined by the text-alphabet size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Number of symbolic TEXT tokens available for interleaving.
    pub text_tokens: u32,
}

impl Vocab {
    pub const PLUS: u32 = 10;
    pub const TIMES: u32 = 11;
    pub const PAD: u32 = 12;
    /// Target-only marker for unsupervised positions; never a valid input.
    pub const IGNORE: u32 = 13;
    const TEXT_BASE: u32 = 14;

    pub fn new(text_tokens: u32) -> Self {
        Vocab { text_tokens }
    }

    /// Default alphabet with 26 symbolic text tokens.
    pub fn with_text() -> Self {
        Vocab::new(26)
    }

    /// Arithmetic-only alphabet.
    pub fn arithmetic() -> Self {
        Vocab::new(0)
    }

    pub fn size(&self) -> usize {
        (Self::TEXT_BASE + self.text_tokens) as usize
    }

    pub fn digit(d: u8) -> u32 {
        debug_assert!(d <= 9);
        d as u32
    }

    pub fn text(&self, k: u32) -> u32 {
        debug_assert!(k < self.text_tokens);
        Self::TEXT_BASE + k
    }

    pub fn is_digit(id: u32) -> bool {
        id <= 9
    }

    pub fn is_text(id: u32) -> bool {
        id >= Self::TEXT_BASE
    }
}

/// Span of contiguous digit tokens, as `(start, len)`.
pub type Span = (usize, usize);

/// Per-sample bookkeeping carried next to the token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub op: OpKind,
    /// Format length (maximum digits of the padded operand).
    pub l: usize,
    pub len_a: usize,
    pub len_b: usize,
    /// Cascade length (add) or dependency levels (mul).
    pub complexity: usize,
    /// Digit-token spans of the two operands in the input, present in
    /// text-interleaved samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digit_spans: Option<(Span, Span)>,
}

/// One tokenized input/target pair with its supervision mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(rename = "input_ids")]
    pub input: Vec<u32>,
    #[serde(rename = "target_ids")]
    pub target: Vec<u32>,
    pub mask: Vec<bool>,
    pub meta: SampleMeta,
}

impl Sample {
    /// Indices of supervised positions.
    pub fn supervised(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }
}

/// Operand-length domain for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Maximum digit length (format length).
    pub l: usize,
    /// Seen digit length; training operands stay below `10^ls`.
    pub ls: usize,
    pub op: OpKind,
    /// Multiplier length for `Mul`; ignored for `Add`.
    #[serde(default = "default_multiplier_len")]
    pub multiplier_len: usize,
}

fn default_multiplier_len() -> usize {
    1
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ls == 0 || self.ls >= self.l {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= ls < l, got ls={} l={}",
                self.ls, self.l
            )));
        }
        if self.op == OpKind::Mul && !(1..=18).contains(&self.multiplier_len) {
            return Err(Error::InvalidConfig(format!(
                "multiplier_len {} out of range",
                self.multiplier_len
            )));
        }
        Ok(())
    }
}

/// Which part of the domain to draw operand pairs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// Both operands below `10^ls`.
    Seen,
    /// At least one operand at or above `10^ls`, both below `10^l`.
    Unseen,
    /// Both operands below `10^l`.
    All,
}

/// Training-distribution policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    ComplexityUniform,
    Mixture { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn uniform(seed: u64) -> Self {
        SamplerSpec {
            kind: SamplerKind::Uniform,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SamplerKind::Mixture { p } = self.kind {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("mixture_p {p} not in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Rejection budget for complexity-targeted sampling.
pub const REJECTION_BUDGET: u64 = 1_000_000;

fn push_padded_be(out: &mut Vec<u32>, x: &Digits, width: usize) {
    for _ in 0..width - x.len() {
        out.push(Vocab::PAD);
    }
    for &d in x.le().iter().rev() {
        out.push(Vocab::digit(d));
    }
}

/// Encode an addition pair in the fixed-length padded format.
///
/// Input is `[PAD.., a, '+', PAD.., b]` over `2l+1` tokens; the target
/// supervises the last `l` positions with the PAD-padded sum and IGNOREs
/// the rest.
pub fn encode_add(a: &Digits, b: &Digits, l: usize) -> Result<Sample> {
    for x in [a, b] {
        if x.len() > l {
            return Err(Error::OperandTooLong { len: x.len(), limit: l });
        }
    }
    let sum = school_add(a, b);
    if sum.len() > l {
        return Err(Error::SumOverflow { len: sum.len(), limit: l });
    }
    let mut input = Vec::with_capacity(2 * l + 1);
    push_padded_be(&mut input, a, l);
    input.push(Vocab::PLUS);
    push_padded_be(&mut input, b, l);

    let mut target = vec![Vocab::IGNORE; l + 1];
    push_padded_be(&mut target, &sum, l);
    let mut mask = vec![false; l + 1];
    mask.extend(std::iter::repeat(true).take(l));

    Ok(Sample {
        input,
        target,
        mask,
        meta: SampleMeta {
            op: OpKind::Add,
            l,
            len_a: a.len(),
            len_b: b.len(),
            complexity: cascade_complexity(a, b).cascade_length,
            digit_spans: None,
        },
    })
}

/// Encode a multiplication pair: unpadded multiplier, `'x'`, padded
/// multiplicand. The target supervises the last `l + len(a)` positions.
pub fn encode_mul(a: &Digits, b: &Digits, l: usize) -> Result<Sample> {
    if b.len() > l {
        return Err(Error::OperandTooLong { len: b.len(), limit: l });
    }
    let la = a.len();
    let product = school_mul(a, b);
    let answer_len = l + la;
    debug_assert!(product.len() <= answer_len);

    let mut input = Vec::with_capacity(la + 1 + l);
    for &d in a.le().iter().rev() {
        input.push(Vocab::digit(d));
    }
    input.push(Vocab::TIMES);
    push_padded_be(&mut input, b, l);

    let ignored = input.len() - answer_len;
    let mut target = vec![Vocab::IGNORE; ignored];
    push_padded_be(&mut target, &product, answer_len);
    let mut mask = vec![false; ignored];
    mask.extend(std::iter::repeat(true).take(answer_len));

    Ok(Sample {
        input,
        target,
        mask,
        meta: SampleMeta {
            op: OpKind::Mul,
            l,
            len_a: la,
            len_b: b.len(),
            complexity: mul_dependency_levels(a, b),
            digit_spans: None,
        },
    })
}

/// Read the answer back out of a sample's supervised region.
pub fn decode_supervised(sample: &Sample) -> Result<Digits> {
    let mut le = Vec::new();
    for i in sample.supervised() {
        match sample.target[i] {
            d if Vocab::is_digit(d) => le.push(d as u8),
            Vocab::PAD => le.push(0),
            other => {
                return Err(Error::VocabMismatch(format!(
                    "unexpected token {other} in supervised region"
                )))
            }
        }
    }
    le.reverse();
    Digits::from_le(le)
}

/// Uniform operand pair from the requested region.
pub fn sample_pair<R: Rng>(spec: &DomainSpec, region: Region, rng: &mut R) -> (Digits, Digits) {
    let multiplicand = |len: usize, rng: &mut R| Digits::random_uniform(len, rng);
    let multiplier = |spec: &DomainSpec, rng: &mut R| {
        if spec.op == OpKind::Mul {
            Digits::random_exact_len(spec.multiplier_len, rng)
        } else {
            unreachable!()
        }
    };
    match (spec.op, region) {
        (OpKind::Add, Region::Seen) => (
            multiplicand(spec.ls, rng),
            multiplicand(spec.ls, rng),
        ),
        (OpKind::Add, Region::All) => (multiplicand(spec.l, rng), multiplicand(spec.l, rng)),
        (OpKind::Add, Region::Unseen) => loop {
            let a = multiplicand(spec.l, rng);
            let b = multiplicand(spec.l, rng);
            if a.len() > spec.ls || b.len() > spec.ls {
                return (a, b);
            }
        },
        (OpKind::Mul, Region::Seen) => (multiplier(spec, rng), multiplicand(spec.ls, rng)),
        (OpKind::Mul, Region::All) => (multiplier(spec, rng), multiplicand(spec.l, rng)),
        (OpKind::Mul, Region::Unseen) => loop {
            let b = multiplicand(spec.l, rng);
            if b.len() > spec.ls {
                return (multiplier(spec, rng), b);
            }
        },
    }
}

/// Largest cascade length achievable within the seen region.
pub fn max_achievable_cascade(spec: &DomainSpec) -> usize {
    // Trigger at position 0 plus 9-sums through the remaining positions.
    spec.ls
}

/// Rejection-sample a seen-region pair with the exact target cascade
/// length. Only defined for addition.
pub fn sample_by_complexity<R: Rng>(
    spec: &DomainSpec,
    target_cascade: usize,
    rng: &mut R,
) -> Result<(Digits, Digits)> {
    if spec.op != OpKind::Add {
        return Err(Error::Unsupported(
            "complexity-targeted sampling is defined for addition".into(),
        ));
    }
    for _ in 0..REJECTION_BUDGET {
        let (a, b) = sample_pair(spec, Region::Seen, rng);
        if cascade_complexity(&a, &b).cascade_length == target_cascade {
            return Ok((a, b));
        }
    }
    Err(Error::RejectionBudget {
        budget: REJECTION_BUDGET,
        target: target_cascade,
    })
}

/// Shift both operands by `10^shift` (zero-append at the little end).
pub fn augment_zero_shift(
    pair: (&Digits, &Digits),
    shift: usize,
    l: usize,
) -> Result<(Digits, Digits)> {
    let (a, b) = pair;
    let sa = a.shifted(shift);
    let sb = b.shifted(shift);
    for x in [&sa, &sb] {
        if x.len() > l {
            return Err(Error::OperandTooLong { len: x.len(), limit: l });
        }
    }
    Ok((sa, sb))
}

/// Parameters for text interleaving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextNoiseSpec {
    /// Maximum number of random text tokens inserted per gap.
    pub max_tokens: usize,
    /// Hard cap on the produced sequence length.
    pub max_seq_len: usize,
}

impl Default for TextNoiseSpec {
    fn default() -> Self {
        TextNoiseSpec {
            max_tokens: 20,
            max_seq_len: 256,
        }
    }
}

/// Insert random text tokens before, between, and after the two integers.
///
/// The answer stays attached to the output positions ending at the second
/// integer; the operand digit spans are recorded in `meta` so
/// significance-indexed positional encodings can locate the digits.
pub fn interleave_text<R: Rng>(
    sample: &Sample,
    vocab: &Vocab,
    noise: &TextNoiseSpec,
    rng: &mut R,
) -> Result<Sample> {
    if vocab.text_tokens == 0 {
        return Err(Error::VocabMismatch("vocabulary has no TEXT tokens".into()));
    }
    let meta = &sample.meta;
    let block1_len = match meta.op {
        OpKind::Add => meta.l,
        OpKind::Mul => meta.len_a,
    };
    let block2_len = meta.l;
    let answer_len = sample.mask.iter().filter(|&&m| m).count();

    let gaps: [usize; 3] = [
        rng.gen_range(0..=noise.max_tokens),
        rng.gen_range(0..=noise.max_tokens),
        rng.gen_range(0..=noise.max_tokens),
    ];
    let new_len = sample.input.len() + gaps.iter().sum::<usize>();
    if new_len > noise.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: new_len,
            max: noise.max_seq_len,
        });
    }
    // The answer region reaches `answer_len` positions back from the end
    // of the second integer; inserted prefix text must keep it in bounds.
    let block2_end = gaps[0] + block1_len + 1 + gaps[1] + block2_len;
    if block2_end < answer_len {
        return Err(Error::SequenceTooLong {
            len: answer_len,
            max: block2_end,
        });
    }

    let text = |rng: &mut R| vocab.text(rng.gen_range(0..vocab.text_tokens));
    let mut input = Vec::with_capacity(new_len);
    for _ in 0..gaps[0] {
        input.push(text(rng));
    }
    input.extend_from_slice(&sample.input[..block1_len + 1]);
    for _ in 0..gaps[1] {
        input.push(text(rng));
    }
    input.extend_from_slice(&sample.input[block1_len + 1..]);
    for _ in 0..gaps[2] {
        input.push(text(rng));
    }

    let mut target = vec![Vocab::IGNORE; new_len];
    let mut mask = vec![false; new_len];
    let answer_start = block2_end - answer_len;
    for (k, i) in sample.supervised().enumerate() {
        target[answer_start + k] = sample.target[i];
        mask[answer_start + k] = true;
    }

    let digit_span = |block_start: usize, block_len: usize, op_len: usize| {
        // Digits sit right-aligned in the operand block behind the pads.
        (block_start + (block_len - op_len), op_len)
    };
    let span1 = digit_span(gaps[0], block1_len, meta.len_a);
    let span2 = digit_span(
        gaps[0] + block1_len + 1 + gaps[1],
        block2_len,
        meta.len_b,
    );

    let mut meta = meta.clone();
    meta.digit_spans = Some((span1, span2));
    Ok(Sample {
        input,
        target,
        mask,
        meta,
    })
}

/// Lazily yield encoded samples from the requested distribution.
///
/// Overflowing sums (possible only near the format bound) are rejected
/// and redrawn. The mixture sampler flips a `p` coin per sample between
/// the complexity-uniform and uniform distributions.
pub fn dataset_stream<'a, R: Rng>(
    spec: &'a DomainSpec,
    sampler: &'a SamplerSpec,
    count: usize,
    rng: &'a mut R,
) -> impl Iterator<Item = Result<Sample>> + 'a {
    let max_cascade = max_achievable_cascade(spec);
    let mut produced = 0usize;
    std::iter::from_fn(move || {
        if produced >= count {
            return None;
        }
        produced += 1;
        Some(draw_sample(spec, sampler, max_cascade, rng))
    })
}

fn draw_sample<R: Rng>(
    spec: &DomainSpec,
    sampler: &SamplerSpec,
    max_cascade: usize,
    rng: &mut R,
) -> Result<Sample> {
    loop {
        let complexity_uniform = match sampler.kind {
            SamplerKind::Uniform => false,
            SamplerKind::ComplexityUniform => true,
            SamplerKind::Mixture { p } => rng.gen_bool(p),
        };
        let (a, b) = if complexity_uniform {
            let target = rng.gen_range(0..=max_cascade);
            match sample_by_complexity(spec, target, rng) {
                Ok(pair) => pair,
                // The largest classes can be unreachable for tiny ls.
                Err(Error::RejectionBudget { .. }) if target == max_cascade => continue,
                Err(e) => return Err(e),
            }
        } else {
            sample_pair(spec, Region::Seen, rng)
        };
        let encoded = match spec.op {
            OpKind::Add => encode_add(&a, &b, spec.l),
            OpKind::Mul => encode_mul(&a, &b, spec.l),
        };
        match encoded {
            Ok(s) => return Ok(s),
            Err(Error::SumOverflow { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
}
