//! Synthetic grapheme-to-phoneme-and-prosody task.
//!
//! A seeded rule table maps grapheme sentences to label sequences:
//!
//! * every grapheme has a base pronunciation of 1 to 3 phonemes;
//! * ambiguous graphemes have two pronunciations, picked by the XOR of the
//!   context-class bits of the next `radius` graphemes (missing ones count
//!   as 0), so they cannot be resolved without that much look-ahead;
//! * an accent-phrase boundary follows token `t` when `g[t]` is a boundary
//!   grapheme and neither of the two previous graphemes is, giving phrases
//!   of at least three tokens; clause graphemes mark it `#`, others `/`;
//! * a phrase-initial accent grapheme gets `*` after its `k`-th phoneme.
//!
//! Everything except the ambiguous choice depends on the current and past
//! tokens only.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::ctc::LabelVocab;
use crate::error::{Error, Result};
use crate::numerics::rng::{Purpose, Rng};

pub const PHONEMES: [&str; 24] = [
    "a", "i", "u", "e", "o", "k", "s", "t", "n", "h", "m", "y", "r", "w", "g", "z", "d", "b", "p", "N", "j",
    "f", "c", "v",
];

pub const DATASET_MAGIC: &str = "# streampnp-dataset v1";
pub const MIN_SENTENCE: usize = 4;
pub const MAX_SENTENCE: usize = 128;

/// Sizes of the rule table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleShape {
    pub n_graphemes: usize,
    pub radius: usize,
    pub n_ambiguous: usize,
    pub n_boundary: usize,
    pub n_clause: usize,
    pub n_accent: usize,
}

impl Default for RuleShape {
    fn default() -> Self {
        Self { n_graphemes: 40, radius: 1, n_ambiguous: 12, n_boundary: 10, n_clause: 3, n_accent: 20 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRules {
    pub seed: u64,
    pub radius: usize,
    pub graphemes: Vec<String>,
    pub vocab: LabelVocab,
    /// Label ids of each grapheme's base pronunciation.
    pub base: Vec<Vec<usize>>,
    /// Pronunciations for context parity 0 and 1, for ambiguous graphemes.
    pub alternatives: Vec<Option<[Vec<usize>; 2]>>,
    pub class_bit: Vec<bool>,
    pub boundary: Vec<bool>,
    pub clause: Vec<bool>,
    /// Accent position (1-based phoneme count) for accent graphemes.
    pub accent: Vec<Option<usize>>,
}

/// Oracle output with the label span of every token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labeled {
    pub labels: Vec<usize>,
    pub spans: Vec<std::ops::Range<usize>>,
    pub ambiguous: Vec<bool>,
}

fn draw_pronunciation(rng: &mut Rng, n_phonemes: usize) -> Vec<usize> {
    let len = rng.range_inclusive(1, 3);
    let mut out: Vec<usize> = Vec::with_capacity(len);
    while out.len() < len {
        let p = 1 + rng.below(n_phonemes);
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

fn pick(rng: &mut Rng, n: usize, k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut flags = vec![false; n];
    for &i in &idx[..k.min(n)] {
        flags[i] = true;
    }
    flags
}

fn hash_symbols<S: AsRef<str>>(symbols: &[S]) -> String {
    let mut h = Sha256::new();
    for s in symbols {
        h.update(s.as_ref().as_bytes());
        h.update(b"\n");
    }
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

impl SyntheticRules {
    pub fn new(seed: u64, radius: usize) -> Result<Self> {
        Self::with_shape(seed, &RuleShape { radius, ..RuleShape::default() })
    }

    pub fn with_shape(seed: u64, shape: &RuleShape) -> Result<Self> {
        let n = shape.n_graphemes;
        if n == 0 || shape.n_ambiguous > n || shape.n_boundary > n || shape.n_clause > shape.n_boundary || shape.n_accent > n {
            return Err(Error::Config(format!("inconsistent rule shape {shape:?}")));
        }
        let vocab = LabelVocab::new(&PHONEMES)?;
        let np = PHONEMES.len();
        let mut rng = Rng::new(seed, Purpose::Rules);
        let graphemes: Vec<String> = (0..n).map(|i| format!("g{i:02}")).collect();
        let base: Vec<Vec<usize>> = (0..n).map(|_| draw_pronunciation(&mut rng, np)).collect();
        let ambiguous = pick(&mut rng, n, shape.n_ambiguous);
        let alternatives = (0..n)
            .map(|g| {
                ambiguous[g].then(|| {
                    let mut other = draw_pronunciation(&mut rng, np);
                    while other == base[g] {
                        other = draw_pronunciation(&mut rng, np);
                    }
                    [base[g].clone(), other]
                })
            })
            .collect();
        let class_bit = pick(&mut rng, n, n / 2);
        let boundary = pick(&mut rng, n, shape.n_boundary);
        let boundary_ids: Vec<usize> = (0..n).filter(|&g| boundary[g]).collect();
        let clause_pick = pick(&mut rng, boundary_ids.len(), shape.n_clause);
        let mut clause = vec![false; n];
        for (i, &g) in boundary_ids.iter().enumerate() {
            clause[g] = clause_pick[i];
        }
        let accent_set = pick(&mut rng, n, shape.n_accent);
        let accent = (0..n).map(|g| accent_set[g].then(|| rng.range_inclusive(1, 3))).collect();
        Ok(Self { seed, radius: shape.radius, graphemes, vocab, base, alternatives, class_bit, boundary, clause, accent })
    }

    pub fn n_graphemes(&self) -> usize {
        self.graphemes.len()
    }

    pub fn is_ambiguous(&self, g: usize) -> bool {
        self.alternatives[g].is_some()
    }

    pub fn grapheme_hash(&self) -> String {
        hash_symbols(&self.graphemes)
    }

    pub fn label_hash(&self) -> String {
        hash_symbols(self.vocab.symbols())
    }

    /// Parity of the class bits of the `radius` graphemes after `t`.
    pub fn context_parity(&self, graphemes: &[usize], t: usize) -> usize {
        (t + 1..=t + self.radius)
            .filter_map(|j| graphemes.get(j))
            .fold(0, |acc, &g| acc ^ self.class_bit[g] as usize)
    }

    fn check(&self, graphemes: &[usize]) -> Result<()> {
        match graphemes.iter().find(|&&g| g >= self.n_graphemes()) {
            Some(g) => Err(Error::Input(format!("grapheme id {g} outside vocabulary of {}", self.n_graphemes()))),
            None => Ok(()),
        }
    }

    fn label_with(&self, graphemes: &[usize], pron: impl Fn(usize) -> Vec<usize>) -> Result<Labeled> {
        self.check(graphemes)?;
        let mut labels = Vec::new();
        let mut spans = Vec::with_capacity(graphemes.len());
        let mut phrase_start = true;
        for (t, &g) in graphemes.iter().enumerate() {
            let begin = labels.len();
            let phonemes = pron(t);
            let accent_after = if phrase_start { self.accent[g].map(|k| k.min(phonemes.len())) } else { None };
            for (i, &p) in phonemes.iter().enumerate() {
                labels.push(p);
                if accent_after == Some(i + 1) {
                    labels.push(self.vocab.accent());
                }
            }
            let boundary = self.boundary[g]
                && !(t >= 1 && self.boundary[graphemes[t - 1]])
                && !(t >= 2 && self.boundary[graphemes[t - 2]]);
            if boundary {
                labels.push(if self.clause[g] { self.vocab.ip() } else { self.vocab.ap() });
            }
            phrase_start = boundary;
            spans.push(begin..labels.len());
        }
        let ambiguous = graphemes.iter().map(|&g| self.is_ambiguous(g)).collect();
        Ok(Labeled { labels, spans, ambiguous })
    }

    /// Reference labels with per-token spans.
    pub fn label(&self, graphemes: &[usize]) -> Result<Labeled> {
        self.label_with(graphemes, |t| {
            let g = graphemes[t];
            match &self.alternatives[g] {
                Some(alts) => alts[self.context_parity(graphemes, t)].clone(),
                None => self.base[g].clone(),
            }
        })
    }

    /// Best predictor that sees tokens up to `t` only: for an ambiguous
    /// grapheme it picks the pronunciation whose parity is more likely
    /// under uniformly drawn continuations (ties go to parity 0).
    pub fn causal_label(&self, graphemes: &[usize]) -> Result<Labeled> {
        let parity = self.likely_parity();
        self.label_with(graphemes, |t| {
            let g = graphemes[t];
            match &self.alternatives[g] {
                Some(alts) => alts[parity].clone(),
                None => self.base[g].clone(),
            }
        })
    }

    /// Probability that the parity of `radius` uniform graphemes is 1.
    pub fn parity_one_probability(&self) -> f64 {
        let q = self.class_bit.iter().filter(|&&b| b).count() as f64 / self.n_graphemes() as f64;
        // P(odd number of ones among r draws) = (1 - (1 - 2q)^r) / 2.
        (1.0 - (1.0 - 2.0 * q).powi(self.radius as i32)) / 2.0
    }

    fn likely_parity(&self) -> usize {
        usize::from(self.parity_one_probability() > 0.5)
    }

    /// Expected error rate of [`Self::causal_label`] at ambiguous tokens
    /// that have a full right context.
    pub fn causal_ambiguity_error(&self) -> f64 {
        let p = self.parity_one_probability();
        p.min(1.0 - p)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|s| {
                self.graphemes
                    .iter()
                    .position(|g| g == s)
                    .or_else(|| s.parse::<usize>().ok().filter(|&i| i < self.n_graphemes()))
                    .ok_or_else(|| Error::Input(format!("unknown grapheme {s:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.graphemes[i].clone()).collect()
    }
}

/// Label sequence for `graphemes` under `rules`.
pub fn oracle_g2pnp(rules: &SyntheticRules, graphemes: &[usize]) -> Result<Vec<usize>> {
    Ok(rules.label(graphemes)?.labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub graphemes: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub rules_seed: u64,
    pub radius: usize,
    pub grapheme_hash: String,
    pub label_hash: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

/// Per-sentence seed for sentence `index` of `split`.
fn sentence_rng(data_seed: u64, split: Split, index: usize) -> Rng {
    Rng::new(data_seed, Purpose::Data).fork((split.stream() << 40) | index as u64)
}

pub fn generate(
    rules: &SyntheticRules,
    data_seed: u64,
    split: Split,
    n_sentences: usize,
    len_range: RangeInclusive<usize>,
) -> Result<DatasetFile> {
    let (lo, hi) = (*len_range.start(), *len_range.end());
    if lo < MIN_SENTENCE || hi > MAX_SENTENCE || lo > hi {
        return Err(Error::Input(format!(
            "sentence lengths {lo}..={hi} outside {MIN_SENTENCE}..={MAX_SENTENCE}"
        )));
    }
    let mut records = Vec::with_capacity(n_sentences);
    for i in 0..n_sentences {
        let mut rng = sentence_rng(data_seed, split, i);
        let len = rng.range_inclusive(lo, hi);
        let graphemes: Vec<usize> = (0..len).map(|_| rng.below(rules.n_graphemes())).collect();
        let labels = oracle_g2pnp(rules, &graphemes)?;
        records.push(Record { graphemes, labels });
    }
    Ok(DatasetFile { header: header_for(rules, split), records })
}

pub fn header_for(rules: &SyntheticRules, split: Split) -> DatasetHeader {
    DatasetHeader {
        rules_seed: rules.seed,
        radius: rules.radius,
        grapheme_hash: rules.grapheme_hash(),
        label_hash: rules.label_hash(),
        split,
    }
}

fn join(ids: &[usize]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{id}");
    }
    s
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("line {line}: bad id {t:?}"))))
        .collect()
}

impl DatasetFile {
    /// Header lines, then one `graphemes<TAB>labels` line per record with
    /// space-separated decimal ids.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let h = &self.header;
        writeln!(w, "{DATASET_MAGIC}")?;
        writeln!(w, "rules_seed={}", h.rules_seed)?;
        writeln!(w, "radius={}", h.radius)?;
        writeln!(w, "grapheme_hash={}", h.grapheme_hash)?;
        writeln!(w, "label_hash={}", h.label_hash)?;
        writeln!(w, "split={}", h.split.name())?;
        writeln!(w, "count={}", self.records.len())?;
        for r in &self.records {
            writeln!(w, "{}\t{}", join(&r.graphemes), join(&r.labels))?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(Error::Format(format!("missing {what}"))),
            }
        };
        let (_, magic) = next("header")?;
        if magic.trim_end() != DATASET_MAGIC {
            return Err(Error::Format(format!("not a dataset file (first line {magic:?})")));
        }
        let mut field = |key: &str| -> Result<String> {
            let (i, l) = next(key)?;
            l.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("line {i}: expected {key}=")))
        };
        let num = |s: String, key: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Format(format!("{key} is not a number: {s:?}")))
        };
        let rules_seed = num(field("rules_seed")?, "rules_seed")?;
        let radius = num(field("radius")?, "radius")? as usize;
        let grapheme_hash = field("grapheme_hash")?;
        let label_hash = field("label_hash")?;
        let split = Split::parse(&field("split")?)?;
        let count = num(field("count")?, "count")? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let (i, l) = next("record")?;
            let (g, lab) = l
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {i}: expected graphemes<TAB>labels")))?;
            records.push(Record { graphemes: parse_ids(g, i)?, labels: parse_ids(lab, i)? });
        }
        if let Ok((i, extra)) = next("end") {
            if !extra.trim().is_empty() {
                return Err(Error::Format(format!("line {i}: data after {count} records")));
            }
        }
        Ok(Self { header: DatasetHeader { rules_seed, radius, grapheme_hash, label_hash, split }, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Rules described by the header, after checking the vocabulary hashes.
    pub fn rules(&self) -> Result<SyntheticRules> {
        let rules = SyntheticRules::new(self.header.rules_seed, self.header.radius)?;
        if rules.grapheme_hash() != self.header.grapheme_hash || rules.label_hash() != self.header.label_hash {
            return Err(Error::Format("dataset vocabulary hashes do not match its rules".into()));
        }
        Ok(rules)
    }

    /// First `fraction` of the records (at least one if any exist).
    pub fn subset(&self, fraction: f64) -> Self {
        let n = ((self.records.len() as f64 * fraction).round() as usize).clamp(1.min(self.records.len()), self.records.len());
        Self { header: self.header.clone(), records: self.records[..n].to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rules() -> SyntheticRules {
        SyntheticRules::new(7, 1).unwrap()
    }

    #[test]
    fn empty_sentence() {
        assert!(oracle_g2pnp(&rules(), &[]).unwrap().is_empty());
    }

    #[test]
    fn single_plain_grapheme() {
        let r = rules();
        let g = (0..40).find(|&g| !r.is_ambiguous(g) && !r.boundary[g] && r.accent[g].is_none()).unwrap();
        assert_eq!(oracle_g2pnp(&r, &[g]).unwrap(), r.base[g]);
        let a = (0..40).find(|&g| !r.is_ambiguous(g) && !r.boundary[g] && r.accent[g].is_some()).unwrap();
        let k = r.accent[a].unwrap().min(r.base[a].len());
        let mut expected = r.base[a].clone();
        expected.insert(k, r.vocab.accent());
        assert_eq!(oracle_g2pnp(&r, &[a]).unwrap(), expected);
    }

    #[test]
    fn right_context_decides_ambiguous_graphemes() {
        let r = rules();
        let a = (0..40).find(|&g| r.is_ambiguous(g) && !r.boundary[g] && r.accent[g].is_none()).unwrap();
        let x = (0..40).find(|&g| !r.class_bit[g]).unwrap();
        let y = (0..40).find(|&g| r.class_bit[g]).unwrap();
        let lx = r.label(&[a, x]).unwrap();
        let ly = r.label(&[a, y]).unwrap();
        assert_ne!(lx.labels[lx.spans[0].clone()], ly.labels[ly.spans[0].clone()]);
    }

    #[test]
    fn boundaries_need_two_clear_tokens() {
        let r = rules();
        let b: Vec<usize> = (0..40).filter(|&g| r.boundary[g]).collect();
        let plain = (0..40).find(|&g| !r.boundary[g]).unwrap();
        let l = r.label(&[b[0], b[1], b[2], plain, plain, b[3]]).unwrap();
        let has_mark = |i: usize| {
            l.labels[l.spans[i].clone()].iter().any(|&s| s == r.vocab.ip() || s == r.vocab.ap())
        };
        assert_eq!((0..6).map(has_mark).collect::<Vec<_>>(), vec![true, false, false, false, false, true]);
    }

    #[test]
    fn generation_is_deterministic_and_checks_lengths() {
        let r = rules();
        let a = generate(&r, 3, Split::Train, 50, 4..=20).unwrap();
        assert_eq!(a, generate(&r, 3, Split::Train, 50, 4..=20).unwrap());
        assert_ne!(a.records, generate(&r, 3, Split::Valid, 50, 4..=20).unwrap().records);
        for rec in &a.records {
            assert_eq!(oracle_g2pnp(&r, &rec.graphemes).unwrap(), rec.labels);
            assert!((4..=20).contains(&rec.graphemes.len()));
        }
        assert!(generate(&r, 3, Split::Train, 1, 2..=20).is_err());
        assert!(generate(&r, 3, Split::Train, 1, 4..=200).is_err());
    }

    #[test]
    fn prefix_of_a_larger_set_is_the_smaller_set() {
        let r = rules();
        let small = generate(&r, 5, Split::Train, 10, 4..=12).unwrap();
        let big = generate(&r, 5, Split::Train, 40, 4..=12).unwrap();
        assert_eq!(small.records[..], big.records[..10]);
    }

    #[test]
    fn header_only_file() {
        let d = generate(&rules(), 1, Split::Test, 0, 4..=8).unwrap();
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert_eq!(DatasetFile::read(&buf[..]).unwrap(), d);
    }

    #[test]
    fn ambiguity_rate_is_substantial() {
        let r = rules();
        let d = generate(&r, 2, Split::Train, 400, 4..=32).unwrap();
        let (amb, all) = d.records.iter().flat_map(|x| &x.graphemes).fold((0, 0), |(a, n), &g| {
            (a + r.is_ambiguous(g) as usize, n + 1)
        });
        assert!(amb as f64 / all as f64 >= 0.15, "{amb}/{all}");
    }

    #[test]
    fn causal_predictor_errs_at_the_ambiguity_rate() {
        let r = rules();
        assert!((r.causal_ambiguity_error() - 0.5).abs() < 1e-12);
        let d = generate(&r, 4, Split::Valid, 1000, 4..=24).unwrap();
        let (mut wrong, mut total) = (0usize, 0usize);
        for rec in &d.records {
            let full = r.label(&rec.graphemes).unwrap();
            let causal = r.causal_label(&rec.graphemes).unwrap();
            for t in 0..rec.graphemes.len() - 1 {
                if full.ambiguous[t] {
                    total += 1;
                    wrong += (full.labels[full.spans[t].clone()] != causal.labels[causal.spans[t].clone()]) as usize;
                }
            }
        }
        let rate = wrong as f64 / total as f64;
        let p = r.causal_ambiguity_error();
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        assert!((rate - p).abs() < 4.0 * sigma, "rate {rate} vs {p}");
    }

    #[test]
    fn tokenizer_round_trip() {
        let r = rules();
        let ids = r.encode("g00 g39 7").unwrap();
        assert_eq!(ids, vec![0, 39, 7]);
        assert_eq!(r.decode(&ids), vec!["g00", "g39", "g07"]);
        assert!(r.encode("zz").is_err());
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(DatasetFile::read(&b"hello\n"[..]).is_err());
        let d = generate(&rules(), 1, Split::Test, 2, 4..=8).unwrap();
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("count=2", "count=3");
        assert!(DatasetFile::read(text.as_bytes()).is_err());
    }

    #[test]
    fn header_hashes_tie_files_to_rules() {
        let d = generate(&rules(), 1, Split::Test, 2, 4..=8).unwrap();
        assert_eq!(d.rules().unwrap(), rules());
        let mut bad = d.clone();
        bad.header.label_hash = "00".into();
        assert!(bad.rules().is_err());
    }

    proptest! {
        #[test]
        fn dataset_round_trips(seed in 0u64..1000, n in 0usize..20, lo in 4usize..10, extra in 0usize..20) {
            let r = SyntheticRules::new(seed % 5, 1 + (seed % 3) as usize).unwrap();
            let d = generate(&r, seed, Split::Train, n, lo..=lo + extra).unwrap();
            let mut buf = Vec::new();
            d.write(&mut buf).unwrap();
            prop_assert_eq!(DatasetFile::read(&buf[..]).unwrap(), d);
        }

        #[test]
        fn spans_tile_the_labels(seed in 0u64..50, g in proptest::collection::vec(0usize..40, 0..30)) {
            let r = SyntheticRules::new(seed, 1).unwrap();
            let l = r.label(&g).unwrap();
            let mut at = 0;
            for s in &l.spans {
                prop_assert_eq!(s.start, at);
                prop_assert!(s.end > s.start);
                at = s.end;
            }
            prop_assert_eq!(at, l.labels.len());
        }
    }
}
