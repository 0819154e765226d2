//! Symbol and sentence error rates under three scoring views, and a
//! per-chunk-offset error profile.
//!
//! One "character" is one output vocabulary symbol, phoneme or prosodic
//! mark. CER may exceed 100 when hypotheses insert many symbols.

use std::fmt::Write as _;

use crate::corpus::Labeled;
use crate::ctc::LabelVocab;
use crate::error::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { reference: usize, hypothesis: usize },
    Substitute { reference: usize, hypothesis: usize },
    /// Reference symbol missing from the hypothesis.
    Delete { reference: usize },
    /// Extra hypothesis symbol, placed before reference position `before`.
    Insert { hypothesis: usize, before: usize },
}

/// Minimal edit script turning `reference` into `hypothesis`. Ties prefer
/// the diagonal, then deletion, then insertion.
pub fn edit_script<S: PartialEq>(hypothesis: &[S], reference: &[S]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                ops.push(if same {
                    EditOp::Match { reference: i - 1, hypothesis: j - 1 }
                } else {
                    EditOp::Substitute { reference: i - 1, hypothesis: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(EditOp::Delete { reference: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { hypothesis: j - 1, before: i });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// Phonemes and all prosodic marks as emitted.
    Pnp,
    /// Intonation boundaries `#` scored as accent boundaries `/`.
    NormPnp,
    /// Prosodic marks removed.
    Phoneme,
}

impl View {
    pub const ALL: [View; 3] = [View::Pnp, View::NormPnp, View::Phoneme];

    pub fn name(self) -> &'static str {
        match self {
            View::Pnp => "pnp",
            View::NormPnp => "norm_pnp",
            View::Phoneme => "phoneme",
        }
    }

    pub fn apply(self, vocab: &LabelVocab, seq: &[usize]) -> Vec<usize> {
        match self {
            View::Pnp => seq.to_vec(),
            View::NormPnp => seq.iter().map(|&s| if s == vocab.ip() { vocab.ap() } else { s }).collect(),
            View::Phoneme => seq.iter().copied().filter(|&s| !vocab.is_prosodic(s)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewScore {
    pub cer: f64,
    pub ser: f64,
    pub errors: usize,
    pub reference_symbols: usize,
    pub sentences: usize,
    pub wrong_sentences: usize,
}

/// CER = total distance / total reference length x 100 (the denominator is
/// clamped at 1 for an all-empty reference); SER = % sentences with any
/// error.
pub fn score(vocab: &LabelVocab, hyps: &[Vec<usize>], refs: &[Vec<usize>], view: View) -> Result<ViewScore> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let (mut errors, mut len, mut wrong) = (0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (view.apply(vocab, h), view.apply(vocab, r));
        let d = edit_distance(&h, &r);
        errors += d;
        len += r.len();
        wrong += usize::from(d > 0);
    }
    let n = hyps.len();
    Ok(ViewScore {
        cer: 100.0 * errors as f64 / len.max(1) as f64,
        ser: if n == 0 { 0.0 } else { 100.0 * wrong as f64 / n as f64 },
        errors,
        reference_symbols: len,
        sentences: n,
        wrong_sentences: wrong,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OffsetStat {
    pub tokens: usize,
    pub wrong_tokens: usize,
}

impl OffsetStat {
    pub fn rate(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.wrong_tokens as f64 / self.tokens as f64
        }
    }
}

/// Token error rates keyed by position within a chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryProfile {
    pub chunk_size: usize,
    pub ambiguous_only: bool,
    pub offsets: Vec<OffsetStat>,
}

impl BoundaryProfile {
    pub fn rates(&self) -> Vec<f64> {
        self.offsets.iter().map(OffsetStat::rate).collect()
    }

    pub fn final_offset_rate(&self) -> f64 {
        self.offsets.last().map(OffsetStat::rate).unwrap_or(0.0)
    }
}

/// Which reference tokens an edit script touches. An insertion belongs to
/// the token owning the preceding reference symbol (the first token when
/// nothing precedes it).
pub fn token_errors(hyp: &[usize], reference: &Labeled) -> Vec<bool> {
    let n = reference.spans.len();
    let mut owner = vec![0usize; reference.labels.len()];
    for (t, s) in reference.spans.iter().enumerate() {
        owner[s.clone()].iter_mut().for_each(|o| *o = t);
    }
    let mut wrong = vec![false; n];
    if n == 0 {
        return wrong;
    }
    for op in edit_script(hyp, &reference.labels) {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Substitute { reference: r, .. } | EditOp::Delete { reference: r } => wrong[owner[r]] = true,
            EditOp::Insert { before, .. } => wrong[if before == 0 { 0 } else { owner[before - 1] }] = true,
        }
    }
    wrong
}

pub fn boundary_error_profile(
    hyps: &[Vec<usize>],
    refs: &[Labeled],
    chunk_size: usize,
    ambiguous_only: bool,
) -> Result<BoundaryProfile> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if chunk_size == 0 {
        return Err(Error::Config("chunk_size must be at least 1".into()));
    }
    let mut offsets = vec![OffsetStat::default(); chunk_size];
    for (h, r) in hyps.iter().zip(refs) {
        for (t, wrong) in token_errors(h, r).into_iter().enumerate() {
            if ambiguous_only && !r.ambiguous[t] {
                continue;
            }
            let o = &mut offsets[t % chunk_size];
            o.tokens += 1;
            o.wrong_tokens += usize::from(wrong);
        }
    }
    Ok(BoundaryProfile { chunk_size, ambiguous_only, offsets })
}

pub const REPORT_MAGIC: &str = "# streampnp-eval v1";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cer_pnp: f64,
    pub ser_pnp: f64,
    pub cer_norm_pnp: f64,
    pub ser_norm_pnp: f64,
    pub cer_phoneme: f64,
    pub ser_phoneme: f64,
    pub sentences: usize,
    pub profile: Option<BoundaryProfile>,
}

pub fn evaluate(vocab: &LabelVocab, hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<EvalReport> {
    let p = score(vocab, hyps, refs, View::Pnp)?;
    let n = score(vocab, hyps, refs, View::NormPnp)?;
    let ph = score(vocab, hyps, refs, View::Phoneme)?;
    Ok(EvalReport {
        cer_pnp: p.cer,
        ser_pnp: p.ser,
        cer_norm_pnp: n.cer,
        ser_norm_pnp: n.ser,
        cer_phoneme: ph.cer,
        ser_phoneme: ph.ser,
        sentences: p.sentences,
        profile: None,
    })
}

impl EvalReport {
    pub fn is_perfect(&self) -> bool {
        [self.cer_pnp, self.ser_pnp, self.cer_norm_pnp, self.ser_norm_pnp, self.cer_phoneme, self.ser_phoneme]
            .iter()
            .all(|&v| v == 0.0)
    }

    /// Versioned `key=value` report.
    pub fn to_text(&self, config: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_MAGIC}");
        let _ = writeln!(s, "config={config}");
        let _ = writeln!(s, "sentences={}", self.sentences);
        for (view, cer, ser) in [
            ("pnp", self.cer_pnp, self.ser_pnp),
            ("norm_pnp", self.cer_norm_pnp, self.ser_norm_pnp),
            ("phoneme", self.cer_phoneme, self.ser_phoneme),
        ] {
            let _ = writeln!(s, "view={view} cer={cer:.4} ser={ser:.4}");
        }
        if let Some(p) = &self.profile {
            for (o, st) in p.offsets.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "offset={o} ambiguous_only={} tokens={} wrong={} rate={:.6}",
                    p.ambiguous_only,
                    st.tokens,
                    st.wrong_tokens,
                    st.rate()
                );
            }
        }
        s
    }

    pub const TABLE_HEADER: &'static str = "Config\tPnP\tNorm. PnP\tPhoneme";

    /// Tab-separated `CER (SER)` cells.
    pub fn table_row(&self, config: &str) -> String {
        format!(
            "{config}\t{:.2} ({:.1})\t{:.2} ({:.1})\t{:.2} ({:.1})",
            self.cer_pnp, self.ser_pnp, self.cer_norm_pnp, self.ser_norm_pnp, self.cer_phoneme, self.ser_phoneme
        )
    }
}
