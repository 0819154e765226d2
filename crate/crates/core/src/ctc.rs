//! Connectionist temporal classification: log-space forward-backward loss
//! with gradients, the combined final + intermediate objective, and greedy
//! decoding whose blank/repeat collapse carries across chunk boundaries.

use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::tensor::{Scalar, Tensor};

/// Log-space stand-in for log(0).
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// Symbol used for the blank in printed vocabularies.
pub const BLANK_SYMBOL: &str = "<b>";
pub const IP_BOUNDARY: &str = "#";
pub const AP_BOUNDARY: &str = "/";
pub const ACCENT_NUCLEUS: &str = "*";
pub const PROSODIC_SYMBOLS: [&str; 3] = [IP_BOUNDARY, AP_BOUNDARY, ACCENT_NUCLEUS];

/// Output vocabulary: blank at index 0, then phonemes, then `#`, `/`, `*`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocab {
    symbols: Vec<String>,
}

impl LabelVocab {
    pub fn new<S: AsRef<str>>(phonemes: &[S]) -> Result<Self> {
        let mut symbols = vec![BLANK_SYMBOL.to_string()];
        for p in phonemes {
            let p = p.as_ref();
            if p == BLANK_SYMBOL || PROSODIC_SYMBOLS.contains(&p) || symbols.iter().any(|s| s == p) {
                return Err(Error::Input(format!("phoneme symbol {p:?} is reserved or repeated")));
            }
            symbols.push(p.to_string());
        }
        symbols.extend(PROSODIC_SYMBOLS.iter().map(|s| s.to_string()));
        Ok(Self { symbols })
    }

    pub const BLANK: usize = 0;

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn ip(&self) -> usize {
        self.len() - 3
    }

    pub fn ap(&self) -> usize {
        self.len() - 2
    }

    pub fn accent(&self) -> usize {
        self.len() - 1
    }

    pub fn is_prosodic(&self, id: usize) -> bool {
        id >= self.len() - 3 && id < self.len()
    }

    pub fn phoneme_count(&self) -> usize {
        self.len() - 4
    }

    pub fn to_symbols(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.symbols[i].clone()).collect()
    }

    /// Targets must be non-blank in-vocabulary ids.
    pub fn validate_target(&self, target: &[usize]) -> Result<()> {
        for &t in target {
            if t == Self::BLANK || t >= self.len() {
                return Err(Error::Input(format!("target id {t} is blank or out of vocabulary")));
            }
        }
        Ok(())
    }
}

/// Fewest frames able to carry `target`: one per label plus a separating
/// blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn extend_target(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// Forward variables of the CTC recursion.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    /// Extended target: blanks interleaved with (and around) the labels.
    pub extended: Vec<usize>,
    /// `frames x extended.len()` log forward variables, row-major.
    pub log_alpha: Vec<f64>,
    pub frames: usize,
}

impl CtcLattice {
    pub fn alpha(&self, t: usize, s: usize) -> f64 {
        self.log_alpha[t * self.extended.len() + s]
    }

    /// `log P(target | inputs)`; [`LOG_ZERO`] when no alignment exists.
    pub fn log_likelihood(&self) -> f64 {
        let s = self.extended.len();
        if self.frames == 0 {
            return if s == 1 { 0.0 } else { LOG_ZERO };
        }
        let last = self.frames - 1;
        if s == 1 {
            self.alpha(last, 0)
        } else {
            lse2(self.alpha(last, s - 1), self.alpha(last, s - 2))
        }
    }
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward_raw(lp: &[f64], frames: usize, vocab: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![LOG_ZERO; frames * s_len];
    if frames == 0 {
        return alpha;
    }
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &lp[t * vocab..(t + 1) * vocab];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == LOG_ZERO { LOG_ZERO } else { acc + row[ext[s]] };
        }
    }
    alpha
}

/// Backward variables excluding the emission at `t`.
fn backward_raw(lp: &[f64], frames: usize, vocab: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut beta = vec![LOG_ZERO; frames * s_len];
    if frames == 0 {
        return beta;
    }
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = 0.0;
    }
    for t in (0..last).rev() {
        let next_lp = &lp[(t + 1) * vocab..(t + 2) * vocab];
        for s in 0..s_len {
            let nb = |s2: usize| beta[(t + 1) * s_len + s2] + next_lp[ext[s2]];
            let mut acc = nb(s);
            if s + 1 < s_len {
                acc = lse2(acc, nb(s + 1));
            }
            if s + 2 < s_len && can_skip(ext, s + 2, blank) {
                acc = lse2(acc, nb(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }
    beta
}

pub(crate) struct RawCtc {
    pub loss: f64,
    pub grad: Vec<f64>,
}

pub(crate) fn ctc_loss_raw(
    lp: &[f64],
    frames: usize,
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Result<RawCtc> {
    if lp.len() != frames * vocab {
        return Err(Error::Dimension(format!("{} log-probs for {frames}x{vocab}", lp.len())));
    }
    if let Some(&bad) = target.iter().find(|&&t| t == blank || t >= vocab) {
        return Err(Error::Input(format!("target id {bad} is blank or out of vocabulary")));
    }
    let mut grad = vec![0.0; frames * vocab];
    if frames < min_frames(target) {
        return Ok(RawCtc { loss: f64::INFINITY, grad });
    }
    let ext = extend_target(target, blank);
    let alpha = forward_raw(lp, frames, vocab, &ext, blank);
    let lattice = CtcLattice { extended: ext, log_alpha: alpha, frames };
    let ll = lattice.log_likelihood();
    if ll == LOG_ZERO {
        return Ok(RawCtc { loss: f64::INFINITY, grad });
    }
    let ext = &lattice.extended;
    let beta = backward_raw(lp, frames, vocab, ext, blank);
    let s_len = ext.len();
    for t in 0..frames {
        for s in 0..s_len {
            let a = lattice.log_alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == LOG_ZERO || b == LOG_ZERO {
                continue;
            }
            grad[t * vocab + ext[s]] -= (a + b - ll).exp();
        }
    }
    Ok(RawCtc { loss: -ll, grad })
}

/// CTC loss value with its gradient with respect to the log-probabilities.
#[derive(Clone, Debug)]
pub struct CtcLoss {
    /// `-log P(target)`, or `+inf` when the target cannot be aligned.
    pub loss: f64,
    pub grad: Tensor<f64>,
}

impl CtcLoss {
    pub fn is_feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

pub fn ctc_forward(log_probs: &Tensor<f64>, target: &[usize], blank: usize) -> Result<CtcLattice> {
    let (frames, vocab) = log_probs.dims2()?;
    let ext = extend_target(target, blank);
    let log_alpha = forward_raw(log_probs.data(), frames, vocab, &ext, blank);
    Ok(CtcLattice { extended: ext, log_alpha, frames })
}

/// Negative log-likelihood of `target` summed over all alignments.
pub fn ctc_loss(log_probs: &Tensor<f64>, target: &[usize], blank: usize) -> Result<CtcLoss> {
    let (frames, vocab) = log_probs.dims2()?;
    let raw = ctc_loss_raw(log_probs.data(), frames, vocab, target, blank)?;
    Ok(CtcLoss { loss: raw.loss, grad: Tensor::from_matrix(frames, vocab, raw.grad) })
}

/// `ctc_final + weight * sum(ctc_intermediate)`, computed from logits.
pub fn total_loss(outputs: &EncoderOutput<f64>, target: &[usize], weight: f64) -> Result<f64> {
    let final_lp = kernels::log_softmax(&outputs.logits)?;
    let mut loss = ctc_loss(&final_lp, target, LabelVocab::BLANK)?.loss;
    if weight != 0.0 {
        let mut inter = 0.0;
        for logits in outputs.intermediate.values() {
            let lp = kernels::log_softmax(logits)?;
            inter += ctc_loss(&lp, target, LabelVocab::BLANK)?.loss;
        }
        loss += weight * inter;
    }
    Ok(loss)
}

/// Carry-over between decoded chunks: the previous frame's argmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CollapseState {
    pub last: usize,
}

impl Default for CollapseState {
    fn default() -> Self {
        Self { last: LabelVocab::BLANK }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-frame argmax, collapse repeats, drop blanks. A repeat spanning the
/// chunk boundary is emitted once.
pub fn greedy_decode_chunk<T: Scalar>(
    log_probs: &Tensor<T>,
    state: CollapseState,
) -> (Vec<usize>, CollapseState) {
    let mut last = state.last;
    let mut out = Vec::new();
    for t in 0..log_probs.rows() {
        let k = argmax(log_probs.row(t));
        if k != last && k != LabelVocab::BLANK {
            out.push(k);
        }
        last = k;
    }
    (out, CollapseState { last })
}

pub fn greedy_decode<T: Scalar>(log_probs: &Tensor<T>) -> Vec<usize> {
    greedy_decode_chunk(log_probs, CollapseState::default()).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{Purpose, Rng};

    fn log_rows(rows: &[&[f64]]) -> Tensor<f64> {
        let t = Tensor::from_f64_rows(rows).unwrap();
        kernels::map(&t, f64::ln)
    }

    /// Sum over every frame-level path whose collapse equals the target.
    fn brute_force_ll(lp: &Tensor<f64>, target: &[usize]) -> f64 {
        let (frames, vocab) = lp.dims2().unwrap();
        let mut total = 0.0;
        let mut path = vec![0usize; frames];
        loop {
            let mut collapsed = Vec::new();
            let mut last = LabelVocab::BLANK;
            for &k in &path {
                if k != last && k != LabelVocab::BLANK {
                    collapsed.push(k);
                }
                last = k;
            }
            if collapsed == target {
                total += path.iter().enumerate().map(|(t, &k)| lp.get(t, k)).sum::<f64>().exp();
            }
            let mut i = 0;
            loop {
                if i == frames {
                    return total.ln();
                }
                path[i] += 1;
                if path[i] < vocab {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn random_log_probs(rng: &mut Rng, frames: usize, vocab: usize) -> Tensor<f64> {
        let logits = Tensor::from_matrix(frames, vocab, (0..frames * vocab).map(|_| rng.normal()).collect());
        kernels::log_softmax(&logits).unwrap()
    }

    #[test]
    fn single_certain_frame_costs_nothing() {
        let lp = log_rows(&[&[0.0, 1.0]]);
        let l = ctc_loss(&lp, &[1], 0).unwrap();
        assert_eq!(l.loss, 0.0);
    }

    #[test]
    fn two_uniform_frames() {
        let lp = log_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let l = ctc_loss(&lp, &[1], 0).unwrap();
        assert!((l.loss - (-(0.75f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_infinite_not_a_crash() {
        let lp = log_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let l = ctc_loss(&lp, &[1, 1], 0).unwrap();
        assert!(l.loss.is_infinite() && !l.is_feasible());
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(min_frames(&[1, 1]), 3);
        assert_eq!(min_frames(&[1, 2, 2, 2]), 6);
    }

    #[test]
    fn blank_in_target_is_rejected() {
        let lp = log_rows(&[&[0.5, 0.5]]);
        assert!(matches!(ctc_loss(&lp, &[0], 0), Err(Error::Input(_))));
        assert!(matches!(ctc_loss(&lp, &[2], 0), Err(Error::Input(_))));
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = Rng::new(11, Purpose::Test);
        for _ in 0..60 {
            let frames = rng.range_inclusive(1, 5);
            let vocab = rng.range_inclusive(2, 4);
            let len = rng.range_inclusive(0, 3);
            let target: Vec<usize> = (0..len).map(|_| 1 + rng.below(vocab - 1)).collect();
            let lp = random_log_probs(&mut rng, frames, vocab);
            let loss = ctc_loss(&lp, &target, 0).unwrap().loss;
            let bf = -brute_force_ll(&lp, &target);
            if bf.is_infinite() {
                assert!(loss.is_infinite());
            } else {
                assert!((loss - bf).abs() < 1e-9, "{loss} vs {bf}");
            }
        }
    }

    #[test]
    fn lattice_entries_are_log_probabilities() {
        let mut rng = Rng::new(2, Purpose::Test);
        let lp = random_log_probs(&mut rng, 6, 4);
        let lat = ctc_forward(&lp, &[1, 2, 2], 0).unwrap();
        assert!(lat.log_alpha.iter().all(|&a| a <= 0.0));
        assert!(lat.log_likelihood() <= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(3, Purpose::Test);
        for _ in 0..20 {
            let lp = random_log_probs(&mut rng, 6, 4);
            let target = vec![1, 3, 3];
            let l = ctc_loss(&lp, &target, 0).unwrap();
            let h = 1e-5;
            let mut num = vec![0.0; lp.len()];
            for e in 0..lp.len() {
                let mut p = lp.clone();
                p.data_mut()[e] += h;
                let mut m = lp.clone();
                m.data_mut()[e] -= h;
                num[e] = (ctc_loss(&p, &target, 0).unwrap().loss - ctc_loss(&m, &target, 0).unwrap().loss) / (2.0 * h);
            }
            let diff: f64 = num.iter().zip(l.grad.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff / norm < 1e-4);
        }
    }

    #[test]
    fn textbook_collapse() {
        let mut lp = Tensor::<f64>::zeros(5, 3);
        for (t, k) in [0, 1, 1, 0, 2].into_iter().enumerate() {
            lp.data_mut()[t * 3 + k] = 1.0;
        }
        assert_eq!(greedy_decode(&lp), vec![1, 2]);
    }

    fn one_hot(path: &[usize], vocab: usize) -> Tensor<f64> {
        let mut t = Tensor::<f64>::zeros(path.len(), vocab);
        for (i, &k) in path.iter().enumerate() {
            t.data_mut()[i * vocab + k] = 1.0;
        }
        t
    }

    #[test]
    fn repeat_across_chunk_boundary_is_emitted_once() {
        let (a, st) = greedy_decode_chunk(&one_hot(&[0, 1], 3), CollapseState::default());
        let (b, _) = greedy_decode_chunk(&one_hot(&[1, 2], 3), st);
        assert_eq!(a, vec![1]);
        assert_eq!(b, vec![2]);
    }

    #[test]
    fn blank_between_chunks_re_emits() {
        let (a, st) = greedy_decode_chunk(&one_hot(&[0, 1], 3), CollapseState::default());
        let (b, _) = greedy_decode_chunk(&one_hot(&[0, 1], 3), st);
        assert_eq!([a, b].concat(), greedy_decode(&one_hot(&[0, 1, 0, 1], 3)));
        assert_eq!(greedy_decode(&one_hot(&[0, 1, 0, 1], 3)), vec![1, 1]);
    }

    #[test]
    fn vocab_layout() {
        let v = LabelVocab::new(&["a", "i"]).unwrap();
        assert_eq!(v.symbols(), &["<b>", "a", "i", "#", "/", "*"]);
        assert!(v.is_prosodic(v.id("#").unwrap()));
        assert!(!v.is_prosodic(v.id("a").unwrap()));
        assert!(LabelVocab::new(&["#"]).is_err());
    }
}
