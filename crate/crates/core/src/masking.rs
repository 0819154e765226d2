//! Chunk-aware attention masks with first-layer minimum look-ahead, and
//! receptive-field analysis by boolean composition of the per-layer masks.
//!
//! Token `q` sits in chunk `k = q / C`, which spans `[kC, min(kC + C, n))`.
//! It may attend to key `j` when
//!
//! * `j` is in the same chunk, or
//! * `j` is in the past window: `[kC - P, kC)` with the default
//!   [`PastAnchor::ChunkStart`], `[q - P, kC)` with [`PastAnchor::Token`], or
//! * the layer is the first one and `j` lies in `[kC + C, kC + C + M)`,
//!   truncated at the end of the sequence.
//!
//! Frames inherit the rights of the token they were upsampled from.

use std::fmt::Write as _;

use crate::config::{PastAnchor, StreamingConfig};
use crate::error::{Error, Result};
use crate::numerics::kernels::BoolMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Token,
    /// Frames, with this many frames per token.
    Frame(usize),
}

/// Attend/not-attend matrix for one layer (rows are queries).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    /// 1-based layer index.
    pub layer_index: usize,
    pub granularity: Granularity,
    pub allowed: BoolMatrix,
}

impl LayerMask {
    pub fn size(&self) -> usize {
        self.allowed.rows()
    }
}

/// Whether the attention context is chunked or unrestricted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    #[default]
    Chunked,
    Full,
}

/// Half-open range of key tokens token `q` may attend to at `layer`.
/// The allowed set is always contiguous.
pub fn token_key_range(
    cfg: &StreamingConfig,
    layer: usize,
    n_tokens: usize,
    q: usize,
) -> std::ops::Range<usize> {
    let c = cfg.chunk_size;
    let start = (q / c) * c;
    let end = (start + c).min(n_tokens);
    let lo = match cfg.past_anchor {
        PastAnchor::ChunkStart => start.saturating_sub(cfg.past_context),
        PastAnchor::Token => q.saturating_sub(cfg.past_context).min(start),
    };
    let hi = if layer == 1 { (start + c + cfg.min_lookahead).min(n_tokens).max(end) } else { end };
    lo..hi
}

pub fn token_allows(cfg: &StreamingConfig, layer: usize, n_tokens: usize, q: usize, j: usize) -> bool {
    token_key_range(cfg, layer, n_tokens, q).contains(&j)
}

fn check_layer(cfg: &StreamingConfig, layer: usize) -> Result<()> {
    if layer == 0 || layer > cfg.n_layers {
        return Err(Error::Config(format!("layer index {layer} outside 1..={}", cfg.n_layers)));
    }
    Ok(())
}

pub fn build_token_mask(n_tokens: usize, cfg: &StreamingConfig, layer_index: usize) -> Result<LayerMask> {
    check_layer(cfg, layer_index)?;
    if cfg.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be at least 1".into()));
    }
    if n_tokens == 0 {
        return Err(Error::Input("mask over zero tokens".into()));
    }
    let allowed =
        BoolMatrix::from_fn(n_tokens, n_tokens, |q, j| token_allows(cfg, layer_index, n_tokens, q, j));
    Ok(LayerMask { layer_index, granularity: Granularity::Token, allowed })
}

pub fn build_full_mask(n_tokens: usize, layer_index: usize) -> LayerMask {
    LayerMask {
        layer_index,
        granularity: Granularity::Token,
        allowed: BoolMatrix::new(n_tokens, n_tokens, true),
    }
}

/// Frame `(q, j)` is allowed iff token `(q / U, j / U)` is.
pub fn expand_to_frames(token_mask: &LayerMask, upsample: usize) -> Result<LayerMask> {
    if upsample == 0 {
        return Err(Error::Config("upsample must be at least 1".into()));
    }
    if token_mask.granularity != Granularity::Token {
        return Err(Error::Input("mask is already frame-level".into()));
    }
    let n = token_mask.size() * upsample;
    let src = &token_mask.allowed;
    let allowed = BoolMatrix::from_fn(n, n, |q, j| src.get(q / upsample, j / upsample));
    Ok(LayerMask {
        layer_index: token_mask.layer_index,
        granularity: Granularity::Frame(upsample),
        allowed,
    })
}

/// Frame-level masks for every layer of `cfg`.
pub fn layer_masks(cfg: &StreamingConfig, n_tokens: usize, mode: ContextMode) -> Result<Vec<LayerMask>> {
    let mut out: Vec<LayerMask> = Vec::with_capacity(cfg.n_layers);
    for layer in 1..=cfg.n_layers {
        if layer > 2 {
            // Layers two and up share one mask.
            let mut m: LayerMask = out[1].clone();
            m.layer_index = layer;
            out.push(m);
            continue;
        }
        let tm = match mode {
            ContextMode::Chunked => build_token_mask(n_tokens, cfg, layer)?,
            ContextMode::Full => build_full_mask(n_tokens, layer),
        };
        out.push(expand_to_frames(&tm, cfg.upsample)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LookaheadMode {
    ChunkAware,
    /// Sliding window: each layer sees `P` tokens back and `window` ahead.
    Regular { window: usize },
}

/// Per-token reach of the composed masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveFieldReport {
    pub mode: LookaheadMode,
    pub n_tokens: usize,
    /// Future tokens each output depends on after all layers.
    pub lookahead: Vec<usize>,
    /// Past tokens each output depends on after all layers.
    pub past_reach: Vec<usize>,
    /// `per_layer_lookahead[l][q]`: look-ahead after composing layers `1..=l+1`.
    pub per_layer_lookahead: Vec<Vec<usize>>,
    pub per_layer_past: Vec<Vec<usize>>,
    /// `constant_future[l]`: layer `l+1` leaves every token's look-ahead as
    /// it was after the first layer.
    pub constant_future: Vec<bool>,
}

impl ReceptiveFieldReport {
    pub fn max_lookahead(&self) -> usize {
        self.lookahead.iter().copied().max().unwrap_or(0)
    }
}

fn regular_mask(n: usize, past: usize, window: usize) -> BoolMatrix {
    BoolMatrix::from_fn(n, n, |q, j| j + past >= q && j <= q + window)
}

/// Composes the layer masks (`reach = M_L o ... o M_1`) and reports how far
/// each output reaches into the future and the past.
pub fn effective_lookahead(
    cfg: &StreamingConfig,
    n_tokens: usize,
    mode: LookaheadMode,
) -> Result<ReceptiveFieldReport> {
    if n_tokens < cfg.chunk_size || n_tokens == 0 {
        return Err(Error::Input(format!(
            "receptive-field analysis needs at least C = {} tokens",
            cfg.chunk_size
        )));
    }
    let mut reach = BoolMatrix::from_fn(n_tokens, n_tokens, |i, j| i == j);
    let mut per_layer_lookahead = Vec::new();
    let mut per_layer_past = Vec::new();
    for layer in 1..=cfg.n_layers {
        let mask = match mode {
            LookaheadMode::ChunkAware => build_token_mask(n_tokens, cfg, layer)?.allowed,
            LookaheadMode::Regular { window } => regular_mask(n_tokens, cfg.past_context, window),
        };
        reach = mask.compose(&reach)?;
        let mut fut = Vec::with_capacity(n_tokens);
        let mut past = Vec::with_capacity(n_tokens);
        for q in 0..n_tokens {
            let row = reach.row(q);
            let hi = row.iter().rposition(|&b| b).unwrap_or(q);
            let lo = row.iter().position(|&b| b).unwrap_or(q);
            fut.push(hi.saturating_sub(q));
            past.push(q.saturating_sub(lo));
        }
        per_layer_lookahead.push(fut);
        per_layer_past.push(past);
    }
    let constant_future = per_layer_lookahead.iter().map(|l| *l == per_layer_lookahead[0]).collect();
    Ok(ReceptiveFieldReport {
        mode,
        n_tokens,
        lookahead: per_layer_lookahead.last().cloned().unwrap_or_default(),
        past_reach: per_layer_past.last().cloned().unwrap_or_default(),
        per_layer_lookahead,
        per_layer_past,
        constant_future,
    })
}

/// Look-ahead expected for token `q` under chunk-aware masking with
/// first-layer MLA: the rest of its chunk plus `M`, cut at sequence end.
pub fn expected_chunk_lookahead(cfg: &StreamingConfig, n_tokens: usize, q: usize) -> usize {
    let c = cfg.chunk_size;
    let ideal = c - 1 - q % c + cfg.min_lookahead;
    ideal.min(n_tokens - 1 - q)
}

/// Plain-text grid of a mask: one row per query, `x` = allowed, `.` = not.
pub fn render_grid(mask: &LayerMask, chunk_size: Option<usize>) -> String {
    let n = mask.size();
    let mut s = String::new();
    let _ = writeln!(s, "layer {} ({} x {})", mask.layer_index, n, n);
    s.push_str("     ");
    for j in 0..n {
        s.push(char::from_digit((j % 10) as u32, 10).unwrap());
        if chunk_size.is_some_and(|c| (j + 1) % c == 0 && j + 1 < n) {
            s.push(' ');
        }
    }
    s.push('\n');
    for q in 0..n {
        let _ = write!(s, "{q:>4} ");
        for j in 0..n {
            s.push(if mask.allowed.get(q, j) { 'x' } else { '.' });
            if chunk_size.is_some_and(|c| (j + 1) % c == 0 && j + 1 < n) {
                s.push(' ');
            }
        }
        s.push('\n');
    }
    s
}

/// Tab-separated receptive-field table, one row per (mode, layer, token).
/// `mode` is `chunk` or `regular-w<window>`.
///
/// ```text
/// # receptive-field v1
/// mode  layer  token  chunk  offset  lookahead  past_reach
/// ```
pub fn receptive_field_table(reports: &[&ReceptiveFieldReport], chunk_size: usize) -> String {
    let mut s = String::from("# receptive-field v1\nmode\tlayer\ttoken\tchunk\toffset\tlookahead\tpast_reach\n");
    for report in reports {
        let mode = match report.mode {
            LookaheadMode::ChunkAware => "chunk".to_string(),
            LookaheadMode::Regular { window } => format!("regular-w{window}"),
        };
        for (l, (fut, past)) in report.per_layer_lookahead.iter().zip(&report.per_layer_past).enumerate() {
            for q in 0..report.n_tokens {
                let _ = writeln!(
                    s,
                    "{mode}\t{}\t{}\t{}\t{}\t{}\t{}",
                    l + 1,
                    q,
                    q / chunk_size,
                    q % chunk_size,
                    fut[q],
                    past[q]
                );
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, p: usize, m: usize, l: usize) -> StreamingConfig {
        StreamingConfig {
            chunk_size: c,
            past_context: p,
            min_lookahead: m,
            n_layers: l,
            intermediate_layers: vec![],
            ..Default::default()
        }
    }

    fn attended(mask: &LayerMask, q: usize) -> Vec<usize> {
        (0..mask.size()).filter(|&j| mask.allowed.get(q, j)).collect()
    }

    #[test]
    fn past_context_and_chunk() {
        let m = build_token_mask(12, &cfg(3, 3, 0, 2), 1).unwrap();
        assert_eq!(attended(&m, 4), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn mla_on_first_layer_only() {
        let c = cfg(3, 3, 1, 2);
        let l1 = build_token_mask(12, &c, 1).unwrap();
        assert_eq!(attended(&l1, 5), vec![0, 1, 2, 3, 4, 5, 6]);
        let l2 = build_token_mask(12, &c, 2).unwrap();
        assert_eq!(attended(&l2, 5), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn single_token() {
        let m = build_token_mask(1, &cfg(3, 3, 2, 2), 1).unwrap();
        assert_eq!(m.allowed, BoolMatrix::new(1, 1, true));
    }

    #[test]
    fn bad_layer_index() {
        assert!(matches!(build_token_mask(4, &cfg(2, 0, 0, 2), 0), Err(Error::Config(_))));
        assert!(matches!(build_token_mask(4, &cfg(2, 0, 0, 2), 3), Err(Error::Config(_))));
    }

    #[test]
    fn token_anchor_counts_back_from_each_token() {
        let mut c = cfg(3, 2, 0, 1);
        c.past_anchor = PastAnchor::Token;
        let m = build_token_mask(9, &c, 1).unwrap();
        assert_eq!(attended(&m, 3), vec![1, 2, 3, 4, 5]);
        assert_eq!(attended(&m, 5), vec![3, 4, 5]);
    }

    #[test]
    fn expansion_examples() {
        let tm = build_token_mask(5, &cfg(2, 1, 1, 2), 1).unwrap();
        let same = expand_to_frames(&tm, 1).unwrap();
        assert_eq!(same.allowed, tm.allowed);

        let lower = LayerMask {
            layer_index: 1,
            granularity: Granularity::Token,
            allowed: BoolMatrix::from_fn(2, 2, |q, j| j <= q),
        };
        let f = expand_to_frames(&lower, 2).unwrap();
        let expected = BoolMatrix::from_fn(4, 4, |q, j| j / 2 <= q / 2);
        assert_eq!(f.allowed, expected);

        let c = cfg(2, 0, 0, 1);
        let f = expand_to_frames(&build_token_mask(4, &c, 1).unwrap(), 2).unwrap();
        for q in 0..4 {
            assert_eq!(attended(&f, q), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn lookahead_examples() {
        let r = effective_lookahead(&cfg(3, 3, 0, 4), 30, LookaheadMode::ChunkAware).unwrap();
        assert_eq!(&r.lookahead[3..6], &[2, 1, 0]);
        let r = effective_lookahead(&cfg(5, 10, 1, 4), 30, LookaheadMode::ChunkAware).unwrap();
        assert_eq!(&r.lookahead[5..10], &[5, 4, 3, 2, 1]);
        assert!(r.constant_future.iter().all(|&b| b));
        let r = effective_lookahead(&cfg(1, 2, 0, 8), 40, LookaheadMode::Regular { window: 1 }).unwrap();
        assert!(r.lookahead[..32].iter().all(|&a| a == 8));
    }

    #[test]
    fn expected_lookahead_truncates_at_end() {
        let c = cfg(3, 0, 2, 2);
        let r = effective_lookahead(&c, 10, LookaheadMode::ChunkAware).unwrap();
        for q in 0..10 {
            assert_eq!(r.lookahead[q], expected_chunk_lookahead(&c, 10, q), "token {q}");
        }
    }

    #[test]
    fn grid_rendering_marks_mla_column() {
        let c = cfg(3, 3, 1, 2);
        let g = render_grid(&build_token_mask(6, &c, 1).unwrap(), Some(3));
        let row2 = g.lines().nth(4).unwrap();
        assert_eq!(row2, "   2 xxx x..");
    }

    #[test]
    fn full_masks_allow_everything() {
        let ms = layer_masks(&cfg(2, 0, 0, 3), 3, ContextMode::Full).unwrap();
        assert_eq!(ms.len(), 3);
        assert!(ms.iter().all(|m| m.allowed.count_true() == 24 * 24));
    }
}
