//! Incremental streaming inference.
//!
//! Tokens arrive one at a time. Chunk `k` (tokens `kC..kC+C`) is encoded as
//! soon as tokens up to `kC+C+M-1` have arrived, so the first chunk runs on
//! the `C+M`-th token. Each layer keeps the keys and values of the last `P`
//! tokens' frames and the last `k-1` inputs of its causal convolution.
//! Look-ahead tokens enter only layer one, through keys and values computed
//! from their embeddings; they are fully encoded later in their own chunk.
//!
//! Every kernel computes each output row from its own input row with a fixed
//! accumulation order, and masked attention weights are exact zeros, so the
//! streamed outputs equal an offline pass under [`layer_masks`] bit for bit.

use std::rc::Rc;
use std::time::{Duration, Instant};

use crate::ctc::{greedy_decode, greedy_decode_chunk, CollapseState};
use crate::encoder::{BlockInput, Model};
use crate::error::{Error, Result};
use crate::masking::{layer_masks, token_allows, ContextMode};
use crate::numerics::graph::Graph;
use crate::numerics::kernels::{self, BoolMatrix};
use crate::numerics::tensor::{Scalar, Tensor};

/// One emitted output symbol and the number of tokens that had arrived.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Emission {
    pub symbol: usize,
    pub arrived_tokens: usize,
}

struct LayerCache<T: Scalar> {
    keys: Tensor<T>,
    values: Tensor<T>,
    conv_history: Tensor<T>,
}

/// Per-stream state over a shared read-only model.
pub struct StreamState<'m, T: Scalar = f32> {
    model: &'m Model<T>,
    /// Tokens from the start of the next chunk onward.
    pending: Vec<usize>,
    arrived: usize,
    next_chunk: usize,
    /// First token whose frames are held in the key/value caches.
    cache_start: usize,
    layers: Vec<LayerCache<T>>,
    collapse: CollapseState,
    emitted: Vec<Emission>,
    closed: bool,
    chunk_compute: Vec<Duration>,
    first_chunk_at: Option<usize>,
    peak_frames: usize,
    record_hidden: bool,
    hidden: Vec<T>,
}

impl<'m, T: Scalar> StreamState<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        let cfg = model.cfg();
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerCache {
                keys: Tensor::zeros(0, d),
                values: Tensor::zeros(0, d),
                conv_history: Tensor::zeros(cfg.conv_kernel - 1, d),
            })
            .collect();
        Self {
            model,
            pending: Vec::new(),
            arrived: 0,
            next_chunk: 0,
            cache_start: 0,
            layers,
            collapse: CollapseState::default(),
            emitted: Vec::new(),
            closed: false,
            chunk_compute: Vec::new(),
            first_chunk_at: None,
            peak_frames: 0,
            record_hidden: false,
            hidden: Vec::new(),
        }
    }

    /// Keeps the final-layer states of every processed frame (for
    /// comparison against an offline pass).
    pub fn recording_hidden(mut self) -> Self {
        self.record_hidden = true;
        self
    }

    pub fn push_token(&mut self, token: usize) -> Result<Vec<usize>> {
        if self.closed {
            return Err(Error::State("push after close".into()));
        }
        if token >= self.model.encoder.n_graphemes {
            return Err(Error::Input(format!(
                "grapheme id {token} outside vocabulary of {}",
                self.model.encoder.n_graphemes
            )));
        }
        self.pending.push(token);
        self.arrived += 1;
        let cfg = self.model.cfg();
        let (c, m) = (cfg.chunk_size, cfg.min_lookahead);
        let mut out = Vec::new();
        while self.arrived >= self.next_chunk * c + c + m {
            out.extend(self.run_chunk(self.next_chunk * c + c)?);
        }
        Ok(out)
    }

    /// Flushes the remaining tokens as final chunks with look-ahead cut at
    /// the end of the stream.
    pub fn close(&mut self) -> Result<Vec<usize>> {
        if self.closed {
            return Err(Error::State("stream already closed".into()));
        }
        self.closed = true;
        let c = self.model.cfg().chunk_size;
        let mut out = Vec::new();
        while self.next_chunk * c < self.arrived {
            let end = (self.next_chunk * c + c).min(self.arrived);
            out.extend(self.run_chunk(end)?);
        }
        Ok(out)
    }

    fn run_chunk(&mut self, end: usize) -> Result<Vec<usize>> {
        let started = Instant::now();
        let model = self.model;
        let enc = &model.encoder;
        let cfg = enc.cfg.clone();
        let (c, u, d) = (cfg.chunk_size, cfg.upsample, cfg.d_model);
        let start = self.next_chunk * c;
        let la_end = (start + c + cfg.min_lookahead).min(self.arrived);
        if self.first_chunk_at.is_none() {
            self.first_chunk_at = Some(self.arrived);
        }

        let mut g = Graph::inference(&model.params);
        let local = &self.pending[..la_end - start];
        let mut x = enc.embed_frames(&mut g, local)?;
        let nq = (end - start) * u;
        let q_frames: Vec<usize> = (start * u..end * u).collect();
        let mut new_caches = Vec::with_capacity(cfg.n_layers);
        for (l, block) in enc.blocks.iter().enumerate() {
            let layer = l + 1;
            let x_tokens = if layer == 1 { la_end - start } else { end - start };
            let cache = &self.layers[l];
            let past = cache.keys.rows();
            let k_frames: Vec<usize> = (start * u - past..start * u + x_tokens * u).collect();
            self.peak_frames = self.peak_frames.max(k_frames.len());
            let mask = BoolMatrix::from_fn(nq, k_frames.len(), |i, j| {
                token_allows(&cfg, layer, la_end, q_frames[i] / u, k_frames[j] / u)
            });
            let rel_idx = Rc::new(enc.rel_offsets(&q_frames, &k_frames));
            let past_kv = if past > 0 {
                Some((g.constant(cache.keys.clone()), g.constant(cache.values.clone())))
            } else {
                None
            };
            let history = g.constant(cache.conv_history.clone());
            let out = enc.block(
                &mut g,
                block,
                BlockInput { x, n_query: nq, past_kv, mask: &mask, rel_idx, conv_history: history },
            )?;
            x = out.out;
            if cfg.is_intermediate(layer) {
                let logits = enc.head(&mut g, x)?;
                x = enc.self_condition(&mut g, layer, x, logits)?;
            }

            let keep_from = end.saturating_sub(cfg.past_context).max(self.cache_start);
            let drop = (keep_from - self.cache_start) * u;
            let chunk_k = kernels::slice_rows(g.value(out.keys), 0, nq)?;
            let chunk_v = kernels::slice_rows(g.value(out.values), 0, nq)?;
            let all_k = kernels::concat_rows(&[&cache.keys, &chunk_k])?;
            let all_v = kernels::concat_rows(&[&cache.values, &chunk_v])?;
            let kept = all_k.rows() - drop;
            let h = cfg.conv_kernel - 1;
            let ext = kernels::concat_rows(&[&cache.conv_history, g.value(out.conv_input)])?;
            new_caches.push(LayerCache {
                keys: kernels::slice_rows(&all_k, drop, kept)?,
                values: kernels::slice_rows(&all_v, drop, kept)?,
                conv_history: kernels::slice_rows(&ext, ext.rows() - h, h)?,
            });
            debug_assert_eq!(g.value(x).cols(), d);
        }
        let logits = enc.head(&mut g, x)?;
        let lp = kernels::log_softmax(g.value(logits))?;
        if self.record_hidden {
            self.hidden.extend_from_slice(g.value(x).data());
        }
        let (symbols, collapse) = greedy_decode_chunk(&lp, self.collapse);

        self.collapse = collapse;
        self.layers = new_caches;
        self.cache_start = end.saturating_sub(cfg.past_context).max(self.cache_start);
        self.pending.drain(..end - start);
        self.next_chunk += 1;
        let arrived = self.arrived;
        self.emitted.extend(symbols.iter().map(|&symbol| Emission { symbol, arrived_tokens: arrived }));
        self.chunk_compute.push(started.elapsed());
        Ok(symbols)
    }

    pub fn arrived(&self) -> usize {
        self.arrived
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn emitted(&self) -> &[Emission] {
        &self.emitted
    }

    /// Tokens that had arrived when the first chunk was encoded.
    pub fn first_chunk_at(&self) -> Option<usize> {
        self.first_chunk_at
    }

    /// Arrival count at the first non-empty emission.
    pub fn first_emission_at(&self) -> Option<usize> {
        self.emitted.first().map(|e| e.arrived_tokens)
    }

    pub fn chunk_compute(&self) -> &[Duration] {
        &self.chunk_compute
    }

    /// Most key frames any layer attended over in a single chunk.
    pub fn peak_attention_frames(&self) -> usize {
        self.peak_frames
    }

    pub fn cached_frames(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.keys.rows()).collect()
    }

    /// `frames x d_model` final-layer states recorded so far.
    pub fn hidden(&self) -> Tensor<T> {
        let d = self.model.cfg().d_model;
        Tensor::from_matrix(self.hidden.len() / d, d, self.hidden.clone())
    }
}

/// Streams `tokens` through a fresh state and closes it.
pub fn stream_all<T: Scalar>(model: &Model<T>, tokens: &[usize]) -> Result<Vec<usize>> {
    let mut s = StreamState::new(model);
    let mut out = Vec::new();
    for &t in tokens {
        out.extend(s.push_token(t)?);
    }
    out.extend(s.close()?);
    Ok(out)
}

/// Offline pass under the streaming masks.
#[derive(Clone, Debug)]
pub struct OfflineDecode<T: Scalar> {
    pub symbols: Vec<usize>,
    pub hidden: Tensor<T>,
    pub log_probs: Tensor<T>,
}

pub fn offline_decode<T: Scalar>(model: &Model<T>, tokens: &[usize], mode: ContextMode) -> Result<OfflineDecode<T>> {
    if tokens.is_empty() {
        let d = model.cfg().d_model;
        return Ok(OfflineDecode {
            symbols: Vec::new(),
            hidden: Tensor::zeros(0, d),
            log_probs: Tensor::zeros(0, model.encoder.n_labels),
        });
    }
    let masks = layer_masks(model.cfg(), tokens.len(), mode)?;
    let out = model.encoder.run(&model.params, tokens, &masks)?;
    let log_probs = kernels::log_softmax(&out.logits)?;
    Ok(OfflineDecode { symbols: greedy_decode(&log_probs), hidden: out.hidden, log_probs })
}

/// Start-latency measurement for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRecord {
    pub tokens_waited_for_first_output: usize,
    /// Seconds spent encoding each chunk, in order.
    pub compute_time_per_chunk: Vec<f64>,
    pub tau: f64,
    /// `tokens_waited * tau + first-chunk compute`, seconds.
    pub modeled_start: f64,
}

impl LatencyRecord {
    pub fn wait_term(&self) -> f64 {
        self.tokens_waited_for_first_output as f64 * self.tau
    }

    pub fn first_chunk_compute(&self) -> f64 {
        self.compute_time_per_chunk.first().copied().unwrap_or(0.0)
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        let mut r = self.clone();
        r.tau = tau;
        r.modeled_start = r.wait_term() + r.first_chunk_compute();
        r
    }
}

pub fn bench_stream<T: Scalar>(model: &Model<T>, tokens: &[usize], tau: f64) -> Result<LatencyRecord> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Input(format!("tau must be a non-negative number of seconds, got {tau}")));
    }
    let mut s = StreamState::new(model);
    for &t in tokens {
        s.push_token(t)?;
    }
    s.close()?;
    let waited = s.first_chunk_at().unwrap_or(0);
    let compute: Vec<f64> = s.chunk_compute().iter().map(Duration::as_secs_f64).collect();
    let first = compute.first().copied().unwrap_or(0.0);
    Ok(LatencyRecord {
        tokens_waited_for_first_output: waited,
        compute_time_per_chunk: compute,
        tau,
        modeled_start: waited as f64 * tau + first,
    })
}

/// Averages first-chunk compute over several streams.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSummary {
    pub streams: usize,
    pub tokens_waited: usize,
    pub mean_first_chunk: f64,
    pub mean_chunk: f64,
    pub tau: f64,
    pub modeled_start: f64,
}

pub fn bench_streams<T: Scalar>(model: &Model<T>, streams: &[Vec<usize>], tau: f64) -> Result<BenchSummary> {
    let mut first = 0.0;
    let mut all = 0.0;
    let mut n_chunks = 0usize;
    let mut waited = 0;
    for s in streams {
        let r = bench_stream(model, s, tau)?;
        first += r.first_chunk_compute();
        all += r.compute_time_per_chunk.iter().sum::<f64>();
        n_chunks += r.compute_time_per_chunk.len();
        waited = waited.max(r.tokens_waited_for_first_output);
    }
    let n = streams.len().max(1) as f64;
    let mean_first_chunk = first / n;
    Ok(BenchSummary {
        streams: streams.len(),
        tokens_waited: waited,
        mean_first_chunk,
        mean_chunk: all / n_chunks.max(1) as f64,
        tau,
        modeled_start: waited as f64 * tau + mean_first_chunk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StreamingConfig;
    use crate::numerics::rng::{Purpose, Rng};

    fn cfg(c: usize, p: usize, m: usize) -> StreamingConfig {
        StreamingConfig {
            chunk_size: c,
            past_context: p,
            min_lookahead: m,
            upsample: 2,
            n_layers: 3,
            intermediate_layers: vec![1],
            d_model: 8,
            n_heads: 2,
            conv_kernel: 3,
            ff_dim: 8,
            rel_pos_clip: 4,
            ..Default::default()
        }
    }

    /// Model whose output bias favours a non-blank label, so every chunk emits.
    fn emitting_model(c: usize, p: usize, m: usize, seed: u64) -> Model<f64> {
        let mut model = Model::init(cfg(c, p, m), 7, 5, seed).unwrap();
        let b = model.encoder.head.b;
        model.params.get_mut(b).data_mut()[0] = -50.0;
        model
    }

    #[test]
    fn waits_for_chunk_plus_lookahead() {
        for (c, m) in [(2, 0), (2, 1), (2, 2), (5, 0), (5, 1), (5, 2)] {
            let model = emitting_model(c, 3, m, 1);
            let mut s = StreamState::new(&model);
            for i in 0..c + m - 1 {
                assert!(s.push_token(i % 7).unwrap().is_empty());
            }
            assert!(!s.push_token(0).unwrap().is_empty());
            assert_eq!(s.first_emission_at(), Some(c + m));
        }
    }

    #[test]
    fn close_flushes_the_tail() {
        let model = emitting_model(5, 3, 1, 2);
        let mut s = StreamState::new(&model);
        for t in 0..7 {
            s.push_token(t % 7).unwrap();
        }
        assert_eq!(s.chunk_compute().len(), 1);
        s.close().unwrap();
        assert_eq!(s.chunk_compute().len(), 2);
        assert_eq!(s.arrived(), 7);
        assert!(matches!(s.close(), Err(Error::State(_))));
        assert!(matches!(s.push_token(1), Err(Error::State(_))));
    }

    #[test]
    fn empty_stream() {
        let model = emitting_model(2, 1, 1, 3);
        assert!(stream_all(&model, &[]).unwrap().is_empty());
    }

    #[test]
    fn matches_offline_bitwise() {
        let mut rng = Rng::new(4, Purpose::Test);
        for (c, p, m) in [(2, 0, 0), (2, 3, 1), (3, 2, 2), (1, 1, 3), (4, 10, 1)] {
            let model = Model::init(cfg(c, p, m), 7, 5, 5).unwrap();
            for _ in 0..4 {
                let n = rng.range_inclusive(1, 13);
                let tokens: Vec<usize> = (0..n).map(|_| rng.below(7)).collect();
                let mut s = StreamState::new(&model).recording_hidden();
                let mut got = Vec::new();
                for &t in &tokens {
                    got.extend(s.push_token(t).unwrap());
                }
                got.extend(s.close().unwrap());
                let off = offline_decode(&model, &tokens, ContextMode::Chunked).unwrap();
                assert_eq!(got, off.symbols);
                assert_eq!(s.hidden(), off.hidden, "C={c} P={p} M={m} n={n}");
            }
        }
    }

    #[test]
    fn token_anchor_matches_offline() {
        let mut config = cfg(3, 2, 1);
        config.past_anchor = crate::config::PastAnchor::Token;
        let model = Model::init(config, 7, 5, 6).unwrap();
        let tokens = [1, 2, 3, 4, 5, 6, 0, 1, 2, 3];
        let mut s = StreamState::new(&model).recording_hidden();
        for &t in &tokens {
            s.push_token(t).unwrap();
        }
        s.close().unwrap();
        let off = offline_decode(&model, &tokens, ContextMode::Chunked).unwrap();
        assert_eq!(s.hidden(), off.hidden);
    }

    #[test]
    fn cache_stays_bounded() {
        let (c, p, m) = (2, 3, 1);
        let model = emitting_model(c, p, m, 7);
        let mut s = StreamState::new(&model);
        for t in 0..40 {
            s.push_token(t % 7).unwrap();
            assert!(s.cached_frames().iter().all(|&f| f <= p * 2));
        }
        assert!(s.peak_attention_frames() <= (p + c + m) * 2);
    }

    #[test]
    fn f32_streaming_matches_f32_offline() {
        let model = Model::init(cfg(3, 3, 1), 7, 5, 8).unwrap().cast::<f32>();
        let tokens = [0, 6, 5, 4, 3, 2, 1, 0];
        let mut s = StreamState::new(&model).recording_hidden();
        for &t in &tokens {
            s.push_token(t).unwrap();
        }
        s.close().unwrap();
        assert_eq!(s.hidden(), offline_decode(&model, &tokens, ContextMode::Chunked).unwrap().hidden);
    }

    #[test]
    fn bench_model_is_linear_in_tau() {
        let model = emitting_model(5, 3, 2, 9);
        let tokens: Vec<usize> = (0..12).map(|i| i % 7).collect();
        let r = bench_stream(&model, &tokens, 0.0).unwrap();
        assert_eq!(r.tokens_waited_for_first_output, 7);
        assert_eq!(r.modeled_start, r.first_chunk_compute());
        let a = r.with_tau(0.05);
        let b = r.with_tau(0.10);
        assert_eq!(b.wait_term(), 2.0 * a.wait_term());
        assert_eq!(a.first_chunk_compute(), b.first_chunk_compute());
        assert!(bench_stream(&model, &tokens, -1.0).is_err());
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let model = emitting_model(2, 1, 0, 1);
        let mut s = StreamState::new(&model);
        assert!(matches!(s.push_token(7), Err(Error::Input(_))));
    }
}
