//! Streaming Conformer encoder with self-conditioned intermediate CTC heads.
//!
//! Tokens are embedded, repeated `U` times, tagged with a learned
//! within-token frame-offset embedding and passed through `L` Conformer
//! blocks. Each block is Macaron style: half-step feed-forward, masked
//! multi-head self-attention with a clipped relative-position bias, a
//! convolution module (pointwise, GLU, causal depthwise, layer norm, swish,
//! pointwise), a second half-step feed-forward and a final layer norm.
//! The convolution module uses layer normalization where the original
//! design has batch normalization, since batch statistics have no meaning
//! for a single stream.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::config::StreamingConfig;
use crate::error::{Error, Result};
use crate::masking::LayerMask;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::kernels::{self, BoolMatrix};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::rng::{Purpose, Rng};
use crate::numerics::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: Norm,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    /// `n_heads x (2R + 1)` bias table, `R` = clip distance in tokens.
    pub rel_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: Norm,
    pub pointwise_in: Linear,
    /// `conv_kernel x d_model` depthwise taps; the last tap is the current frame.
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub mid_norm: Norm,
    pub pointwise_out: Linear,
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub attn: SelfAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub out_norm: Norm,
}

/// Values produced by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T: Scalar = f64> {
    /// `frames x d_model` states after the last block.
    pub hidden: Tensor<T>,
    /// `layer -> frames x vocab` logits of the intermediate heads.
    pub intermediate: BTreeMap<usize, Tensor<T>>,
    /// `frames x vocab` final logits.
    pub logits: Tensor<T>,
}

/// Graph handles for a forward pass (used by training).
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub hidden: Var,
    pub intermediate: BTreeMap<usize, Var>,
    pub logits: Var,
}

pub(crate) struct BlockInput<'a> {
    /// Query rows first, then any extra key-only rows (look-ahead frames).
    pub x: Var,
    pub n_query: usize,
    /// Cached keys/values of earlier frames, placed before `x`'s keys.
    pub past_kv: Option<(Var, Var)>,
    /// `n_query x (past + rows(x))`.
    pub mask: &'a BoolMatrix,
    pub rel_idx: Rc<Vec<usize>>,
    pub conv_history: Var,
}

pub(crate) struct BlockOutput {
    pub out: Var,
    pub keys: Var,
    pub values: Var,
    pub conv_input: Var,
}

/// Parameter layout of the encoder. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: StreamingConfig,
    pub n_graphemes: usize,
    pub n_labels: usize,
    pub dropout: f64,
    pub embed: ParamId,
    pub frame_offset: ParamId,
    pub blocks: Vec<ConformerBlock>,
    pub head: Linear,
    pub condition: Linear,
    pub condition_norms: BTreeMap<usize, Norm>,
}

struct Init<'a> {
    store: &'a mut ParamStore<f64>,
    rng: Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let data = (0..rows * cols).map(|_| self.rng.normal() * std).collect();
        self.store.add(name, Tensor::from_matrix(rows, cols, data))
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Tensor::filled(rows, cols, v))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.normal(format!("{name}.w"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
        let b = self.constant(format!("{name}.b"), 1, fan_out, 0.0);
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gamma = self.constant(format!("{name}.gamma"), 1, d, 1.0);
        let beta = self.constant(format!("{name}.beta"), 1, d, 0.0);
        Norm { gamma, beta }
    }

    fn ff(&mut self, name: &str, d: usize, ff: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(&format!("{name}.norm"), d),
            up: self.linear(&format!("{name}.up"), d, ff),
            down: self.linear(&format!("{name}.down"), ff, d),
        }
    }
}

impl Encoder {
    /// Registers freshly initialized parameters in `store`. Parameter
    /// names and order depend only on the config, so a checkpoint can be
    /// loaded into a store built the same way.
    pub fn new(
        cfg: StreamingConfig,
        n_graphemes: usize,
        n_labels: usize,
        store: &mut ParamStore<f64>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_graphemes == 0 || n_labels < 2 {
            return Err(Error::Config("encoder needs graphemes and at least two labels".into()));
        }
        let d = cfg.d_model;
        let mut init = Init { store, rng: Rng::new(seed, Purpose::Init) };
        let embed = init.normal("embed".into(), n_graphemes, d, 1.0);
        let frame_offset = init.normal("frame_offset".into(), cfg.upsample, d, 1.0);
        let clip = cfg.rel_pos_clip;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 1..=cfg.n_layers {
            let p = format!("block{l}");
            let ff1 = init.ff(&format!("{p}.ff1"), d, cfg.ff_dim);
            let attn = SelfAttention {
                norm: init.norm(&format!("{p}.attn.norm"), d),
                q: init.linear(&format!("{p}.attn.q"), d, d),
                k: init.linear(&format!("{p}.attn.k"), d, d),
                v: init.linear(&format!("{p}.attn.v"), d, d),
                out: init.linear(&format!("{p}.attn.out"), d, d),
                rel_bias: init.constant(format!("{p}.attn.rel_bias"), cfg.n_heads, 2 * clip + 1, 0.0),
            };
            let conv = ConvModule {
                norm: init.norm(&format!("{p}.conv.norm"), d),
                pointwise_in: init.linear(&format!("{p}.conv.pw_in"), d, 2 * d),
                depthwise: init.normal(
                    format!("{p}.conv.dw"),
                    cfg.conv_kernel,
                    d,
                    1.0 / (cfg.conv_kernel as f64).sqrt(),
                ),
                depthwise_bias: init.constant(format!("{p}.conv.dw_bias"), 1, d, 0.0),
                mid_norm: init.norm(&format!("{p}.conv.mid_norm"), d),
                pointwise_out: init.linear(&format!("{p}.conv.pw_out"), d, d),
            };
            let ff2 = init.ff(&format!("{p}.ff2"), d, cfg.ff_dim);
            let out_norm = init.norm(&format!("{p}.out_norm"), d);
            blocks.push(ConformerBlock { ff1, attn, conv, ff2, out_norm });
        }
        let head = init.linear("head", d, n_labels);
        let condition = init.linear("condition", n_labels, d);
        let mut condition_norms = BTreeMap::new();
        for &l in &cfg.intermediate_layers {
            condition_norms.insert(l, init.norm(&format!("condition_norm{l}"), d));
        }
        Ok(Self {
            cfg,
            n_graphemes,
            n_labels,
            dropout: 0.1,
            embed,
            frame_offset,
            blocks,
            head,
            condition,
            condition_norms,
        })
    }

    /// Bias-table indices for each (query frame, key frame) pair. Offsets are
    /// measured in tokens and clipped at `rel_pos_clip`.
    pub fn rel_offsets(&self, q_frames: &[usize], k_frames: &[usize]) -> Vec<usize> {
        let u = self.cfg.upsample;
        let q: Vec<usize> = q_frames.iter().map(|f| f / u).collect();
        let k: Vec<usize> = k_frames.iter().map(|f| f / u).collect();
        kernels::relative_offsets(&q, &k, self.cfg.rel_pos_clip)
    }

    fn linear<T: Scalar>(&self, g: &mut Graph<T>, x: Var, l: &Linear) -> Result<Var> {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<T>, x: Var, n: &Norm) -> Result<Var> {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn feed_forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, ff: &FeedForward) -> Result<Var> {
        let h = self.norm(g, x, &ff.norm)?;
        let h = self.linear(g, h, &ff.up)?;
        let h = g.swish(h)?;
        let h = g.dropout(h, self.dropout)?;
        let h = self.linear(g, h, &ff.down)?;
        g.dropout(h, self.dropout)
    }

    /// Embeds `tokens` into layer-one input rows: embedding, repetition to
    /// `U` frames per token, plus the within-token offset embedding.
    pub(crate) fn embed_frames<T: Scalar>(&self, g: &mut Graph<T>, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.n_graphemes) {
            return Err(Error::Input(format!("grapheme id {bad} outside vocabulary of {}", self.n_graphemes)));
        }
        let table = g.param(self.embed);
        let e = g.embedding(table, tokens)?;
        let up = g.repeat_rows(e, self.cfg.upsample)?;
        let offsets: Vec<usize> = (0..tokens.len() * self.cfg.upsample).map(|f| f % self.cfg.upsample).collect();
        let ot = g.param(self.frame_offset);
        let o = g.embedding(ot, &offsets)?;
        g.add(up, o)
    }

    pub(crate) fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &ConformerBlock,
        input: BlockInput<'_>,
    ) -> Result<BlockOutput> {
        let cfg = &self.cfg;
        let rows = g.value(input.x).rows();
        let nq = input.n_query;
        let f1 = self.feed_forward(g, input.x, &b.ff1)?;
        let f1 = g.scale(f1, 0.5)?;
        let h = g.add(input.x, f1)?;

        let a = self.norm(g, h, &b.attn.norm)?;
        let a_q = if nq == rows { a } else { g.slice_rows(a, 0, nq)? };
        let q = self.linear(g, a_q, &b.attn.q)?;
        let keys = self.linear(g, a, &b.attn.k)?;
        let values = self.linear(g, a, &b.attn.v)?;
        let (k_all, v_all) = match input.past_kv {
            Some((pk, pv)) => (g.concat_rows(&[pk, keys])?, g.concat_rows(&[pv, values])?),
            None => (keys, values),
        };
        let n_keys = g.value(k_all).rows();
        if (input.mask.rows(), input.mask.cols()) != (nq, n_keys) {
            return Err(Error::Shape(format!(
                "attention mask {}x{} for {nq} queries and {n_keys} keys",
                input.mask.rows(),
                input.mask.cols()
            )));
        }
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let rel = g.param(b.attn.rel_bias);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k_all, head * dh, dh)?;
            let vh = g.slice_cols(v_all, head * dh, dh)?;
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let bias = g.rel_bias(rel, head, input.rel_idx.clone(), nq, n_keys)?;
            let s = g.add(s, bias)?;
            let p = g.softmax_masked(s, input.mask)?;
            heads.push(g.matmul(p, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let o = self.linear(g, o, &b.attn.out)?;
        let o = g.dropout(o, self.dropout)?;
        let h_q = if nq == rows { h } else { g.slice_rows(h, 0, nq)? };
        let h2 = g.add(h_q, o)?;

        let d = cfg.d_model;
        let c = self.norm(g, h2, &b.conv.norm)?;
        let c = self.linear(g, c, &b.conv.pointwise_in)?;
        let lin = g.slice_cols(c, 0, d)?;
        let gate = g.slice_cols(c, d, d)?;
        let gate = g.sigmoid(gate)?;
        let glu = g.mul(lin, gate)?;
        let dw = g.param(b.conv.depthwise);
        let c = g.causal_conv(glu, dw, input.conv_history)?;
        let dwb = g.param(b.conv.depthwise_bias);
        let c = g.add_row(c, dwb)?;
        let c = self.norm(g, c, &b.conv.mid_norm)?;
        let c = g.swish(c)?;
        let c = self.linear(g, c, &b.conv.pointwise_out)?;
        let c = g.dropout(c, self.dropout)?;
        let h3 = g.add(h2, c)?;

        let f2 = self.feed_forward(g, h3, &b.ff2)?;
        let f2 = g.scale(f2, 0.5)?;
        let h4 = g.add(h3, f2)?;
        let out = self.norm(g, h4, &b.out_norm)?;
        Ok(BlockOutput { out, keys, values, conv_input: glu })
    }

    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, hidden: Var) -> Result<Var> {
        self.linear(g, hidden, &self.head)
    }

    /// `LayerNorm(hidden + Project(softmax(logits)))`, frame by frame.
    pub fn self_condition<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        layer: usize,
        hidden: Var,
        logits: Var,
    ) -> Result<Var> {
        let norm = self
            .condition_norms
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} has no intermediate head")))?
            .clone();
        let p = g.softmax(logits)?;
        let proj = self.linear(g, p, &self.condition)?;
        let s = g.add(hidden, proj)?;
        self.norm(g, s, &norm)
    }

    /// Full-sequence forward under per-layer frame masks.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        masks: &[LayerMask],
    ) -> Result<EncoderVars> {
        let cfg = &self.cfg;
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let frames = tokens.len() * cfg.upsample;
        if masks.len() != cfg.n_layers {
            return Err(Error::Shape(format!("{} masks for {} layers", masks.len(), cfg.n_layers)));
        }
        if let Some(m) = masks.iter().find(|m| m.size() != frames) {
            return Err(Error::Shape(format!(
                "layer {} mask covers {} frames, input has {frames}",
                m.layer_index,
                m.size()
            )));
        }
        let positions: Vec<usize> = (0..frames).collect();
        let rel_idx = Rc::new(self.rel_offsets(&positions, &positions));
        let history = g.constant(Tensor::zeros(cfg.conv_kernel - 1, cfg.d_model));
        let mut x = self.embed_frames(g, tokens)?;
        let mut intermediate = BTreeMap::new();
        for (l, (block, mask)) in self.blocks.iter().zip(masks).enumerate() {
            let layer = l + 1;
            let out = self.block(
                g,
                block,
                BlockInput {
                    x,
                    n_query: frames,
                    past_kv: None,
                    mask: &mask.allowed,
                    rel_idx: rel_idx.clone(),
                    conv_history: history,
                },
            )?;
            x = out.out;
            if cfg.is_intermediate(layer) {
                let logits = self.head(g, x)?;
                intermediate.insert(layer, logits);
                x = self.self_condition(g, layer, x, logits)?;
            }
        }
        let logits = self.head(g, x)?;
        Ok(EncoderVars { hidden: x, intermediate, logits })
    }

    /// Forward pass without gradient tracking.
    pub fn run<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        tokens: &[usize],
        masks: &[LayerMask],
    ) -> Result<EncoderOutput<T>> {
        let mut g = Graph::inference(params);
        let vars = self.forward(&mut g, tokens, masks)?;
        Ok(EncoderOutput {
            hidden: g.value(vars.hidden).clone(),
            intermediate: vars.intermediate.iter().map(|(&l, &v)| (l, g.value(v).clone())).collect(),
            logits: g.value(vars.logits).clone(),
        })
    }
}

/// Repeats each token embedding `factor` times, in order.
pub fn upsample<T: Scalar>(token_embeddings: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    kernels::repeat_rows(token_embeddings, factor)
}

/// Encoder layout together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    pub encoder: Encoder,
    pub params: ParamStore<T>,
}

impl Model<f64> {
    pub fn init(cfg: StreamingConfig, n_graphemes: usize, n_labels: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = Encoder::new(cfg, n_graphemes, n_labels, &mut params, seed)?;
        Ok(Self { encoder, params })
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { encoder: self.encoder.clone(), params: self.params.cast() }
    }

    pub fn cfg(&self) -> &StreamingConfig {
        &self.encoder.cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{layer_masks, ContextMode};

    fn small_cfg() -> StreamingConfig {
        StreamingConfig {
            chunk_size: 2,
            past_context: 2,
            min_lookahead: 1,
            upsample: 3,
            n_layers: 3,
            intermediate_layers: vec![1],
            d_model: 8,
            n_heads: 2,
            conv_kernel: 3,
            ff_dim: 12,
            rel_pos_clip: 3,
            ..Default::default()
        }
    }

    #[test]
    fn upsample_examples() {
        let e = Tensor::<f64>::from_f64_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(upsample(&e, 1).unwrap(), e);
        let u = upsample(&e, 3).unwrap();
        assert_eq!(u.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        assert_eq!(upsample(&Tensor::<f64>::zeros(5, 4), 8).unwrap().rows(), 40);
    }

    #[test]
    fn output_shapes_and_taps() {
        let m = Model::init(small_cfg(), 6, 5, 1).unwrap();
        let tokens = [0, 3, 5, 1, 2];
        let masks = layer_masks(m.cfg(), tokens.len(), ContextMode::Chunked).unwrap();
        let out = m.encoder.run(&m.params, &tokens, &masks).unwrap();
        assert_eq!(out.hidden.shape(), &[15, 8]);
        assert_eq!(out.logits.shape(), &[15, 5]);
        assert_eq!(out.intermediate.keys().copied().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn mask_frame_mismatch_is_shape_error() {
        let m = Model::init(small_cfg(), 6, 5, 1).unwrap();
        let masks = layer_masks(m.cfg(), 4, ContextMode::Chunked).unwrap();
        assert!(matches!(m.encoder.run(&m.params, &[0, 1, 2], &masks), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut m = Model::init(small_cfg(), 6, 5, 1).unwrap();
        for id in [m.encoder.head.w, m.encoder.head.b] {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let masks = layer_masks(m.cfg(), 3, ContextMode::Chunked).unwrap();
        let out = m.encoder.run(&m.params, &[1, 2, 3], &masks).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_context_equals_wide_chunks() {
        let mut cfg = small_cfg();
        cfg.chunk_size = 10;
        cfg.past_context = 10;
        let m = Model::init(cfg, 6, 5, 2).unwrap();
        let tokens = [5, 4, 3, 2, 1, 0];
        let chunked = layer_masks(m.cfg(), 6, ContextMode::Chunked).unwrap();
        let full = layer_masks(m.cfg(), 6, ContextMode::Full).unwrap();
        assert_eq!(
            m.encoder.run(&m.params, &tokens, &chunked).unwrap(),
            m.encoder.run(&m.params, &tokens, &full).unwrap()
        );
    }

    #[test]
    fn zero_projection_condition_is_plain_norm() {
        let mut m = Model::init(small_cfg(), 6, 5, 3).unwrap();
        for id in [m.encoder.condition.w, m.encoder.condition.b] {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference(&m.params);
        let h = g.constant(Tensor::from_matrix(2, 8, (0..16).map(|i| (i as f64).sin()).collect()));
        let logits = g.constant(Tensor::from_matrix(2, 5, (0..10).map(|i| i as f64).collect()));
        let y = m.encoder.self_condition(&mut g, 1, h, logits).unwrap();
        let n = &m.encoder.condition_norms[&1];
        let expected = kernels::layer_norm(g.value(h), m.params.get(n.gamma), m.params.get(n.beta)).unwrap().0;
        assert_eq!(g.value(y), &expected);
    }

    #[test]
    fn uniform_logits_add_the_same_feedback_to_every_frame() {
        let m = Model::init(small_cfg(), 6, 5, 4).unwrap();
        let mut g = Graph::inference(&m.params);
        let h = g.constant(Tensor::zeros(3, 8));
        let logits = g.constant(Tensor::filled(3, 5, 0.7));
        let y = m.encoder.self_condition(&mut g, 1, h, logits).unwrap();
        let y = g.value(y);
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::init(small_cfg(), 6, 5, 9).unwrap();
        let b = Model::init(small_cfg(), 6, 5, 9).unwrap();
        let c = Model::init(small_cfg(), 6, 5, 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }
    /// Changing a token beyond a frame's composed look-ahead leaves that
    /// frame's outputs bit-identical. Only the future side is checked: the
    /// causal convolution extends the past reach beyond the attention masks.
    #[test]
    fn later_tokens_outside_lookahead_do_not_change_outputs() {
        use crate::masking::{effective_lookahead, LookaheadMode};
        use crate::numerics::rng::{Purpose, Rng};
        let mut rng = Rng::new(11, Purpose::Test);
        for case in 0..12 {
            let mut cfg = small_cfg();
            cfg.chunk_size = rng.range_inclusive(1, 3);
            cfg.past_context = rng.range_inclusive(0, 3);
            cfg.min_lookahead = rng.range_inclusive(0, 2);
            cfg.n_layers = rng.range_inclusive(1, 3);
            cfg.intermediate_layers = if cfg.n_layers > 1 { vec![1] } else { vec![] };
            let m = Model::init(cfg.clone(), 6, 5, case).unwrap();
            let n = 8;
            let tokens: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
            let masks = layer_masks(&cfg, n, ContextMode::Chunked).unwrap();
            let base = m.encoder.run(&m.params, &tokens, &masks).unwrap();
            let reach = effective_lookahead(&cfg, n, LookaheadMode::ChunkAware).unwrap();
            let u = cfg.upsample;
            for changed in 0..n {
                let mut other = tokens.clone();
                other[changed] = (other[changed] + 1) % 6;
                let out = m.encoder.run(&m.params, &other, &masks).unwrap();
                let mut any_changed = false;
                for q in 0..n {
                    let same = (q * u..(q + 1) * u).all(|f| out.logits.row(f) == base.logits.row(f));
                    any_changed |= !same;
                    if changed > q + reach.lookahead[q] {
                        assert!(same, "{cfg:?}: token {changed} changed frames of token {q}");
                    }
                }
                assert!(any_changed);
            }
        }
    }

    #[test]
    fn initial_loss_is_finite_for_many_seeds() {
        use crate::ctc::total_loss;
        use crate::numerics::rng::{Purpose, Rng};
        let cfg = StreamingConfig { n_layers: 2, intermediate_layers: vec![1], ..Default::default() };
        let mut rng = Rng::new(12, Purpose::Test);
        for seed in 0..100 {
            let m = Model::init(cfg.clone(), 40, 28, seed).unwrap();
            let tokens: Vec<usize> = (0..6).map(|_| rng.below(40)).collect();
            let target: Vec<usize> = (0..10).map(|_| rng.range_inclusive(1, 27)).collect();
            let masks = layer_masks(&cfg, tokens.len(), ContextMode::Chunked).unwrap();
            let out = m.encoder.run(&m.params, &tokens, &masks).unwrap();
            assert!(out.logits.all_finite());
            let loss = total_loss(&out, &target, cfg.intermediate_weight).unwrap();
            assert!(loss.is_finite() && loss > 0.0, "seed {seed}: loss {loss}");
        }
    }
}
