//! Run configuration, optimization and evaluation.
//!
//! Training is single-threaded and deterministic given the seed: batches
//! are drawn from a seeded shuffle, dropout masks from per-step forks of the
//! dropout stream, and gradients are summed in a fixed order.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::StreamingConfig;
use crate::corpus::{DatasetFile, Labeled, SyntheticRules};
use crate::ctc::LabelVocab;
use crate::encoder::Model;
use crate::engine::offline_decode;
use crate::error::{Error, Result};
use crate::masking::{layer_masks, ContextMode, LayerMask};
use crate::metrics::{boundary_error_profile, evaluate, EvalReport};
use crate::numerics::checkpoint;
use crate::numerics::graph::Graph;
use crate::numerics::params::ParamStore;
use crate::numerics::rng::{Purpose, Rng};
use crate::numerics::tensor::Scalar;

/// Synthetic data settings used by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub rules_seed: u64,
    pub radius: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub len_min: usize,
    pub len_max: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { rules_seed: 1, radius: 1, n_train: 20_000, n_valid: 500, n_test: 1000, len_min: 4, len_max: 32 }
    }
}

/// Optimization settings and file locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_frames: usize,
    pub dropout: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Loss charged for a target that cannot be aligned.
    pub infeasible_clamp: f64,
    pub context_mode: ContextMode,
    pub log_every: usize,
    pub eval_every: usize,
    /// Validation sentences scored at each periodic evaluation (0 = all).
    pub eval_sentences: usize,
    pub train_data: String,
    pub valid_data: String,
    pub test_data: String,
    pub checkpoint: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 30_000,
            warmup_steps: 1000,
            lr_start: 1e-3,
            lr_end: 1e-4,
            batch_frames: 4096,
            dropout: 0.1,
            grad_clip: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            infeasible_clamp: 1e4,
            context_mode: ContextMode::Chunked,
            log_every: 100,
            eval_every: 1000,
            eval_sentences: 200,
            train_data: "data/train.txt".into(),
            valid_data: "data/valid.txt".into(),
            test_data: "data/test.txt".into(),
            checkpoint: "model.ckpt".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return bad("learning rates must be positive");
        }
        if self.batch_frames == 0 {
            return bad("batch_frames must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("grad_clip must be positive and Adam betas in [0, 1)");
        }
        Ok(())
    }

    /// Linear warmup to `lr_start`, then exponential decay reaching
    /// `lr_end` at the last step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_start * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps + 1);
        if span == 0 {
            return self.lr_start;
        }
        let frac = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }
}

/// Everything a run needs, stored as one flat TOML table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: StreamingConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

fn keys_of<S: Serialize>(v: &S) -> Vec<String> {
    toml::Table::try_from(v).map(|t| t.keys().cloned().collect()).unwrap_or_default()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        let model_keys = keys_of(&StreamingConfig::default());
        let data_keys = keys_of(&DataConfig::default());
        let (mut m, mut d, mut t) = (toml::Table::new(), toml::Table::new(), toml::Table::new());
        for (k, v) in table {
            if model_keys.contains(&k) {
                m.insert(k, v);
            } else if data_keys.contains(&k) {
                d.insert(k, v);
            } else {
                t.insert(k, v);
            }
        }
        let err = |e: toml::de::Error| Error::Config(format!("config: {e}"));
        let cfg = Self {
            model: m.try_into().map_err(err)?,
            data: d.try_into().map_err(err)?,
            train: t.try_into().map_err(err)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::new();
        for part in [
            toml::Table::try_from(&self.model),
            toml::Table::try_from(&self.data),
            toml::Table::try_from(&self.train),
        ] {
            table.extend(part.expect("config serializes"));
        }
        toml::to_string(&table).expect("table serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.len_min > self.data.len_max {
            return Err(Error::Config("len_min exceeds len_max".into()));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &ParamStore<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut ParamStore<f64>, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Sentence-index batches holding at most `cap` frames each (a longer
/// sentence forms a batch alone).
pub fn make_batches(lengths: &[usize], order: &[usize], upsample: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut frames = 0;
    for &i in order {
        let f = lengths[i] * upsample;
        if !cur.is_empty() && frames + f > cap {
            batches.push(std::mem::take(&mut cur));
            frames = 0;
        }
        cur.push(i);
        frames += f;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

#[derive(Default)]
struct MaskCache {
    by_len: HashMap<usize, Vec<LayerMask>>,
}

impl MaskCache {
    fn get(&mut self, cfg: &StreamingConfig, n: usize, mode: ContextMode) -> Result<&[LayerMask]> {
        if let std::collections::hash_map::Entry::Vacant(e) = self.by_len.entry(n) {
            e.insert(layer_masks(cfg, n, mode)?);
        }
        Ok(&self.by_len[&n])
    }
}

/// Loss and gradients of one sentence.
pub struct SentenceLoss {
    pub loss: f64,
    pub infeasible: usize,
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Final CTC loss plus `intermediate_weight` times the intermediate ones,
/// with gradients for every parameter.
pub fn sentence_loss(
    model: &Model<f64>,
    graphemes: &[usize],
    target: &[usize],
    masks: &[LayerMask],
    dropout: Option<Rng>,
    clamp: f64,
) -> Result<SentenceLoss> {
    let enc = &model.encoder;
    let mut g = Graph::new(&model.params);
    if let Some(rng) = dropout {
        g = g.with_dropout(rng);
    }
    let vars = enc.forward(&mut g, graphemes, masks)?;
    let lp = g.log_softmax(vars.logits)?;
    let mut root = g.ctc_loss(lp, target, LabelVocab::BLANK, Some(clamp))?;
    let mut infeasible = usize::from(g.value(root).data()[0] == clamp);
    let w = enc.cfg.intermediate_weight;
    if w != 0.0 {
        for &logits in vars.intermediate.values() {
            let lp = g.log_softmax(logits)?;
            let l = g.ctc_loss(lp, target, LabelVocab::BLANK, Some(clamp))?;
            infeasible += usize::from(g.value(l).data()[0] == clamp);
            let l = g.scale(l, w)?;
            root = g.add(root, l)?;
        }
    }
    let loss = g.value(root).data()[0];
    let grads = g.backward(root)?.into_params();
    Ok(SentenceLoss { loss, infeasible, grads })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: Model<f64>,
    /// Mean per-sentence loss of every step.
    pub losses: Vec<StepLog>,
    /// `(step, validation PnP CER)` pairs.
    pub validation: Vec<(usize, f64)>,
    pub infeasible: usize,
}

/// Trains from `train` and reports validation CER on `valid`. Log lines
/// are `key=value` pairs.
pub fn train(
    cfg: &RunConfig,
    rules: &SyntheticRules,
    train_set: &DatasetFile,
    valid_set: &DatasetFile,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut model = Model::init(cfg.model.clone(), rules.n_graphemes(), rules.vocab.len(), tc.seed)?;
    model.encoder.dropout = tc.dropout;
    let mut adam = Adam::new(&model.params);
    let lengths: Vec<usize> = train_set.records.iter().map(|r| r.graphemes.len()).collect();
    let shuffle = Rng::new(tc.seed, Purpose::Shuffle);
    let dropout = Rng::new(tc.seed, Purpose::Dropout);
    let mut masks = MaskCache::default();
    let mut losses = Vec::with_capacity(tc.steps);
    let mut validation = Vec::new();
    let mut infeasible_total = 0;
    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let n_params = model.params.len();
    writeln!(
        log,
        "event=start params={} sentences={} steps={} seed={}",
        model.params.num_values(),
        train_set.records.len(),
        tc.steps,
        tc.seed
    )?;
    if train_set.records.is_empty() && tc.steps > 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    for step in 0..tc.steps {
        if queue.is_empty() {
            let mut order: Vec<usize> = (0..lengths.len()).collect();
            shuffle.fork(epoch).shuffle(&mut order);
            queue = make_batches(&lengths, &order, cfg.model.upsample, tc.batch_frames);
            queue.reverse();
            epoch += 1;
        }
        let batch = queue.pop().expect("non-empty queue");
        let mut sum: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        let mut loss = 0.0;
        for (j, &i) in batch.iter().enumerate() {
            let rec = &train_set.records[i];
            let ms = masks.get(&cfg.model, rec.graphemes.len(), tc.context_mode)?;
            let drop = (tc.dropout > 0.0).then(|| dropout.fork(((step as u64) << 20) | j as u64));
            let s = sentence_loss(&model, &rec.graphemes, &rec.labels, ms, drop, tc.infeasible_clamp)?;
            if !s.loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {} at step {step} on sentence {i}", s.loss)));
            }
            infeasible_total += s.infeasible;
            loss += s.loss;
            for (acc, g) in sum.iter_mut().zip(s.grads) {
                if let Some(g) = g {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        let mut norm2 = 0.0;
        for g in &mut sum {
            for v in g.iter_mut() {
                *v *= scale;
                norm2 += *v * *v;
            }
        }
        let norm = norm2.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at step {step}")));
        }
        if norm > tc.grad_clip {
            let c = tc.grad_clip / norm;
            sum.iter_mut().flatten().for_each(|v| *v *= c);
        }
        debug_assert_eq!(sum.len(), n_params);
        let lr = tc.learning_rate(step);
        adam.step(&mut model.params, &sum, lr, tc);
        losses.push(StepLog { step: step + 1, loss, lr, grad_norm: norm });
        if tc.log_every > 0 && (step + 1) % tc.log_every == 0 {
            let window = &losses[losses.len().saturating_sub(tc.log_every)..];
            let mean = window.iter().map(|l| l.loss).sum::<f64>() / window.len() as f64;
            writeln!(log, "step={} loss={mean:.5} lr={lr:.3e} grad_norm={norm:.4}", step + 1)?;
        }
        let last = step + 1 == tc.steps;
        if (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) || last {
            let cer = validation_cer(&model, valid_set, tc)?;
            writeln!(log, "step={} valid_cer_pnp={cer:.4}", step + 1)?;
            validation.push((step + 1, cer));
        }
    }
    writeln!(log, "event=done infeasible={infeasible_total}")?;
    Ok(TrainOutcome { model, losses, validation, infeasible: infeasible_total })
}

fn validation_cer(model: &Model<f64>, valid: &DatasetFile, tc: &TrainConfig) -> Result<f64> {
    let n = if tc.eval_sentences == 0 { valid.records.len() } else { tc.eval_sentences.min(valid.records.len()) };
    let subset = DatasetFile { header: valid.header.clone(), records: valid.records[..n].to_vec() };
    Ok(decode_dataset(model, &subset, tc.context_mode)?.cer_pnp)
}

pub fn hypotheses<T: Scalar>(model: &Model<T>, data: &DatasetFile, mode: ContextMode) -> Result<Vec<Vec<usize>>> {
    data.records.iter().map(|r| Ok(offline_decode(model, &r.graphemes, mode)?.symbols)).collect()
}

/// CER/SER in all three views, decoding with the masks of `mode`.
pub fn decode_dataset<T: Scalar>(model: &Model<T>, data: &DatasetFile, mode: ContextMode) -> Result<EvalReport> {
    let hyps = hypotheses(model, data, mode)?;
    let refs: Vec<Vec<usize>> = data.records.iter().map(|r| r.labels.clone()).collect();
    let vocab = LabelVocab::new(&crate::corpus::PHONEMES)?;
    evaluate(&vocab, &hyps, &refs)
}

/// Scores `hyps` against the dataset and attaches the per-offset profile
/// over ambiguous tokens.
pub fn report_with_profile(
    rules: &SyntheticRules,
    data: &DatasetFile,
    hyps: &[Vec<usize>],
    chunk_size: usize,
    ambiguous_only: bool,
) -> Result<EvalReport> {
    let refs: Vec<Vec<usize>> = data.records.iter().map(|r| r.labels.clone()).collect();
    let mut report = evaluate(&rules.vocab, hyps, &refs)?;
    let labeled: Vec<Labeled> = data.records.iter().map(|r| rules.label(&r.graphemes)).collect::<Result<_>>()?;
    report.profile = Some(boundary_error_profile(hyps, &labeled, chunk_size, ambiguous_only)?);
    Ok(report)
}

pub fn save_model(path: &Path, cfg: &RunConfig, model: &Model<f64>) -> Result<()> {
    checkpoint::save(path, &cfg.to_toml(), &model.params)
}

/// Rebuilds the model described by a checkpoint's embedded config.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model<f64>)> {
    let ck = checkpoint::load(path)?;
    let cfg = RunConfig::from_toml(&ck.meta)?;
    let embed = ck.params.find("embed").ok_or_else(|| Error::Format("checkpoint lacks embed".into()))?;
    let head = ck.params.find("head.b").ok_or_else(|| Error::Format("checkpoint lacks head.b".into()))?;
    let n_graphemes = ck.params.get(embed).rows();
    let n_labels = ck.params.get(head).cols();
    let mut model = Model::init(cfg.model.clone(), n_graphemes, n_labels, 0)?;
    model.params.load_from(&ck.params)?;
    model.encoder.dropout = cfg.train.dropout;
    Ok((cfg, model))
}

/// `base` resolved against `dir` unless absolute.
pub fn resolve(dir: &Path, base: &str) -> PathBuf {
    let p = Path::new(base);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, Split};

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = StreamingConfig {
            chunk_size: 2,
            past_context: 2,
            min_lookahead: 1,
            upsample: 3,
            n_layers: 2,
            intermediate_layers: vec![1],
            d_model: 8,
            n_heads: 2,
            conv_kernel: 3,
            ff_dim: 8,
            rel_pos_clip: 4,
            ..Default::default()
        };
        cfg.train.steps = 6;
        cfg.train.warmup_steps = 2;
        cfg.train.batch_frames = 60;
        cfg.train.log_every = 2;
        cfg.train.eval_every = 3;
        cfg.train.eval_sentences = 5;
        cfg
    }

    fn data() -> (SyntheticRules, DatasetFile, DatasetFile) {
        let rules = SyntheticRules::new(1, 1).unwrap();
        let tr = generate(&rules, 1, Split::Train, 20, 4..=8).unwrap();
        let va = generate(&rules, 1, Split::Valid, 5, 4..=8).unwrap();
        (rules, tr, va)
    }

    #[test]
    fn config_round_trips_as_flat_toml() {
        let cfg = tiny();
        let text = cfg.to_toml();
        assert!(text.contains("chunk_size = 2"));
        assert!(!text.lines().any(|l| l.starts_with('[')), "{text}");
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("n_heads = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_warms_up_then_decays_to_the_end_value() {
        let tc = TrainConfig { steps: 101, warmup_steps: 10, lr_start: 1e-4, lr_end: 1e-5, ..Default::default() };
        assert!((tc.learning_rate(0) - 1e-5).abs() < 1e-18);
        assert!((tc.learning_rate(9) - 1e-4).abs() < 1e-18);
        assert!((tc.learning_rate(100) - 1e-5).abs() < 1e-15);
        let mid = tc.learning_rate(55);
        assert!((mid - (1e-4f64 * 1e-5).sqrt()).abs() < 1e-12);
        for s in 10..100 {
            assert!(tc.learning_rate(s + 1) < tc.learning_rate(s));
        }
    }

    #[test]
    fn batches_respect_the_frame_cap() {
        let lengths = [4, 5, 6, 30, 2];
        let order = [0, 1, 2, 3, 4];
        let b = make_batches(&lengths, &order, 2, 20);
        assert_eq!(b, vec![vec![0, 1], vec![2], vec![3], vec![4]]);
    }

    #[test]
    fn zero_steps_keeps_initial_parameters() {
        let (rules, tr, va) = data();
        let mut cfg = tiny();
        cfg.train.steps = 0;
        let out = train(&cfg, &rules, &tr, &va, &mut Vec::new()).unwrap();
        let init = Model::init(cfg.model.clone(), 40, rules.vocab.len(), cfg.train.seed).unwrap();
        assert_eq!(out.model.params, init.params);
    }

    #[test]
    fn training_is_deterministic_and_logs_key_values() {
        let (rules, tr, va) = data();
        let cfg = tiny();
        let mut log = Vec::new();
        let a = train(&cfg, &rules, &tr, &va, &mut log).unwrap();
        let b = train(&cfg, &rules, &tr, &va, &mut Vec::new()).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.losses, b.losses);
        let text = String::from_utf8(log).unwrap();
        assert!(text.lines().all(|l| l.split(' ').all(|kv| kv.contains('='))), "{text}");
        assert!(text.contains("valid_cer_pnp="));
        assert_eq!(a.validation.len(), 2);
    }

    #[test]
    fn loss_goes_down_on_a_tiny_set() {
        let (rules, tr, va) = data();
        let mut cfg = tiny();
        cfg.train.steps = 40;
        cfg.train.dropout = 0.0;
        cfg.train.lr_start = 3e-3;
        cfg.train.lr_end = 1e-3;
        let out = train(&cfg, &rules, &tr, &va, &mut Vec::new()).unwrap();
        let first: f64 = out.losses[..5].iter().map(|l| l.loss).sum();
        let last: f64 = out.losses[35..].iter().map(|l| l.loss).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn infeasible_targets_are_clamped_and_counted() {
        let (rules, _, _) = data();
        let cfg = tiny();
        let model = Model::init(cfg.model.clone(), 40, rules.vocab.len(), 1).unwrap();
        let masks = layer_masks(&cfg.model, 1, ContextMode::Chunked).unwrap();
        let s = sentence_loss(&model, &[3], &[1, 2, 1, 2], &masks, None, 1e4).unwrap();
        assert_eq!(s.infeasible, 2);
        assert!((s.loss - 1e4 * (1.0 + cfg.model.intermediate_weight)).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_restores_the_model() {
        let (rules, tr, va) = data();
        let cfg = tiny();
        let out = train(&cfg, &rules, &tr, &va, &mut Vec::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&path, &cfg, &out.model).unwrap();
        let (cfg2, m2) = load_model(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(m2.params, out.model.params);
    }
}
