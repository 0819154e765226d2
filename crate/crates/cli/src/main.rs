use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use streampnp::corpus::{generate, DatasetFile, Split, SyntheticRules};
use streampnp::ctc::LabelVocab;
use streampnp::encoder::Model;
use streampnp::engine::{bench_streams, StreamState};
use streampnp::masking::{
    build_token_mask, effective_lookahead, receptive_field_table, render_grid, ContextMode, LookaheadMode,
};
use streampnp::metrics::{evaluate, EvalReport};
use streampnp::numerics::rng::{Purpose, Rng};
use streampnp::train::{self, load_model, report_with_profile, save_model, RunConfig};
use streampnp::{Error, PastAnchor};

#[derive(Parser)]
#[command(name = "streampnp", version, about = "Streaming grapheme-to-phoneme-and-prosody conversion")]
struct Cli {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/valid/test files of the synthetic task.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a key=value log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, or a hypothesis file against a reference file.
    Eval(EvalArgs),
    /// Stream tokens from stdin through a checkpoint.
    Stream(StreamArgs),
    /// Render attention masks and the receptive-field table.
    AnalyzeMask(MaskArgs),
    /// Measure start latency.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Training sentences.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_valid: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    rules_seed: Option<u64>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    valid_data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeMode {
    /// Chunk-aware masks (identical to token-by-token streaming).
    Streaming,
    /// Unrestricted attention.
    Full,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset to decode (defaults to the configured test set).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "streaming")]
    mode: DecodeMode,
    /// Hypotheses, one sentence of space-separated symbols per line.
    #[arg(long, requires = "refs", conflicts_with = "checkpoint")]
    hyps: Option<PathBuf>,
    #[arg(long, requires = "hyps")]
    refs: Option<PathBuf>,
    /// Name for the table row.
    #[arg(long, default_value = "model")]
    name: String,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tokens arrive as u32 little-endian length + UTF-8 bytes.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    past: Option<usize>,
    #[arg(long)]
    lookahead: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, default_value_t = 12)]
    tokens: usize,
    /// Count past context back from each token instead of the chunk start.
    #[arg(long)]
    token_anchor: bool,
    /// Per-layer window of the regular look-ahead baseline.
    #[arg(long, default_value_t = 1)]
    regular_window: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialized model of the configured size otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seconds per upstream token.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[arg(long, default_value_t = 20)]
    streams: usize,
    #[arg(long, default_value_t = 24)]
    len: usize,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(cli)?;
    let d = &mut cfg.data;
    d.n_train = a.n.unwrap_or(d.n_train);
    d.n_valid = a.n_valid.unwrap_or(d.n_valid);
    d.n_test = a.n_test.unwrap_or(d.n_test);
    d.radius = a.radius.unwrap_or(d.radius);
    d.rules_seed = a.rules_seed.unwrap_or(d.rules_seed);
    d.len_min = a.len_min.unwrap_or(d.len_min);
    d.len_max = a.len_max.unwrap_or(d.len_max);
    let rules = SyntheticRules::new(d.rules_seed, d.radius)?;
    create_out(&cli.out)?;
    let seed = cfg.train.seed;
    for (split, n) in [(Split::Train, d.n_train), (Split::Valid, d.n_valid), (Split::Test, d.n_test)] {
        let file = generate(&rules, seed, split, n, d.len_min..=d.len_max)?;
        let path = cli.out.join(format!("{}.txt", split.name()));
        file.save(&path)?;
        println!("split={} sentences={n} path={}", split.name(), path.display());
    }
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<(DatasetFile, SyntheticRules)> {
    let d = DatasetFile::load(path).with_context(|| format!("reading {}", path.display()))?;
    let rules = d.rules()?;
    Ok((d, rules))
}

fn run_train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let cwd = PathBuf::from(".");
    let train_path = a.train_data.clone().unwrap_or_else(|| train::resolve(&cwd, &cfg.train.train_data));
    let valid_path = a.valid_data.clone().unwrap_or_else(|| train::resolve(&cwd, &cfg.train.valid_data));
    let (train_set, rules) = load_data(&train_path)?;
    let (valid_set, valid_rules) = load_data(&valid_path)?;
    if rules != valid_rules {
        bail!(Error::Input("training and validation files come from different rules".into()));
    }
    cfg.data.rules_seed = rules.seed;
    cfg.data.radius = rules.radius;
    create_out(&cli.out)?;
    let log_path = cli.out.join("train.log");
    let mut log = Tee { file: std::fs::File::create(&log_path)? };
    let outcome = train::train(&cfg, &rules, &train_set, &valid_set, &mut log)?;
    let ck = train::resolve(&cli.out, &cfg.train.checkpoint);
    save_model(&ck, &cfg, &outcome.model)?;
    println!("checkpoint={} log={}", ck.display(), log_path.display());
    Ok(())
}

/// Writes log lines to a file and to stdout.
struct Tee {
    file: std::fs::File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        std::io::stdout().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()?;
        std::io::stdout().flush()
    }
}

fn read_symbol_file(path: &Path, vocab: &LabelVocab) -> anyhow::Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|s| {
                    vocab.id(s).filter(|&id| id != LabelVocab::BLANK).ok_or_else(|| {
                        anyhow::Error::new(Error::Input(format!("{}:{}: unknown symbol {s:?}", path.display(), i + 1)))
                    })
                })
                .collect()
        })
        .collect()
}

fn write_report(cli: &Cli, report: &EvalReport, name: &str) -> anyhow::Result<()> {
    create_out(&cli.out)?;
    std::fs::write(cli.out.join("eval.txt"), report.to_text(name))?;
    let table = format!("{}\n{}\n", EvalReport::TABLE_HEADER, report.table_row(name));
    std::fs::write(cli.out.join("eval.tsv"), &table)?;
    print!("{}", report.to_text(name));
    print!("{table}");
    Ok(())
}

fn run_eval(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    if let (Some(h), Some(r)) = (&a.hyps, &a.refs) {
        let vocab = LabelVocab::new(&streampnp::corpus::PHONEMES)?;
        let hyps = read_symbol_file(h, &vocab)?;
        let refs = read_symbol_file(r, &vocab)?;
        let report = evaluate(&vocab, &hyps, &refs)?;
        return write_report(cli, &report, &a.name);
    }
    let Some(ck) = &a.checkpoint else {
        bail!(Error::Input("eval needs --checkpoint or --hyps/--refs".into()));
    };
    let (cfg, model) = load_model(ck)?;
    let data_path = a.data.clone().unwrap_or_else(|| PathBuf::from(&cfg.train.test_data));
    let (data, rules) = load_data(&data_path)?;
    let mode = match a.mode {
        DecodeMode::Streaming => ContextMode::Chunked,
        DecodeMode::Full => ContextMode::Full,
    };
    let model = model.cast::<f32>();
    let hyps = train::hypotheses(&model, &data, mode)?;
    let report = report_with_profile(&rules, &data, &hyps, cfg.model.chunk_size, true)?;
    write_report(cli, &report, &a.name)
}

fn read_binary_tokens(mut r: impl Read) -> anyhow::Result<Vec<String>> {
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(out),
            Err(e) => return Err(e.into()),
        }
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut buf).context("truncated token")?;
        out.push(String::from_utf8(buf).map_err(|e| Error::Input(format!("token is not UTF-8: {e}")))?);
    }
}

fn write_symbols(out: &mut impl Write, vocab: &LabelVocab, arrived: usize, symbols: &[usize]) -> std::io::Result<()> {
    for &s in symbols {
        writeln!(out, "{arrived}\t{}", vocab.symbol(s))?;
    }
    out.flush()
}

fn run_stream(a: &StreamArgs) -> anyhow::Result<()> {
    let (cfg, model) = load_model(&a.checkpoint)?;
    let rules = SyntheticRules::new(cfg.data.rules_seed, cfg.data.radius)?;
    let model = model.cast::<f32>();
    let tokens: Vec<String> = if a.binary {
        read_binary_tokens(std::io::stdin().lock())?
    } else {
        let mut v = Vec::new();
        for line in std::io::stdin().lock().lines() {
            let line = line?;
            v.extend(line.split_whitespace().map(str::to_string));
        }
        v
    };
    let mut state = StreamState::new(&model);
    let mut out = std::io::stdout().lock();
    for tok in &tokens {
        for id in rules.encode(tok)? {
            let symbols = state.push_token(id)?;
            write_symbols(&mut out, &rules.vocab, state.arrived(), &symbols)?;
        }
    }
    let symbols = state.close()?;
    write_symbols(&mut out, &rules.vocab, state.arrived(), &symbols)?;
    Ok(())
}

fn run_analyze(cli: &Cli, a: &MaskArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(cli)?.model;
    cfg.chunk_size = a.chunk.unwrap_or(cfg.chunk_size);
    cfg.past_context = a.past.unwrap_or(cfg.past_context);
    cfg.min_lookahead = a.lookahead.unwrap_or(cfg.min_lookahead);
    if let Some(l) = a.layers {
        cfg.n_layers = l;
        cfg.intermediate_layers.retain(|&x| x < l);
    }
    if a.token_anchor {
        cfg.past_anchor = PastAnchor::Token;
    }
    cfg.validate()?;
    let mut text = String::new();
    text.push_str(&format!(
        "# C={} P={} M={} L={} tokens={}\n",
        cfg.chunk_size, cfg.past_context, cfg.min_lookahead, cfg.n_layers, a.tokens
    ));
    for layer in 1..=cfg.n_layers.min(2) {
        let m = build_token_mask(a.tokens, &cfg, layer)?;
        text.push_str(&format!("# layer {layer}{}\n", if layer == 2 { " (and above)" } else { "" }));
        text.push_str(&render_grid(&m, Some(cfg.chunk_size)));
    }
    let chunked = effective_lookahead(&cfg, a.tokens.max(cfg.chunk_size), LookaheadMode::ChunkAware)?;
    let regular =
        effective_lookahead(&cfg, a.tokens.max(cfg.chunk_size), LookaheadMode::Regular { window: a.regular_window })?;
    let table = receptive_field_table(&[&chunked, &regular], cfg.chunk_size);
    create_out(&cli.out)?;
    std::fs::write(cli.out.join("mask.txt"), &text)?;
    std::fs::write(cli.out.join("receptive_field.tsv"), &table)?;
    print!("{text}{table}");
    Ok(())
}

fn run_bench(cli: &Cli, a: &BenchArgs) -> anyhow::Result<()> {
    let (cfg, model) = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let cfg = load_config(cli)?;
            let rules = SyntheticRules::new(cfg.data.rules_seed, cfg.data.radius)?;
            let m = Model::init(cfg.model.clone(), rules.n_graphemes(), rules.vocab.len(), cfg.train.seed)?;
            (cfg, m)
        }
    };
    let model = model.cast::<f32>();
    let n_graphemes = model.encoder.n_graphemes;
    let rng = Rng::new(cli.seed.unwrap_or(cfg.train.seed), Purpose::Test);
    let streams: Vec<Vec<usize>> = (0..a.streams)
        .map(|i| {
            let mut r = rng.fork(i as u64);
            (0..a.len).map(|_| r.below(n_graphemes)).collect()
        })
        .collect();
    let s = bench_streams(&model, &streams, a.tau)?;
    println!(
        "C={} M={} streams={} tokens_waited={} tau={} mean_first_chunk_s={:.6} mean_chunk_s={:.6} modeled_start_s={:.6}",
        cfg.model.chunk_size,
        cfg.model.min_lookahead,
        s.streams,
        s.tokens_waited,
        s.tau,
        s.mean_first_chunk,
        s.mean_chunk,
        s.modeled_start
    );
    println!("start={}tau+{:.4}", s.tokens_waited, s.mean_first_chunk);
    Ok(())
}

fn category(e: &anyhow::Error) -> (&'static str, u8) {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => ("config", 2),
        Some(Error::Input(_)) => ("input", 3),
        Some(Error::State(_)) => ("state", 4),
        Some(Error::Format(_)) => ("format", 5),
        Some(Error::Io(_)) => ("io", 6),
        Some(Error::NonFinite(_)) => ("numeric", 7),
        Some(Error::Dimension(_)) | Some(Error::Shape(_)) | Some(Error::Contract(_)) => ("internal", 8),
        None if e.chain().any(|c| c.is::<std::io::Error>()) => ("io", 6),
        None => ("error", 1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&cli, a),
        Command::Train(a) => run_train(&cli, a),
        Command::Eval(a) => run_eval(&cli, a),
        Command::Stream(a) => run_stream(a),
        Command::AnalyzeMask(a) => run_analyze(&cli, a),
        Command::Bench(a) => run_bench(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (name, code) = category(&e);
            eprintln!("error[{name}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
