//! `ropelab` command line: experiment runners and mask tooling.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::{load_weights, AttentionStack};
use crate::diagnostics::{
    self, is_nondecreasing, length_sweep, shift_sweep, write_csv, CsvRecord, DiffConfig,
    DEFAULT_D_MODEL, DEFAULT_DELTA1_LIST, DEFAULT_DELTA2, DEFAULT_HEADS, DEFAULT_LAYERS,
    DEFAULT_LENGTHS, DEFAULT_NUM_SEQUENCES, DEFAULT_SEQ_LEN,
};
use crate::mask::{
    compile, full_causal_pairs, interleave_chunks, pack_documents, BatchLayout, ChunkPolicy,
    DocSpec, LayoutOptions, LayoutSpec, MaskScheme, TokenRole, DEFAULT_MAX_CHUNKS,
};
use crate::precision::PrecisionPolicy;
use crate::rope::PositionShift;
use crate::selftest;

#[derive(Debug, Parser)]
#[command(name = "ropelab", version, about = "RoPE precision lab and anchor-attention mask compiler")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mean D against a fixed delta2 for a list of delta1 shifts.
    ShiftSweep(ShiftSweepArgs),
    /// Per-token (key column) decomposition of D.
    PerToken(PerTokenArgs),
    /// Mean first-token logit difference as sequence length grows.
    LengthSweep(LengthSweepArgs),
    /// Compile a layout into an attention plan (JSON) and optionally render it.
    Mask(MaskArgs),
    /// Attended-pair counts and ratios against full causal attention.
    Cost(CostArgs),
    /// Pack documents into windows.
    Pack(PackArgs),
    /// Split documents into chunks and interleave them.
    Interleave(InterleaveArgs),
    /// Exhaustive bf16 codec check and mask enumeration oracle.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Seed for weights and inputs [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Policies to run: exact, f32, fa2-bf16 (comma separated or repeated).
    #[arg(long, value_delimiter = ',')]
    pub policy: Option<Vec<PrecisionPolicy>>,
    /// Attention layers [default: 2].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Heads per layer [default: 4].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Model width [default: 256].
    #[arg(long = "d-model")]
    pub d_model: Option<usize>,
    /// Sequence length [default: 1024].
    #[arg(short = 'T', long = "seq-len")]
    pub seq_len: Option<usize>,
    /// Seeded input sequences to average over [default: 10].
    #[arg(long = "num-sequences")]
    pub num_sequences: Option<usize>,
    /// RoPE base [default: 10000].
    #[arg(long = "rope-base")]
    pub rope_base: Option<f64>,
    /// Tensor container with exported q/k projections (replaces random init).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Reference shift [default: 16].
    #[arg(long)]
    pub delta2: Option<u64>,
    /// CSV output path (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON mirror of the results, including per-token vectors.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ShiftSweepArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Shifts to compare against delta2 [default: 0,2,...,22,50,...,2000].
    #[arg(long, value_delimiter = ',')]
    pub delta1: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct PerTokenArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long, value_delimiter = ',')]
    pub delta1: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct LengthSweepArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long, value_delimiter = ',')]
    pub delta1: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Drop lengths above this value.
    #[arg(long = "max-T", alias = "max-t")]
    pub max_t: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct LayoutArgs {
    /// Layout request JSON: {"window", "docs", "scheme", "seed"}.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Document lengths, used when no layout file is given.
    #[arg(long, value_delimiter = ',')]
    pub docs: Option<Vec<usize>>,
    #[arg(long)]
    pub scheme: Option<MaskScheme>,
    #[arg(long, short = 'T')]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "max-chunks")]
    pub max_chunks: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub layout: LayoutArgs,
    /// Print an ASCII picture of the mask to stdout.
    #[arg(long)]
    pub render: bool,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub layout: LayoutArgs,
    /// Pack the documents into windows of this size.
    #[arg(long)]
    pub pack: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[command(flatten)]
    pub layout: LayoutArgs,
}

#[derive(Debug, Args)]
pub struct InterleaveArgs {
    #[command(flatten)]
    pub layout: LayoutArgs,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 500)]
    pub layouts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Values an experiment config file may set. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub policy: Option<Vec<String>>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_model: Option<usize>,
    #[serde(alias = "T")]
    pub seq_len: Option<usize>,
    pub num_sequences: Option<usize>,
    pub rope_base: Option<f64>,
    pub weights: Option<PathBuf>,
    pub delta1: Option<Vec<u64>>,
    pub delta2: Option<u64>,
    pub lengths: Option<Vec<usize>>,
    pub max_t: Option<usize>,
    pub out: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Failure classes that map onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Fully resolved experiment settings: flag, then config file, then default.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub policies: Vec<PrecisionPolicy>,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub num_sequences: usize,
    pub rope_base: Option<f64>,
    pub weights: Option<PathBuf>,
    pub delta1: Option<Vec<u64>>,
    pub delta2: u64,
    pub lengths: Option<Vec<usize>>,
    pub max_t: Option<usize>,
    pub out: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub threads: Option<usize>,
}

fn read_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

impl Settings {
    pub fn resolve(
        args: &ExperimentArgs,
        delta1: Option<Vec<u64>>,
        lengths: Option<Vec<usize>>,
        max_t: Option<usize>,
    ) -> Result<Settings, CliError> {
        let cfg = match &args.config {
            Some(p) => read_config(p)?,
            None => ExperimentConfig::default(),
        };
        let policies = match (&args.policy, &cfg.policy) {
            (Some(p), _) => p.clone(),
            (None, Some(names)) => names
                .iter()
                .map(|n| n.parse::<PrecisionPolicy>().map_err(|e| usage(e.to_string())))
                .collect::<Result<_, _>>()?,
            (None, None) => PrecisionPolicy::PRESETS.iter().map(|(_, p)| *p).collect(),
        };
        if policies.is_empty() {
            return Err(usage("at least one policy is required"));
        }
        let s = Settings {
            seed: args.seed.or(cfg.seed).unwrap_or(0),
            policies,
            layers: args.layers.or(cfg.layers).unwrap_or(DEFAULT_LAYERS),
            heads: args.heads.or(cfg.heads).unwrap_or(DEFAULT_HEADS),
            d_model: args.d_model.or(cfg.d_model).unwrap_or(DEFAULT_D_MODEL),
            seq_len: args.seq_len.or(cfg.seq_len).unwrap_or(DEFAULT_SEQ_LEN),
            num_sequences: args.num_sequences.or(cfg.num_sequences).unwrap_or(DEFAULT_NUM_SEQUENCES),
            rope_base: args.rope_base.or(cfg.rope_base),
            weights: args.weights.clone().or(cfg.weights),
            delta1: delta1.or(cfg.delta1),
            delta2: args.delta2.or(cfg.delta2).unwrap_or(DEFAULT_DELTA2),
            lengths: lengths.or(cfg.lengths),
            max_t: max_t.or(cfg.max_t),
            out: args.out.clone().or(cfg.out),
            json: args.json.clone().or(cfg.json),
            threads: args.threads.or(cfg.threads),
        };
        if s.seq_len == 0 {
            return Err(usage("--seq-len must be at least 1"));
        }
        if s.num_sequences == 0 {
            return Err(usage("--num-sequences must be at least 1"));
        }
        if s.threads == Some(0) {
            return Err(usage("--threads must be at least 1"));
        }
        Ok(s)
    }

    fn stack(&self) -> anyhow::Result<AttentionStack> {
        let stack = match &self.weights {
            Some(p) => load_weights(p).with_context(|| format!("loading {}", p.display()))?,
            None => AttentionStack::init_random(self.layers, self.heads, self.d_model, self.seed)?,
        };
        Ok(match self.rope_base {
            Some(b) => stack.with_rope_base(b)?,
            None => stack,
        })
    }
}

/// Parse `argv` and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}\n\nRun `ropelab --help` for usage."),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::ShiftSweep(a) => {
            let s = Settings::resolve(&a.common, a.delta1, None, None)?;
            with_threads(s.threads, || cmd_shift_sweep(&s))
        }
        Command::PerToken(a) => {
            let s = Settings::resolve(&a.common, a.delta1, None, None)?;
            with_threads(s.threads, || cmd_per_token(&s))
        }
        Command::LengthSweep(a) => {
            let s = Settings::resolve(&a.common, a.delta1, a.lengths, a.max_t)?;
            with_threads(s.threads, || cmd_length_sweep(&s))
        }
        Command::Mask(a) => cmd_mask(&a),
        Command::Cost(a) => cmd_cost(&a),
        Command::Pack(a) => cmd_pack(&a),
        Command::Interleave(a) => cmd_interleave(&a),
        Command::Selftest(a) => cmd_selftest(&a),
    }
}

fn with_threads(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<(), CliError> + Send,
) -> Result<(), CliError> {
    match threads {
        None => f(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Runtime(e.into()))?;
            pool.install(f)
        }
    }
}

fn open_out(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> anyhow::Result<()> {
    let mut w = open_out(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn emit_csv(path: Option<&Path>, records: &[CsvRecord]) -> anyhow::Result<()> {
    let mut w = open_out(path)?;
    write_csv(&mut w, records)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepJson<'a, R> {
    command: &'a str,
    layers: usize,
    heads: usize,
    d_model: usize,
    num_sequences: usize,
    rows: &'a [R],
}

fn run_shift_rows(s: &Settings, delta1s: &[u64]) -> anyhow::Result<Vec<diagnostics::ShiftSweepRow>> {
    let stack = s.stack()?;
    let mut rows = Vec::new();
    for &policy in &s.policies {
        let cfg = DiffConfig::new(0, s.delta2, s.seq_len, policy, s.num_sequences, s.seed)?;
        rows.extend(shift_sweep(&stack, &cfg, delta1s)?);
    }
    Ok(rows)
}

fn sweep_json<'a, R>(command: &'a str, s: &Settings, stack_dims: (usize, usize, usize), rows: &'a [R]) -> SweepJson<'a, R> {
    SweepJson {
        command,
        layers: stack_dims.0,
        heads: stack_dims.1,
        d_model: stack_dims.2,
        num_sequences: s.num_sequences,
        rows,
    }
}

fn dims(s: &Settings) -> (usize, usize, usize) {
    (s.layers, s.heads, s.d_model)
}

pub fn cmd_shift_sweep(s: &Settings) -> Result<(), CliError> {
    let delta1s = s.delta1.clone().unwrap_or_else(|| DEFAULT_DELTA1_LIST.to_vec());
    let rows = run_shift_rows(s, &delta1s)?;
    let records: Vec<CsvRecord> = rows.iter().map(|r| r.csv_record()).collect();
    emit_csv(s.out.as_deref(), &records)?;
    if let Some(j) = &s.json {
        write_json(Some(j), &sweep_json("shift-sweep", s, dims(s), &rows))?;
    }
    let summary: Vec<String> = s
        .policies
        .iter()
        .map(|p| {
            let name = p.to_string();
            let max = rows
                .iter()
                .filter(|r| r.policy == name)
                .map(|r| r.mean_d)
                .fold(0.0f64, f64::max);
            format!("{name}={max:e}")
        })
        .collect();
    eprintln!("max D per policy: {}", summary.join(", "));
    Ok(())
}

pub fn cmd_per_token(s: &Settings) -> Result<(), CliError> {
    let delta1s = s.delta1.clone().unwrap_or_else(|| vec![0]);
    let rows = run_shift_rows(s, &delta1s)?;
    let records: Vec<CsvRecord> = rows.iter().flat_map(|r| r.per_token_records()).collect();
    emit_csv(s.out.as_deref(), &records)?;
    if let Some(j) = &s.json {
        write_json(Some(j), &sweep_json("per-token", s, dims(s), &rows))?;
    }
    for r in &rows {
        let first = r.mean_per_token.first().copied().unwrap_or(0.0);
        eprintln!(
            "{} delta1={} delta2={}: D={:e}, first-token share={:.3}",
            r.policy,
            r.delta1,
            r.delta2,
            r.mean_d,
            if r.mean_d > 0.0 { first / r.mean_d } else { 0.0 }
        );
    }
    Ok(())
}

pub fn cmd_length_sweep(s: &Settings) -> Result<(), CliError> {
    let mut lengths = s.lengths.clone().unwrap_or_else(|| DEFAULT_LENGTHS.to_vec());
    if let Some(m) = s.max_t {
        lengths.retain(|&t| t <= m);
    }
    if lengths.is_empty() {
        return Err(usage("no sequence lengths left after --max-T"));
    }
    if lengths.windows(2).any(|w| w[0] > w[1]) || lengths[0] == 0 {
        return Err(usage("--lengths must be positive and ascending"));
    }
    let delta1 = match s.delta1.as_deref() {
        None => 0,
        Some([d]) => *d,
        Some(_) => return Err(usage("length-sweep takes a single --delta1")),
    };
    let stack = s.stack()?;
    let mut rows = Vec::new();
    for policy in &s.policies {
        let r = length_sweep(
            &stack,
            &lengths,
            PositionShift(delta1),
            PositionShift(s.delta2),
            policy,
            s.num_sequences,
            s.seed,
        )
        .map_err(anyhow::Error::from)?;
        eprintln!(
            "{policy}: D_logit {} with length",
            if is_nondecreasing(&r) { "non-decreasing" } else { "not monotone" }
        );
        rows.extend(r);
    }
    let records: Vec<CsvRecord> = rows.iter().map(|r| r.csv_record()).collect();
    emit_csv(s.out.as_deref(), &records)?;
    if let Some(j) = &s.json {
        write_json(Some(j), &sweep_json("length-sweep", s, dims(s), &rows))?;
    }
    Ok(())
}

/// Build a layout request from `--layout` or from `--docs`, flags overriding.
fn layout_spec(a: &LayoutArgs, default_scheme: MaskScheme) -> Result<LayoutSpec, CliError> {
    let mut spec = match (&a.layout, &a.docs) {
        (Some(p), _) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read layout {}: {e}", p.display())))?;
            serde_json::from_str::<LayoutSpec>(&text)
                .map_err(|e| usage(format!("invalid layout {}: {e}", p.display())))?
        }
        (None, Some(lengths)) => LayoutSpec {
            window: 0,
            docs: lengths
                .iter()
                .enumerate()
                .map(|(i, &len)| DocSpec::new(i as u32, len))
                .collect(),
            scheme: default_scheme,
            seed: 0,
            max_chunks: None,
        },
        (None, None) => return Err(usage("either --layout or --docs is required")),
    };
    if let Some(s) = a.scheme {
        spec.scheme = s;
    }
    if let Some(w) = a.window {
        spec.window = w;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if a.max_chunks.is_some() {
        spec.max_chunks = a.max_chunks;
    }
    if spec.window == 0 {
        let opts = LayoutOptions::for_scheme(spec.scheme);
        spec.window = spec.docs.iter().map(|d| d.len + opts.tags as usize).sum::<usize>() + opts.anchor as usize;
    }
    Ok(spec)
}

pub fn cmd_mask(a: &MaskArgs) -> Result<(), CliError> {
    let spec = layout_spec(&a.layout, MaskScheme::Anchor)?;
    let layout = spec.build().map_err(anyhow::Error::from)?;
    let plan = compile(&layout, spec.scheme).map_err(anyhow::Error::from)?;
    if a.render {
        let roles: String = layout
            .tokens()
            .iter()
            .map(|t| match t.role {
                TokenRole::Anchor => 'A',
                TokenRole::Tag => 'T',
                TokenRole::Doc => 'D',
            })
            .collect();
        let mut out = io::stdout().lock();
        write!(out, "{}", plan.render_ascii()).map_err(anyhow::Error::from)?;
        eprintln!("roles: {roles}");
        eprintln!("position ids: {:?}", plan.position_ids());
        if let Some(p) = &a.layout.out {
            write_json(Some(p), &plan.to_export())?;
        }
    } else {
        write_json(a.layout.out.as_deref(), &plan.to_export())?;
    }
    eprintln!("{}: T={} pair_count={}", spec.scheme, plan.len(), plan.pair_count());
    Ok(())
}

/// Pair totals for one scheme over one or more windows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub scheme: MaskScheme,
    pub windows: usize,
    pub tokens: usize,
    pub pair_count: u64,
    pub full_causal_pairs: u64,
    pub ratio: f64,
}

fn window_pieces(layout: &BatchLayout) -> Vec<DocSpec> {
    let mut pieces: Vec<DocSpec> = Vec::new();
    for t in layout.tokens().iter().filter(|t| t.role == TokenRole::Doc) {
        match pieces.iter_mut().find(|d| d.id == t.doc_id) {
            Some(d) => d.len += 1,
            None => pieces.push(DocSpec::new(t.doc_id, 1)),
        }
    }
    pieces
}

pub fn cost_rows(spec: &LayoutSpec, pack: Option<usize>) -> anyhow::Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for scheme in MaskScheme::ALL {
        let opts = LayoutOptions::for_scheme(scheme);
        let layouts: Vec<BatchLayout> = match pack {
            None => vec![LayoutSpec { scheme, window: usize::MAX, ..spec.clone() }.build()?],
            Some(window) => {
                let lengths: Vec<usize> = spec.docs.iter().map(|d| d.len).collect();
                let packed = pack_documents(&lengths, window, opts)?;
                if scheme.is_interleaved() {
                    let policy = ChunkPolicy {
                        max_chunks: spec.max_chunks.unwrap_or(DEFAULT_MAX_CHUNKS),
                        layout: opts,
                    };
                    packed
                        .iter()
                        .enumerate()
                        .map(|(w, l)| interleave_chunks(&window_pieces(l), policy, spec.seed.wrapping_add(w as u64)))
                        .collect::<Result<_, _>>()?
                } else {
                    packed
                }
            }
        };
        let mut pairs = 0u64;
        let mut full = 0u64;
        let mut tokens = 0usize;
        for l in &layouts {
            pairs += compile(l, scheme)?.pair_count();
            full += full_causal_pairs(l.len());
            tokens += l.len();
        }
        rows.push(CostRow {
            scheme,
            windows: layouts.len(),
            tokens,
            pair_count: pairs,
            full_causal_pairs: full,
            ratio: if full == 0 { 1.0 } else { pairs as f64 / full as f64 },
        });
    }
    Ok(rows)
}

pub fn cmd_cost(a: &CostArgs) -> Result<(), CliError> {
    let spec = layout_spec(&a.layout, MaskScheme::Anchor)?;
    if spec.docs.is_empty() {
        return Err(usage("cost needs at least one document"));
    }
    let rows = cost_rows(&spec, a.pack)?;
    let mut w = open_out(a.layout.out.as_deref())?;
    let mut body = String::from("scheme,windows,tokens,pair_count,full_causal_pairs,ratio\n");
    for r in &rows {
        body.push_str(&format!(
            "{},{},{},{},{},{:?}\n",
            r.scheme, r.windows, r.tokens, r.pair_count, r.full_causal_pairs, r.ratio
        ));
    }
    w.write_all(body.as_bytes()).map_err(anyhow::Error::from)?;
    w.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

pub fn cmd_pack(a: &PackArgs) -> Result<(), CliError> {
    let lengths = a
        .layout
        .docs
        .clone()
        .ok_or_else(|| usage("pack requires --docs"))?;
    let window = a.layout.window.ok_or_else(|| usage("pack requires --window"))?;
    let scheme = a.layout.scheme.unwrap_or(MaskScheme::Anchor);
    let packed = pack_documents(&lengths, window, LayoutOptions::for_scheme(scheme))
        .map_err(anyhow::Error::from)?;
    write_json(a.layout.out.as_deref(), &packed)?;
    let tokens: usize = packed.iter().map(BatchLayout::len).sum();
    eprintln!("{} windows, {} tokens ({} from documents)", packed.len(), tokens, lengths.iter().sum::<usize>());
    Ok(())
}

pub fn cmd_interleave(a: &InterleaveArgs) -> Result<(), CliError> {
    let mut spec = layout_spec(&a.layout, MaskScheme::InterleavedAnchor)?;
    if !spec.scheme.is_interleaved() {
        if a.layout.scheme.is_some() {
            return Err(usage("interleave needs an interleaved_* scheme"));
        }
        spec.scheme = MaskScheme::InterleavedAnchor;
    }
    let layout = spec.build().map_err(anyhow::Error::from)?;
    write_json(a.layout.out.as_deref(), &layout)?;
    Ok(())
}

pub fn cmd_selftest(a: &SelftestArgs) -> Result<(), CliError> {
    let checks = selftest::run_all(a.samples, a.layouts, a.seed);
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail_runtime(format!("{failed} self-test check(s) failed"))
    } else {
        Ok(())
    }
}

fn bail_runtime(msg: String) -> Result<(), CliError> {
    let r: anyhow::Result<()> = (|| bail!(msg))();
    r.map_err(CliError::Runtime)
}
