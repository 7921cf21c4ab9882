use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hec::baselines::LAMBDA_GRID;
use hec::ensemble::ALPHA_GRID;
use hec::eval::{self, BenchmarkConfig, EvalBanks, Method, MethodSpec, Ranking, RetrievalOutcome, SweepParam};
use hec::head_ranking::{aggregate_scores, select_top_k, text_head_scores, vision_head_scores, OracleMetric};
use hec::synth::{generate_dataset, SynthSpec};
use hec::{fit_all_heads, parallel, read_bank, rng, sample_episode, write_bank, HecError, HeadKind, HeadSelection};

const EXIT_VALIDATION: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "hec", version, about = "Few-shot classification from attention-head ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image bank and class-text bank.
    Synth(SynthArgs),
    /// Rank heads on support sets and save the top-k selection.
    Rank(RankArgs),
    /// Run a seeded episodic benchmark.
    Eval(EvalArgs),
    /// Pick α or λ on one selection episode, then evaluate the frozen value.
    Sweep(SweepArgs),
    /// Per-rank head accuracy and top-k ensemble accuracy on one episode.
    RankCurve(RankCurveArgs),
    /// Text, image and group accuracy from per-group correctness bits.
    Retrieval(RetrievalArgs),
    /// Check that banks and their manifests are well formed.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images.hecf, class_text.hecf and their manifests.
    #[arg(long)]
    out: PathBuf,
    /// JSON generator spec; overrides the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    samples_per_class: usize,
    /// Planted heads as `head:separation`, comma separated.
    #[arg(long, value_delimiter = ',')]
    planted: Vec<String>,
    /// Text alignment per head as `head:weight`, comma separated.
    #[arg(long, value_delimiter = ',')]
    text_align: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    anisotropy: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BankArgs {
    /// Image bank (manifest sidecar must carry labels).
    #[arg(long)]
    images: PathBuf,
    /// Class-text bank, one row per class.
    #[arg(long)]
    class_text: Option<PathBuf>,
    /// Per-image summary-token bank.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Per-class summary-token bank.
    #[arg(long)]
    class_summary: Option<PathBuf>,
}

impl BankArgs {
    fn load(&self) -> hec::Result<EvalBanks> {
        let (images, manifest) = read_bank(&self.images)?;
        let mut banks = EvalBanks::new(images, manifest);
        banks.class_text = self.class_text.as_ref().map(|p| read_bank(p).map(|b| b.0)).transpose()?;
        banks.summary = self.summary.as_ref().map(|p| read_bank(p).map(|b| b.0)).transpose()?;
        banks.class_summary = self.class_summary.as_ref().map(|p| read_bank(p).map(|b| b.0)).transpose()?;
        banks.validate()?;
        Ok(banks)
    }
}

#[derive(Args)]
struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long = "lambda", default_value_t = 1.0)]
    lambda: f64,
    /// Fixed text-head selection (from `hec rank --mode text`).
    #[arg(long)]
    text_selection: Option<PathBuf>,
}

impl HyperArgs {
    fn spec(&self, method: Method) -> hec::Result<MethodSpec> {
        let spec = MethodSpec {
            method,
            tau: self.tau,
            top_k: self.top_k,
            alpha: self.alpha,
            ridge_lambda: self.lambda,
            text_selection: self.text_selection.as_ref().map(HeadSelection::load).transpose()?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Vision,
    Text,
}

impl From<Mode> for HeadKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Vision => HeadKind::Vision,
            Mode::Text => HeadKind::Text,
        }
    }
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    banks: BankArgs,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Support sets to average scores over.
    #[arg(long, default_value_t = 1)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    banks: BankArgs,
    /// Methods, comma separated (e.g. `hec_v,ridge_probe,ensemble:weighted_vote`).
    #[arg(long, value_delimiter = ',', default_value = "hec_v")]
    method: Vec<String>,
    #[command(flatten)]
    episode: EpisodeArgs,
    /// Episodes per seed.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[command(flatten)]
    hyper: HyperArgs,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-episode CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Alpha,
    Lambda,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    banks: BankArgs,
    #[arg(long, default_value = "hec_vt")]
    method: String,
    #[arg(long, value_enum)]
    param: ParamArg,
    /// Grid values; the standard grid for the parameter when absent.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    selection_seed: u64,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankingArg {
    TestTime,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Hard,
    Soft,
}

#[derive(Args)]
struct RankCurveArgs {
    #[command(flatten)]
    banks: BankArgs,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, value_enum, default_value = "test-time")]
    ranking: RankingArg,
    /// Query metric for oracle ranking.
    #[arg(long, value_enum, default_value = "hard")]
    oracle_metric: OracleArg,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[command(flatten)]
    episode: EpisodeArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrievalArgs {
    /// JSON list of `{"bits": [[i0t0, i0t1], [i1t0, i1t1]]}` groups.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Bank files; each needs its `.manifest.json` sidecar.
    #[arg(required = true)]
    banks: Vec<PathBuf>,
}

fn parse_pairs(items: &[String], what: &str) -> hec::Result<Vec<(usize, f64)>> {
    items
        .iter()
        .map(|s| {
            let bad = || HecError::InvalidParameter(format!("{what}: expected head:value, got {s:?}"));
            let (h, v) = s.split_once(':').ok_or_else(bad)?;
            Ok((h.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn write_output(path: Option<&Path>, text: &str) -> hec::Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| HecError::Io { path: p.to_path_buf(), source: e }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(args: SynthArgs) -> hec::Result<()> {
    let spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| HecError::Io { path: path.clone(), source: e })?;
            serde_json::from_str::<SynthSpec>(&text)?
        }
        None => {
            let planted = parse_pairs(&args.planted, "--planted")?;
            if let Some(&(m, _)) = planted.iter().find(|(m, _)| *m >= args.heads) {
                return Err(HecError::InvalidParameter(format!("planted head {m} out of range")));
            }
            let mut spec = SynthSpec::planted(args.heads, args.head_dim, args.classes, 1, 0, &planted, args.seed);
            spec.cov_anisotropy = args.anisotropy;
            let align = parse_pairs(&args.text_align, "--text-align")?;
            if !align.is_empty() {
                spec.text_alignment = vec![0.0; args.heads];
                for (m, a) in align {
                    *spec.text_alignment.get_mut(m).ok_or_else(|| {
                        HecError::InvalidParameter(format!("text-align head {m} out of range"))
                    })? = a;
                }
            }
            spec
        }
    };
    let ds = generate_dataset(&spec, args.samples_per_class, args.layers)?;
    fs::create_dir_all(&args.out).map_err(|e| HecError::Io { path: args.out.clone(), source: e })?;
    write_bank(&ds.images, &ds.image_manifest, args.out.join("images.hecf"))?;
    write_bank(&ds.class_text, &ds.class_manifest, args.out.join("class_text.hecf"))?;
    let mut json = serde_json::to_string_pretty(&spec)?;
    json.push('\n');
    write_output(Some(&args.out.join("synth_spec.json")), &json)
}

fn rank(args: RankArgs) -> hec::Result<()> {
    let banks = args.banks.load()?;
    if args.tasks == 0 {
        return Err(HecError::InvalidParameter("--tasks must be ≥ 1".into()));
    }
    let per_task = parallel::try_map_indexed(args.tasks, |t| {
        let ep = sample_episode(&banks.manifest, args.ways, args.shots, 0, rng::mix(args.seed, t as u64))?;
        let labels = ep.support_labels();
        match args.mode {
            Mode::Vision => {
                let models = fit_all_heads(&banks.images, &ep.support_indices, &labels, ep.ways)?;
                vision_head_scores(&models, &banks.images, &ep.support_indices, &labels, args.tau)
            }
            Mode::Text => {
                let class_text = banks
                    .class_text
                    .as_ref()
                    .ok_or_else(|| HecError::InvalidParameter("text ranking needs --class-text".into()))?
                    .select(&ep.class_subset)?;
                text_head_scores(&banks.images, &ep.support_indices, &labels, &class_text)
            }
        }
    })?;
    let selection = select_top_k(&aggregate_scores(&per_task)?, args.top_k)?;
    selection.save(&args.out)
}

fn run_eval(args: EvalArgs) -> hec::Result<()> {
    let banks = args.banks.load()?;
    let methods = args
        .method
        .iter()
        .map(|m| args.hyper.spec(Method::parse(m.trim())?))
        .collect::<hec::Result<Vec<_>>>()?;
    let config = BenchmarkConfig {
        ways: args.episode.ways,
        shots: args.episode.shots,
        queries_per_class: args.episode.queries,
        episodes: args.episodes,
        seeds: args.seeds,
    };
    let report = eval::run_benchmark(&banks, &config, &methods)?;
    if let Some(csv) = &args.csv {
        write_output(Some(csv), &report.to_csv()?)?;
    }
    write_output(args.out.as_deref(), &report.to_json()?)
}

fn run_sweep(args: SweepArgs) -> hec::Result<()> {
    let banks = args.banks.load()?;
    let base = args.hyper.spec(Method::parse(&args.method)?)?;
    let (param, default_grid): (SweepParam, &[f64]) = match args.param {
        ParamArg::Alpha => (SweepParam::Alpha, &ALPHA_GRID),
        ParamArg::Lambda => (SweepParam::Lambda, &LAMBDA_GRID),
    };
    let grid = if args.grid.is_empty() { default_grid.to_vec() } else { args.grid };
    let config = BenchmarkConfig {
        ways: args.episode.ways,
        shots: args.episode.shots,
        queries_per_class: args.episode.queries,
        episodes: args.episodes,
        seeds: args.seeds,
    };
    let outcome = eval::sweep(&banks, &config, &base, param, &grid, args.selection_seed)?;
    let mut json = serde_json::to_string_pretty(&outcome)?;
    json.push('\n');
    write_output(args.out.as_deref(), &json)
}

fn run_rank_curve(args: RankCurveArgs) -> hec::Result<()> {
    let banks = args.banks.load()?;
    let ep = sample_episode(&banks.manifest, args.episode.ways, args.episode.shots, args.episode.queries, args.seed)?;
    let ranking = match args.ranking {
        RankingArg::TestTime => Ranking::TestTime,
        RankingArg::Oracle => Ranking::Oracle,
    };
    let oracle = match args.oracle_metric {
        OracleArg::Hard => OracleMetric::Hard,
        OracleArg::Soft => OracleMetric::Soft(args.tau),
    };
    let curve = eval::rank_curve(&banks, &ep, args.mode.into(), ranking, args.tau, oracle)?;
    write_output(args.out.as_deref(), &curve.to_csv()?)
}

fn retrieval(args: RetrievalArgs) -> hec::Result<()> {
    let text = fs::read_to_string(&args.input).map_err(|e| HecError::Io { path: args.input.clone(), source: e })?;
    let outcomes: Vec<RetrievalOutcome> = serde_json::from_str(&text)?;
    let mut json = serde_json::to_string_pretty(&eval::retrieval_metrics(&outcomes)?)?;
    json.push('\n');
    write_output(None, &json)
}

fn validate(args: ValidateArgs) -> hec::Result<()> {
    for path in &args.banks {
        let (bank, manifest) = read_bank(path)?;
        println!(
            "{}: ok ({:?}, {} × {} × {}, {} classes)",
            path.display(),
            bank.kind(),
            bank.samples(),
            bank.heads(),
            bank.dim(),
            manifest.num_classes()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> hec::Result<()> {
    parallel::init_global_from_env()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Rank(a) => rank(a),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::RankCurve(a) => run_rank_curve(a),
        Command::Retrieval(a) => retrieval(a),
        Command::Validate(a) => validate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_CONFIG })
        }
    }
}
