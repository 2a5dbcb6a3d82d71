use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use factcal::analysis::{alignment_matrix, positional_profile, Pooling};
use factcal::applications::{self, ReunionConfig, SelectivePolicy};
use factcal::calibration::{self, bins_csv_rows, Granularity, BINS_CSV_HEADER};
use factcal::corpus::{self, Method, ResponseRecord};
use factcal::decompose::{decompose, DecompositionConfig};
use factcal::elicit::{self, DiscriminativeConfig, GenMode, GenerativeConfig, PTrueMode, SampleSet};
use factcal::fusion::{self, FusionConfig, Strategy};
use factcal::gateway::{Backend, Gateway, GatewayMode, OpenAiBackend, SamplingParams, DEFAULT_IN_FLIGHT};
use factcal::orchestrator::{self, BackendKind, RunOptions, EXIT_CASSETTE_MISS, EXIT_CONFIG, EXIT_STAGE};
use factcal::sim::SimulatedBackend;

#[derive(Parser)]
#[command(
    name = "factcal",
    version,
    about = "Confidence calibration for long-form LLM answers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GatewayArgs {
    #[arg(long, default_value = "live")]
    mode: GatewayMode,
    #[arg(long)]
    cassette: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "openai")]
    backend: BackendArg,
    #[arg(long, default_value_t = DEFAULT_IN_FLIGHT)]
    in_flight: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Openai,
    Simulated,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Openai => BackendKind::Openai,
            BackendArg::Simulated => BackendKind::Simulated,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        mode: Option<GatewayMode>,
        #[arg(long)]
        cassette: Option<PathBuf>,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Rerun stages even when their outputs are current.
        #[arg(long)]
        force: bool,
    },
    /// Print the result table of a finished run.
    Report {
        /// Run directory (e.g. runs/<run_id>).
        #[arg(long)]
        run: PathBuf,
    },
    /// Generate the original response and extra samples for each query.
    Sample {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 20)]
        n_samples: u32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Split responses into atomic claims.
    Decompose {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        model: String,
        /// Only decompose responses with this sample index.
        #[arg(long, default_value_t = 0)]
        sample_index: u32,
        /// Attach labels from this file.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Score claims with one elicitation method.
    Elicit {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        claims: PathBuf,
        /// Queries, for the topic used by dis-context and dis-rating.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Responses holding the samples for the generative methods.
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Model that produced the claims.
        #[arg(long)]
        model: String,
        /// Judge for the generative methods (defaults to --model).
        #[arg(long)]
        judge: Option<String>,
        #[arg(long, default_value_t = 20)]
        n_samples: u32,
        #[arg(long)]
        raw_p_true: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Combine two confidence files claim by claim.
    Fuse {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.1)]
        gamma_a: f64,
        #[arg(long, default_value_t = 0.02)]
        k: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose the WAvg weight with the lowest ECE on labeled claims.
    TuneAlpha {
        #[arg(long)]
        claims: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
        )]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Per-response confidence and factuality.
    Aggregate {
        #[arg(long)]
        claims: PathBuf,
        #[arg(long)]
        confs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibration report for one confidence file.
    Evaluate {
        #[arg(long)]
        claims: PathBuf,
        #[arg(long)]
        confs: PathBuf,
        #[arg(long, default_value = "atomic")]
        granularity: Granularity,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Also write the reliability-diagram bins as CSV.
        #[arg(long)]
        bins_csv: Option<PathBuf>,
    },
    /// Positional profiles or alignment matrices.
    Analyze {
        #[arg(long)]
        claims: PathBuf,
        /// Split each response into this many parts.
        #[arg(long)]
        positions: Option<usize>,
        /// Confidence file for --positions.
        #[arg(long)]
        confs: Option<PathBuf>,
        #[arg(long)]
        per_response: bool,
        /// Spearman matrix across methods.
        #[arg(long)]
        alignment: bool,
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Directory holding <method>.jsonl confidence files.
        #[arg(long)]
        conf_dir: Option<PathBuf>,
        #[arg(long, default_value = "atomic")]
        granularity: Granularity,
    },
    /// Downstream applications.
    App {
        #[command(subcommand)]
        app: AppCommand,
    },
}

#[derive(Subcommand)]
enum AppCommand {
    /// Reject the least confident responses.
    SelectiveQa {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        reject: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Answer each query with the most confident model.
    Ensemble {
        /// Directory holding <model>.jsonl response-score files.
        #[arg(long)]
        scores_dir: PathBuf,
        /// Models in tie-break priority order.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Reassemble confident claims from several samples.
    Reunion {
        #[arg(long)]
        queries: PathBuf,
        /// Claims decomposed from the samples.
        #[arg(long)]
        claims: PathBuf,
        #[arg(long)]
        confs: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        #[arg(long, default_value_t = 5)]
        n_samples: u32,
        #[arg(long)]
        model: String,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
}

struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn config(message: impl ToString) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    fn stage(message: impl ToString, cassette_miss: bool) -> Self {
        CliError {
            code: if cassette_miss { EXIT_CASSETTE_MISS } else { EXIT_STAGE },
            message: message.to_string(),
        }
    }
}

macro_rules! stage_error {
    ($($t:ty => $miss:expr),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                let miss: fn(&$t) -> bool = $miss;
                CliError::stage(&e, miss(&e))
            }
        })*
    };
}

stage_error! {
    corpus::CorpusError => |_| false,
    factcal::gateway::GatewayError => |e| e.is_cassette_miss(),
    factcal::decompose::DecomposeError => |e| e.is_cassette_miss(),
    elicit::ElicitError => |e| e.is_cassette_miss(),
    fusion::FusionError => |_| false,
    calibration::MetricError => |_| false,
    factcal::analysis::AnalysisError => |_| false,
    applications::AppError => |e| e.is_cassette_miss(),
    std::io::Error => |_| false,
}

impl From<orchestrator::OrchestratorError> for CliError {
    fn from(e: orchestrator::OrchestratorError) -> Self {
        CliError {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), CliError>;

fn gateway(args: &GatewayArgs) -> Result<Gateway, CliError> {
    let mut b = Gateway::builder(args.mode).in_flight(args.in_flight);
    if let Some(c) = &args.cassette {
        b = b.cassette(c);
    } else if args.mode != GatewayMode::Live {
        return Err(CliError::config(format!("--mode {} needs --cassette", args.mode)));
    }
    if args.mode != GatewayMode::Replay {
        let backend: Arc<dyn Backend> = match args.backend {
            BackendArg::Openai => Arc::new(OpenAiBackend::from_env()),
            BackendArg::Simulated => Arc::new(SimulatedBackend::new()),
        };
        b = b.backend(backend);
    }
    b.build().map_err(CliError::config)
}

fn write_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn load_dir_confs(dir: &Path, methods: &[Method]) -> Result<Vec<(String, Vec<corpus::ClaimConfidence>)>, CliError> {
    methods
        .iter()
        .map(|m| {
            let path = dir.join(format!("{}.jsonl", m.file_stem()));
            Ok((m.to_string(), corpus::load_confidences(&path)?))
        })
        .collect()
}

fn cmd_sample(queries: &Path, model: &str, n: u32, out: &Path, gw: &GatewayArgs) -> CliResult {
    let queries = corpus::load_queries(queries)?;
    let gw = gateway(gw)?;
    let params = SamplingParams::sampling();
    let results = gw.map_concurrent(&queries, |q| {
        let mut texts = vec![gw.complete(model, &q.prompt_text, &params, 0)?];
        if n > 0 {
            texts.extend(gw.sample_k(model, &q.prompt_text, &params, n)?);
        }
        Ok::<_, factcal::gateway::GatewayError>(texts)
    });
    let mut records = Vec::new();
    for (q, texts) in queries.iter().zip(results) {
        for (i, r) in texts?.into_iter().enumerate() {
            records.push(ResponseRecord {
                query_id: q.id.clone(),
                model_id: model.to_string(),
                sample_index: i as u32,
                text: r.text,
                sampling: params,
            });
        }
    }
    corpus::store_responses(&records, out)?;
    gw.flush()?;
    eprintln!("wrote {} responses to {}", records.len(), out.display());
    Ok(())
}

fn cmd_decompose(
    responses: &Path,
    model: &str,
    sample_index: u32,
    labels: Option<&Path>,
    out: &Path,
    gw: &GatewayArgs,
) -> CliResult {
    let responses: Vec<ResponseRecord> = corpus::load_responses(responses)?
        .into_iter()
        .filter(|r| r.sample_index == sample_index)
        .collect();
    let gw = gateway(gw)?;
    let cfg = DecompositionConfig::new(model);
    let results = gw.map_concurrent(&responses, |r| decompose(&gw, r, &cfg));
    let mut claims = Vec::new();
    for r in results {
        claims.extend(r?.0);
    }
    corpus::sort_claims(&mut claims);
    if let Some(l) = labels {
        let labels = corpus::load_labels(l)?;
        let unknown = corpus::apply_labels(&mut claims, &labels);
        if !unknown.is_empty() {
            eprintln!("{} labels matched no claim", unknown.len());
        }
    }
    corpus::store_claims(&claims, out)?;
    gw.flush()?;
    eprintln!("wrote {} claims to {}", claims.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_elicit(
    method: Method,
    claims: &Path,
    queries: Option<&Path>,
    responses: Option<&Path>,
    model: &str,
    judge: Option<&str>,
    n_samples: u32,
    raw_p_true: bool,
    out: &Path,
    gw: &GatewayArgs,
) -> CliResult {
    let claims = corpus::load_claims(claims)?;
    let gw = gateway(gw)?;
    let confs = if method.is_generative() {
        let responses = responses.ok_or_else(|| CliError::config("generative methods need --responses"))?;
        let responses = corpus::load_responses(responses)?;
        let mode = if method == Method::GenBinary {
            GenMode::Binary
        } else {
            GenMode::Multi
        };
        let cfg = GenerativeConfig::new(judge.unwrap_or(model));
        let mut by_query: BTreeMap<&str, Vec<_>> = BTreeMap::new();
        for c in &claims {
            by_query.entry(c.query_id.as_str()).or_default().push(c.clone());
        }
        let mut confs = Vec::new();
        for (q, q_claims) in by_query {
            let samples = SampleSet {
                query_id: q.to_string(),
                samples: responses
                    .iter()
                    .filter(|r| r.query_id == q && (1..=n_samples).contains(&r.sample_index))
                    .map(|r| r.text.clone())
                    .collect(),
            };
            confs.extend(elicit::elicit_generative(&gw, &q_claims, &samples, mode, &cfg)?.confidences);
        }
        confs
    } else if method.is_discriminative() {
        let contexts = match queries {
            Some(q) => corpus::load_queries(q)?.into_iter().map(|q| (q.id, q.topic)).collect(),
            None if method == Method::DisSingle => Default::default(),
            None => return Err(CliError::config("dis-context and dis-rating need --queries")),
        };
        let cfg = DiscriminativeConfig {
            p_true_mode: if raw_p_true {
                PTrueMode::Raw
            } else {
                PTrueMode::Normalized
            },
            ..DiscriminativeConfig::new(model)
        };
        elicit::elicit_discriminative(&gw, &claims, &contexts, method, &cfg)?.confidences
    } else {
        return Err(CliError::config(format!(
            "{method} is produced by `fuse`, not elicited"
        )));
    };
    corpus::store_confidences(&confs, out)?;
    gw.flush()?;
    eprintln!("wrote {} confidences to {}", confs.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    claims: &Path,
    positions: Option<usize>,
    confs: Option<&Path>,
    per_response: bool,
    alignment: bool,
    methods: &[Method],
    conf_dir: Option<&Path>,
    granularity: Granularity,
) -> CliResult {
    let claims = corpus::load_claims(claims)?;
    if let Some(parts) = positions {
        let confs = confs.ok_or_else(|| CliError::config("--positions needs --confs"))?;
        let confs = corpus::load_confidences(confs)?;
        let pooling = if per_response {
            Pooling::PerResponse
        } else {
            Pooling::Global
        };
        print!("{}", positional_profile(&claims, &confs, parts, pooling)?.to_csv());
    }
    if alignment {
        let dir = conf_dir.ok_or_else(|| CliError::config("--alignment needs --conf-dir"))?;
        let mut vectors = Vec::new();
        for (name, confs) in load_dir_confs(dir, methods)? {
            let v: BTreeMap<String, f64> = match granularity {
                Granularity::Atomic => confs.into_iter().map(|c| (c.claim_id, c.score)).collect(),
                Granularity::Macro => calibration::aggregate_macro(&claims, &confs)?
                    .into_iter()
                    .map(|s| (s.query_id, s.confidence))
                    .collect(),
            };
            vectors.push((name, v));
        }
        print!("{}", alignment_matrix(&vectors, granularity)?.to_csv());
    }
    if positions.is_none() && !alignment {
        return Err(CliError::config("analyze needs --positions or --alignment"));
    }
    Ok(())
}

fn cmd_app(app: AppCommand) -> CliResult {
    match app {
        AppCommand::SelectiveQa {
            scores,
            reject,
            threshold,
        } => {
            let policy = match (reject, threshold) {
                (Some(f), None) => SelectivePolicy::RejectFraction(f),
                (None, Some(t)) => SelectivePolicy::Threshold(t),
                _ => return Err(CliError::config("give exactly one of --reject and --threshold")),
            };
            let scores = corpus::load_scores(&scores)?;
            write_json(&applications::selective_qa(&scores, policy)?);
        }
        AppCommand::Ensemble { scores_dir, models } => {
            if models.is_empty() {
                return Err(CliError::config("--models is empty"));
            }
            let mut per_query: BTreeMap<String, BTreeMap<String, corpus::ResponseScore>> = BTreeMap::new();
            for m in &models {
                for s in corpus::load_scores(&scores_dir.join(format!("{m}.jsonl")))? {
                    per_query.entry(s.query_id.clone()).or_default().insert(m.clone(), s);
                }
            }
            write_json(&applications::ensemble(&per_query, &models)?);
        }
        AppCommand::Reunion {
            queries,
            claims,
            confs,
            tau,
            n_samples,
            model,
            gateway: gw_args,
        } => {
            let queries = corpus::load_queries(&queries)?;
            let claims = corpus::load_claims(&claims)?;
            let confs = corpus::load_confidences(&confs)?;
            let gw = gateway(&gw_args)?;
            let cfg = ReunionConfig {
                tau,
                n_samples,
                assembler_model: model,
            };
            let mut outcomes = Vec::new();
            for q in &queries {
                let q_claims: Vec<_> = claims.iter().filter(|c| c.query_id == q.id).cloned().collect();
                if q_claims.is_empty() {
                    continue;
                }
                outcomes.push(applications::atomic_reunion(
                    &gw,
                    &q.id,
                    &q.prompt_text,
                    &q_claims,
                    &confs,
                    &cfg,
                )?);
            }
            gw.flush()?;
            write_json(&outcomes);
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Run {
            config,
            out,
            mode,
            cassette,
            backend,
            force,
        } => {
            let opts = RunOptions {
                out_dir: out,
                mode,
                cassette,
                backend: backend.map(Into::into),
                force,
            };
            let outcome = orchestrator::run(&config, &opts)?;
            eprintln!(
                "run {}: {} stages run, {} up to date",
                outcome.manifest.run_id,
                outcome.executed.len(),
                outcome.skipped.len()
            );
            println!("{}", outcome.run_dir.display());
        }
        Command::Report { run } => print!("{}", orchestrator::report(&run)?),
        Command::Sample {
            queries,
            model,
            n_samples,
            out,
            gateway,
        } => cmd_sample(&queries, &model, n_samples, &out, &gateway)?,
        Command::Decompose {
            responses,
            model,
            sample_index,
            labels,
            out,
            gateway,
        } => cmd_decompose(&responses, &model, sample_index, labels.as_deref(), &out, &gateway)?,
        Command::Elicit {
            method,
            claims,
            queries,
            responses,
            model,
            judge,
            n_samples,
            raw_p_true,
            out,
            gateway,
        } => cmd_elicit(
            method,
            &claims,
            queries.as_deref(),
            responses.as_deref(),
            &model,
            judge.as_deref(),
            n_samples,
            raw_p_true,
            &out,
            &gateway,
        )?,
        Command::Fuse {
            a,
            b,
            strategy,
            alpha,
            gamma_a,
            k,
            out,
        } => {
            let cfg = FusionConfig {
                strategy,
                alpha,
                gamma_a,
                k,
            };
            cfg.validate().map_err(CliError::config)?;
            let fused = fusion::fuse_vectors(&corpus::load_confidences(&a)?, &corpus::load_confidences(&b)?, &cfg)?;
            corpus::store_confidences(&fused, &out)?;
        }
        Command::TuneAlpha {
            claims,
            a,
            b,
            grid,
            bins,
        } => {
            let alpha = fusion::tune_alpha(
                &corpus::load_claims(&claims)?,
                &corpus::load_confidences(&a)?,
                &corpus::load_confidences(&b)?,
                &grid,
                bins,
            )?;
            println!("{alpha}");
        }
        Command::Aggregate { claims, confs, out } => {
            let scores =
                calibration::aggregate_macro(&corpus::load_claims(&claims)?, &corpus::load_confidences(&confs)?)?;
            corpus::store_scores(&scores, &out)?;
        }
        Command::Evaluate {
            claims,
            confs,
            granularity,
            bins,
            bins_csv,
        } => {
            let report = calibration::evaluate(
                &corpus::load_confidences(&confs)?,
                &corpus::load_claims(&claims)?,
                granularity,
                bins,
            )?;
            if let Some(path) = bins_csv {
                let mut rows = vec![BINS_CSV_HEADER.to_string()];
                rows.extend(bins_csv_rows(&report));
                std::fs::write(&path, rows.join("\n") + "\n")?;
            }
            write_json(&report);
        }
        Command::Analyze {
            claims,
            positions,
            confs,
            per_response,
            alignment,
            methods,
            conf_dir,
            granularity,
        } => cmd_analyze(
            &claims,
            positions,
            confs.as_deref(),
            per_response,
            alignment,
            &methods,
            conf_dir.as_deref(),
            granularity,
        )?,
        Command::App { app } => cmd_app(app)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
