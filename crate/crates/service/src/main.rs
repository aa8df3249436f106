use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use wba_core::analytics::PortfolioConfig;
use wba_core::report::{
    calibration_tsv, consistency_table, consistency_tsv, plan_tsv, portfolio_table, portfolio_tsv,
};
use wba_core::synth::{generate, CohortConfig};
use wba_service::api::{parse_batches, router, CoverageQuery, Shared};
use wba_service::state::{AnalyticsParams, ExamRequest, PlanRequest, PortfolioParams, Service, ServiceError, ServiceOptions};

#[derive(Debug, Parser)]
#[command(name = "wba", version, about = "Workplace-based assessment service and tools")]
struct Cli {
    /// Directory holding the event log and snapshots.
    #[arg(long, global = true, default_value = "wba-data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Tsv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Report {
    Coverage,
    Consistency,
    Calibration,
    Portfolio,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load (or replace) the registry from a TOML document.
    LoadRegistry { file: PathBuf },
    /// Import capture batches (JSON, JSON array or JSON Lines). Either every
    /// batch is applied or none is.
    ImportBatch { file: PathBuf },
    /// Write a report for the current state.
    ExportReport {
        report: Report,
        #[arg(long, value_enum, default_value = "tsv")]
        format: Format,
        /// all, procedure:<id>, item:<id> or outcome:<id>.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        threshold: Option<u8>,
        #[arg(long)]
        from: Option<NaiveDate>,
        #[arg(long)]
        to: Option<NaiveDate>,
        /// Consistency over the most recent N sessions only.
        #[arg(long)]
        last: Option<usize>,
        /// Comma-separated source kinds for the coverage report.
        #[arg(long)]
        kinds: Option<String>,
        #[arg(long)]
        min_experience: Option<u32>,
        #[arg(long)]
        sufficiency: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic cohort: registry.toml, batches.jsonl and truth.json.
    GenerateCohort {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// TOML file overriding generator defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute an allocation plan and record it.
    PlanAllocations {
        /// JSON plan request; defaults to all students and registry slots.
        #[arg(long)]
        request: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate an exam from a JSON request (constraints and size limit).
    GenerateExam {
        request: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Print a summary of the stored state.
    Status,
}

#[derive(Debug, Serialize)]
struct CliError {
    error: String,
    message: String,
}

impl CliError {
    fn new(code: &str, message: impl ToString) -> Self {
        CliError {
            error: code.to_owned(),
            message: message.to_string(),
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        CliError::new("io-error", format!("{}: {e}", path.display()))
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        CliError::new(e.code(), e)
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            emit_error(&CliError::new("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit_error(&e);
            ExitCode::FAILURE
        }
    }
}

fn emit_error(e: &CliError) {
    eprintln!("{}", serde_json::to_string(e).expect("errors serialize"));
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_output(out: Option<&Path>, body: &[u8]) -> CliResult {
    match out {
        Some(path) => fs::write(path, body).map_err(|e| CliError::io(path, e)),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(body)
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::new("io-error", e))
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let mut line = serde_json::to_vec(value).expect("output serializes");
    line.push(b'\n');
    write_output(None, &line)
}

fn open(data_dir: &Path) -> Result<Service, CliError> {
    Ok(Service::open(data_dir, ServiceOptions::default())?)
}

fn run(cli: Cli) -> CliResult {
    let data_dir = cli.data_dir;
    match cli.command {
        Command::LoadRegistry { file } => {
            let text = read_text(&file)?;
            let mut svc = open(&data_dir)?;
            let counts = svc.load_registry(&text)?;
            svc.snapshot()?;
            print_json(&counts)
        }
        Command::ImportBatch { file } => {
            let text = read_text(&file)?;
            let batches = parse_batches(&text).map_err(ServiceError::from)?;
            let mut svc = open(&data_dir)?;
            let summary = svc.import(&batches)?;
            svc.snapshot()?;
            print_json(&summary)
        }
        Command::ExportReport {
            report,
            format,
            scope,
            threshold,
            from,
            to,
            last,
            kinds,
            min_experience,
            sufficiency,
            out,
        } => {
            let svc = open(&data_dir)?;
            let engine = svc.engine();
            let body = match report {
                Report::Coverage => {
                    let filter = CoverageQuery {
                        kinds,
                        from,
                        to,
                        ..Default::default()
                    }
                    .filter()?;
                    let report = engine.coverage(&filter)?;
                    render(format, &report, || report.to_tsv())
                }
                Report::Consistency => {
                    let params = AnalyticsParams {
                        scope,
                        threshold,
                        from,
                        to,
                        last,
                    };
                    let probe = params.query(wba_core::StudentId::new("-").expect("valid id"))?;
                    let rows = consistency_table(
                        &engine.observation_log(),
                        engine.graph(),
                        engine.registry()?,
                        &probe.scope,
                        probe.threshold.get(),
                        &probe.window,
                    )
                    .map_err(ServiceError::from)?;
                    render(format, &rows, || consistency_tsv(&rows))
                }
                Report::Calibration => {
                    let rows = engine.calibration()?;
                    render(format, &rows, || calibration_tsv(&rows))
                }
                Report::Portfolio => {
                    let config: PortfolioConfig = PortfolioParams {
                        min_experience,
                        sufficiency,
                        threshold,
                    }
                    .config()?;
                    let rows = portfolio_table(&engine.observation_log(), engine.registry()?, &config)
                        .map_err(ServiceError::from)?;
                    render(format, &rows, || portfolio_tsv(&rows))
                }
            };
            write_output(out.as_deref(), &body)
        }
        Command::GenerateCohort { seed, out_dir, config } => {
            let mut cfg: CohortConfig = match config {
                Some(path) => toml::from_str(&read_text(&path)?).map_err(|e| CliError::new("invalid-config", e))?,
                None => CohortConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let started = Instant::now();
            let cohort = generate(&cfg).map_err(|e| CliError::new(e.code(), e))?;
            fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
            let path = out_dir.join("registry.toml");
            fs::write(&path, cohort.registry.to_toml()).map_err(|e| CliError::io(&path, e))?;
            let path = out_dir.join("batches.jsonl");
            let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            let mut writer = io::BufWriter::new(file);
            cohort
                .write_batches(&mut writer)
                .and_then(|_| writer.flush())
                .map_err(|e| CliError::io(&path, e))?;
            #[derive(Serialize)]
            struct Truth<'a> {
                config: &'a CohortConfig,
                strictness: &'a std::collections::BTreeMap<wba_core::StaffId, f64>,
            }
            let path = out_dir.join("truth.json");
            let truth = serde_json::to_vec_pretty(&Truth {
                config: &cfg,
                strictness: &cohort.strictness,
            })
            .expect("truth serializes");
            fs::write(&path, truth).map_err(|e| CliError::io(&path, e))?;
            #[derive(Serialize)]
            struct Generated {
                #[serde(flatten)]
                stats: wba_core::synth::CohortStats,
                seconds: f64,
            }
            print_json(&Generated {
                stats: cohort.stats(),
                seconds: started.elapsed().as_secs_f64(),
            })
        }
        Command::PlanAllocations { request, format, out } => {
            let request: PlanRequest = match request {
                Some(path) => serde_json::from_str(&read_text(&path)?).map_err(|e| CliError::new("bad-request", e))?,
                None => PlanRequest::default(),
            };
            let mut svc = open(&data_dir)?;
            let stored = svc.create_plan(request)?;
            svc.snapshot()?;
            let body = render(format, &stored, || plan_tsv(&stored.plan));
            write_output(out.as_deref(), &body)
        }
        Command::GenerateExam { request, out } => {
            let request: ExamRequest =
                serde_json::from_str(&read_text(&request)?).map_err(|e| CliError::new("bad-request", e))?;
            let svc = open(&data_dir)?;
            let exam = svc.engine().generate_exam(&request)?;
            let mut body = serde_json::to_vec(&exam).expect("exam serializes");
            body.push(b'\n');
            write_output(out.as_deref(), &body)
        }
        Command::Serve { bind } => serve(&data_dir, bind),
        Command::Status => print_json(&open(&data_dir)?.status()),
    }
}

/// JSON bodies are exactly the library value's serialization.
fn render<T: Serialize>(format: Format, value: &T, tsv: impl FnOnce() -> String) -> Vec<u8> {
    match format {
        Format::Json => serde_json::to_vec(value).expect("reports serialize"),
        Format::Tsv => tsv().into_bytes(),
    }
}

fn serve(data_dir: &Path, bind: SocketAddr) -> CliResult {
    let svc = open(data_dir)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new("io-error", e))?;
    let shared: Shared = Arc::new(RwLock::new(svc));
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| {
            if e.kind() == io::ErrorKind::AddrInUse {
                CliError::new("port-in-use", format!("{bind}: {e}"))
            } else {
                CliError::new("io-error", format!("{bind}: {e}"))
            }
        })?;
        let local = listener.local_addr().map_err(|e| CliError::new("io-error", e))?;
        println!("listening on http://{local}");
        let _ = io::stdout().flush();
        axum::serve(listener, router(shared.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::new("io-error", e))
    });
    let mut svc = shared.write().unwrap_or_else(|e| e.into_inner());
    svc.snapshot()?;
    result
}
