//! `groupfield`: batch reports, replay, synthetic scenes, scenario analysis and the live service.

mod report;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use groupfield_core::chain::causal_chain;
use groupfield_core::ingest::{parse_stream, replay, write_stream, ParsedStream};
use groupfield_core::model::{AgentId, CalibrationProfile, MicroStateFrame, Scene};
use groupfield_core::pipeline::Pipeline;
use groupfield_core::scenario::{
    reference_candidates, select_intervention, InterventionSpec, ScenarioInput, SurrogateParams,
};
use groupfield_core::synthetic::{generate_stream, golden_frame, ScenePreset};
use groupfield_service::{Config, Service, Startup};
use report::{Cadence, Format, Reporter};

const EXIT_INPUT: u8 = 1;
const EXIT_PIPELINE: u8 = 2;

#[derive(Parser)]
#[command(name = "groupfield", version, about = "Behavioral-field pipeline for group interaction streams")]
struct Cli {
    /// Config file (JSON); defaults to $GROUPFIELD_CONFIG, then built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report format
    #[arg(long, global = true, value_enum, default_value = "text")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Batch report over a JSONL frame file
    Run {
        file: PathBuf,
        /// Candidate interventions (JSON array) analysed at the configured cadence
        #[arg(long)]
        interventions: Option<PathBuf>,
    },
    /// Feed a JSONL frame file through the pipeline at its recorded pace
    Replay {
        file: PathBuf,
        /// Pace multiplier; 0 runs as fast as possible
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long)]
        interventions: Option<PathBuf>,
    },
    /// Write a synthetic scene as JSONL frames
    Simulate {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the group size
        #[arg(long)]
        agents: Option<usize>,
        /// Override the duration, s
        #[arg(long)]
        duration: Option<f64>,
        /// Stop after this many frames
        #[arg(long)]
        frames: Option<usize>,
        /// Output file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast candidate interventions from the last frame of a file
    Scenario {
        file: PathBuf,
        #[arg(long)]
        interventions: PathBuf,
        /// Ensemble seed
        #[arg(long)]
        seed: Option<u64>,
        /// Ensemble size
        #[arg(long)]
        ensemble: Option<usize>,
        /// Forecast horizon, s
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Run the HTTP/WebSocket service
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Start a simulator preset
        #[arg(long, conflicts_with = "replay")]
        preset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replay a JSONL frame file
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Run the 7-agent reference frame and print the causal chain
    Golden,
}

enum Failure {
    Input(String),
    Pipeline(String),
}

type Outcome = Result<(), Failure>;

fn input<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Input(format!("{context}: {e}"))
}

fn pipeline<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Pipeline(e.to_string())
}

fn io_err(e: io::Error) -> Failure {
    Failure::Pipeline(format!("write failed: {e}"))
}

fn read_frames(path: &Path) -> Result<ParsedStream<f64>, Failure> {
    let file = File::open(path).map_err(input(path.display()))?;
    let parsed = parse_stream(BufReader::new(file)).map_err(input(path.display()))?;
    for d in &parsed.diagnostics {
        eprintln!("warning: {}: skipped {d}", path.display());
    }
    if parsed.frames.is_empty() {
        return Err(Failure::Input(format!("{}: no frames", path.display())));
    }
    Ok(parsed)
}

fn read_interventions(path: &Path) -> Result<Vec<InterventionSpec>, Failure> {
    let text = std::fs::read_to_string(path).map_err(input(path.display()))?;
    serde_json::from_str(&text).map_err(input(path.display()))
}

struct Env {
    config: Config,
    cal: CalibrationProfile<f64>,
    format: Format,
}

impl Env {
    fn scene(&self) -> Scene<f64> {
        self.config.scene()
    }

    fn params(&self) -> SurrogateParams {
        self.config.surrogate(&self.cal)
    }

    fn cadence(&self, interventions: Option<&Path>) -> Result<Option<Cadence>, Failure> {
        let Some(p) = interventions else { return Ok(None) };
        Ok(Some(Cadence {
            candidates: read_interventions(p)?,
            params: self.params(),
            cadence: self.config.scenario_cadence,
        }))
    }

    fn reporter(&self, cadence: Option<Cadence>) -> Result<Reporter<BufWriter<io::Stdout>>, Failure> {
        Reporter::new(BufWriter::new(io::stdout()), self.format, self.cal.clone(), self.scene(), self.config.pipeline, cadence)
            .map_err(input("config"))
    }
}

fn finish(reporter: Reporter<BufWriter<io::Stdout>>, parsed: &ParsedStream<f64>) -> Outcome {
    if reporter.finish(&parsed.diagnostics).map_err(io_err)? {
        Ok(())
    } else {
        Err(Failure::Pipeline("some frames or analyses failed".into()))
    }
}

fn run(env: &Env, file: &Path, interventions: Option<&Path>) -> Outcome {
    let parsed = read_frames(file)?;
    let mut r = env.reporter(env.cadence(interventions)?)?;
    for f in &parsed.frames {
        r.frame(f).map_err(io_err)?;
    }
    finish(r, &parsed)
}

fn replay_file(env: &Env, file: &Path, speed: f64, interventions: Option<&Path>) -> Outcome {
    let parsed = read_frames(file)?;
    let mut r = env.reporter(env.cadence(interventions)?)?;
    let mut write_error = None;
    replay(parsed.frames.iter().cloned(), speed, |f| match r.frame(&f) {
        Ok(()) => true,
        Err(e) => {
            write_error = Some(e);
            false
        }
    })
    .map_err(|e| Failure::Input(e.to_string()))?;
    if let Some(e) = write_error {
        return Err(io_err(e));
    }
    finish(r, &parsed)
}

fn simulate(
    env: &Env,
    name: &str,
    seed: u64,
    agents: Option<usize>,
    duration: Option<f64>,
    frames: Option<usize>,
    out: Option<&Path>,
) -> Outcome {
    let mut preset = ScenePreset::named(name, seed).ok_or_else(|| {
        Failure::Input(format!("unknown preset {name:?}; known: {}", ScenePreset::NAMES.join(", ")))
    })?;
    if let Some(n) = agents {
        preset.n_agents = n;
    }
    if let Some(d) = duration {
        preset.duration = d;
    }
    let stream = generate_stream(&preset, &env.cal).map_err(input("preset"))?;
    let frames: Vec<MicroStateFrame<f64>> = stream.take(frames.unwrap_or(usize::MAX)).collect();
    let written = match out {
        Some(p) => File::create(p).and_then(|f| write_stream(BufWriter::new(f), &frames)),
        None => write_stream(io::stdout().lock(), &frames),
    };
    written.map_err(io_err)
}

fn scenario(env: &Env, file: &Path, interventions: &Path, seed: Option<u64>, ensemble: Option<usize>, horizon: Option<f64>) -> Outcome {
    let parsed = read_frames(file)?;
    let candidates = read_interventions(interventions)?;
    let mut params = env.params();
    params.rng_seed = seed.unwrap_or(params.rng_seed);
    params.ensemble_size = ensemble.unwrap_or(params.ensemble_size);
    params.horizon = horizon.unwrap_or(params.horizon);
    params.validate().map_err(|issues| Failure::Input(format!("surrogate parameters: {issues:?}")))?;

    let scene = env.scene();
    let mut p = Pipeline::new(env.cal.clone(), scene.clone(), env.config.pipeline).map_err(input("config"))?;
    let mut last = None;
    for f in &parsed.frames {
        match p.process(f) {
            Ok(b) => last = Some(b),
            Err(e) => eprintln!("warning: frame at t={} failed: {e}", f.timestamp),
        }
    }
    let b = last.ok_or_else(|| Failure::Pipeline("no frame could be processed".into()))?;
    let history = p
        .history()
        .filter(|s| s.timestamp < b.timestamp && b.timestamp - s.timestamp <= env.cal.ews_window)
        .copied()
        .collect();
    let input = ScenarioInput { frame: b.frame.clone(), scene, history };
    let ids: Vec<AgentId> = b.frame.agents().iter().map(|a| a.agent_id.clone()).collect();
    for c in &candidates {
        c.validate(&ids).map_err(|issues| {
            let list: Vec<String> = issues.iter().map(|i| format!("{}: {}", i.field, i.message)).collect();
            Failure::Input(format!("intervention {}: {}", c.id, list.join("; ")))
        })?;
    }
    let result = select_intervention(&candidates, &input, &env.cal, &params).map_err(pipeline)?;
    let mut out = io::stdout().lock();
    match env.format {
        Format::Json => {
            serde_json::to_writer(&mut out, &result).map_err(|e| Failure::Pipeline(e.to_string()))?;
            writeln!(out).map_err(io_err)?;
        }
        Format::Text => {
            writeln!(out, "{}", report::frame_line(&b)).map_err(io_err)?;
            for l in report::scenario_table(&result).into_iter().chain(result.causal_chain.render()) {
                writeln!(out, "{l}").map_err(io_err)?;
            }
        }
    }
    Ok(())
}

fn golden(env: &Env) -> Outcome {
    let frame = golden_frame::<f64>();
    let scene = Scene::conference_room();
    let mut p = Pipeline::new(env.cal.clone(), scene.clone(), env.config.pipeline).map_err(input("config"))?;
    let b = p.process_validated(frame.clone()).map_err(pipeline)?;
    let candidates = reference_candidates(AgentId::from(1u32), AgentId::from(5u32));
    let result = select_intervention(&candidates, &ScenarioInput::new(frame, scene), &env.cal, &env.params())
        .map_err(pipeline)?;
    let mut out = io::stdout().lock();
    match env.format {
        Format::Json => {
            #[derive(serde::Serialize)]
            struct Golden<'a> {
                bundle: &'a groupfield_core::pipeline::FrameBundle<f64>,
                scenario: &'a groupfield_core::scenario::ScenarioResult,
            }
            serde_json::to_writer(&mut out, &Golden { bundle: &b, scenario: &result })
                .map_err(|e| Failure::Pipeline(e.to_string()))?;
            writeln!(out).map_err(io_err)?;
        }
        Format::Text => {
            let c = &b.criticality;
            let lines = [
                "reference negotiation frame, 7 agents".to_string(),
                format!(
                    "  T = ({})  T_mean = {:.2}",
                    b.fields.tension.iter().map(|t| format!("{t:.2}")).collect::<Vec<_>>().join(", "),
                    b.fields.tension_mean
                ),
                format!("  W[2][1] = {:.3}  W[2][5] = {:.3}", b.matrix.get(1, 0), b.matrix.get(1, 4)),
                format!(
                    "  lambda_max = {:.3}  St = {:.3}  R = {:.3} ({:?}){}",
                    b.spectral.lambda_max,
                    b.spectral.stability_margin,
                    c.r_index,
                    c.zone,
                    if c.st_red_flag { "  St red flag" } else { "" }
                ),
                "scenarios:".to_string(),
            ];
            let chain = causal_chain(&b, &env.cal, {
                let noop = result.outcomes.iter().find(|o| o.spec.is_noop());
                Some((noop, &result.outcomes[0]))
            });
            for l in lines.into_iter().chain(report::scenario_table(&result)).chain(["causal chain:".to_string()]) {
                writeln!(out, "{l}").map_err(io_err)?;
            }
            for l in chain.render() {
                writeln!(out, "  {l}").map_err(io_err)?;
            }
        }
    }
    Ok(())
}

fn serve(env: &Env, host: &str, port: u16, preset: Option<String>, seed: u64, file: Option<&Path>, speed: f64) -> Outcome {
    let startup = match (preset, file) {
        (Some(name), _) => Startup::Preset { name, seed },
        (None, Some(path)) => Startup::Replay { frames: read_frames(path)?.frames, speed },
        (None, None) => Startup::Idle,
    };
    let service = Service::start(env.config.clone(), startup).map_err(input("service"))?;
    let rt = tokio::runtime::Runtime::new().map_err(pipeline)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await.map_err(input(format!("{host}:{port}")))?;
        let addr = listener.local_addr().map_err(pipeline)?;
        println!("listening on {addr}");
        io::stdout().flush().map_err(io_err)?;
        let stop = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        service.serve(listener, stop).await.map_err(pipeline)
    })
}

fn dispatch(cli: Cli) -> Outcome {
    let config = Config::load(cli.config.as_deref()).map_err(|e| Failure::Input(e.to_string()))?;
    let cal = config.calibration().map_err(|e| Failure::Input(e.to_string()))?;
    let env = Env { config, cal, format: cli.format };
    match cli.command {
        Command::Run { file, interventions } => run(&env, &file, interventions.as_deref()),
        Command::Replay { file, speed, interventions } => replay_file(&env, &file, speed, interventions.as_deref()),
        Command::Simulate { preset, seed, agents, duration, frames, out } => {
            simulate(&env, &preset, seed, agents, duration, frames, out.as_deref())
        }
        Command::Scenario { file, interventions, seed, ensemble, horizon } => {
            scenario(&env, &file, &interventions, seed, ensemble, horizon)
        }
        Command::Serve { port, host, preset, seed, replay, speed } => {
            serve(&env, &host, port, preset, seed, replay.as_deref(), speed)
        }
        Command::Golden => golden(&env),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Pipeline(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_PIPELINE)
        }
    }
}
