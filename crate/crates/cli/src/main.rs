//! `evertale` command line: story-world lifecycle, character integration,
//! rendering, and the invariant report.
//!
//! Exit codes: 0 success, 2 validation error, 3 gate force-accept occurred
//! (success with warning), 4 judge unavailable, 5 invariant failure from
//! verify.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evertale_core::judge::{HttpJudge, Judge, ScriptedJudge, SimilarityJudge};
use evertale_core::sampler;
use evertale_core::world::{char_add_with_reports, snapshot, verify, StoryWorld, WorldConfig};
use evertale_core::Error;

#[derive(Parser)]
#[command(name = "evertale", version, about = "Continual character-customization engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Story-world lifecycle.
    World {
        #[command(subcommand)]
        cmd: WorldCmd,
    },
    /// Character integration.
    Char {
        #[command(subcommand)]
        cmd: CharCmd,
    },
    /// Render a request file to a P6 image.
    Render(RenderArgs),
    /// Run the invariant suite against a snapshot.
    Verify(VerifyArgs),
}

#[derive(Subcommand)]
enum WorldCmd {
    /// Build a fresh story world from a config file.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CharCmd {
    /// Integrate a new character through the quality gate.
    Add(CharAddArgs),
}

#[derive(Args)]
struct CharAddArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    id: String,
    /// Judge backend: mock (scripted scores), similarity (latent cosine),
    /// or http (external MLLM; JUDGE_URL, JUDGE_TOKEN, JUDGE_TIMEOUT_MS).
    #[arg(long, default_value = "mock")]
    judge: String,
    /// Score queue for the mock judge, e.g. "4,4,3,4,4"; a single value
    /// repeats forever.
    #[arg(long)]
    scores: Option<String>,
    /// Gate/training report path; defaults to <world>.<id>.gate.json.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    request: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    json: bool,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::JudgeUnavailable(_) | Error::JudgeParse { .. } | Error::ScriptedQueueEmpty => 4,
        Error::Io(_) => 1,
        _ => 2,
    }
}

/// Advisory single-writer lock around a snapshot path.
struct SnapshotLock {
    path: PathBuf,
}

impl SnapshotLock {
    fn acquire(snapshot: &Path) -> Result<Self, Error> {
        let path = snapshot.with_extension("lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(
                format!(
                    "snapshot is locked by another process (remove {} if stale)",
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for SnapshotLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn build_judge(mode: &str, scores: Option<&str>) -> Result<Box<dyn Judge>, Error> {
    match mode {
        "mock" => {
            let queue: Vec<u8> = match scores {
                Some(csv) => csv
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<u8>().map_err(|_| {
                            Error::Config(format!("bad score '{s}' in --scores"))
                        })
                    })
                    .collect::<Result<_, _>>()?,
                None => vec![4],
            };
            if queue.iter().any(|&s| s > 4) {
                return Err(Error::Config("--scores values must be 0..=4".into()));
            }
            // A single value repeats enough to cover every gate evaluation.
            let expanded = if queue.len() == 1 { vec![queue[0]; 1024] } else { queue };
            Ok(Box::new(ScriptedJudge::new(&expanded)))
        }
        "similarity" => Ok(Box::new(SimilarityJudge::default())),
        "http" => Ok(Box::new(HttpJudge::from_env()?)),
        other => Err(Error::Config(format!(
            "unknown judge '{other}' (expected mock, similarity, or http)"
        ))),
    }
}

fn run() -> Result<u8, Error> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::World { cmd: WorldCmd::Init { config, out } } => {
            let cfg = WorldConfig::load(&config)?;
            let world = StoryWorld::init(cfg)?;
            let _lock = SnapshotLock::acquire(&out)?;
            snapshot::save(&world, &out)?;
            println!(
                "initialized story world (seed {}, d={}, {} adapted layers) -> {}",
                world.seed(),
                world.config().dims.d,
                world.layer_keys().len(),
                out.display()
            );
            Ok(0)
        }
        Cmd::Char { cmd: CharCmd::Add(args) } => {
            let _lock = SnapshotLock::acquire(&args.world)?;
            let mut world = snapshot::load(&args.world)?;
            let mut judge = build_judge(&args.judge, args.scores.as_deref())?;
            let (outcome, reports) = char_add_with_reports(&mut world, &args.id, &mut *judge)?;
            snapshot::save(&world, &args.world)?;

            let report_path = args.report.unwrap_or_else(|| {
                let mut name = args.world.as_os_str().to_owned();
                name.push(format!(".{}.gate.json", args.id));
                PathBuf::from(name)
            });
            let report = serde_json::json!({ "gate": outcome, "training": reports });
            std::fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap())?;

            for attempt in &outcome.attempts {
                println!(
                    "attempt: scores {:?} mean {:.2} (lr_adapter {:.3e}, steps {})",
                    attempt.scores, attempt.mean, attempt.lr_adapter, attempt.steps
                );
            }
            if outcome.force_accepted {
                println!(
                    "character '{}' force-accepted after {} attempts (report: {})",
                    args.id,
                    outcome.attempts.len(),
                    report_path.display()
                );
                Ok(3)
            } else {
                println!(
                    "character '{}' accepted at attempt {} (report: {})",
                    args.id,
                    outcome.attempts.len(),
                    report_path.display()
                );
                Ok(0)
            }
        }
        Cmd::Render(args) => {
            let world = snapshot::load(&args.world)?;
            let text = std::fs::read_to_string(&args.request)?;
            let request = sampler::parse_request(&world, &text)?;
            let output = sampler::render(&world, &request)?;
            std::fs::write(&args.out, &output.ppm)?;
            println!(
                "rendered {} region(s), {} steps, seed {} -> {}",
                request.regions.len(),
                request.steps,
                request.seed,
                args.out.display()
            );
            Ok(0)
        }
        Cmd::Verify(args) => {
            let bytes = std::fs::read(&args.world)?;
            // The checksum is itself a reported check: a corrupted snapshot
            // yields a failing report instead of a hard error.
            if let Err(err) = snapshot::verify_checksum(&bytes) {
                let report = verify::VerifyReport {
                    checks: vec![verify::Check {
                        name: "snapshot/checksum".into(),
                        residual: 1.0,
                        threshold: 0.0,
                        pass: false,
                    }],
                };
                if args.json {
                    println!("{}", report.to_json());
                } else {
                    print!("{}", report.to_text());
                    eprintln!("snapshot rejected: {err}");
                }
                return Ok(5);
            }
            let world = snapshot::decode(&bytes)?;
            let mut report = verify::verify(&world);
            report.checks.insert(
                0,
                verify::Check {
                    name: "snapshot/checksum".into(),
                    residual: 0.0,
                    threshold: 0.0,
                    pass: true,
                },
            );
            if args.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
            Ok(if report.all_pass() { 0 } else { 5 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
