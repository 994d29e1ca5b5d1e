use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sonospine::completion::{completion_pairs, train_completion};
use sonospine::labeling::{raycast_training_clouds, train_point_classifier, ClassifierArch};
use sonospine::pipeline::{compare_trajectories, load_or_build_atlas, run_scan, scan_axis, Session, SessionConfig, Stage};
use sonospine::{Error, Vec3};

/// Simulated robotic ultrasound spine scans: acquisition, compounding,
/// vertebra labeling, shape completion and evaluation.
#[derive(Parser, Debug)]
#[command(name = "sonospine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Session configuration (TOML). Stage commands on an existing session
    /// default to the session's own config.toml.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Session (or output) directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or load) the phantom into a session.
    Phantom(Common),
    /// Run the whole pipeline into a new session.
    Scan(Common),
    /// Compound the session's sweep into a volume and surface cloud.
    Compound(Common),
    /// Label the session's surface cloud.
    Label(Common),
    /// Complete every labeled vertebra.
    Complete(Common),
    /// Evaluate completions against the phantom.
    Eval(Common),
    /// Run Linear, U-shape and Zig-Zag scans and tabulate the metrics.
    Compare(Common),
    /// Export per-frame overlays of the completions.
    Replay(Common),
    /// Train the classifier and completion model and save an atlas.
    Train(Common),
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn progress(stage: Stage, ok: bool) {
    println!("stage={} status={}", stage.name(), if ok { "ok" } else { "fail" });
}

/// Explicit `--config`, else the session's config (if any), else defaults.
fn resolve_config(c: &Common, session_default: bool) -> Result<SessionConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => SessionConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None if session_default && c.out.join("config.toml").exists() => {
            SessionConfig::load(&c.out.join("config.toml"))?
        }
        None => SessionConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn session(c: &Common) -> Result<Session<'static>, Failure> {
    let cfg = resolve_config(c, true)?;
    Ok(Session::create(&c.out, cfg)?.on_progress(progress))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Phantom(c) => {
            session(&c)?.phantom()?;
        }
        Command::Scan(c) => {
            let cfg = resolve_config(&c, false)?;
            let out = run_scan(&cfg, &c.out, progress)?;
            print!("{}", out.report.to_table());
        }
        Command::Compound(c) => {
            let mut s = session(&c)?;
            let sweep = s.load_sweep()?;
            s.compound(&sweep)?;
        }
        Command::Label(c) => {
            let mut s = session(&c)?;
            let sweep = s.load_sweep()?;
            let cloud = s.load_surface()?;
            let spine = s.load_phantom().ok();
            s.label(&cloud, scan_axis(&sweep.plan), spine.as_ref())?;
        }
        Command::Complete(c) => {
            let mut s = session(&c)?;
            let labeled = s.load_labeled()?;
            s.complete(&labeled)?;
        }
        Command::Eval(c) => {
            let mut s = session(&c)?;
            let loaded = s.load_completions().and_then(|r| Ok((r, s.load_phantom()?)));
            let (results, spine) = match loaded {
                Ok(v) => v,
                // record the failure in the session log as well
                Err(e) => return Err(s.run(Stage::Evaluate, |_| Err::<(), _>(e)).unwrap_err().into()),
            };
            let report = s.evaluate(&results, &spine)?;
            print!("{}", report.to_table());
        }
        Command::Compare(c) => {
            let cfg = resolve_config(&c, false)?;
            let report = compare_trajectories(&cfg, &c.out, |kind, stage, ok| {
                println!(
                    "method={} stage={} status={}",
                    kind.name(),
                    stage.name(),
                    if ok { "ok" } else { "fail" }
                );
            })?;
            print!("{}", report.to_table());
        }
        Command::Replay(c) => {
            let mut s = session(&c)?;
            let sweep = s.load_sweep()?;
            let results = s.load_completions()?;
            s.replay(&sweep, &results)?;
        }
        Command::Train(c) => train(&c)?,
    }
    Ok(())
}

fn stage_line(name: &str, r: &Result<(), Error>) {
    println!("stage={name} status={}", if r.is_ok() { "ok" } else { "fail" });
}

/// Writes `classifier.*`, `completion.*` and `atlas.json` under `--out`.
fn train(c: &Common) -> Result<(), Failure> {
    let cfg = resolve_config(c, false)?;
    let t = &cfg.training;
    let out: &Path = &c.out;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let first = cfg.seed.wrapping_add(10_000);

    let r = (|| {
        let clouds = raycast_training_clouds(&cfg.phantom.params, first, t.phantoms, t.grid_spacing, t.tilt_deg)?;
        let trained = train_point_classifier(&clouds, ClassifierArch::default(), &t.classifier)?;
        trained.model.save(&out.join("classifier"))
    })();
    stage_line("train_classifier", &r);
    r?;

    let r = (|| {
        let dirs = [-Vec3::z()];
        let mut pairs = Vec::new();
        for k in 0..t.phantoms as u64 {
            let spine = sonospine::phantom::generate_synthetic_spine(&cfg.phantom.params, first + k)?;
            pairs.extend(completion_pairs(
                &spine,
                &dirs,
                t.grid_spacing,
                t.completion_arch.coarse_points,
                cfg.completion.margin,
                first + k,
            )?);
        }
        let trained = train_completion(&pairs, t.completion_arch, t.loss, &t.completion)?;
        trained.model.save(&out.join("completion"))
    })();
    stage_line("train_completion", &r);
    r?;

    let r = load_or_build_atlas(&cfg).and_then(|a| a.save(&out.join("atlas.json")));
    stage_line("build_atlas", &r);
    r?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
