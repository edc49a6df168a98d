use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use da3_cli::{
    compare, evaluate, exp1_arms, exp2_arm, format_rows, grid_to_text, output_root, parse_document, parse_grid,
    probe_run, render_pgm, resolve_config, smoke_config, train, CliError, ExperimentConfig, Palette, Result, Scenario,
};
use toml::{Table, Value};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "da3",
    version,
    about = "Train, evaluate and inspect saliency-token Q-learning agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one arm and write metadata, metrics and checkpoints.
    Train(TrainArgs),
    /// Greedy evaluation of a trained run with collection heatmaps.
    Evaluate {
        run: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Export saliency attention heatmaps for a scenario.
    ProbeAttention {
        run: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Output JSON file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a text grid as a PGM image.
    Render {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "gray")]
        palette: String,
        /// Also write the normalized text form of the grid.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Compare evaluated runs under a directory.
    Report { root: PathBuf },
    /// Write one config document per arm of an experiment.
    Arms {
        #[arg(long, value_enum)]
        exp: Exp,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Exp {
    Exp1,
    Exp2,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Output root; defaults to $DA3_OUTPUT_ROOT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
    /// Evaluate the trained policy afterwards.
    #[arg(long)]
    evaluate: bool,
}

#[derive(Args, Default)]
struct ConfigFlags {
    /// Config document (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the one-minute smoke configuration.
    #[arg(long)]
    smoke: bool,
    /// Built-in map name or map file.
    #[arg(long = "env", alias = "map")]
    env: Option<String>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    /// Observation window side.
    #[arg(long = "R")]
    size: Option<i64>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    wanderers: Option<i64>,
    #[arg(long)]
    objects: Option<i64>,
    #[arg(long)]
    horizon: Option<i64>,
    #[arg(long)]
    epochs: Option<i64>,
    #[arg(long)]
    seed: Option<i64>,
    /// Token width of the transformer trunk.
    #[arg(long)]
    width: Option<i64>,
    #[arg(long)]
    heads: Option<i64>,
    #[arg(long)]
    loops: Option<i64>,
    #[arg(long)]
    eval_episodes: Option<i64>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    batch: Option<i64>,
    #[arg(long)]
    train_every: Option<i64>,
    #[arg(long)]
    target_sync: Option<i64>,
}

impl ConfigFlags {
    fn table(&self) -> Table {
        let mut t = Table::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                t.insert(k.into(), v);
            }
        };
        put("map", self.env.clone().map(Value::from));
        put("algo", self.algo.clone().map(Value::from));
        put("noise", self.noise.clone().map(Value::from));
        put("size", self.size.map(Value::from));
        put("profile", self.profile.clone().map(Value::from));
        put("wanderers", self.wanderers.map(Value::from));
        put("objects", self.objects.map(Value::from));
        put("horizon", self.horizon.map(Value::from));
        put("epochs", self.epochs.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("width", self.width.map(Value::from));
        put("heads", self.heads.map(Value::from));
        put("loops", self.loops.map(Value::from));
        put("eval_episodes", self.eval_episodes.map(Value::from));
        put("name", self.name.clone().map(Value::from));
        let mut learner = Table::new();
        let mut lput = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                learner.insert(k.into(), v);
            }
        };
        lput("lr", self.lr.map(Value::from));
        lput("gamma", self.gamma.map(Value::from));
        lput("batch", self.batch.map(Value::from));
        lput("train_every", self.train_every.map(Value::from));
        lput("target_sync", self.target_sync.map(Value::from));
        if !learner.is_empty() {
            t.insert("learner".into(), Value::Table(learner));
        }
        t
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let doc = match (&self.config, self.smoke) {
            (Some(_), true) => return Err(CliError::Usage("--config and --smoke are exclusive".into())),
            (Some(path), false) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                Some(parse_document(&text)?)
            }
            (None, true) => Some(parse_document(&smoke_config().to_toml())?),
            (None, false) => None,
        };
        resolve_config(doc, self.table())
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.flags.resolve()?;
            if args.dry_run {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let dir = output_root(args.out.as_deref()).join(cfg.run_name());
            let every = (cfg.epochs / 20).max(1);
            let epochs = cfg.epochs;
            train(&cfg, &dir, &mut |s| {
                if (s.epoch + 1) % every == 0 || s.epoch + 1 == epochs {
                    eprintln!(
                        "epoch {:>5}/{epochs}  objects {:>3}  reward {:>7.1}  agent collisions {:>3}  wall collisions {:>3}",
                        s.epoch + 1,
                        s.total.objects,
                        s.total.reward,
                        s.total.agent_collisions,
                        s.total.wall_collisions
                    );
                }
            })?;
            println!("{}", dir.display());
            if args.evaluate {
                println!("{}", evaluate(&dir, None)?.row());
            }
        }
        Command::Evaluate { run, episodes } => {
            let report = evaluate(&run, episodes)?;
            println!("{}", report.row());
            for a in &report.agents {
                let kind = if a.wanderer { "wanderer" } else { "learner" };
                println!("agent {} ({kind}): {} objects", a.agent, a.total);
            }
        }
        Command::ProbeAttention { run, scenario, out } => {
            let text = fs::read_to_string(&scenario).map_err(|e| CliError::io(&scenario, e))?;
            let sc: Scenario = toml::from_str(&text).map_err(|e| CliError::Usage(e.to_string()))?;
            let exports = probe_run(&run, &sc)?;
            let json = serde_json::to_string_pretty(&exports).expect("probe export serializes");
            match out {
                Some(path) => write(&path, &json)?,
                None => println!("{json}"),
            }
        }
        Command::Render {
            input,
            out,
            palette,
            text,
        } => {
            let src = fs::read_to_string(&input).map_err(|e| CliError::io(&input, e))?;
            let grid = parse_grid(&src)?;
            write(&out, &render_pgm(&grid, palette.parse::<Palette>()?)?)?;
            if let Some(path) = text {
                write(&path, &grid_to_text(&grid))?;
            }
        }
        Command::Report { root } => print!("{}", format_rows(&compare(&root)?)),
        Command::Arms { exp, out, flags } => {
            let base = flags.resolve()?;
            let arms = match exp {
                Exp::Exp1 => exp1_arms(&base),
                Exp::Exp2 => vec![exp2_arm(&base)],
            };
            for arm in arms {
                let path = out.join(format!("{}.toml", arm.run_name()));
                write(&path, &arm.to_toml())?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
