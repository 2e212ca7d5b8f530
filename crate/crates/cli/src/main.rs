//! `fashion-rag`: build the garment index, train both stages, generate,
//! evaluate and run the N_c × N_r ablation grid.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use fashion_rag::{Category, Error, Profile, Result};

#[derive(Parser, Debug)]
#[command(name = "fashion-rag", version, about = "Retrieval-augmented fashion inpainting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// desk | full (default: $FASHIONRAG_PROFILE, else desk).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Dataset root.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    index: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build or query the garment index.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Write a synthetic dataset in the expected layout.
    Toydata {
        #[arg(long, default_value = "data/toy")]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Train one stage.
    Train {
        #[command(subcommand)]
        stage: TrainStage,
    },
    /// Inpaint the test split.
    Generate(EvalArgs),
    /// Generate (or read a manifest of generated images) and score it.
    Evaluate {
        #[command(flatten)]
        eval: EvalArgs,
        /// Score the images listed in this evaluation manifest instead of generating.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate every (N_c, N_r) cell with one checkpoint.
    Ablate {
        #[command(flatten)]
        eval: EvalArgs,
        /// Axes such as `nc=1,2,3 nr=0,1,2,3`.
        #[arg(long, num_args = 1.., default_values = ["nc=1,2,3", "nr=0,1,2,3"])]
        grid: Vec<String>,
    },
}

#[derive(Subcommand, Debug)]
enum IndexAction {
    Build {
        /// Output file (default: <data>/index.frix).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Query {
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        category: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
enum TrainStage {
    Stage1(TrainArgs),
    Stage2(TrainArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// paired | unpaired
    #[arg(long)]
    setting: Option<String>,
    #[arg(long = "n-r")]
    n_r: Option<usize>,
    #[arg(long = "n-c")]
    n_c: Option<usize>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    text_scale: Option<f64>,
    #[arg(long)]
    pose_scale: Option<f64>,
}

fn overrides(common: &Common) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let path = |p: &PathBuf| p.display().to_string();
    if let Some(v) = &common.profile {
        out.push(("profile".into(), v.clone()));
    }
    if let Some(v) = &common.data {
        out.push(("data_root".into(), path(v)));
    }
    if let Some(v) = &common.runs_dir {
        out.push(("runs_dir".into(), path(v)));
    }
    if let Some(v) = common.seed {
        out.push(("seed".into(), v.to_string()));
    }
    if let Some(v) = &common.checkpoint {
        out.push(("checkpoint".into(), path(v)));
    }
    if let Some(v) = &common.index {
        out.push(("index".into(), path(v)));
    }
    out
}

fn eval_overrides(a: &EvalArgs) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if let Some(v) = &a.setting {
        out.push(("setting".into(), v.clone()));
    }
    if let Some(v) = a.n_r {
        out.push(("n_r".into(), v.to_string()));
    }
    if let Some(v) = a.n_c {
        out.push(("n_c".into(), v.to_string()));
    }
    if let Some(v) = a.steps {
        out.push(("guidance.steps".into(), v.to_string()));
    }
    if let Some(v) = a.text_scale {
        out.push(("guidance.text".into(), v.to_string()));
    }
    if let Some(v) = a.pose_scale {
        out.push(("guidance.pose".into(), v.to_string()));
    }
    out
}

fn train_overrides(stage: u8, a: &TrainArgs) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if let Some(v) = a.steps {
        out.push((format!("stage{stage}.steps"), v.to_string()));
    }
    if let Some(v) = a.batch_size {
        out.push(("batch_size".into(), v.to_string()));
    }
    if let Some(v) = a.lr {
        out.push(("lr".into(), v.to_string()));
    }
    out
}

/// `nc=1,2,3 nr=0,1,2,3` -> ([1,2,3], [0,1,2,3]).
fn parse_grid(items: &[String]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut nc, mut nr) = (vec![1, 2, 3], vec![0, 1, 2, 3]);
    for item in items {
        let (axis, values) = item
            .split_once('=')
            .ok_or_else(|| Error::config("grid", format!("expected axis=values, got `{item}`")))?;
        let parsed = values
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|_| Error::config(format!("grid.{axis}"), format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        match axis.trim() {
            "nc" => nc = parsed,
            "nr" => nr = parsed,
            other => return Err(Error::config("grid", format!("unknown axis `{other}` (expected nc or nr)"))),
        }
    }
    Ok((nc, nr))
}

fn build_config(common: &Common, extra: Vec<(String, String)>) -> Result<RunConfig> {
    let mut config = RunConfig::from_env()?;
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    let mut pairs = overrides(common);
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::config("set", format!("expected KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.to_string()));
    }
    pairs.extend(extra);
    // A profile change resets profile-dependent defaults, so it goes first.
    pairs.sort_by_key(|(k, _)| k != "profile");
    for (k, v) in pairs {
        config.set(&k, &v)?;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli, argv: &str) -> Result<()> {
    match cli.command {
        Command::Toydata { out, n } => {
            let config = build_config(&cli.common, vec![])?;
            commands::toydata(&out, n, config.seed, &config)
        }
        Command::Index { action } => {
            let config = build_config(&cli.common, vec![])?;
            match action {
                IndexAction::Build { out } => commands::index_build(&config, out),
                IndexAction::Query { caption, k, category } => {
                    let category = category.map(|c| c.parse::<Category>()).transpose()?;
                    commands::index_query(&config, &caption, k, category)
                }
            }
        }
        Command::Train { stage } => {
            let (n, args) = match &stage {
                TrainStage::Stage1(a) => (1, a),
                TrainStage::Stage2(a) => (2, a),
            };
            let config = build_config(&cli.common, train_overrides(n, args))?;
            if config.profile == Profile::Full {
                log::warn!("full profile requires pretrained weights that are not bundled");
            }
            commands::train(n, &config, argv)
        }
        Command::Generate(a) => commands::generate_cmd(&build_config(&cli.common, eval_overrides(&a))?, argv),
        Command::Evaluate { eval, manifest } => {
            let config = build_config(&cli.common, eval_overrides(&eval))?;
            commands::evaluate(&config, manifest.as_deref(), argv)
        }
        Command::Ablate { eval, grid } => {
            let config = build_config(&cli.common, eval_overrides(&eval))?;
            let (nc, nr) = parse_grid(&grid)?;
            commands::ablate(&config, &nc, &nr, argv)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = std::env::args().collect::<Vec<_>>().join(" ");
    let cli = Cli::parse();
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Config { key, reason } => eprintln!("error: invalid configuration `{key}`: {reason}"),
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let (nc, nr) = parse_grid(&["nc=1,2,3".into(), "nr=0,1,2,3".into()]).unwrap();
        assert_eq!((nc.len() * nr.len()), 12);
        let (nc, nr) = parse_grid(&["nr=0,3".into()]).unwrap();
        assert_eq!((nc, nr), (vec![1, 2, 3], vec![0, 3]));
        assert!(parse_grid(&["nx=1".into()]).is_err());
        assert!(parse_grid(&["nc=a".into()]).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
