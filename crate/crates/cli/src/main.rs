use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lmp_core::config::RunConfig;
use lmp_core::episode::{load_episode, save_episode_tagged, DomainStyle, Episode};
use lmp_core::eval::DetBranch;
use lmp_core::model::Model;
use lmp_core::par::Exec;
use lmp_core::params::{Checkpoint, ParamStore};
use lmp_core::pipeline::{
    ablation_csv, embeddings_csv, episode_prototypes, evaluate_episode, generate_from_config, query_embeddings,
    run_ablation, Sweep,
};
use lmp_core::train::{run_training, LogRecord, Stage};
use lmp_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "lmp", version, about = "Few-shot object detection with text and visual prototypes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(cfg)
    }

    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

impl StageArg {
    fn stages(self) -> &'static [Stage] {
        match self {
            StageArg::One => &[Stage::One],
            StageArg::Two => &[Stage::Two],
            StageArg::Both => &[Stage::One, Stage::Two],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Text,
    Visual,
    Ensemble,
}

impl From<BranchArg> for DetBranch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Text => DetBranch::Text,
            BranchArg::Visual => DetBranch::Visual,
            BranchArg::Ensemble => DetBranch::Ensemble,
        }
    }
}

fn parse_style(s: &str) -> std::result::Result<DomainStyle, String> {
    DomainStyle::parse(s).ok_or_else(|| {
        let names: Vec<&str> = DomainStyle::ALL.iter().map(|d| d.name()).collect();
        format!("unknown style {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic episode to COCO-style JSON plus PNG images.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_style)]
        style: Option<DomainStyle>,
        /// Support instances per class.
        #[arg(long, value_parser = ["1", "5", "10"])]
        shots: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune on an episode in one or both stages.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Start from this checkpoint; its config hash must match.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for checkpoints and the JSON-lines log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect on the episode's query images and report mAP.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long, value_enum, default_value = "ensemble")]
        branch: BranchArg,
        /// Output directory for metrics and detections.
        #[arg(long)]
        out: PathBuf,
        /// Also write query-object and hard-negative features as CSV.
        #[arg(long)]
        export_embeddings: bool,
    },
    /// Train and evaluate once per sweep value; writes a CSV.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `n_neg:0,1,3,5`, `alpha:0,0.5,1` or `level:0..3`.
        #[arg(long)]
        sweep: String,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        /// Run sweep points one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Write class prototypes and support hard negatives as CSV.
    ExportPrototypes {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("checkpoint_{}.json", stage.tag()))
}

fn load_episode_for(path: &Path, cfg: &RunConfig) -> Result<Episode> {
    let ep = load_episode(path)?;
    if ep.image_size != cfg.model.image_size {
        return Err(Error::BadData(format!(
            "episode images are {} px but the model expects {} px",
            ep.image_size, cfg.model.image_size
        ))
        .into());
    }
    Ok(ep)
}

/// Config for a saved checkpoint: the file given, else the embedded one,
/// with overrides on top.
fn checkpoint_config(args: &ConfigArgs, ck: &Checkpoint) -> Result<RunConfig> {
    let base = match (&args.config, &ck.config) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(text)) => RunConfig::from_toml_str(text)?,
        (None, None) => return Err(Error::BadConfig("checkpoint has no embedded config; pass --config".into()).into()),
    };
    args.apply(base)
}

fn load_checkpoint(path: &Path, model: &Model) -> Result<(Checkpoint, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    let store = ck.params()?;
    let expected = model.init_params(0)?;
    for (name, t) in expected.iter() {
        match store.get(name) {
            Some(s) if s.shape() == t.shape() => {}
            _ => {
                return Err(Error::BadData(format!("{}: parameter {name} missing or wrong shape", path.display())).into())
            }
        }
    }
    Ok((ck, store))
}

fn cmd_generate(
    args: &ConfigArgs,
    out: &Path,
    style: Option<DomainStyle>,
    shots: Option<&str>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = args.load()?;
    if let Some(s) = style {
        cfg.episode.style = s;
    }
    if let Some(k) = shots {
        cfg.episode.k_shot = k.parse()?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ep = generate_from_config(&cfg, cfg.seed)?;
    create_dir(out)?;
    save_episode_tagged(&ep, out, Some(&cfg.hash()))?;
    let n_sup: usize = ep.supports.iter().map(|i| i.annotations.len()).sum();
    let n_q: usize = ep.queries.iter().map(|i| i.annotations.len()).sum();
    println!(
        "episode: C={} K={} style={} seed={} | {} support images ({} instances), {} query images ({} objects)",
        ep.n_way,
        ep.k_shot,
        ep.style.name(),
        ep.seed,
        ep.supports.len(),
        n_sup,
        ep.queries.len(),
        n_q
    );
    println!("classes: {}", ep.class_names().join(", "));
    println!("config hash {}", cfg.hash());
    Ok(())
}

fn cmd_train(args: &ConfigArgs, episode: &Path, stage: StageArg, resume: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = args.load()?;
    let hash = cfg.hash();
    let ep = load_episode_for(episode, &cfg)?;
    let model = Model::new(&cfg.model)?;
    let mut store = match resume {
        Some(p) => {
            let (ck, store) = load_checkpoint(p, &model)?;
            if ck.config_hash != hash {
                return Err(Error::BadData(format!(
                    "refusing to resume: {} was trained with config {} but the current config is {}",
                    p.display(),
                    ck.config_hash,
                    hash
                ))
                .into());
            }
            store
        }
        None => model.init_params(cfg.seed)?,
    };
    create_dir(out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err = None;
    for &st in stage.stages() {
        let steps = st.steps(&cfg.train);
        let summary = run_training(&model, &mut store, &ep, &cfg, st, steps, &mut |r: &LogRecord| {
            if write_err.is_none() {
                if let Err(e) = writeln!(log, "{}", r.to_json_line()) {
                    write_err = Some(e);
                }
            }
        });
        log.flush()?;
        let summary = summary?;
        if let Some(e) = write_err.take() {
            return Err(e).with_context(|| format!("writing {}", log_path.display()));
        }
        let path = checkpoint_path(out, st);
        Checkpoint::new(&store, &hash, cfg.seed, st.tag(), steps)
            .with_config(cfg.to_toml_string())
            .save(&path)?;
        match (summary.losses.first(), summary.losses.last()) {
            (Some(a), Some(b)) => println!("{}: {steps} steps, loss {a:.4} -> {b:.4}, saved {}", st.tag(), path.display()),
            _ => println!("{}: 0 steps, saved {}", st.tag(), path.display()),
        }
    }
    println!("config hash {hash}");
    Ok(())
}

fn cmd_eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    episode: &Path,
    branch: DetBranch,
    out: &Path,
    export_embeddings: bool,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = checkpoint_config(args, &ck)?;
    let model = Model::new(&cfg.model)?;
    let (_, store) = load_checkpoint(checkpoint, &model)?;
    let ep = load_episode_for(episode, &cfg)?;
    let ev = evaluate_episode(&model, &store, &ep, branch, &cfg.eval, Exec::default_mode())?;
    let names = ep.class_names();
    create_dir(out)?;
    let per_class: Vec<_> = ev
        .result
        .per_class
        .iter()
        .enumerate()
        .map(|(c, ap)| json!({ "class_id": c, "name": names[c], "ap": ap }))
        .collect();
    let metrics = json!({
        "branch": branch.name(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "checkpoint_stage": ck.stage,
        "map": ev.result.map,
        "map50": ev.map50,
        "per_class": per_class,
        "iou_thresholds": ev.result.thresholds,
        "map_per_threshold": ev.result.per_threshold,
    });
    write_json(&out.join(format!("metrics_{}.json", branch.name())), &metrics)?;
    let dets: Vec<_> = ev
        .detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| {
            let names = &names;
            ds.iter().map(move |d| {
                json!({
                    "image": i,
                    "bbox": d.bbox.to_array(),
                    "class_id": d.class_id,
                    "class_name": names[d.class_id],
                    "score": d.score,
                    "branch": d.branch,
                })
            })
        })
        .collect();
    write_json(
        &out.join(format!("detections_{}.json", branch.name())),
        &json!({ "config_hash": cfg.hash(), "seed": cfg.seed, "detections": dets }),
    )?;
    if export_embeddings {
        let rows = query_embeddings(&model, &store, &ep, &cfg)?;
        let path = out.join("embeddings.csv");
        fs::write(&path, embeddings_csv(&rows, &names)).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{} mAP {:.4} (mAP@0.5 {:.4})", branch.name(), ev.result.map, ev.map50);
    for (c, ap) in ev.result.per_class.iter().enumerate() {
        match ap {
            Some(ap) => println!("  {:<24} AP {ap:.4}", names[c]),
            None => println!("  {:<24} AP n/a (no ground truth)", names[c]),
        }
    }
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs, sweep: &str, out: &Path, sequential: bool) -> Result<()> {
    let cfg = args.load()?;
    let sweep: Sweep = sweep.parse()?;
    let exec = if sequential { Exec::Sequential } else { Exec::default_mode() };
    let rows = run_ablation(&cfg, &sweep, exec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, ablation_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
    for r in &rows {
        println!(
            "{}={}: text {:.4} visual {:.4} ensemble {:.4}",
            r.param, r.value, r.map_text, r.map_visual, r.map_ensemble
        );
    }
    Ok(())
}

fn cmd_export_prototypes(args: &ConfigArgs, checkpoint: &Path, episode: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = checkpoint_config(args, &ck)?;
    let model = Model::new(&cfg.model)?;
    let (_, store) = load_checkpoint(checkpoint, &model)?;
    let ep = load_episode_for(episode, &cfg)?;
    let set = episode_prototypes(&model, &store, &ep, &cfg)?;
    set.write_csv(&ep.class_names(), out)?;
    println!(
        "{} class prototypes, {} hard negatives -> {}",
        set.class_protos.dims2().0,
        set.neg_parent.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Generate { cfg, out, style, shots, seed } => cmd_generate(&cfg, &out, style, shots.as_deref(), seed),
        Command::Train { cfg, episode, stage, resume, out } => cmd_train(&cfg, &episode, stage, resume.as_deref(), &out),
        Command::Eval { cfg, checkpoint, episode, branch, out, export_embeddings } => {
            cmd_eval(&cfg, &checkpoint, &episode, branch.into(), &out, export_embeddings)
        }
        Command::Ablate { cfg, sweep, out, sequential } => cmd_ablate(&cfg, &sweep, &out, sequential),
        Command::ExportPrototypes { cfg, checkpoint, episode, out } => {
            cmd_export_prototypes(&cfg, &checkpoint, &episode, &out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_numerical() => EXIT_NUMERIC,
        Some(Error::BadConfig(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
