use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use repgen::config::{apply, parse_override, read_config_file, DataConfig, EvalConfig, GenerateConfig, TrainConfig};
use repgen::dataset::{build_dataset, load_dataset, Dataset, Example, Split};
use repgen::error::{Error, Result};
use repgen::eval::{eval_grid, evaluate};
use repgen::io::{create_dir, write_json};
use repgen::model::task_prompt;
use repgen::rng::{self, stream};
use repgen::task::Task;
use repgen::{ablate, checkpoint, trainer};

/// Joint understanding and intrinsic-generation training on synthetic scenes.
#[derive(Parser)]
#[command(name = "repgen", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` file (or a resolved_config.json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $REPGEN_OUT/<command>, or ./runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a scene dataset with oracle targets.
    Data {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes metrics.jsonl and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Permit scoring on the training split.
        #[arg(long)]
        allow_train_eval: bool,
        /// Rows of eval_grid.png.
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Write generated maps for a few scenes.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain once, then train and evaluate the four task-mix rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn output_root() -> PathBuf {
    std::env::var_os("REPGEN_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Config file, then command-specific flags, then `--set`, then `--seed`.
/// The output directory is `--out`, else `out_dir`, else the default.
fn resolve<T>(common: &Common, flags: Vec<(String, String)>, name: &str) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut pairs = match &common.config {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    pairs.extend(flags);
    for s in &common.set {
        pairs.push(parse_override(s)?);
    }
    if let Some(seed) = common.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        pairs.push(("out_dir".into(), path_str(out)));
    }
    let mut cfg: T = apply(&T::default(), &pairs)?;
    let flat = repgen::config::to_flat(&cfg);
    if flat.get("out_dir").is_some_and(|v| v == "\"\"") {
        cfg = apply(&cfg, &[("out_dir".into(), path_str(&output_root().join(name)))])?;
    }
    Ok(cfg)
}

fn flag<T: ToString>(key: &str, v: &Option<T>) -> Option<(String, String)> {
    v.as_ref().map(|v| (key.to_string(), v.to_string()))
}

fn default_data(dir: &str) -> PathBuf {
    if dir.is_empty() {
        output_root().join("data")
    } else {
        PathBuf::from(dir)
    }
}

fn cmd_data(common: &Common, n_train: Option<usize>, n_eval: Option<usize>, image_size: Option<usize>, force: bool) -> Result<()> {
    let flags = [flag("n_train", &n_train), flag("n_eval", &n_eval), flag("image_size", &image_size)].into_iter().flatten().collect();
    let cfg: DataConfig = resolve(common, flags, "data")?;
    if cfg.n_train == 0 {
        return Err(Error::config("n_train must be >= 1"));
    }
    if cfg.n_eval == 0 {
        return Err(Error::config("n_eval must be >= 1"));
    }
    let dir = PathBuf::from(&cfg.out_dir);
    if dir.join("manifest.json").exists() {
        if !force {
            return Err(Error::config(format!("dataset already exists at {} (use --force to replace it)", dir.display())));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let m = build_dataset(&cfg.spec(), cfg.n_train, cfg.n_eval, cfg.seed, &dir)?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    let degenerate = m.train.iter().chain(&m.eval).filter(|e| e.degenerate).count();
    println!(
        "dataset {}: {} train + {} eval scenes, {}x{} px, seed {}, vocab {}, {} degenerate",
        dir.display(),
        m.n_train,
        m.n_eval,
        m.spec.image_size,
        m.spec.image_size,
        m.root_seed,
        &m.vocab_hash[..12],
        degenerate
    );
    Ok(())
}

fn cmd_train(common: &Common, data: Option<PathBuf>) -> Result<()> {
    let mut cfg: TrainConfig = resolve(common, flag("data_dir", &data.as_deref().map(path_str)).into_iter().collect(), "train")?;
    cfg.data_dir = path_str(&default_data(&cfg.data_dir));
    let ds = load_dataset(Path::new(&cfg.data_dir))?;
    let out = PathBuf::from(&cfg.out_dir);
    let result = trainer::run(&cfg, &ds, &out)?;
    if let Some(last) = result.reports.last() {
        println!("step {} l_total {:.5} grad_norm {:.4}", last.step, last.l_total, last.grad_norm);
    }
    println!("checkpoint written to {}", out.join("checkpoint").display());
    Ok(())
}

/// Loads the checkpoint and its dataset, refusing a vocab mismatch.
fn load_pair(checkpoint_dir: &str, data_dir: &str) -> Result<(checkpoint::CheckpointManifest, repgen::model::Model, Dataset, String)> {
    if checkpoint_dir.is_empty() {
        return Err(Error::config("no checkpoint given (--checkpoint or checkpoint = ...)"));
    }
    let (manifest, model, _) = checkpoint::load(Path::new(checkpoint_dir))?;
    let data_dir = if data_dir.is_empty() { path_str(&default_data(&manifest.config.data_dir)) } else { data_dir.to_string() };
    let ds = load_dataset(Path::new(&data_dir))?;
    if ds.vocab.hash() != manifest.vocab_hash {
        return Err(Error::config(format!("checkpoint vocab hash does not match the dataset at {data_dir}")));
    }
    Ok((manifest, model, ds, data_dir))
}

fn pick_split<'d>(ds: &'d Dataset, split: &str, allow_train: bool) -> Result<&'d [Example]> {
    match split {
        "eval" => Ok(ds.split(Split::Eval)),
        "train" if allow_train => Ok(ds.split(Split::Train)),
        "train" => Err(Error::config("refusing to score training scenes without --allow-train-eval")),
        other => Err(Error::config(format!("split must be eval or train (got {other:?})"))),
    }
}

fn cmd_eval(common: &Common, ck: Option<PathBuf>, data: Option<PathBuf>, allow: bool, grid: Option<usize>) -> Result<()> {
    let flags = [
        flag("checkpoint", &ck.as_deref().map(path_str)),
        flag("data_dir", &data.as_deref().map(path_str)),
        allow.then(|| ("allow_train_eval".to_string(), "true".to_string())),
        flag("grid_rows", &grid),
    ];
    let mut cfg: EvalConfig = resolve(common, flags.into_iter().flatten().collect(), "eval")?;
    let (_, model, ds, data_dir) = load_pair(&cfg.checkpoint, &cfg.data_dir)?;
    cfg.data_dir = data_dir;
    let examples = pick_split(&ds, &cfg.split, cfg.allow_train_eval)?;
    let out = PathBuf::from(&cfg.out_dir);
    create_dir(&out)?;
    write_json(&out.join("resolved_config.json"), &cfg)?;
    let ev = evaluate(&model, &ds.vocab, &ds.prompts, examples, &ds.manifest.spec.depth_layers, cfg.n_eval_gen, cfg.seed)?;
    write_json(&out.join("eval_report.json"), &ev.report)?;
    if cfg.grid_rows > 0 {
        eval_grid(examples, &ev.generated, cfg.grid_rows)?.save_png(&out.join("eval_grid.png"))?;
    }
    println!("{}", serde_json::to_string_pretty(&ev.report).expect("report serializes"));
    Ok(())
}

fn cmd_generate(common: &Common, ck: Option<PathBuf>, data: Option<PathBuf>, task: Option<String>, count: Option<usize>) -> Result<()> {
    let flags = [
        flag("checkpoint", &ck.as_deref().map(path_str)),
        flag("data_dir", &data.as_deref().map(path_str)),
        flag("task", &task),
        flag("count", &count),
    ];
    let mut cfg: GenerateConfig = resolve(common, flags.into_iter().flatten().collect(), "generate")?;
    let task: Task = cfg.task.parse()?;
    if task == Task::Und {
        return Err(Error::config("task must be pixel, depth or seg"));
    }
    let (_, model, ds, data_dir) = load_pair(&cfg.checkpoint, &cfg.data_dir)?;
    cfg.data_dir = data_dir;
    let examples = pick_split(&ds, &cfg.split, true)?;
    let fixed = if cfg.prompt.is_empty() { None } else { Some(task_prompt(&ds.vocab, task, &cfg.prompt, model.config.task_token)?) };
    let out = PathBuf::from(&cfg.out_dir);
    create_dir(&out)?;
    write_json(&out.join("resolved_config.json"), &cfg)?;
    for (i, ex) in examples.iter().take(cfg.count).enumerate() {
        let mut r = rng::rng(cfg.seed, &[stream::SAMPLE, i as u64]);
        let ids = match &fixed {
            Some(ids) => ids.clone(),
            None => task_prompt(&ds.vocab, task, ds.pool(task).sample(rand::Rng::random(&mut r)), model.config.task_token)?,
        };
        let x = ex.rgb.to_latent(model.config.patch)?;
        let y = model.generate(&x, &ids, rand::Rng::random(&mut r))?;
        let img = repgen::image::RgbImage::from_latent(&y, ex.rgb.width, ex.rgb.height, model.config.patch)?;
        let path = out.join(format!("{}_{}.png", ex.meta.id, task.name()));
        img.save_png(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_ablate(common: &Common, data: Option<PathBuf>) -> Result<()> {
    let mut cfg: TrainConfig = resolve(common, flag("data_dir", &data.as_deref().map(path_str)).into_iter().collect(), "ablate")?;
    cfg.data_dir = path_str(&default_data(&cfg.data_dir));
    let ds = load_dataset(Path::new(&cfg.data_dir))?;
    let out = PathBuf::from(&cfg.out_dir);
    let result = ablate::ablate(&cfg, &ds, &out)?;
    print!("{}", result.table.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Data { common, n_train, n_eval, image_size, force } => cmd_data(&common, n_train, n_eval, image_size, force),
        Cmd::Train { common, data } => cmd_train(&common, data),
        Cmd::Eval { common, checkpoint, data, allow_train_eval, grid } => cmd_eval(&common, checkpoint, data, allow_train_eval, grid),
        Cmd::Generate { common, checkpoint, data, task, count } => cmd_generate(&common, checkpoint, data, task, count),
        Cmd::Ablate { common, data } => cmd_ablate(&common, data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
