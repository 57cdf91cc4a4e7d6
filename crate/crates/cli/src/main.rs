use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use priorcascade::config::ExperimentConfig;
use priorcascade::episodes::io::{load_dataset, read_splits, save_dataset, write_splits};
use priorcascade::episodes::{generate_synthetic_dataset, make_splits};
use priorcascade::evaluation::{
    evaluate_split, render_rows, run_ablation_table, sample_eval_episodes, Column, EvalReport, IouCounts,
};
use priorcascade::experiment::{
    eval_seed, load_backbone, load_variant, obtain_backbone, run_dir, train_variants, variant_dir, BACKBONE_FILE,
};
use priorcascade::pipeline::Segmenter;
use priorcascade::rng::{derive_seed, tag};
use priorcascade::training::{train, TrainData};
use priorcascade::{Backbone, Dataset, Error, FusionNet, Result, SplitPlan};

const OUT_ENV: &str = "PRIORCASCADE_OUT";
const MANIFEST_FILE: &str = "manifest.json";
const SPLITS_FILE: &str = "splits.txt";
const LOCK_FILE: &str = ".lock";

#[derive(Parser)]
#[command(name = "priorcascade", version, about = "Few-shot segmentation experiments on synthetic shapes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config in TOML; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: config `output`, then $PRIORCASCADE_OUT, then ./runs].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing results instead of reusing or refusing them.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its class splits.
    GenData,
    /// Pretrain the backbone on the training classes of the configured split.
    PretrainBackbone,
    /// Train the configured cascade on the configured split.
    Train,
    /// Score a trained cascade on test episodes of the configured split.
    Eval {
        /// Number of test episodes [default: config `eval.episodes`].
        #[arg(long)]
        episodes: Option<usize>,
        /// Support images per episode [default: config `eval.shots`].
        #[arg(long)]
        shots: Option<usize>,
        /// Directory with the cascade checkpoints [default: the run directory].
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Train and score every ablation variant under every ablation seed.
    Ablate {
        /// Only score variants that are already trained; others are reported absent.
        #[arg(long)]
        eval_only: bool,
    },
    /// Render panels of test episodes.
    Viz {
        /// Number of panels.
        #[arg(long, default_value_t = 4)]
        panels: usize,
        /// Comma-separated columns among a-f.
        #[arg(long, default_value = "a,b,c,d,e,f")]
        columns: String,
        /// Directory with the cascade checkpoints [default: the run directory].
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PretrainBackbone => "pretrain-backbone",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Viz { .. } => "viz",
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock> {
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(Lock(path));
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let pid = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    if let Some(pid) = pid.filter(|&p| process_alive(p)) {
                        return Err(Error::config(
                            "out",
                            format!("{} is in use by process {pid}", dir.display()),
                        ));
                    }
                    log::warn!("removing stale lock {}", path.display());
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::config("out", format!("could not lock {}", dir.display())))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn process_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new(&format!("/proc/{pid}")).exists()
    } else {
        true
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    fn run_dir(&self) -> PathBuf {
        run_dir(&self.out, self.cfg.seed, self.cfg.split)
    }

    fn variant_dir(&self) -> PathBuf {
        variant_dir(&self.run_dir(), &self.cfg.train.cascade)
    }

    /// Write the resolved config so the command can be rerun from it alone.
    fn snapshot(&self, command: &str) -> Result<()> {
        let mut snap = self.cfg.clone();
        snap.output = Some(self.out.clone());
        snap.save(&self.out.join(format!("config.{command}.toml")))
    }

    fn load_data(&self) -> Result<(Dataset, Vec<SplitPlan>)> {
        let dir = self.cfg.dataset_dir(&self.out);
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::config(
                "dataset.path",
                format!("no dataset at {}; run gen-data first", dir.display()),
            ));
        }
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: serde_json::Value = serde_json::from_str(&text)?;
        if manifest["synth"] != serde_json::to_value(&self.cfg.dataset.synth)? {
            return Err(Error::config(
                "dataset.synth",
                format!("differs from the dataset at {}; rerun gen-data", dir.display()),
            ));
        }
        let plans = read_splits(&dir.join(SPLITS_FILE))?;
        if plans.len() != self.cfg.n_splits {
            return Err(Error::config(
                "n_splits",
                format!("the dataset at {} has {} splits", dir.display(), plans.len()),
            ));
        }
        Ok((load_dataset(&dir)?, plans))
    }

    fn split<'a>(&self, plans: &'a [SplitPlan]) -> &'a SplitPlan {
        &plans[self.cfg.split]
    }

    fn backbone(&self, split: &SplitPlan) -> Result<Backbone> {
        let path = self.run_dir().join(BACKBONE_FILE);
        if !path.exists() {
            return Err(Error::config(
                "split",
                format!("no backbone at {}; run pretrain-backbone or train first", path.display()),
            ));
        }
        load_backbone(&path, split)
    }

    fn networks(&self, checkpoints: Option<&Path>) -> Result<Vec<FusionNet>> {
        let dir = checkpoints.map(Path::to_path_buf).unwrap_or_else(|| self.variant_dir());
        load_variant(&dir, &self.cfg.train)?.ok_or_else(|| {
            Error::config(
                "train.cascade",
                format!("no trained cascade at {}; run train first", dir.display()),
            )
        })
    }
}

fn resolve_out(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.output.clone())
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn remove_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let dir = ctx.cfg.dataset_dir(&ctx.out);
    let populated = fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if populated {
        if !ctx.force {
            return Err(Error::config(
                "dataset.path",
                format!("{} is not empty; pass --force to replace it", dir.display()),
            ));
        }
        remove_dir(&dir)?;
    }
    let synth = &ctx.cfg.dataset.synth;
    let ds = generate_synthetic_dataset(synth)?;
    let written = save_dataset(&ds, &dir)?;
    let plans = make_splits(&ds.class_ids(), ctx.cfg.n_splits)?;
    write_splits(&plans, &dir.join(SPLITS_FILE))?;
    let entries: Vec<serde_json::Value> = written
        .iter()
        .zip(ds.samples())
        .map(|(img, s)| {
            let rel = img.strip_prefix(&dir).unwrap_or(img);
            serde_json::json!({
                "class_id": s.class_id,
                "image": rel,
                "mask": rel.with_extension("mask"),
            })
        })
        .collect();
    let manifest = serde_json::json!({
        "seed": ctx.cfg.seed,
        "data_seed": synth.seed,
        "synth": synth,
        "n_splits": ctx.cfg.n_splits,
        "entries": entries,
    });
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    println!("wrote {} samples of {} classes to {}", ds.len(), ds.class_ids().len(), dir.display());
    Ok(())
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let (ds, plans) = ctx.load_data()?;
    let split = ctx.split(&plans);
    let run = ctx.run_dir();
    let path = run.join(BACKBONE_FILE);
    if path.exists() && !ctx.force {
        load_backbone(&path, split)?;
        println!("backbone already at {}; pass --force to retrain", path.display());
        return Ok(());
    }
    if path.exists() {
        fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    obtain_backbone(&ctx.cfg, &ds, split, Some(&run))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train_cmd(ctx: &Ctx) -> Result<()> {
    let (ds, plans) = ctx.load_data()?;
    let split = ctx.split(&plans);
    let run = ctx.run_dir();
    let vdir = ctx.variant_dir();
    if ctx.force {
        remove_dir(&vdir)?;
    } else if load_variant(&vdir, &ctx.cfg.train)?.is_some() {
        println!("{} is already trained; pass --force to retrain", vdir.display());
        return Ok(());
    }
    let bb = obtain_backbone(&ctx.cfg, &ds, split, Some(&run))?;
    let data = TrainData {
        dataset: &ds,
        split,
        backbone: &bb,
        fusion: &ctx.cfg.fusion,
    };
    let (nets, log) = train(&ctx.cfg.train, data, Some(&vdir))?;
    let last = log.losses().last().copied().unwrap_or(f64::NAN);
    println!("trained {} network(s) in {}; final loss {last:.4}", nets.len(), vdir.display());
    Ok(())
}

fn eval_cmd(ctx: &Ctx, checkpoints: Option<&Path>) -> Result<()> {
    let (ds, plans) = ctx.load_data()?;
    let split = ctx.split(&plans);
    let bb = ctx.backbone(split)?;
    let seg = Segmenter::new(bb, ctx.networks(checkpoints)?, ctx.cfg.train.cascade.clone())?;
    let eval = &ctx.cfg.eval;
    let report = evaluate_split(&seg, &ds, split, eval.episodes, eval.shots, eval_seed(&ctx.cfg))?;
    let vdir = ctx.variant_dir();
    fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
    let path = vdir.join(format!("eval-{}shot.json", eval.shots));
    report.save(&path)?;
    println!(
        "split {} {}-shot over {} episodes: mIoU {:.2}",
        split.split_index,
        eval.shots,
        report.n_episodes,
        100.0 * report.miou
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn ablate(ctx: &Ctx, plans: &[SplitPlan], ds: &Dataset, eval_only: bool) -> Result<()> {
    let variants = &ctx.cfg.ablation.variants;
    let seeds = &ctx.cfg.ablation.seeds;
    let mut cells: BTreeMap<(usize, u64), Option<f64>> = BTreeMap::new();
    let mut reports: Vec<EvalReport> = Vec::new();
    for &seed in seeds {
        let mut cfg = ctx.cfg.clone();
        cfg.set_seed(seed);
        let mut per_variant: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
        for split in plans {
            let run = run_dir(&ctx.out, seed, split.split_index);
            let trained: Vec<Option<(Backbone, Vec<FusionNet>)>> = if eval_only {
                let path = run.join(BACKBONE_FILE);
                let bb = if path.exists() { Some(load_backbone(&path, split)?) } else { None };
                let mut out = Vec::with_capacity(variants.len());
                for v in variants {
                    let tc = priorcascade::training::TrainConfig {
                        cascade: v.clone(),
                        ..cfg.train.clone()
                    };
                    let nets = load_variant(&variant_dir(&run, v), &tc)?;
                    out.push(bb.clone().zip(nets));
                }
                out
            } else {
                let bb = obtain_backbone(&cfg, ds, split, Some(&run))?;
                train_variants(&cfg, ds, split, &bb, variants, Some(&run))?
                    .into_iter()
                    .map(|n| Some((bb.clone(), n)))
                    .collect()
            };
            for (vi, (v, t)) in variants.iter().zip(trained).enumerate() {
                let Some((bb, nets)) = t else { continue };
                let seg = Segmenter::new(bb, nets, v.clone())?;
                let r = evaluate_split(&seg, ds, split, cfg.eval.episodes, cfg.eval.shots, eval_seed(&cfg))?;
                log::info!("seed {seed} split {} {}: mIoU {:.2}", split.split_index, v.label(), 100.0 * r.miou);
                r.save(&variant_dir(&run, v).join(format!("eval-{}shot.json", cfg.eval.shots)))?;
                per_variant[vi].push(r.miou);
                reports.push(r);
            }
        }
        for (vi, m) in per_variant.iter().enumerate() {
            let cell = (m.len() == plans.len()).then(|| m.iter().sum::<f64>() / m.len() as f64);
            cells.insert((vi, seed), cell);
        }
    }
    let table = run_ablation_table(variants, seeds, |v, s| {
        let vi = variants.iter().position(|x| x == v).expect("listed variant");
        Ok(cells[&(vi, s)])
    })?;
    let text = table.render();
    let txt = ctx.out.join("ablation.txt");
    fs::write(&txt, &text).map_err(|e| Error::io(&txt, e))?;
    write_json(
        &ctx.out.join("ablation.json"),
        &serde_json::json!({ "table": table, "reports": reports }),
    )?;
    print!("{text}");
    Ok(())
}

fn viz(ctx: &Ctx, panels: usize, columns: &[Column], checkpoints: Option<&Path>) -> Result<()> {
    let (ds, plans) = ctx.load_data()?;
    let split = ctx.split(&plans);
    let bb = ctx.backbone(split)?;
    let seg = Segmenter::new(bb, ctx.networks(checkpoints)?, ctx.cfg.train.cascade.clone())?;
    let seed = derive_seed(ctx.cfg.seed, &[tag::EVAL, 1]);
    let episodes = sample_eval_episodes(&ds, split, panels, ctx.cfg.eval.shots, seed)?;
    let dir = ctx.variant_dir().join("viz");
    remove_dir(&dir)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut index = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let trace = seg.run(ep)?;
        let file = format!("panel-{i:02}.png");
        render_rows(&[(ep, &trace)], columns, seg.cascade.threshold, &dir.join(&file))?;
        let iou = IouCounts::of(&trace.mask_full, &ep.query.mask)?.iou();
        index.push(serde_json::json!({ "file": file, "class_id": ep.class_id, "iou": iou }));
    }
    let letters: String = columns.iter().map(|c| c.letter()).collect();
    write_json(
        &dir.join("index.json"),
        &serde_json::json!({ "columns": letters, "split": split.split_index, "panels": index }),
    )?;
    println!("wrote {} panels to {}", episodes.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let Cli { global, command } = cli;
    let mut cfg = match &global.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::config("config", format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.set_seed(s);
    }
    match &command {
        Command::Eval { episodes, shots, .. } => {
            cfg.eval.episodes = episodes.unwrap_or(cfg.eval.episodes);
            cfg.eval.shots = shots.unwrap_or(cfg.eval.shots);
        }
        Command::Viz { panels: 0, .. } => return Err(Error::config("panels", "must be at least 1")),
        _ => {}
    }
    cfg.validate()?;
    let columns = match &command {
        Command::Viz { columns, .. } => Column::parse_list(columns)?,
        _ => Vec::new(),
    };
    let out = resolve_out(global.out, &cfg);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let _lock = Lock::acquire(&out)?;
    let ctx = Ctx {
        cfg,
        out,
        force: global.force,
    };
    ctx.snapshot(command.name())?;
    match command {
        Command::GenData => gen_data(&ctx),
        Command::PretrainBackbone => pretrain(&ctx),
        Command::Train => train_cmd(&ctx),
        Command::Eval { checkpoints, .. } => eval_cmd(&ctx, checkpoints.as_deref()),
        Command::Ablate { eval_only } => {
            let (ds, plans) = ctx.load_data()?;
            ablate(&ctx, &plans, &ds, eval_only)
        }
        Command::Viz { panels, checkpoints, .. } => viz(&ctx, panels, &columns, checkpoints.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
