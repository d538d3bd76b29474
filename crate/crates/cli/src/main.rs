use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Deserialize;

use mmfsod::config::{Mode, RunConfig};
use mmfsod::dataspec::{load_dataset, save_dataset, toy_split, ClassSplit, Dataset, ToySpec};
use mmfsod::evalkit::{
    draw_overlay, match_detections, meta_test, read_detections, run_ablation, write_detections, AblationData,
    AblationGrid,
};
use mmfsod::trainer::{self, load_checkpoint, save_checkpoint, write_loss_log, Checkpoint, LossRecord};

#[derive(Parser)]
#[command(name = "mmfsod", version, about = "Few-shot detection with multi-modal prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// `section.key=value`, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Replaces the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes benchmark.
    GenData(Common),
    /// Episodic training on the base classes.
    MetaTrain(Common),
    /// Fine-tune a meta-trained checkpoint on a balanced base+novel set.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the novel classes.
    MetaTest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Axis name (standard values) or `axis=v1,v2;axis=...`.
        #[arg(long)]
        grid: String,
    },
    /// Draw a detection dump onto its images.
    Visualize {
        /// Detection dump written by meta-test.
        #[arg(long)]
        detections: PathBuf,
        /// Ground-truth manifest of the dumped images.
        #[arg(long)]
        manifest: PathBuf,
        /// Image directory of that manifest.
        #[arg(long)]
        images: PathBuf,
        /// Detections scoring at or below this are not drawn.
        #[arg(long, default_value_t = 0.3)]
        min_score: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file of `gen-data`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    toy: ToySpec,
    /// Size of the held-out test set, rendered from a derived seed.
    test_images: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::MetaTrain(c) => run_meta_train(&c),
        Command::Finetune { common, checkpoint } => run_finetune(&common, &checkpoint),
        Command::MetaTest { common, checkpoint } => run_meta_test(&common, &checkpoint),
        Command::Ablate { common, grid } => run_ablate(&common, &grid),
        Command::Visualize {
            detections,
            manifest,
            images,
            min_score,
            out,
        } => visualize(&detections, &manifest, &images, min_score, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(c: &Common) -> Result<()> {
    let text = fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    let mut table: toml::Table = text.parse().context("parsing gen-data config")?;
    for o in &c.overrides {
        mmfsod::config::apply_override(&mut table, o)?;
    }
    let mut cfg: GenDataConfig = toml::Value::Table(table).try_into().context("gen-data config")?;
    if let Some(s) = c.seed {
        cfg.toy.seed = s;
    }
    let test_spec = ToySpec {
        num_images: cfg.test_images,
        seed: cfg.toy.seed ^ 0x7e57_da7a,
        ..cfg.toy.clone()
    };
    create_dir(&c.out)?;
    for (name, spec) in [("train", &cfg.toy), ("test", &test_spec)] {
        let ds = spec.generate()?;
        let dir = c.out.join(name);
        save_dataset(&ds, &dir.join("manifest.json"), &dir.join("images"))?;
        info!("{name}: {} images, {} objects", ds.images.len(), ds.annotations.len());
    }
    toy_split(cfg.toy.num_classes).save(&c.out.join("split.json"))?;
    write(&c.out.join("data.snapshot"), &text)?;
    Ok(())
}

/// Loads the run config with overrides and `--seed`, and makes data paths
/// absolute relative to the config file so the snapshot is relocatable.
fn load_config(c: &Common) -> Result<RunConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    let mut cfg = RunConfig::load(&c.config, &overrides)?;
    let base = c
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let base = fs::canonicalize(if base.as_os_str().is_empty() { Path::new(".") } else { &base })?;
    let d = &mut cfg.data;
    for p in [
        &mut d.train_manifest,
        &mut d.train_images,
        &mut d.test_manifest,
        &mut d.test_images,
        &mut d.split,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

/// Creates the run directory and writes the config snapshot.
fn start_run(c: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    for sub in ["ckpt", "report"] {
        create_dir(&c.out.join(sub))?;
    }
    write(&c.out.join("config.snapshot"), &cfg.to_toml())?;
    Ok(c.out.clone())
}

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| anyhow!("config is missing data.{key}"))
}

fn train_data(cfg: &RunConfig) -> Result<(Dataset, ClassSplit)> {
    let d = &cfg.data;
    let ds = load_dataset(need(&d.train_manifest, "train_manifest")?, need(&d.train_images, "train_images")?)?;
    let split = ClassSplit::load(need(&d.split, "split")?)?;
    Ok((ds, split))
}

fn test_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    Ok(load_dataset(need(&d.test_manifest, "test_manifest")?, need(&d.test_images, "test_images")?)?)
}

fn progress(every: usize) -> impl FnMut(&LossRecord) {
    move |r: &LossRecord| {
        if r.iteration % every == 0 {
            let l = &r.losses;
            info!(
                "iter {:>5} lr {:.5} total {:.4} rpn {:.4} rcnn {:.4} kd {:.4} con {:.4}",
                r.iteration, r.rate, l.total, l.rpn, l.rcnn, l.kd, l.contrastive
            );
        }
    }
}

fn finish_training(dir: &Path, ckpt: &Checkpoint, log: &[LossRecord]) -> Result<()> {
    write_loss_log(log, &dir.join("losses.csv"))?;
    let path = dir.join("ckpt").join("final.json");
    save_checkpoint(ckpt, &path)?;
    info!("checkpoint {} ({})", path.display(), ckpt.digest());
    Ok(())
}

fn run_meta_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let (ds, split) = train_data(&cfg)?;
    let dir = start_run(c, &cfg)?;
    let out = trainer::meta_train(&ds, &split, &cfg, progress(50))?;
    finish_training(&dir, &out.checkpoint, &out.log)
}

fn open_checkpoint(path: &Path, cfg: Option<&RunConfig>) -> Result<Checkpoint> {
    let loaded = load_checkpoint(path, cfg)?;
    for w in &loaded.warnings {
        warn!("{w}");
    }
    Ok(loaded.checkpoint)
}

fn run_finetune(c: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    if cfg.mode != Mode::Finetune {
        return Err(anyhow!("finetune needs mode = \"finetune\" in the config"));
    }
    let ckpt = open_checkpoint(checkpoint, None)?;
    let (ds, split) = train_data(&cfg)?;
    let dir = start_run(c, &cfg)?;
    let out = trainer::finetune(&ckpt, &ds, &split, cfg.finetune.shot, &cfg, progress(25))?;
    finish_training(&dir, &out.checkpoint, &out.log)
}

fn run_meta_test(c: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let ckpt = open_checkpoint(checkpoint, Some(&cfg))?;
    let (pool, split) = train_data(&cfg)?;
    let test = test_data(&cfg)?;
    let dir = start_run(c, &cfg)?;
    let table = meta_test(&ckpt, &pool, &test, &split, &cfg.eval.shots, &cfg.eval.seeds)?;
    let report = dir.join("report");
    write(&report.join("metrics.csv"), &table.to_csv()?)?;
    write(&report.join("metrics.txt"), &table.summary())?;
    let dumps = report.join("detections");
    create_dir(&dumps)?;
    for (key, records) in &table.detections {
        write_detections(&dumps.join(format!("{}.json", key.replace('/', "-seed"))), records)?;
    }
    print!("{}", table.summary());
    Ok(())
}

fn run_ablate(c: &Common, grid: &str) -> Result<()> {
    let cfg = load_config(c)?;
    let grid = AblationGrid::parse(grid)?;
    let (train, split) = train_data(&cfg)?;
    let test = test_data(&cfg)?;
    let dir = start_run(c, &cfg)?;
    let data = AblationData {
        train: &train,
        split: &split,
        pool: &train,
        test: &test,
    };
    let report = run_ablation(&grid, &cfg, &data, |row| info!("cell {} done", row.setting))?;
    write(&dir.join("report").join("ablation.csv"), &report.to_csv()?)?;
    write(&dir.join("report").join("ablation.txt"), &report.summary())?;
    let json = serde_json::to_string_pretty(&report)?;
    write(&dir.join("report").join("ablation.json"), &json)?;
    print!("{}", report.summary());
    Ok(())
}

fn visualize(dump: &Path, manifest: &Path, images: &Path, min_score: f64, out: &Path) -> Result<()> {
    let records = read_detections(dump)?;
    let gt = load_dataset(manifest, images)?;
    let flags = match_detections(&records, &gt, 0.5)?;
    create_dir(out)?;
    let mut written = 0;
    for img in &gt.images {
        let boxes = records
            .iter()
            .zip(&flags)
            .filter(|(r, _)| r.image_id == img.id && r.score > min_score)
            .map(|(r, &tp)| r.detection().map(|d| (d.bbox, tp)))
            .collect::<mmfsod::Result<Vec<_>>>()?;
        if boxes.is_empty() {
            continue;
        }
        let path = out.join(format!("{}.png", img.id));
        draw_overlay(&img.pixels, &boxes)
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        written += 1;
    }
    info!("{written} overlays in {}", out.display());
    Ok(())
}
