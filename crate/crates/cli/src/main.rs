use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use duoscene::checkpoint::load_checkpoint;
use duoscene::config::{intrinsics_for_image, RunConfig};
use duoscene::experiments::{run_ablation_grid, run_iteration_sweep, sweep_points, AblationReport, SweepReport};
use duoscene::model::{AblationLabel, PreparedSample};
use duoscene::plot::{ablation_chart, sweep_chart};
use duoscene::scene::{generate_corpus, load_dataset, save_dataset, ClassSet, DatasetIndex, GeneratorConfig, SCENE_SCHEMA_VERSION};
use duoscene::trainer::{evaluate_model, EvalRecord, Trainer, METRICS_SCHEMA_VERSION};
use duoscene::Error;

const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "duoscene", version, about = "Joint 2D segmentation and 3D scene completion on synthetic RGB-D rooms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus.
    GenData {
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid dimensions WxHxD.
        #[arg(long, default_value = "20x12x20", value_parser = parse_dims::<3>)]
        dims: [usize; 3],
        /// Image size WxH.
        #[arg(long, default_value = "64x48", value_parser = parse_dims::<2>)]
        image: [usize; 2],
        /// Number of object classes K (labels are 0..=K).
        #[arg(long, default_value_t = 11)]
        classes: usize,
        /// Fraction of depth pixels dropped to simulate sensor holes.
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with alternating phases; writes checkpoints and a metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ablation: Option<AblationLabel>,
        /// Number of alternation slices T.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Score a checkpoint (or the latest one in a directory) on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "E")]
        ablation: AblationLabel,
        /// Refinement rounds at inference; defaults to the checkpoint's slice.
        #[arg(long)]
        rounds: Option<usize>,
        /// Directory for eval.json; printed to stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation configuration for each seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// One training run evaluated after every slice up to --max-t.
    SweepIters {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 6)]
        max_t: usize,
    },
    /// Render SVG charts from a metrics log, sweep report or ablation report.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dims<const N: usize>(s: &str) -> std::result::Result<[usize; N], String> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| format!("expected {N} dimensions, got {}", p.len()))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 4,
        Error::FreezeViolation(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            scenes,
            seed,
            dims,
            image,
            classes,
            dropout,
            out,
        } => gen_data(scenes, seed, dims, image, classes, dropout, &out),
        Command::Train { config, ablation, iters } => train(&config, ablation, iters),
        Command::Eval {
            ckpt,
            data,
            ablation,
            rounds,
            out,
        } => eval(&ckpt, &data, ablation, rounds, out.as_deref()),
        Command::Ablate { config, seeds } => ablate(&config, &seeds),
        Command::SweepIters { config, max_t } => sweep(&config, max_t),
        Command::Plot { metrics, out } => plot(&metrics, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type Result<T> = duoscene::Result<T>;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_json<S: serde::Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn to_jsonl(records: &[EvalRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

fn gen_data(n: usize, seed: u64, dims: [usize; 3], image: [usize; 2], k: usize, dropout: f64, out: &Path) -> Result<()> {
    let classes = ClassSet::with_objects(k)?;
    let intrinsics = intrinsics_for_image(image[0], image[1]);
    intrinsics.validate()?;
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
    }
    let generator = GeneratorConfig {
        depth_dropout: dropout,
        ..GeneratorConfig::default()
    };
    let samples = generate_corpus(n, seed, &classes, dims, intrinsics, &generator)?;
    let index = DatasetIndex {
        schema_version: SCENE_SCHEMA_VERSION,
        scene_ids: samples.iter().map(|s| s.scene_id).collect(),
        base_seed: seed,
        grid_dims: dims,
        intrinsics,
        num_object_classes: k,
        generator,
    };
    save_dataset(out, &index, &samples)?;
    println!(
        "wrote {n} scenes ({}x{}x{} grid, {}x{} image, {k} object classes) to {}",
        dims[0],
        dims[1],
        dims[2],
        image[0],
        image[1],
        out.display()
    );
    Ok(())
}

/// Loads and prepares one dataset directory, checking it against the config.
fn load_prepared(cfg: &RunConfig, dir: &Path) -> Result<Vec<PreparedSample>> {
    let (index, samples) = load_dataset(dir)?;
    cfg.check_dataset(&index)?;
    PreparedSample::prepare_all(&samples, cfg.encoding)
}

struct Data {
    train: Vec<PreparedSample>,
    eval: Vec<PreparedSample>,
    num_labels: usize,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let train = load_prepared(cfg, &cfg.train_dir)?;
    if train.is_empty() {
        return Err(Error::Config(format!("training set {} is empty", cfg.train_dir.display())));
    }
    let eval = match &cfg.eval_dir {
        Some(dir) => load_prepared(cfg, dir)?,
        None => Vec::new(),
    };
    Ok(Data {
        train,
        eval,
        num_labels: cfg.num_object_classes + 1,
    })
}

fn print_record(r: &EvalRecord) {
    println!(
        "t={} {:<9} SC IoU {:5.1}  SSC mIoU {:5.1}  SS mIoU {:5.1}",
        r.t,
        r.branch,
        100.0 * r.metrics.ssc.sc_iou,
        100.0 * r.metrics.ssc.ssc_miou,
        100.0 * r.metrics.ss.ss_miou
    );
}

fn train(config: &Path, ablation: Option<AblationLabel>, iters: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    if let Some(t) = iters {
        cfg.iterations = t;
    }
    let tc = cfg.train_config();
    tc.validate()?;
    let data = load_data(&cfg)?;
    let ckpt = cfg.out_dir.join("ckpt");
    let mut trainer = Trainer::new(
        &data.train,
        &data.eval,
        data.num_labels,
        tc,
        cfg.ablation.config(),
        Some(&ckpt),
    )?;
    trainer.run()?;
    trainer.log.iter().for_each(print_record);
    write_file(&cfg.out_dir.join("metrics.jsonl"), &to_jsonl(&trainer.log))?;
    write_file(&cfg.out_dir.join("run_config.toml"), &cfg.to_toml())?;
    let last = trainer.latest().expect("bootstrap recorded");
    let summary = json!({
        "schema_version": OUTPUT_SCHEMA_VERSION,
        "command": "train",
        "ablation": cfg.ablation,
        "iterations": cfg.iterations,
        "records": trainer.log.len(),
        "checkpoint_dir": ckpt,
        "final": last,
    });
    write_file(&cfg.out_dir.join("summary.json"), &to_json(&summary))?;
    println!("wrote {} records and checkpoints under {}", trainer.log.len(), cfg.out_dir.display());
    Ok(())
}

/// Slice index and phase tag of a `t{t}_{tag}.bin` file name.
fn parse_checkpoint_name(path: &Path) -> Option<(usize, String)> {
    let stem = path.file_stem()?.to_str()?;
    let (t, tag) = stem.strip_prefix('t')?.split_once('_')?;
    Some((t.parse().ok()?, tag.to_string()))
}

/// The checkpoint itself, or the newest one in a directory (highest slice,
/// then latest write).
fn resolve_checkpoint(path: &Path) -> Result<(PathBuf, usize)> {
    if path.is_file() {
        let t = parse_checkpoint_name(path).map_or(0, |(t, _)| t);
        return Ok((path.to_path_buf(), t));
    }
    let entries = fs::read_dir(path).map_err(|e| io_error(path, e))?;
    let mut best: Option<(usize, std::time::SystemTime, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| io_error(path, e))?;
        let p = entry.path();
        let Some((t, _)) = parse_checkpoint_name(&p) else {
            continue;
        };
        if p.extension().and_then(|e| e.to_str()) != Some("bin") {
            continue;
        }
        let modified = entry
            .metadata()
            .and_then(|m| m.modified())
            .map_err(|e| io_error(&p, e))?;
        if best.as_ref().is_none_or(|(bt, bm, _)| (t, modified) > (*bt, *bm)) {
            best = Some((t, modified, p));
        }
    }
    best.map(|(t, _, p)| (p, t))
        .ok_or_else(|| Error::Config(format!("no t*_*.bin checkpoints in {}", path.display())))
}

fn eval(ckpt: &Path, data: &Path, ablation: AblationLabel, rounds: Option<usize>, out: Option<&Path>) -> Result<()> {
    let (path, t) = resolve_checkpoint(ckpt)?;
    let model = load_checkpoint(&path)?;
    let (index, samples) = load_dataset(data)?;
    if index.num_object_classes + 1 != model.spec.num_labels {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} labels, checkpoint {}",
            index.num_object_classes + 1,
            model.spec.num_labels
        )));
    }
    let prepared = PreparedSample::prepare_all(&samples, model.spec.encoding)?;
    if prepared.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", data.display())));
    }
    let rounds = rounds.unwrap_or(t);
    let metrics = evaluate_model(&model, &prepared, &ablation.config(), rounds)?;
    let report = json!({
        "schema_version": OUTPUT_SCHEMA_VERSION,
        "command": "eval",
        "checkpoint": path,
        "data": data,
        "ablation": ablation,
        "rounds": rounds,
        "metrics": metrics,
    });
    println!(
        "{} on {} scenes: SC IoU {:.1}  SSC mIoU {:.1}  SS mIoU {:.1}",
        path.display(),
        prepared.len(),
        100.0 * metrics.ssc.sc_iou,
        100.0 * metrics.ssc.ssc_miou,
        100.0 * metrics.ss.ss_miou
    );
    match out {
        Some(dir) => write_file(&dir.join("eval.json"), &to_json(&report)),
        None => {
            print!("{}", to_json(&report));
            Ok(())
        }
    }
}

fn ablate(config: &Path, seeds: &[u64]) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = load_data(&cfg)?;
    let ckpt = cfg.out_dir.join("ablation_ckpt");
    let report = run_ablation_grid(
        &data.train,
        &data.eval,
        data.num_labels,
        &cfg.train_config(),
        seeds,
        Some(&ckpt),
    )?;
    print!("{}", report.to_table());
    write_file(&cfg.out_dir.join("ablation.json"), &to_json(&report))?;
    write_file(&cfg.out_dir.join("ablation.svg"), &ablation_chart(&report))?;
    println!("wrote ablation.json and ablation.svg to {}", cfg.out_dir.display());
    Ok(())
}

fn sweep(config: &Path, max_t: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = load_data(&cfg)?;
    let report = run_iteration_sweep(
        &data.train,
        &data.eval,
        data.num_labels,
        &cfg.train_config(),
        cfg.ablation.config(),
        max_t,
        Some(&cfg.out_dir.join("sweep_ckpt")),
    )?;
    for p in &report.points {
        println!(
            "t={}  SSC mIoU {:5.1}  SS mIoU {:5.1}  SC IoU {:5.1}",
            p.t,
            100.0 * p.ssc_miou,
            100.0 * p.ss_miou,
            100.0 * p.sc_iou
        );
    }
    write_file(&cfg.out_dir.join("sweep.json"), &to_json(&report))?;
    write_file(&cfg.out_dir.join("sweep_metrics.jsonl"), &to_jsonl(&report.records))?;
    write_file(&cfg.out_dir.join("sweep.svg"), &sweep_chart(&report.points))?;
    println!("wrote sweep.json, sweep_metrics.jsonl and sweep.svg to {}", cfg.out_dir.display());
    Ok(())
}

fn plot(metrics: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(metrics).map_err(|e| io_error(metrics, e))?;
    let malformed = |reason: String| Error::MalformedManifest {
        path: metrics.to_path_buf(),
        reason,
    };
    let (name, svg) = if let Ok(report) = serde_json::from_str::<AblationReport>(&text) {
        ("ablation.svg", ablation_chart(&report))
    } else if let Ok(report) = serde_json::from_str::<SweepReport>(&text) {
        ("sweep.svg", sweep_chart(&report.points))
    } else {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<EvalRecord>(l).map_err(|e| malformed(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if records.is_empty() {
            return Err(malformed("no metrics records".into()));
        }
        if let Some(r) = records.iter().find(|r| r.schema_version != METRICS_SCHEMA_VERSION) {
            return Err(malformed(format!("unsupported schema version {}", r.schema_version)));
        }
        ("sweep.svg", sweep_chart(&sweep_points(&records)))
    };
    let path = out.join(name);
    write_file(&path, &svg)?;
    println!("wrote {}", path.display());
    Ok(())
}
