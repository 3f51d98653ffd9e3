use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::json;

use segtrack::config::RunConfig;
use segtrack::eval::{
    accuracy_robustness, box_iou, contour_f, default_contour_tolerance, jaccard, success_auc, MASK_THRESHOLD,
};
use segtrack::geometry::{BoxRole, Mask};
use segtrack::io::{
    list_pngs, read_boxes, read_mask, render_overlay, write_boxes, write_image, write_mask, write_sequence,
    SequenceOnDisk,
};
use segtrack::pipeline::{ablation_report, standard_variants, NetworkBundle};
use segtrack::synth::{benchmark_params, generate_sequence, SynthParams};
use segtrack::tracker::{run_sequence, InitTarget};
use segtrack::training::{train_all, RunOutput};
use segtrack::{Error, Result};

const MODEL_FILE: &str = "model.safetensors";

#[derive(Parser)]
#[command(name = "segtrack", version, about = "Segmentation tracker: track, evaluate, train, render")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a sequence from its first ground-truth mask or box.
    Track {
        sequence: PathBuf,
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weights file; overrides the config's `model`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated modules to disable, e.g. `no_gim,no_sem`.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Score a tracking output directory against a sequence's ground truth.
    Eval {
        predictions: PathBuf,
        ground_truth: PathBuf,
        /// Any of jaccard, contour_f, iou, auc, ar.
        #[arg(long, default_value = "jaccard,contour_f,iou,auc,ar")]
        metrics: String,
        /// Report directory; defaults to the predictions directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all networks on synthetic sequences.
    Train {
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Draw masks and boxes of a tracking output over the frames.
    Render { sequence: PathBuf, results: PathBuf, output: PathBuf },
    /// Write a synthetic sequence to disk.
    Synth {
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        length: usize,
        #[arg(long, default_value_t = 192)]
        frame_size: usize,
        /// Hidden frame range `start,end` (end exclusive).
        #[arg(long)]
        occlusion: Option<String>,
        #[arg(long)]
        no_distractor: bool,
        /// Use the 200-frame benchmark settings; other shape flags are ignored.
        #[arg(long)]
        benchmark: bool,
    },
    /// Score the full pipeline and every ablation on the synthetic benchmark.
    Ablation {
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Number of benchmark sequences (seeds `seed..seed+n`).
        #[arg(long, default_value_t = 1)]
        sequences: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, flag: Option<&Path>) -> Result<Arc<NetworkBundle>> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.model.clone())
        .ok_or_else(|| Error::Model("no weights file; pass --model or set `model` in the config".into()))?;
    let (bundle, _, _) = NetworkBundle::load(&path)?;
    Ok(Arc::new(bundle))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, records: &[serde_json::Value]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn track(sequence: &Path, output: &Path, config: Option<&Path>, model: Option<&Path>, ablate: Option<&str>) -> Result<()> {
    let mut cfg = load_config(config)?;
    let requested: Vec<String> =
        ablate.map(|s| s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()).unwrap_or_default();
    for flag in &requested {
        cfg.ablate.set(flag)?;
    }
    let seq = SequenceOnDisk::load(sequence)?;
    let init = match (&seq.masks[0], seq.boxes[0]) {
        (Some(m), _) => InitTarget::Mask(m.clone()),
        (None, Some(b)) => InitTarget::Box(b),
        (None, None) => return Err(Error::MissingInitTarget),
    };
    let bundle = load_model(&cfg, model)?;
    let results = run_sequence(bundle, &cfg.tracker, cfg.ablate, &seq.frames, &init)?;

    let mask_dir = output.join("masks");
    create_dir(&mask_dir)?;
    let mut records = Vec::with_capacity(results.len());
    for (r, path) in results.iter().zip(&seq.frame_paths) {
        let name = path.file_name().expect("listed files have names");
        write_mask(&mask_dir.join(name), &r.mask)?;
        records.push(json!({
            "frame": r.index,
            "file": name.to_string_lossy(),
            "flags": r.flags.names(),
            "elapsed_ms": r.elapsed_ms,
            "search_side": r.search_side,
        }));
    }
    write_boxes(&output.join("boxes.txt"), &results.iter().map(|r| r.visible).collect::<Vec<_>>())?;
    write_boxes(&output.join("inherent.txt"), &results.iter().map(|r| r.inherent).collect::<Vec<_>>())?;
    write_lines(&output.join("frames.jsonl"), &records)?;
    write_json(
        &output.join("summary.json"),
        &json!({
            "sequence": sequence.display().to_string(),
            "frames": results.len(),
            "seed": cfg.seed,
            "ablate": requested,
            "mask_threshold": cfg.tracker.mask_threshold,
            "config": cfg,
        }),
    )
}

fn predicted_masks(pred: &Path, seq: &SequenceOnDisk) -> Result<Vec<Mask>> {
    let dir = pred.join("masks");
    let files = list_pngs(&dir)?;
    if files.len() != seq.len() {
        return Err(Error::Dataset(format!("{} has {} masks for {} frames", dir.display(), files.len(), seq.len())));
    }
    files.iter().map(|p| read_mask(p)).collect()
}

fn eval(pred: &Path, gt: &Path, metrics: &str, out: Option<&Path>) -> Result<()> {
    let wanted: Vec<&str> = metrics.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    for m in &wanted {
        if !["jaccard", "contour_f", "iou", "auc", "ar"].contains(m) {
            return Err(Error::InvalidArgument(format!("unknown metric {m:?}")));
        }
    }
    let seq = SequenceOnDisk::load(gt)?;
    let needs_masks = wanted.iter().any(|m| ["jaccard", "contour_f"].contains(m));
    let masks = if needs_masks { Some(predicted_masks(pred, &seq)?) } else { None };
    let needs_boxes = wanted.iter().any(|m| ["iou", "auc", "ar"].contains(m));
    let boxes = if needs_boxes { Some(read_boxes(&pred.join("boxes.txt"), BoxRole::Visible)?) } else { None };
    if let Some(b) = &boxes {
        if b.len() != seq.len() {
            return Err(Error::Dataset(format!("{} boxes for {} frames", b.len(), seq.len())));
        }
    }

    let mut per_frame = Vec::with_capacity(seq.len());
    let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for i in 0..seq.len() {
        let mut rec = serde_json::Map::new();
        rec.insert("frame".into(), json!(i));
        let name = seq.frame_paths[i].file_name().expect("listed files have names").to_string_lossy();
        if let (Some(pm), Some(gm)) = (&masks, &seq.masks[i]) {
            let p = &pm[i];
            let shape_err = |e: Error| Error::ShapeMismatch(format!("frame {i} ({name}): {e}"));
            if wanted.contains(&"jaccard") {
                let j = jaccard(p, gm).map_err(shape_err)?;
                rec.insert("jaccard".into(), json!(j));
                columns.entry("jaccard").or_default().push(j);
            }
            if wanted.contains(&"contour_f") {
                let f = contour_f(p, gm, default_contour_tolerance(gm.width(), gm.height())).map_err(shape_err)?;
                rec.insert("contour_f".into(), json!(f));
                columns.entry("contour_f").or_default().push(f);
            }
        }
        if let (Some(pb), Some(gb)) = (&boxes, seq.gt_box(i)) {
            let o = box_iou(&pb[i], &gb);
            rec.insert("iou".into(), json!(o));
            columns.entry("iou").or_default().push(o);
        }
        per_frame.push(serde_json::Value::Object(rec));
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mut summary = serde_json::Map::new();
    for m in &wanted {
        match *m {
            "jaccard" | "contour_f" | "iou" => {
                summary.insert(m.to_string(), json!(mean(columns.get(m).map_or(&[][..], |v| v))));
            }
            "auc" => {
                summary.insert("auc".into(), json!(success_auc(columns.get("iou").map_or(&[][..], |v| v))));
            }
            "ar" => {
                let ar = accuracy_robustness(columns.get("iou").map_or(&[][..], |v| v));
                summary.insert("accuracy".into(), json!(ar.accuracy));
                summary.insert("robustness".into(), json!(ar.robustness));
                summary.insert("failures".into(), json!(ar.failures));
            }
            _ => unreachable!("metrics are validated above"),
        }
    }
    let out = out.unwrap_or(pred);
    create_dir(out)?;
    write_lines(&out.join("metrics.jsonl"), &per_frame)?;
    let mut table = String::from("metric\tvalue\n");
    for (k, v) in &summary {
        table.push_str(&format!("{k}\t{v}\n"));
    }
    fs::write(out.join("metrics.tsv"), &table).map_err(|e| Error::io(out, e))?;
    summary.insert("mask_threshold".into(), json!(MASK_THRESHOLD));
    write_json(&out.join("metrics.json"), &serde_json::Value::Object(summary))?;
    print!("{table}");
    Ok(())
}

fn train(output: &Path, config: Option<&Path>, resume: bool) -> Result<()> {
    let cfg = load_config(config)?;
    create_dir(output)?;
    let mut bundle = NetworkBundle::new(&cfg.network, cfg.seed)?;
    let out = RunOutput { dir: Some(output.to_path_buf()), resume };
    let history = train_all(&mut bundle, &cfg.training, &cfg.tracker, cfg.seed, &out)?;
    let mut meta = std::collections::HashMap::new();
    meta.insert("seed".to_string(), cfg.seed.to_string());
    bundle.save(&output.join(MODEL_FILE), &[], meta)?;
    let last = |stage: &str| history.iter().rev().find(|r| r.stage.name() == stage).map(|r| r.loss);
    write_json(
        &output.join("summary.json"),
        &json!({
            "seed": cfg.seed,
            "model": MODEL_FILE,
            "iterations": history.len(),
            "final_segmentation_loss": last("segmentation"),
            "final_scale_loss": last("scale"),
            "config": cfg,
        }),
    )
}

fn render(sequence: &Path, results: &Path, output: &Path) -> Result<()> {
    let seq = SequenceOnDisk::load(sequence)?;
    let visible = read_boxes(&results.join("boxes.txt"), BoxRole::Visible).unwrap_or_default();
    let inherent = read_boxes(&results.join("inherent.txt"), BoxRole::Inherent).unwrap_or_default();
    create_dir(output)?;
    for (i, (frame, path)) in seq.frames.iter().zip(&seq.frame_paths).enumerate() {
        let name = path.file_name().expect("listed files have names");
        let mp = results.join("masks").join(name);
        let mask = if mp.exists() { Some(read_mask(&mp)?) } else { None };
        let img = render_overlay(frame, mask.as_ref(), visible.get(i), inherent.get(i))?;
        write_image(&output.join(name), &img)?;
    }
    Ok(())
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("expected start,end, got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let (a, b) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a >= b {
        return Err(bad());
    }
    Ok((a, b))
}

fn ablation(output: &Path, config: Option<&Path>, model: Option<&Path>, n: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let bundle = load_model(&cfg, model)?;
    let seqs: Vec<_> = (0..n as u64).map(|k| generate_sequence(&benchmark_params(), cfg.seed + k)).collect();
    let rows = ablation_report(bundle, &cfg.tracker, &standard_variants(), &seqs)?;
    create_dir(output)?;
    let mut table = String::from("variant\taccuracy\trobustness\tjaccard\tfailures\n");
    for r in &rows {
        table.push_str(&format!("{}\t{:.4}\t{:.4}\t{:.4}\t{}\n", r.variant, r.accuracy, r.robustness, r.jaccard, r.failures));
    }
    fs::write(output.join("ablation.tsv"), &table).map_err(|e| Error::io(output, e))?;
    write_json(&output.join("ablation.json"), &json!({ "seed": cfg.seed, "rows": rows, "config": cfg }))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Track { sequence, output, config, model, ablate } => {
            track(&sequence, &output, config.as_deref(), model.as_deref(), ablate.as_deref())
        }
        Command::Eval { predictions, ground_truth, metrics, out } => eval(&predictions, &ground_truth, &metrics, out.as_deref()),
        Command::Train { output, config, resume } => train(&output, config.as_deref(), resume),
        Command::Render { sequence, results, output } => render(&sequence, &results, &output),
        Command::Synth { output, seed, length, frame_size, occlusion, no_distractor, benchmark } => {
            let params = if benchmark {
                benchmark_params()
            } else {
                SynthParams {
                    frame_size,
                    length,
                    distractor: !no_distractor,
                    occlusion: occlusion.as_deref().map(parse_range).transpose()?,
                    ..SynthParams::default()
                }
            };
            if params.length == 0 || params.frame_size < 32 {
                return Err(Error::InvalidArgument("length must be positive and frame size at least 32".into()));
            }
            write_sequence(&output, &generate_sequence(&params, seed))
        }
        Command::Ablation { output, config, model, sequences } => ablation(&output, config.as_deref(), model.as_deref(), sequences),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("E_USAGE: {}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
