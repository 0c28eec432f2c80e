//! Command-line entry point: synth / train / eval / detect / assign-debug.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. The last stdout
//! line on success is `RESULT <json>`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use bird_detect::assignment::{AnchorGrid, AnchorLabel};
use bird_detect::checkpoint::load_checkpoint;
use bird_detect::data::{load_dataset, sample_window, synth_generate, Split, SynthSpec};
use bird_detect::error::Error;
use bird_detect::evaluation::{evaluate, FrameEval};
use bird_detect::inference::{detect_video, Detection};
use bird_detect::network::Model;
use bird_detect::training::{train, AssignStrategy, TrainConfig};

#[derive(Parser)]
#[command(name = "bird-detect", version, about = "Single-class video object detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video dataset.
    Synth(SynthArgs),
    /// Train a detector from a flat key=value config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run detection over every clip of a split, writing per-clip JSON.
    Detect(DetectArgs),
    /// Dump per-anchor assignment labels for one frame (CSV + overlay PNG).
    AssignDebug(AssignDebugArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    clips: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 96)]
    width: u32,
    #[arg(long, default_value_t = 64)]
    height: u32,
    #[arg(long, default_value_t = 1)]
    birds_min: usize,
    #[arg(long, default_value_t = 3)]
    birds_max: usize,
    #[arg(long)]
    low_contrast: bool,
    #[arg(long, default_value_t = 0.0)]
    noise_amp: f64,
    #[arg(long, default_value_t = 1.0)]
    visible_prob: f64,
    #[arg(long, default_value_t = 0)]
    static_distractors: usize,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset root (expects a `train/` subdirectory).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    conf_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_threshold: f64,
    #[arg(long, default_value_t = 672)]
    input_width: u32,
    #[arg(long, default_value_t = 384)]
    input_height: u32,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Restrict to one clip by name.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Window length; must match the checkpoint.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    conf_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_threshold: f64,
    #[arg(long, default_value_t = 672)]
    input_width: u32,
    #[arg(long, default_value_t = 384)]
    input_height: u32,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct AssignDebugArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    clip: String,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value = "simota_oc")]
    strategy: String,
    /// Optional checkpoint; a randomly initialized model is used otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    shrink_factor: f64,
    #[arg(long, default_value_t = 96)]
    input_width: u32,
    #[arg(long, default_value_t = 64)]
    input_height: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

fn main() {
    let cli = Cli::parse();
    let start = Instant::now();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a, start),
        Command::Train(a) => run_train(a, start),
        Command::Eval(a) => run_eval(a, start),
        Command::Detect(a) => run_detect(a, start),
        Command::AssignDebug(a) => run_assign_debug(a, start),
    };
    match result {
        Ok(summary) => {
            println!("RESULT {summary}");
        }
        Err(e) => {
            eprintln!("ERROR {e}");
            let code = match e {
                Error::Argument(_) | Error::Config { .. } => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

/// Refuse to write into a non-empty directory unless --overwrite was given.
fn prepare_out(out: &Path, overwrite: bool) -> Result<(), Error> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty && !overwrite {
            return Err(Error::argument(format!(
                "output directory {} is not empty (pass --overwrite to replace)",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    artifacts: &[String],
    start: Instant,
) -> Result<(), Error> {
    let manifest = json!({
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "code_version": env!("CARGO_PKG_VERSION"),
        "wall_seconds": start.elapsed().as_secs_f64(),
    });
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).map_err(|source| {
        Error::Io { path, source }
    })
}

fn require_odd_n(n: usize) -> Result<(), Error> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::argument(format!("n must be odd and >= 1, got {n}")));
    }
    Ok(())
}

fn run_synth(a: SynthArgs, start: Instant) -> Result<String, Error> {
    prepare_out(&a.out, a.overwrite)?;
    let spec = SynthSpec {
        clips: a.clips,
        frames_per_clip: a.frames,
        width: a.width,
        height: a.height,
        birds_min: a.birds_min,
        birds_max: a.birds_max,
        low_contrast: a.low_contrast,
        noise_amp: a.noise_amp,
        visible_prob: a.visible_prob,
        static_distractors: a.static_distractors,
    };
    synth_generate(&spec, &a.out, &a.split, a.seed)?;
    write_manifest(
        &a.out,
        "synth",
        json!({
            "clips": a.clips, "frames": a.frames, "width": a.width, "height": a.height,
            "birds_min": a.birds_min, "birds_max": a.birds_max,
            "low_contrast": a.low_contrast, "noise_amp": a.noise_amp,
            "visible_prob": a.visible_prob,
            "static_distractors": a.static_distractors, "split": a.split,
        }),
        a.seed,
        &[a.out.join(&a.split).display().to_string()],
        start,
    )?;
    Ok(json!({"clips": a.clips, "out": a.out.display().to_string()}).to_string())
}

fn run_train(a: TrainArgs, start: Instant) -> Result<String, Error> {
    let text = std::fs::read_to_string(&a.config).map_err(|source| Error::Io {
        path: a.config.clone(),
        source,
    })?;
    let cfg = TrainConfig::parse(&text)?;
    prepare_out(&a.out, a.overwrite)?;
    let clips = load_dataset(&a.data, Split::Train)?;
    let summary = train(&clips, &cfg, &a.out)?;
    write_manifest(
        &a.out,
        "train",
        serde_json::to_value(&cfg).unwrap(),
        cfg.seed,
        &[
            a.out.join("log.csv").display().to_string(),
            a.out.join("ckpt_best").display().to_string(),
            a.out.join("ckpt_last").display().to_string(),
        ],
        start,
    )?;
    Ok(serde_json::to_string(&summary).unwrap())
}

fn run_eval(a: EvalArgs, start: Instant) -> Result<String, Error> {
    let split: Split = a.split.parse()?;
    prepare_out(&a.out, a.overwrite)?;
    let (model, _) = load_checkpoint::<f32>(&a.ckpt, None)?;
    let clips = load_dataset(&a.data, split)?;
    let mut frames: Vec<FrameEval> = Vec::new();
    let mut window_seconds = 0.0;
    let mut windows = 0usize;
    for clip in &clips {
        let dets = detect_video(
            clip,
            &model,
            model.cfg.n_frames,
            a.input_width,
            a.input_height,
            a.conf_threshold as f32,
            a.nms_threshold as f32,
        )?;
        window_seconds += dets.mean_window_seconds * clip.len() as f64;
        windows += clip.len();
        for (frame_index, per_frame) in dets.frames.iter().enumerate() {
            frames.push(FrameEval {
                detections: per_frame
                    .iter()
                    .map(|d| Detection {
                        bbox: d.bbox.cast::<f64>(),
                        score: d.score as f64,
                        frame_index: d.frame_index,
                    })
                    .collect(),
                gts: clip.annotations[frame_index].boxes.clone(),
            });
        }
    }
    let report = evaluate(&frames);
    let fps = if window_seconds > 0.0 {
        windows as f64 / window_seconds
    } else {
        0.0
    };
    let report_path = a.out.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .map_err(|source| Error::Io {
        path: report_path,
        source,
    })?;
    let table = format!(
        "Method   AP50    AP75    AP      AP_S    AP_M    AP_L    FPS\n\
         FBOD-SV  {:<7.4} {:<7.4} {:<7.4} {:<7.4} {:<7.4} {:<7.4} {:.2}\n",
        report.ap50, report.ap75, report.ap, report.ap_small, report.ap_medium, report.ap_large,
        fps
    );
    let table_path = a.out.join("table.txt");
    std::fs::write(&table_path, &table).map_err(|source| Error::Io {
        path: table_path,
        source,
    })?;
    print!("{table}");
    write_manifest(
        &a.out,
        "eval",
        json!({
            "ckpt": a.ckpt.display().to_string(), "split": a.split,
            "conf_threshold": a.conf_threshold, "nms_threshold": a.nms_threshold,
            "input_width": a.input_width, "input_height": a.input_height,
        }),
        0,
        &[a.out.join("report.json").display().to_string()],
        start,
    )?;
    Ok(json!({
        "ap50": report.ap50, "ap75": report.ap75, "ap": report.ap,
        "ap_small": report.ap_small, "ap_medium": report.ap_medium,
        "ap_large": report.ap_large, "fps": fps,
    })
    .to_string())
}

fn run_detect(a: DetectArgs, start: Instant) -> Result<String, Error> {
    if let Some(n) = a.n {
        require_odd_n(n)?;
    }
    let split: Split = a.split.parse()?;
    prepare_out(&a.out, a.overwrite)?;
    let (model, _) = load_checkpoint::<f32>(&a.ckpt, a.n)?;
    let n = a.n.unwrap_or(model.cfg.n_frames);
    let clips = load_dataset(&a.data, split)?;
    let clips: Vec<_> = match &a.clip {
        Some(name) => clips.into_iter().filter(|c| &c.name == name).collect(),
        None => clips,
    };
    if clips.is_empty() {
        return Err(Error::argument(match &a.clip {
            Some(name) => format!("clip `{name}` not found in {}", a.data.display()),
            None => format!("no clips found in {}", a.data.display()),
        }));
    }
    let mut artifacts = Vec::new();
    let mut total_frames = 0usize;
    let mut total_dets = 0usize;
    for clip in &clips {
        let dets = detect_video(
            clip,
            &model,
            n,
            a.input_width,
            a.input_height,
            a.conf_threshold as f32,
            a.nms_threshold as f32,
        )?;
        total_frames += dets.frames.len();
        let frames: Vec<serde_json::Value> = dets
            .frames
            .iter()
            .enumerate()
            .map(|(frame_index, per_frame)| {
                total_dets += per_frame.len();
                json!({
                    "frame_index": frame_index,
                    "detections": per_frame.iter().map(|d| json!({
                        "x1": d.bbox.x1, "y1": d.bbox.y1,
                        "x2": d.bbox.x2, "y2": d.bbox.y2,
                        "score": d.score,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        let doc = json!({
            "clip": clip.name,
            "fps": dets.end_to_end_fps,
            "frames": frames,
        });
        let path = a.out.join(format!("{}.json", clip.name));
        std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).map_err(
            |source| Error::Io { path: path.clone(), source },
        )?;
        artifacts.push(path.display().to_string());
    }
    write_manifest(
        &a.out,
        "detect",
        json!({
            "ckpt": a.ckpt.display().to_string(), "split": a.split, "n": n,
            "conf_threshold": a.conf_threshold, "nms_threshold": a.nms_threshold,
        }),
        0,
        &artifacts,
        start,
    )?;
    Ok(json!({"clips": clips.len(), "frames": total_frames, "detections": total_dets}).to_string())
}

fn run_assign_debug(a: AssignDebugArgs, start: Instant) -> Result<String, Error> {
    require_odd_n(a.n)?;
    let strategy: AssignStrategy = a.strategy.parse()?;
    let split: Split = a.split.parse()?;
    prepare_out(&a.out, a.overwrite)?;
    let clips = load_dataset(&a.data, split)?;
    let clip = clips
        .iter()
        .find(|c| c.name == a.clip)
        .ok_or_else(|| Error::argument(format!("clip `{}` not found", a.clip)))?;
    let model = match &a.ckpt {
        Some(path) => load_checkpoint::<f32>(path, Some(a.n))?.0,
        None => Model::<f32>::new(bird_detect::network::NetworkConfig::tiny(a.n), a.seed),
    };
    let window = sample_window(clip, a.frame, a.n)?;
    let (x, gts) =
        bird_detect::data::window_to_tensor::<f32>(&window, a.input_width, a.input_height)?;
    let grid = AnchorGrid::from_input_size(a.input_height as usize, a.input_width as usize);
    let pass = model.forward(x, false)?;
    let outputs = pass.outputs();
    let reg = outputs.reg.index_axis(ndarray::Axis(0), 0);
    let preds: Vec<_> = (0..grid.len())
        .map(|idx| {
            let (i, j) = (idx / grid.cols, idx % grid.cols);
            let (ax, ay) = grid.point_flat::<f32>(idx);
            bird_detect::loss::decode_box(
                ax,
                ay,
                reg[[0, i, j]],
                reg[[1, i, j]],
                reg[[2, i, j]],
                reg[[3, i, j]],
            )
        })
        .collect();
    let assignment = match strategy {
        AssignStrategy::SimotaOc => {
            bird_detect::assignment::simota_oc_assign(&grid, &gts, &preds)
        }
        AssignStrategy::ShrinkBox => {
            bird_detect::assignment::shrink_box_assign(&grid, &gts, a.shrink_factor as f32)
        }
        AssignStrategy::CenterGaussian => {
            bird_detect::assignment::shrink_box_assign(&grid, &gts, 1.0)
        }
    };

    let mut csv = String::from("i,j,label,gt_index,iou\n");
    for idx in 0..grid.len() {
        let (i, j) = (idx / grid.cols, idx % grid.cols);
        match assignment.labels[idx] {
            AnchorLabel::Positive { gt } => {
                let iou = preds[idx].iou(&gts[gt]);
                csv.push_str(&format!("{i},{j},positive,{gt},{iou:.6}\n"));
            }
            AnchorLabel::Ignored => csv.push_str(&format!("{i},{j},ignored,,\n")),
            AnchorLabel::Negative => {} // omitted: negatives dominate the grid
        }
    }
    let csv_path = a.out.join("assignment.csv");
    std::fs::write(&csv_path, &csv).map_err(|source| Error::Io {
        path: csv_path.clone(),
        source,
    })?;

    // overlay: middle frame resized to input size, GTs green, positives red,
    // ignored yellow
    let mut overlay = image::imageops::resize(
        window.middle(),
        a.input_width,
        a.input_height,
        image::imageops::FilterType::Triangle,
    );
    for gt in &gts {
        draw_rect(&mut overlay, gt.x1, gt.y1, gt.x2, gt.y2, [0, 255, 0]);
    }
    for idx in 0..grid.len() {
        let (ax, ay) = grid.point_flat::<f32>(idx);
        let (px, py) = (ax as u32, ay as u32);
        if px >= overlay.width() || py >= overlay.height() {
            continue;
        }
        match assignment.labels[idx] {
            AnchorLabel::Positive { .. } => overlay.put_pixel(px, py, image::Rgb([255, 0, 0])),
            AnchorLabel::Ignored => overlay.put_pixel(px, py, image::Rgb([255, 255, 0])),
            AnchorLabel::Negative => {}
        }
    }
    let png_path = a.out.join("overlay.png");
    overlay.save(&png_path).map_err(|source| Error::Image {
        path: png_path.clone(),
        source,
    })?;

    write_manifest(
        &a.out,
        "assign-debug",
        json!({
            "clip": a.clip, "frame": a.frame, "strategy": a.strategy, "n": a.n,
            "shrink_factor": a.shrink_factor,
            "input_width": a.input_width, "input_height": a.input_height,
        }),
        a.seed,
        &[csv_path.display().to_string(), png_path.display().to_string()],
        start,
    )?;
    let positives = assignment.positive_count();
    Ok(json!({"positives": positives, "gts": gts.len()}).to_string())
}

fn draw_rect(img: &mut image::RgbImage, x1: f32, y1: f32, x2: f32, y2: f32, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let clamp = |v: f32, hi: i64| (v as i64).clamp(0, hi - 1);
    let (x1, y1, x2, y2) = (clamp(x1, w), clamp(y1, h), clamp(x2, w), clamp(y2, h));
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, image::Rgb(color));
        img.put_pixel(x as u32, y2 as u32, image::Rgb(color));
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, image::Rgb(color));
        img.put_pixel(x2 as u32, y as u32, image::Rgb(color));
    }
}
