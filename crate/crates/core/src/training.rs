//! Training loop: windows -> forward -> dynamic assignment on the current
//! predictions -> loss -> SGD step, with per-epoch checkpoints, a best-by-
//! validation-AP50 checkpoint, and a deterministic per-step CSV log.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    center_gaussian_assign, shrink_box_assign, simota_oc_assign, AnchorGrid, AssignmentResult,
};
use crate::checkpoint::save_checkpoint;
use crate::data::{augment_window, sample_window, AugmentationConfig, VideoClip};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, FrameEval};
use crate::geometry::BoundingBox;
use crate::inference::{detect_video, Detection};
use crate::loss::{decode_box, total_loss_gaussian_grad, total_loss_grad, LossConfig};
use crate::network::{Model, NetworkConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignStrategy {
    SimotaOc,
    ShrinkBox,
    CenterGaussian,
}

impl std::str::FromStr for AssignStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simota_oc" => Ok(AssignStrategy::SimotaOc),
            "shrink_box" => Ok(AssignStrategy::ShrinkBox),
            "center_gaussian" => Ok(AssignStrategy::CenterGaussian),
            other => Err(Error::Config {
                field: "strategy".to_string(),
                message: format!("unknown assignment strategy '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub alpha: f64,
    pub fixed_n: f64,
    pub strategy: AssignStrategy,
    pub shrink_factor: f64,
    pub augment: bool,
    pub width_multiplier: f64,
    pub depth_multiplier: f64,
    pub input_width: u32,
    pub input_height: u32,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub val_fraction: f64,
    /// Stop once validation AP50 reaches this value; 0 disables.
    pub early_stop_ap50: f64,
    /// Write `ckpt_epoch_<k>` every k-th epoch (best/last always written).
    pub checkpoint_every: usize,
    /// Compute validation AP50 (and consider early stop / ckpt_best) every
    /// k-th epoch; the final epoch is always evaluated.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: 5,
            batch_size: 8,
            epochs: 100,
            initial_lr: 0.001,
            lr_decay: 0.95,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            alpha: 5.0,
            fixed_n: 16.0,
            strategy: AssignStrategy::SimotaOc,
            shrink_factor: 0.5,
            augment: true,
            width_multiplier: 1.0,
            depth_multiplier: 1.0,
            input_width: 672,
            input_height: 384,
            conf_threshold: 0.5,
            nms_threshold: 0.5,
            val_fraction: 0.1,
            early_stop_ap50: 0.0,
            checkpoint_every: 1,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: String| Error::Config {
            field: f.to_string(),
            message: m,
        };
        if self.n == 0 || self.n % 2 == 0 {
            return Err(field("n", format!("must be odd and >= 1, got {}", self.n)));
        }
        if self.epochs < 1 {
            return Err(field("epochs", "must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(field("batch_size", "must be >= 1".to_string()));
        }
        if self.initial_lr <= 0.0 {
            return Err(field("initial_lr", "must be > 0".to_string()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(field("lr_decay", "must be in (0, 1]".to_string()));
        }
        if self.input_width % 32 != 0 || self.input_height % 32 != 0 {
            return Err(field(
                "input_width/input_height",
                "must be divisible by 32".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(field("val_fraction", "must be in [0, 1)".to_string()));
        }
        if self.checkpoint_every == 0 {
            return Err(field("checkpoint_every", "must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                field: format!("line {}", lineno + 1),
                message: format!("expected key = value, got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |m: &str| Error::Config {
                field: key.to_string(),
                message: format!("{m}: '{value}'"),
            };
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| bad("invalid number"))?
                };
            }
            match key {
                "n" => cfg.n = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "epochs" => cfg.epochs = num!(),
                "initial_lr" => cfg.initial_lr = num!(),
                "lr_decay" => cfg.lr_decay = num!(),
                "momentum" => cfg.momentum = num!(),
                "weight_decay" => cfg.weight_decay = num!(),
                "grad_clip" => cfg.grad_clip = num!(),
                "alpha" => cfg.alpha = num!(),
                "fixed_n" => cfg.fixed_n = num!(),
                "strategy" => cfg.strategy = value.parse()?,
                "shrink_factor" => cfg.shrink_factor = num!(),
                "augment" => cfg.augment = value.parse().map_err(|_| bad("expected true/false"))?,
                "width_multiplier" => cfg.width_multiplier = num!(),
                "depth_multiplier" => cfg.depth_multiplier = num!(),
                "input_width" => cfg.input_width = num!(),
                "input_height" => cfg.input_height = num!(),
                "conf_threshold" => cfg.conf_threshold = num!(),
                "nms_threshold" => cfg.nms_threshold = num!(),
                "val_fraction" => cfg.val_fraction = num!(),
                "early_stop_ap50" => cfg.early_stop_ap50 = num!(),
                "checkpoint_every" => cfg.checkpoint_every = num!(),
                "eval_every" => cfg.eval_every = num!(),
                "seed" => cfg.seed = num!(),
                other => {
                    return Err(Error::Config {
                        field: other.to_string(),
                        message: "unknown key".to_string(),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            width_multiplier: self.width_multiplier,
            depth_multiplier: self.depth_multiplier,
            ..NetworkConfig::new(self.n)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub best_ap50: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Evaluate AP50 of `model` over whole clips (boxes in source pixels).
pub fn clip_set_ap50(model: &Model<f32>, clips: &[VideoClip], cfg: &TrainConfig) -> Result<f64> {
    let mut frames: Vec<FrameEval> = Vec::new();
    for clip in clips {
        let dets = detect_video(
            clip,
            model,
            cfg.n,
            cfg.input_width,
            cfg.input_height,
            cfg.conf_threshold as f32,
            cfg.nms_threshold as f32,
        )?;
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
    Ok(evaluate(&frames).ap50)
}

/// Decode every anchor's current predicted box (detached; used only for
/// assignment).
fn predicted_boxes(
    conf_reg: &ndarray::Array4<f32>,
    grid: &AnchorGrid,
) -> Vec<BoundingBox<f32>> {
    let reg = conf_reg.index_axis(Axis(0), 0);
    (0..grid.len())
        .map(|idx| {
            let (i, j) = (idx / grid.cols, idx % grid.cols);
            let (ax, ay) = grid.point_flat::<f32>(idx);
            decode_box(
                ax,
                ay,
                reg[[0, i, j]],
                reg[[1, i, j]],
                reg[[2, i, j]],
                reg[[3, i, j]],
            )
        })
        .collect()
}

fn assign(
    strategy: AssignStrategy,
    grid: &AnchorGrid,
    gts: &[BoundingBox<f32>],
    reg: &Array4<f32>,
    shrink: f32,
) -> AssignmentResult {
    match strategy {
        AssignStrategy::SimotaOc => {
            let preds = predicted_boxes(reg, grid);
            simota_oc_assign(grid, gts, &preds)
        }
        AssignStrategy::ShrinkBox => shrink_box_assign(grid, gts, shrink),
        // regression positives for the soft-target baseline: anchors strictly
        // inside the unshrunk box
        AssignStrategy::CenterGaussian => shrink_box_assign(grid, gts, 1.0),
    }
}

/// Run the full training loop. Writes `log.csv`, periodic `ckpt_epoch_<k>`,
/// `ckpt_last`, and `ckpt_best` into `out_dir`.
pub fn train(clips: &[VideoClip], cfg: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::argument("train: empty dataset"));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    // hold out the tail of the (name-sorted) clip list for validation
    let val_count = ((clips.len() as f64) * cfg.val_fraction).round() as usize;
    let val_count = val_count.min(clips.len().saturating_sub(1));
    let (train_clips, val_clips) = clips.split_at(clips.len() - val_count);
    // with no held-out clips, ckpt_best tracks training-set AP50
    let eval_clips: &[VideoClip] = if val_clips.is_empty() { train_clips } else { val_clips };

    let mut model = Model::<f32>::new(cfg.network_config(), cfg.seed);
    let grid = AnchorGrid::from_input_size(cfg.input_height as usize, cfg.input_width as usize);
    let loss_cfg = LossConfig::<f32> {
        alpha: cfg.alpha as f32,
        fixed_n: cfg.fixed_n as f32,
    };
    let aug_cfg = AugmentationConfig::default();

    // every (clip, center) pair is one training window
    let windows: Vec<(usize, usize)> = train_clips
        .iter()
        .enumerate()
        .flat_map(|(c, clip)| (0..clip.len()).map(move |f| (c, f)))
        .collect();

    let mut log = String::from("step,epoch,lr,total,conf,reg,positives\n");
    let mut step = 0usize;
    let mut final_loss = 0.0f64;
    let mut best_ap50 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.initial_lr * cfg.lr_decay.powi(epoch as i32);
        let mut order = windows.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            cfg.seed ^ 0xE19C_0000 ^ epoch as u64,
        ));
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grads();
            let inv_batch = 1.0f32 / batch.len() as f32;
            let mut batch_total = 0.0f64;
            let mut batch_conf = 0.0f64;
            let mut batch_reg = 0.0f64;
            let mut batch_pos = 0usize;
            // assemble the whole batch into one tensor so batch norm sees
            // real batch statistics (per-sample stats drift far from the
            // running averages used at inference)
            let (h, w) = (grid.rows, grid.cols);
            let mut xb = Array4::<f32>::zeros((
                batch.len(),
                3 * cfg.n,
                cfg.input_height as usize,
                cfg.input_width as usize,
            ));
            let mut gts_b: Vec<Vec<crate::BoundingBox<f32>>> = Vec::with_capacity(batch.len());
            for (k, &(c, f)) in batch.iter().enumerate() {
                let window = sample_window(&train_clips[c], f, cfg.n)?;
                let window = if cfg.augment {
                    let aseed = cfg
                        .seed
                        .wrapping_add((step as u64) << 20)
                        .wrapping_add(k as u64);
                    augment_window(&window, &aug_cfg, aseed)?.0
                } else {
                    window
                };
                let (x, gts) =
                    crate::data::window_to_tensor::<f32>(&window, cfg.input_width, cfg.input_height)?;
                xb.index_axis_mut(Axis(0), k).assign(&x.index_axis(Axis(0), 0));
                gts_b.push(gts);
            }
            let mut pass = model.forward(xb, true)?;
            let outputs = pass.outputs();
            let mut dconf_b = Array4::<f32>::zeros((batch.len(), 1, h, w));
            let mut dreg_b = Array4::<f32>::zeros((batch.len(), 4, h, w));
            for (k, &(c, f)) in batch.iter().enumerate() {
                let gts = &gts_b[k];
                let reg_k = outputs.reg.index_axis(Axis(0), k).to_owned().insert_axis(Axis(0));
                let assignment = assign(
                    cfg.strategy,
                    &grid,
                    gts,
                    &reg_k,
                    cfg.shrink_factor as f32,
                );
                let conf2 = outputs.conf.index_axis(Axis(0), k);
                let conf2 = conf2.index_axis(Axis(0), 0);
                let reg3 = outputs.reg.index_axis(Axis(0), k);
                let (breakdown, dconf, dreg) = match cfg.strategy {
                    AssignStrategy::CenterGaussian => {
                        let weights = center_gaussian_assign::<f32>(&grid, gts);
                        total_loss_gaussian_grad(
                            &conf2.view(),
                            &reg3.view(),
                            &weights,
                            &assignment,
                            gts,
                            &grid,
                            &loss_cfg,
                        )?
                    }
                    _ => total_loss_grad(
                        &conf2.view(),
                        &reg3.view(),
                        &assignment,
                        gts,
                        &grid,
                        &loss_cfg,
                    )?,
                };
                if !breakdown.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at step {step} (epoch {epoch}, clip `{}`, frame {f}): \
                         total={} conf={} reg={} positives={}",
                        train_clips[c].name,
                        breakdown.total,
                        breakdown.conf,
                        breakdown.reg,
                        breakdown.positives
                    )));
                }
                batch_total += breakdown.total as f64;
                batch_conf += breakdown.conf as f64;
                batch_reg += breakdown.reg as f64;
                batch_pos += breakdown.positives;
                dconf_b
                    .index_axis_mut(Axis(0), k)
                    .assign(&(dconf * inv_batch).into_shape_with_order((1, h, w)).unwrap());
                dreg_b
                    .index_axis_mut(Axis(0), k)
                    .assign(&(dreg * inv_batch).into_shape_with_order((4, h, w)).unwrap());
            }
            pass.tape.backward(
                vec![(pass.conf, dconf_b), (pass.reg, dreg_b)],
                &mut model.store,
            );
            model.commit_bn_stats(&mut pass);
            if cfg.grad_clip > 0.0 {
                model.store.clip_grad_norm(cfg.grad_clip as f32);
            }
            model
                .store
                .sgd_step(lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
            let mean_total = batch_total / batch.len() as f64;
            final_loss = mean_total;
            writeln!(
                log,
                "{step},{epoch},{lr:.8e},{:.6e},{:.6e},{:.6e},{batch_pos}",
                mean_total,
                batch_conf / batch.len() as f64,
                batch_reg / batch.len() as f64,
            )
            .unwrap();
            step += 1;
        }
        epochs_run = epoch + 1;

        if (epoch + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&out_dir.join(format!("ckpt_epoch_{epoch}")), &model, epoch)?;
        }
        save_checkpoint(&out_dir.join("ckpt_last"), &model, epoch)?;

        if (epoch + 1) % cfg.eval_every.max(1) == 0 || epoch + 1 == cfg.epochs {
            let ap50 = clip_set_ap50(&model, eval_clips, cfg)?;
            if ap50 > best_ap50 {
                best_ap50 = ap50;
                best_epoch = epoch;
                save_checkpoint(&out_dir.join("ckpt_best"), &model, epoch)?;
            }
            if cfg.early_stop_ap50 > 0.0 && ap50 >= cfg.early_stop_ap50 {
                stopped_early = true;
                break 'epochs;
            }
        }
    }

    let log_path = out_dir.join("log.csv");
    std::fs::write(&log_path, log).map_err(|source| Error::Io {
        path: log_path,
        source,
    })?;

    Ok(TrainSummary {
        epochs_run,
        steps: step,
        final_loss,
        best_ap50: if best_ap50.is_finite() { best_ap50 } else { 0.0 },
        best_epoch,
        stopped_early,
    })
}
