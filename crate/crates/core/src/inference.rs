//! Decoding head maps into detections, non-maximum suppression, and
//! whole-video detection with sequence padding.

use std::time::Instant;

use ndarray::{ArrayView2, ArrayView3};

use crate::assignment::AnchorGrid;
use crate::data::{pad_sequence, window_to_tensor, VideoClip};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::network::Model;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<F> {
    pub bbox: BoundingBox<F>,
    pub score: F,
    pub frame_index: usize,
}

/// Encode a box relative to an anchor point as (left, top, right, bottom)
/// distances. Inverse of the decode arithmetic.
pub fn encode_box<F: Real>(b: &BoundingBox<F>, ax: F, ay: F) -> (F, F, F, F) {
    (ax - b.x1, ay - b.y1, b.x2 - ax, b.y2 - ay)
}

/// Decode one frame's head maps: every cell with conf >= threshold becomes a
/// detection with box (x-l, y-t, x+r, y+b), clamped to the image.
pub fn decode<F: Real>(
    conf: &ArrayView2<F>,
    reg: &ArrayView3<F>,
    grid: &AnchorGrid,
    conf_threshold: F,
    img_w: F,
    img_h: F,
    frame_index: usize,
) -> Result<Vec<Detection<F>>> {
    if conf.dim() != (grid.rows, grid.cols) || reg.dim() != (4, grid.rows, grid.cols) {
        return Err(Error::shape(format!(
            "decode: maps {:?}/{:?} do not match grid {}x{}",
            conf.dim(),
            reg.dim(),
            grid.rows,
            grid.cols
        )));
    }
    let mut out = Vec::new();
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let score = conf[[i, j]];
            if score < conf_threshold {
                continue;
            }
            let (ax, ay) = grid.point::<F>(i, j);
            let bbox = BoundingBox::raw(
                ax - reg[[0, i, j]],
                ay - reg[[1, i, j]],
                ax + reg[[2, i, j]],
                ay + reg[[3, i, j]],
            )
            .clamped(img_w, img_h);
            if !bbox.is_valid() {
                continue;
            }
            out.push(Detection {
                bbox,
                score,
                frame_index,
            });
        }
    }
    Ok(out)
}

/// Greedy NMS in descending score order; survivors have pairwise IOU below
/// the threshold. Ties keep input order.
pub fn nms<F: Real>(dets: &[Detection<F>], iou_threshold: F) -> Vec<Detection<F>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<Detection<F>> = Vec::new();
    for &idx in &order {
        let d = &dets[idx];
        if keep.iter().all(|k| k.bbox.iou(&d.bbox) < iou_threshold) {
            keep.push(*d);
        }
    }
    keep
}

#[derive(Debug, Clone)]
pub struct VideoDetections<F> {
    /// One entry per clip frame, in frame order.
    pub frames: Vec<Vec<Detection<F>>>,
    pub mean_window_seconds: f64,
    pub end_to_end_fps: f64,
}

/// Run the detector over every frame of a clip via sequence padding. Boxes
/// are reported in original video pixels.
pub fn detect_video<F: Real>(
    clip: &VideoClip,
    model: &Model<F>,
    n: usize,
    in_w: u32,
    in_h: u32,
    conf_threshold: F,
    nms_threshold: F,
) -> Result<VideoDetections<F>> {
    if clip.is_empty() {
        return Err(Error::argument("detect_video: empty clip"));
    }
    if n != model.cfg.n_frames {
        return Err(Error::argument(format!(
            "detect_video: n={n} but model was built for n={}",
            model.cfg.n_frames
        )));
    }
    let start = Instant::now();
    let windows = pad_sequence(clip, n)?;
    let grid = AnchorGrid::from_input_size(in_h as usize, in_w as usize);
    let (src_w, src_h) = clip.frame_size();
    let sx = F::real(src_w as f64 / in_w as f64);
    let sy = F::real(src_h as f64 / in_h as f64);
    let mut frames = Vec::with_capacity(windows.len());
    let mut window_seconds = 0.0;
    for (frame_index, window) in windows.iter().enumerate() {
        let (x, _) = window_to_tensor::<F>(window, in_w, in_h)?;
        let t0 = Instant::now();
        let pass = model.forward(x, false)?;
        window_seconds += t0.elapsed().as_secs_f64();
        let outputs = pass.outputs();
        let conf = outputs.conf.index_axis(ndarray::Axis(0), 0);
        let conf = conf.index_axis(ndarray::Axis(0), 0);
        let reg = outputs.reg.index_axis(ndarray::Axis(0), 0);
        let dets = decode(
            &conf.view(),
            &reg.view(),
            &grid,
            conf_threshold,
            F::real(in_w as f64),
            F::real(in_h as f64),
            frame_index,
        )?;
        let kept = nms(&dets, nms_threshold)
            .into_iter()
            .map(|d| Detection {
                bbox: BoundingBox::raw(
                    d.bbox.x1 * sx,
                    d.bbox.y1 * sy,
                    d.bbox.x2 * sx,
                    d.bbox.y2 * sy,
                ),
                ..d
            })
            .collect();
        frames.push(kept);
    }
    let total = start.elapsed().as_secs_f64();
    Ok(VideoDetections {
        mean_window_seconds: window_seconds / windows.len() as f64,
        end_to_end_fps: windows.len() as f64 / total.max(1e-12),
        frames,
    })
}
