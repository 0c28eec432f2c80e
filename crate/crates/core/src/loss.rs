//! Multi-task loss: per-anchor L2 confidence + CIOU regression, summed and
//! normalized by the positive count (or a fixed constant on empty frames).
//! Gradients are computed analytically with the aspect-ratio weight treated
//! as a constant, and seed the network tape at the head outputs.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::assignment::{AnchorGrid, AnchorLabel, AssignmentResult};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<F> {
    /// Balance between confidence and regression terms.
    pub alpha: F,
    /// Normalizer when the frame has no positive anchors.
    pub fixed_n: F,
}

impl<F: Real> Default for LossConfig<F> {
    fn default() -> Self {
        LossConfig {
            alpha: F::real(5.0),
            fixed_n: F::real(16.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub total: F,
    /// Unnormalized sum of confidence terms.
    pub conf: F,
    /// Unnormalized sum of regression terms.
    pub reg: F,
    pub positives: usize,
}

/// L2 confidence loss of one anchor: (c-1)^2 positive, c^2 negative,
/// 0 ignored.
pub fn confidence_loss<F: Real>(conf: F, label: AnchorLabel) -> F {
    match label {
        AnchorLabel::Positive { .. } => (conf - F::one()) * (conf - F::one()),
        AnchorLabel::Negative => conf * conf,
        AnchorLabel::Ignored => F::zero(),
    }
}

/// CIOU loss: 1 - IOU + center-distance/enclosing-diagonal + aspect penalty.
pub fn ciou_loss<F: Real>(pred: &BoundingBox<F>, gt: &BoundingBox<F>) -> Result<F> {
    Ok(ciou_loss_grad(pred, gt)?.0)
}

/// CIOU loss with its gradient w.r.t. the predicted corners
/// (x1, y1, x2, y2). The aspect weight is constant w.r.t. gradients.
pub fn ciou_loss_grad<F: Real>(
    pred: &BoundingBox<F>,
    gt: &BoundingBox<F>,
) -> Result<(F, [F; 4])> {
    if gt.area() <= F::zero() {
        return Err(Error::argument("ciou_loss: ground-truth box has zero area"));
    }
    let zero = F::zero();
    let one = F::one();
    let two = F::real(2.0);
    let four = F::real(4.0);
    let pi = F::real(std::f64::consts::PI);

    let pw = pred.x2 - pred.x1;
    let ph = pred.y2 - pred.y1;
    let gw = gt.x2 - gt.x1;
    let gh = gt.y2 - gt.y1;
    let ap = pw * ph;
    let ag = gw * gh;

    // intersection
    let xi1 = pred.x1.max(gt.x1);
    let yi1 = pred.y1.max(gt.y1);
    let xi2 = pred.x2.min(gt.x2);
    let yi2 = pred.y2.min(gt.y2);
    let iw = (xi2 - xi1).max(zero);
    let ih = (yi2 - yi1).max(zero);
    let inter = iw * ih;
    let union = ap + ag - inter;
    let iou = inter / union;

    // dI/d(pred corners); nonzero only where the pred edge bounds the
    // intersection and the intersection is non-empty
    let (mut di_dx1, mut di_dy1, mut di_dx2, mut di_dy2) = (zero, zero, zero, zero);
    if iw > zero && ih > zero {
        if pred.x1 > gt.x1 {
            di_dx1 = -ih;
        }
        if pred.x2 < gt.x2 {
            di_dx2 = ih;
        }
        if pred.y1 > gt.y1 {
            di_dy1 = -iw;
        }
        if pred.y2 < gt.y2 {
            di_dy2 = iw;
        }
    }
    // dAp/d corners
    let dap = [-ph, -pw, ph, pw];
    let di = [di_dx1, di_dy1, di_dx2, di_dy2];
    let mut diou = [zero; 4];
    for k in 0..4 {
        let du = dap[k] - di[k];
        diou[k] = (di[k] * union - inter * du) / (union * union);
    }

    // center distance over enclosing diagonal
    let pcx = (pred.x1 + pred.x2) / two;
    let pcy = (pred.y1 + pred.y2) / two;
    let gcx = (gt.x1 + gt.x2) / two;
    let gcy = (gt.y1 + gt.y2) / two;
    let d2 = (pcx - gcx) * (pcx - gcx) + (pcy - gcy) * (pcy - gcy);
    let xe1 = pred.x1.min(gt.x1);
    let ye1 = pred.y1.min(gt.y1);
    let xe2 = pred.x2.max(gt.x2);
    let ye2 = pred.y2.max(gt.y2);
    let ew = xe2 - xe1;
    let eh = ye2 - ye1;
    let c2 = ew * ew + eh * eh;

    let dd2 = [pcx - gcx, pcy - gcy, pcx - gcx, pcy - gcy];
    let mut dc2 = [zero; 4];
    if pred.x1 < gt.x1 {
        dc2[0] = -two * ew;
    }
    if pred.y1 < gt.y1 {
        dc2[1] = -two * eh;
    }
    if pred.x2 > gt.x2 {
        dc2[2] = two * ew;
    }
    if pred.y2 > gt.y2 {
        dc2[3] = two * eh;
    }
    let mut dcenter = [zero; 4];
    for k in 0..4 {
        dcenter[k] = (dd2[k] * c2 - d2 * dc2[k]) / (c2 * c2);
    }

    // aspect penalty
    let atan_diff = (gw / gh).atan() - (pw / ph).atan();
    let v = four / (pi * pi) * atan_diff * atan_diff;
    let denom = (one - iou) + v;
    let alpha_v = if denom > zero { v / denom } else { zero };
    let datan_dw = ph / (pw * pw + ph * ph);
    let datan_dh = -pw / (pw * pw + ph * ph);
    let dv_dw = -(F::real(8.0) / (pi * pi)) * atan_diff * datan_dw;
    let dv_dh = -(F::real(8.0) / (pi * pi)) * atan_diff * datan_dh;
    let dv = [-dv_dw, -dv_dh, dv_dw, dv_dh];

    let loss = one - iou + d2 / c2 + alpha_v * v;
    let mut grad = [zero; 4];
    for k in 0..4 {
        grad[k] = -diou[k] + dcenter[k] + alpha_v * dv[k];
    }
    Ok((loss, grad))
}

/// Decode the (l, t, r, b) distances at one anchor into a box.
pub fn decode_box<F: Real>(ax: F, ay: F, l: F, t: F, r: F, b: F) -> BoundingBox<F> {
    BoundingBox::raw(ax - l, ay - t, ax + r, ay + b)
}

/// Total loss over one sample's head maps, plus its gradients w.r.t. the
/// confidence map (H, W) and regression map (4, H, W).
pub fn total_loss_grad<F: Real>(
    conf: &ArrayView2<F>,
    reg: &ArrayView3<F>,
    assignment: &AssignmentResult,
    gts: &[BoundingBox<F>],
    grid: &AnchorGrid,
    cfg: &LossConfig<F>,
) -> Result<(LossBreakdown<F>, Array2<F>, Array3<F>)> {
    let (h, w) = conf.dim();
    if (h, w) != (grid.rows, grid.cols) || assignment.labels.len() != grid.len() {
        return Err(Error::shape(format!(
            "loss grid mismatch: conf {h}x{w}, grid {}x{}, labels {}",
            grid.rows,
            grid.cols,
            assignment.labels.len()
        )));
    }
    let positives = assignment.positive_count();
    let n = if positives > 0 {
        F::real(positives as f64)
    } else {
        cfg.fixed_n
    };
    let mut conf_sum = F::zero();
    let mut reg_sum = F::zero();
    let mut dconf = Array2::<F>::zeros((h, w));
    let mut dreg = Array3::<F>::zeros((4, h, w));
    let two = F::real(2.0);
    for idx in 0..grid.len() {
        let (i, j) = (idx / grid.cols, idx % grid.cols);
        let label = assignment.labels[idx];
        let c = conf[[i, j]];
        conf_sum += confidence_loss(c, label);
        match label {
            AnchorLabel::Positive { gt } => {
                dconf[[i, j]] = two * (c - F::one()) / n;
                let (ax, ay) = grid.point_flat::<F>(idx);
                let (l, t, r, b) = (
                    reg[[0, i, j]],
                    reg[[1, i, j]],
                    reg[[2, i, j]],
                    reg[[3, i, j]],
                );
                let pred = decode_box(ax, ay, l, t, r, b);
                let (loss, dbox) = ciou_loss_grad(&pred, &gts[gt])?;
                reg_sum += loss;
                let scale = cfg.alpha / n;
                // chain x1 = ax - l, y1 = ay - t, x2 = ax + r, y2 = ay + b
                dreg[[0, i, j]] = -dbox[0] * scale;
                dreg[[1, i, j]] = -dbox[1] * scale;
                dreg[[2, i, j]] = dbox[2] * scale;
                dreg[[3, i, j]] = dbox[3] * scale;
            }
            AnchorLabel::Negative => {
                dconf[[i, j]] = two * c / n;
            }
            AnchorLabel::Ignored => {}
        }
    }
    let total = (conf_sum + cfg.alpha * reg_sum) / n;
    Ok((
        LossBreakdown {
            total,
            conf: conf_sum,
            reg: reg_sum,
            positives,
        },
        dconf,
        dreg,
    ))
}

/// Loss only, without gradients.
pub fn total_loss<F: Real>(
    conf: &ArrayView2<F>,
    reg: &ArrayView3<F>,
    assignment: &AssignmentResult,
    gts: &[BoundingBox<F>],
    grid: &AnchorGrid,
    cfg: &LossConfig<F>,
) -> Result<LossBreakdown<F>> {
    Ok(total_loss_grad(conf, reg, assignment, gts, grid, cfg)?.0)
}

/// Variant for the center-Gaussian baseline: the soft weight map replaces
/// the binary confidence target; anchors strictly inside a box regress it.
pub fn total_loss_gaussian_grad<F: Real>(
    conf: &ArrayView2<F>,
    reg: &ArrayView3<F>,
    weights: &Array2<F>,
    assignment: &AssignmentResult,
    gts: &[BoundingBox<F>],
    grid: &AnchorGrid,
    cfg: &LossConfig<F>,
) -> Result<(LossBreakdown<F>, Array2<F>, Array3<F>)> {
    let (h, w) = conf.dim();
    if (h, w) != (grid.rows, grid.cols) {
        return Err(Error::shape("gaussian loss grid mismatch".to_string()));
    }
    let positives = assignment.positive_count();
    let n = if positives > 0 {
        F::real(positives as f64)
    } else {
        cfg.fixed_n
    };
    let two = F::real(2.0);
    let mut conf_sum = F::zero();
    let mut reg_sum = F::zero();
    let mut dconf = Array2::<F>::zeros((h, w));
    let mut dreg = Array3::<F>::zeros((4, h, w));
    for idx in 0..grid.len() {
        let (i, j) = (idx / grid.cols, idx % grid.cols);
        let c = conf[[i, j]];
        let target = weights[[i, j]];
        conf_sum += (c - target) * (c - target);
        dconf[[i, j]] = two * (c - target) / n;
        if let AnchorLabel::Positive { gt } = assignment.labels[idx] {
            let (ax, ay) = grid.point_flat::<F>(idx);
            let pred = decode_box(
                ax,
                ay,
                reg[[0, i, j]],
                reg[[1, i, j]],
                reg[[2, i, j]],
                reg[[3, i, j]],
            );
            let (loss, dbox) = ciou_loss_grad(&pred, &gts[gt])?;
            reg_sum += loss;
            let scale = cfg.alpha / n;
            dreg[[0, i, j]] = -dbox[0] * scale;
            dreg[[1, i, j]] = -dbox[1] * scale;
            dreg[[2, i, j]] = dbox[2] * scale;
            dreg[[3, i, j]] = dbox[3] * scale;
        }
    }
    let total = (conf_sum + cfg.alpha * reg_sum) / n;
    Ok((
        LossBreakdown {
            total,
            conf: conf_sum,
            reg: reg_sum,
            positives,
        },
        dconf,
        dreg,
    ))
}
