//! Box algebra: conversions, IoU/GIoU, ground-truth jittering, RoIAlign and
//! global average pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Backward, Graph, Rng, Tensor, Var};

/// Extent floor used by GIoU on predicted boxes.
pub const GIOU_MIN_EXTENT: f64 = 1e-6;

/// Normalized center-format rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxFormat {
    CxCyWh,
    Xyxy,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { cx: 0.5 * (x1 + x2), cy: 0.5 * (y1 + y2), w: x2 - x1, h: y2 - y1 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_xyxy(self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
    }

    /// Clips the xyxy extent to the unit square. `None` if nothing remains.
    pub fn clamp_unit(self) -> Option<BBox> {
        let [x1, y1, x2, y2] = self.to_xyxy();
        if x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0 {
            return self.is_valid().then_some(self);
        }
        let (x1, y1, x2, y2) = (x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0));
        (x2 > x1 && y2 > y1).then(|| BBox::from_xyxy(x1, y1, x2, y2))
    }
}

/// Coordinates of `b` in the requested format.
pub fn box_convert(b: BBox, to: BoxFormat) -> [f64; 4] {
    match to {
        BoxFormat::CxCyWh => b.to_array(),
        BoxFormat::Xyxy => b.to_xyxy(),
    }
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

pub fn iou(a: BBox, b: BBox) -> f64 {
    let (xa, xb) = (a.to_xyxy(), b.to_xyxy());
    let inter = intersection(xa, xb);
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(xa) + area(xb) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn giou(a: BBox, b: BBox) -> f64 {
    giou_with_grad(a.to_array(), b.to_array()).0
}

/// GIoU between predicted `p` and target `t` (both cxcywh) and its gradient
/// with respect to `p`. Predicted extents are floored at [`GIOU_MIN_EXTENT`].
pub fn giou_with_grad(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let (pw, w_clamped) = floor_extent(p[2]);
    let (ph, h_clamped) = floor_extent(p[3]);
    let (px1, px2) = (p[0] - 0.5 * pw, p[0] + 0.5 * pw);
    let (py1, py2) = (p[1] - 0.5 * ph, p[1] + 0.5 * ph);
    let (tx1, tx2) = (t[0] - 0.5 * t[2], t[0] + 0.5 * t[2]);
    let (ty1, ty2) = (t[1] - 0.5 * t[3], t[1] + 0.5 * t[3]);

    let iw_raw = px2.min(tx2) - px1.max(tx1);
    let ih_raw = py2.min(ty2) - py1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let area_p = pw * ph;
    let union = area_p + t[2] * t[3] - inter;
    let ew = px2.max(tx2) - px1.min(tx1);
    let eh = py2.max(ty2) - py1.min(ty1);
    let encl = ew * eh;
    let value = inter / union + union / encl - 1.0;

    // giou = I/U + U/E - 1 with U = Ap + At - I
    let d_u = -inter / (union * union) + 1.0 / encl;
    let d_i = 1.0 / union - d_u;
    let d_e = -union / (encl * encl);
    let d_ap = d_u;

    let (mut dx1, mut dx2, mut dy1, mut dy2) = (0.0, 0.0, 0.0, 0.0);
    let (mut dw, mut dh) = (d_ap * ph, d_ap * pw);
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let (d_iw, d_ih) = (d_i * ih, d_i * iw);
        if px2 <= tx2 {
            dx2 += d_iw;
        }
        if px1 >= tx1 {
            dx1 -= d_iw;
        }
        if py2 <= ty2 {
            dy2 += d_ih;
        }
        if py1 >= ty1 {
            dy1 -= d_ih;
        }
    }
    let (d_ew, d_eh) = (d_e * eh, d_e * ew);
    if px2 >= tx2 {
        dx2 += d_ew;
    }
    if px1 <= tx1 {
        dx1 -= d_ew;
    }
    if py2 >= ty2 {
        dy2 += d_eh;
    }
    if py1 <= ty1 {
        dy1 -= d_eh;
    }
    dw += 0.5 * (dx2 - dx1);
    dh += 0.5 * (dy2 - dy1);
    if w_clamped {
        dw = 0.0;
    }
    if h_clamped {
        dh = 0.0;
    }
    (value, [dx1 + dx2, dy1 + dy2, dw, dh])
}

fn floor_extent(v: f64) -> (f64, bool) {
    if v < GIOU_MIN_EXTENT {
        (GIOU_MIN_EXTENT, true)
    } else {
        (v, false)
    }
}

/// Hard-negative box sampling parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterParams {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub offset_frac: f64,
    pub iou_lo: f64,
    pub iou_hi: f64,
    pub n_neg: usize,
    pub max_attempts: usize,
}

impl Default for JitterParams {
    fn default() -> Self {
        JitterParams {
            scale_lo: 0.6,
            scale_hi: 1.0,
            offset_frac: 0.2,
            iou_lo: 0.1,
            iou_hi: 0.5,
            n_neg: 3,
            max_attempts: 50,
        }
    }
}

impl JitterParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.scale_lo && self.scale_lo <= self.scale_hi) {
            return Err(Error::BadConfig(format!(
                "jitter scale range [{}, {}] invalid",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(0.0 <= self.iou_lo && self.iou_lo < self.iou_hi && self.iou_hi <= 1.0) {
            return Err(Error::BadConfig(format!(
                "jitter IoU window [{}, {}] invalid",
                self.iou_lo, self.iou_hi
            )));
        }
        if self.offset_frac < 0.0 {
            return Err(Error::BadConfig("jitter offset fraction must be non-negative".into()));
        }
        Ok(())
    }
}

/// One jitter candidate: extent scaled by `s` about the center, center moved
/// by `(dx, dy)`, then clipped to the unit square.
pub fn jitter_candidate(b: BBox, s: f64, dx: f64, dy: f64) -> Option<BBox> {
    BBox::new(b.cx + dx, b.cy + dy, b.w * s, b.h * s).clamp_unit()
}

/// Samples up to `p.n_neg` boxes whose IoU with `b` falls in the acceptance
/// window, with at most `p.max_attempts` draws per slot.
pub fn jitter_box(b: BBox, p: &JitterParams, rng: &mut Rng) -> Vec<BBox> {
    let mut out = Vec::with_capacity(p.n_neg);
    for _ in 0..p.n_neg {
        for _ in 0..p.max_attempts {
            let s = rng.uniform(p.scale_lo, p.scale_hi);
            let dx = rng.uniform(-p.offset_frac * b.w, p.offset_frac * b.w);
            let dy = rng.uniform(-p.offset_frac * b.h, p.offset_frac * b.h);
            let Some(cand) = jitter_candidate(b, s, dx, dy) else { continue };
            let v = iou(cand, b);
            if v >= p.iou_lo && v <= p.iou_hi {
                out.push(cand);
                break;
            }
        }
    }
    out
}

/// Bilinear sample taps per output bin, weights already averaged over the
/// `samples²` points of the bin.
struct RoiTaps {
    bins: Vec<Vec<(usize, f64)>>,
}

fn roi_taps(height: usize, width: usize, roi: BBox, out: usize, samples: usize) -> Result<RoiTaps> {
    assert!(out >= 1 && samples >= 1);
    let [x1, y1, x2, y2] = roi.to_xyxy();
    let (rw, rh) = ((x2 - x1) * width as f64, (y2 - y1) * height as f64);
    if !(rw >= 1e-6 && rh >= 1e-6) {
        return Err(Error::DegenerateRoi { extent: rw.min(rh) });
    }
    if x2 <= 0.0 || y2 <= 0.0 || x1 >= 1.0 || y1 >= 1.0 {
        return Err(Error::BadData(format!("roi {roi:?} does not intersect the image")));
    }
    // continuous pixel coordinates, pixel centers at integer + 0.5 in normalized space
    let sx = x1 * width as f64 - 0.5;
    let sy = y1 * height as f64 - 0.5;
    let (bw, bh) = (rw / out as f64, rh / out as f64);
    let norm = 1.0 / (samples * samples) as f64;
    let mut bins = Vec::with_capacity(out * out);
    for py in 0..out {
        for px in 0..out {
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4 * samples * samples);
            for iy in 0..samples {
                let y = sy + (py as f64 + (iy as f64 + 0.5) / samples as f64) * bh;
                for ix in 0..samples {
                    let x = sx + (px as f64 + (ix as f64 + 0.5) / samples as f64) * bw;
                    bilinear_taps(height, width, y, x, norm, &mut taps);
                }
            }
            taps.sort_by_key(|t| t.0);
            taps.dedup_by(|a, b| {
                if a.0 == b.0 {
                    b.1 += a.1;
                    true
                } else {
                    false
                }
            });
            bins.push(taps);
        }
    }
    Ok(RoiTaps { bins })
}

fn bilinear_taps(height: usize, width: usize, y: f64, x: f64, weight: f64, taps: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > height as f64 || x < -1.0 || x > width as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, ly, lx);
    if y0 >= height - 1 {
        y0 = height - 1;
        y1 = y0;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
        ly = y - y0 as f64;
    }
    if x0 >= width - 1 {
        x0 = width - 1;
        x1 = x0;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
        lx = x - x0 as f64;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push((y0 * width + x0, weight * hy * hx));
    taps.push((y0 * width + x1, weight * hy * lx));
    taps.push((y1 * width + x0, weight * ly * hx));
    taps.push((y1 * width + x1, weight * ly * lx));
}

fn apply_taps(fmap: &[f64], channels: usize, plane: usize, taps: &RoiTaps) -> Vec<f64> {
    let nb = taps.bins.len();
    let mut out = vec![0.0; channels * nb];
    for c in 0..channels {
        let src = &fmap[c * plane..(c + 1) * plane];
        for (b, bin) in taps.bins.iter().enumerate() {
            out[c * nb + b] = bin.iter().map(|&(i, w)| w * src[i]).sum();
        }
    }
    out
}

fn chw(fmap: &Tensor) -> Result<(usize, usize, usize)> {
    match fmap.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::BadShape(format!("roi_align expects C×H×W, got {s:?}"))),
    }
}

/// RoIAlign of `roi` over a C×H×W map into C×out×out, averaging
/// `samples × samples` bilinear samples per bin.
pub fn roi_align(fmap: &Tensor, roi: BBox, out: usize, samples: usize) -> Result<Tensor> {
    let (c, h, w) = chw(fmap)?;
    let taps = roi_taps(h, w, roi, out, samples)?;
    Ok(Tensor::new(&[c, out, out], apply_taps(fmap.data(), c, h * w, &taps)))
}

struct RoiAlignBackward {
    taps: RoiTaps,
    channels: usize,
    plane: usize,
}

impl Backward for RoiAlignBackward {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64], grads_in: &mut [Vec<f64>]) {
        let nb = self.taps.bins.len();
        let g = &mut grads_in[0];
        for c in 0..self.channels {
            for (b, bin) in self.taps.bins.iter().enumerate() {
                let go = grad_out[c * nb + b];
                for &(i, w) in bin {
                    g[c * self.plane + i] += w * go;
                }
            }
        }
    }
}

/// Differentiable (w.r.t. the feature map) RoIAlign on the tape.
pub fn roi_align_var(g: &mut Graph, fmap: Var, roi: BBox, out: usize, samples: usize) -> Result<Var> {
    let (c, h, w) = chw(g.value(fmap))?;
    let taps = roi_taps(h, w, roi, out, samples)?;
    let value = Tensor::new(&[c, out, out], apply_taps(g.value(fmap).data(), c, h * w, &taps));
    Ok(g.custom(&[fmap], value, Box::new(RoiAlignBackward { taps, channels: c, plane: h * w })))
}

/// Global average pooling: C×P×P -> C.
pub fn gap(t: &Tensor) -> Tensor {
    let c = t.shape()[0];
    let inner = t.len() / c;
    Tensor::new(&[c], t.data().chunks(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect())
}

pub fn gap_var(g: &mut Graph, t: Var) -> Var {
    g.mean_inner(t)
}
