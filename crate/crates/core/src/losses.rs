//! Matching cost, focal/L1/GIoU set losses with auxiliary layers, and the
//! two-branch total.

use serde::Serialize;

use crate::config::{FocalNorm, MatchConfig};
use crate::decoder::{boxes_of, BranchVars};
use crate::error::{Error, Result};
use crate::geometry::{giou, giou_with_grad, BBox};
use crate::matching::{hungarian_match, MatchResult};
use crate::numeric::{sigmoid, softplus, Backward, Graph, Tensor, Var};

/// Sigmoid focal loss of one logit against a 0/1 target, and its derivative.
pub fn focal_term(z: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if target {
        // -ln p = softplus(-z)
        let nl = softplus(-z);
        let w = (1.0 - p).powf(gamma);
        (alpha * w * nl, alpha * w * (-gamma * p * nl - (1.0 - p)))
    } else {
        let nl = softplus(z);
        let w = p.powf(gamma);
        ((1.0 - alpha) * w * nl, (1.0 - alpha) * w * (gamma * (1.0 - p) * nl + p))
    }
}

/// Focal-style classification cost: positive minus negative focal term.
pub fn focal_class_cost(z: f64, alpha: f64, gamma: f64) -> f64 {
    focal_term(z, true, alpha, gamma).0 - focal_term(z, false, alpha, gamma).0
}

/// n_q×J matching cost.
pub fn match_cost(logits: &Tensor, boxes: &[BBox], gts: &[(usize, BBox)], cfg: &MatchConfig) -> Tensor {
    let (n, c) = logits.dims2();
    assert_eq!(boxes.len(), n, "one box per query");
    let j = gts.len();
    let mut out = Vec::with_capacity(n * j);
    for (i, b) in boxes.iter().enumerate() {
        for &(cls, gt) in gts {
            assert!(cls < c, "gt class {cls} outside {c} logit columns");
            let z = logits.data()[i * c + cls];
            let l1: f64 = b.to_array().iter().zip(gt.to_array()).map(|(a, t)| (a - t).abs()).sum();
            out.push(
                cfg.cost_cls * focal_class_cost(z, cfg.focal_alpha, cfg.focal_gamma)
                    + cfg.cost_l1 * l1
                    + cfg.cost_giou * (1.0 - giou(*b, gt)),
            );
        }
    }
    Tensor::new(&[n, j], out)
}

/// Focal normalizer; box terms always divide by the matched count.
fn normalizer(cfg: &MatchConfig, n_matched: usize, n_queries: usize) -> f64 {
    match cfg.focal_norm {
        FocalNorm::MatchedGt => n_matched.max(1) as f64,
        FocalNorm::Queries => n_queries.max(1) as f64,
    }
}

struct FocalBackward {
    grads: Vec<f64>,
}

impl Backward for FocalBackward {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64], grads_in: &mut [Vec<f64>]) {
        for (g, d) in grads_in[0].iter_mut().zip(&self.grads) {
            *g += grad_out[0] * d;
        }
    }
}

/// Summed focal loss over an n_q×C logit matrix divided by `norm`; `targets`
/// holds the matched class per query (all-zero rows for unmatched ones).
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[Option<usize>], alpha: f64, gamma: f64, norm: f64) -> Var {
    let (n, c) = g.value(logits).dims2();
    assert_eq!(targets.len(), n);
    let mut total = 0.0;
    let mut grads = vec![0.0; n * c];
    for i in 0..n {
        for k in 0..c {
            let z = g.value(logits).data()[i * c + k];
            let (l, d) = focal_term(z, targets[i] == Some(k), alpha, gamma);
            total += l;
            grads[i * c + k] = d / norm;
        }
    }
    g.custom(&[logits], Tensor::scalar(total / norm), Box::new(FocalBackward { grads }))
}

struct PairLossBackward {
    grads: Vec<f64>,
}

impl Backward for PairLossBackward {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64], grads_in: &mut [Vec<f64>]) {
        for (g, d) in grads_in[0].iter_mut().zip(&self.grads) {
            *g += grad_out[0] * d;
        }
    }
}

/// `Σ ‖b_q − gt_j‖₁ / norm` over matched pairs (cxcywh).
pub fn l1_loss(g: &mut Graph, boxes: Var, pairs: &[(usize, usize)], gts: &[BBox], norm: f64) -> Var {
    let b = g.value(boxes).data();
    let mut total = 0.0;
    let mut grads = vec![0.0; b.len()];
    for &(q, j) in pairs {
        for (k, t) in gts[j].to_array().iter().enumerate() {
            let d = b[q * 4 + k] - t;
            total += d.abs();
            grads[q * 4 + k] += d.signum() * (d != 0.0) as u8 as f64 / norm;
        }
    }
    g.custom(&[boxes], Tensor::scalar(total / norm), Box::new(PairLossBackward { grads }))
}

/// `Σ (1 − giou(b_q, gt_j)) / norm` over matched pairs.
pub fn giou_loss(g: &mut Graph, boxes: Var, pairs: &[(usize, usize)], gts: &[BBox], norm: f64) -> Var {
    let b = g.value(boxes).data();
    let mut total = 0.0;
    let mut grads = vec![0.0; b.len()];
    for &(q, j) in pairs {
        let p = [b[q * 4], b[q * 4 + 1], b[q * 4 + 2], b[q * 4 + 3]];
        let (v, d) = giou_with_grad(p, gts[j].to_array());
        total += 1.0 - v;
        for k in 0..4 {
            grads[q * 4 + k] -= d[k] / norm;
        }
    }
    g.custom(&[boxes], Tensor::scalar(total / norm), Box::new(PairLossBackward { grads }))
}

/// Unweighted components summed over decoder layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Weighted sum actually optimized.
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, o: &LossBreakdown) {
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown { cls: self.cls * s, l1: self.l1 * s, giou: self.giou * s, total: self.total * s }
    }
}

/// Branch loss summed over layers, each layer matched independently unless
/// `forced` supplies the per-layer matches. Returns the loss, its breakdown
/// and the matches used.
pub fn branch_loss(
    g: &mut Graph,
    out: &BranchVars,
    gts: &[(usize, BBox)],
    cfg: &MatchConfig,
    forced: Option<&[MatchResult]>,
) -> Result<(Var, LossBreakdown, Vec<MatchResult>)> {
    if let Some(f) = forced {
        if f.len() != out.logits.len() {
            return Err(Error::BadShape(format!("{} forced matches for {} layers", f.len(), out.logits.len())));
        }
    }
    let gt_boxes: Vec<BBox> = gts.iter().map(|&(_, b)| b).collect();
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    let mut matches = Vec::with_capacity(out.logits.len());
    for (layer, (&logits, &boxes)) in out.logits.iter().zip(&out.boxes).enumerate() {
        let n_q = g.value(logits).dims2().0;
        let m = match forced {
            Some(f) => f[layer].clone(),
            None => {
                let cost = match_cost(g.value(logits), &boxes_of(g.value(boxes)), gts, cfg);
                hungarian_match(&cost)?
            }
        };
        let norm = normalizer(cfg, m.pairs.len(), n_q);
        let box_norm = m.pairs.len().max(1) as f64;
        let mut targets = vec![None; n_q];
        for &(q, j) in &m.pairs {
            targets[q] = Some(gts[j].0);
        }
        let fl = focal_loss(g, logits, &targets, cfg.focal_alpha, cfg.focal_gamma, norm);
        let l1 = l1_loss(g, boxes, &m.pairs, &gt_boxes, box_norm);
        let gl = giou_loss(g, boxes, &m.pairs, &gt_boxes, box_norm);
        let parts = LossBreakdown { cls: g.value(fl).item(), l1: g.value(l1).item(), giou: g.value(gl).item(), total: 0.0 };
        let a = g.scale(fl, cfg.loss_cls);
        let b = g.scale(l1, cfg.loss_l1);
        let c = g.scale(gl, cfg.loss_giou);
        let ab = g.add(a, b);
        let layer_loss = g.add(ab, c);
        breakdown.accumulate(&LossBreakdown { total: g.value(layer_loss).item(), ..parts });
        total = Some(match total {
            None => layer_loss,
            Some(t) => g.add(t, layer_loss),
        });
        matches.push(m);
    }
    let total = total.ok_or_else(|| Error::BadConfig("decoder has no layers".into()))?;
    Ok((total, breakdown, matches))
}

/// `L_text + alpha · L_visual` on the tape.
pub fn total_loss(g: &mut Graph, l_text: Var, l_visual: Var, alpha: f64) -> Var {
    let v = g.scale(l_visual, alpha);
    g.add(l_text, v)
}

pub fn total_loss_value(l_text: f64, l_visual: f64, alpha: f64) -> f64 {
    l_text + alpha * l_visual
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, Rng};
    use approx::assert_abs_diff_eq;

    #[test]
    fn focal_examples() {
        let (l, _) = focal_term(0.0, true, 0.25, 2.0);
        assert_abs_diff_eq!(l, 0.25 * 0.25 * std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.04332, epsilon = 1e-5);
        assert!(focal_term(40.0, true, 0.25, 2.0).0 < 1e-15);
        assert!(focal_term(-40.0, false, 0.25, 2.0).0 < 1e-15);
    }

    #[test]
    fn focal_derivative() {
        for &z in &[-3.0, -0.4, 0.0, 0.7, 2.5] {
            for t in [true, false] {
                let h = 1e-6;
                let fd = (focal_term(z + h, t, 0.25, 2.0).0 - focal_term(z - h, t, 0.25, 2.0).0) / (2.0 * h);
                assert_abs_diff_eq!(focal_term(z, t, 0.25, 2.0).1, fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn more_unmatched_confidence_costs_more() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![3.0, -5.0], vec![1.0, -5.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![3.0, -5.0], vec![2.0, -5.0]]));
        let t = [Some(0), None];
        let la = focal_loss(&mut g, a, &t, 0.25, 2.0, 1.0);
        let lb = focal_loss(&mut g, b, &t, 0.25, 2.0, 1.0);
        assert!(g.value(lb).item() > g.value(la).item());
    }

    #[test]
    fn cost_matches_components() {
        let cfg = MatchConfig::default();
        let logits = Tensor::from_rows(&[vec![0.3, -1.2]]);
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        let gt = BBox::new(0.45, 0.55, 0.25, 0.2);
        let c = match_cost(&logits, &[b], &[(1, gt)], &cfg);
        let p: f64 = 1.0 / (1.0 + 1.2f64.exp());
        let pos = 0.25 * (1.0 - p).powi(2) * -(p.ln());
        let neg = 0.75 * p.powi(2) * -((1.0 - p).ln());
        let l1 = 0.05 + 0.05 + 0.05 + 0.1;
        let expected = (pos - neg) + 5.0 * l1 + 2.0 * (1.0 - giou(b, gt));
        assert_abs_diff_eq!(c.item(), expected, epsilon = 1e-12);
    }

    fn single_layer(g: &mut Graph, logits: Tensor, boxes: Tensor) -> BranchVars {
        let l = g.variable(logits);
        let b = g.variable(boxes);
        BranchVars { logits: vec![l], boxes: vec![b] }
    }

    #[test]
    fn perfect_prediction_near_zero() {
        let gt = BBox::new(0.5, 0.4, 0.3, 0.2);
        let mut g = Graph::new();
        let out = single_layer(&mut g, Tensor::from_rows(&[vec![30.0, -30.0], vec![-30.0, -30.0]]),
            Tensor::from_rows(&[gt.to_array().to_vec(), vec![0.2, 0.2, 0.1, 0.1]]));
        let (l, _, m) = branch_loss(&mut g, &out, &[(0, gt)], &MatchConfig::default(), None).unwrap();
        assert_eq!(m[0].pairs, vec![(0, 0)]);
        assert!(g.value(l).item() < 1e-6);
    }

    #[test]
    fn no_gt_penalizes_positives_only() {
        let mut g = Graph::new();
        let out = single_layer(&mut g, Tensor::from_rows(&[vec![2.0, -1.0]]), Tensor::from_rows(&[vec![0.5, 0.5, 0.2, 0.2]]));
        let (l, br, m) = branch_loss(&mut g, &out, &[], &MatchConfig::default(), None).unwrap();
        assert!(m[0].pairs.is_empty());
        assert_eq!((br.l1, br.giou), (0.0, 0.0));
        let expected = 2.0 * (focal_term(2.0, false, 0.25, 2.0).0 + focal_term(-1.0, false, 0.25, 2.0).0);
        assert_abs_diff_eq!(g.value(l).item(), expected, epsilon = 1e-12);
    }

    #[test]
    fn one_query_one_gt_hand_sum() {
        let cfg = MatchConfig::default();
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        let gt = BBox::new(0.45, 0.55, 0.25, 0.2);
        let mut g = Graph::new();
        let out = single_layer(&mut g, Tensor::from_rows(&[vec![0.5, -0.7]]), Tensor::from_rows(&[b.to_array().to_vec()]));
        let (l, _, _) = branch_loss(&mut g, &out, &[(0, gt)], &cfg, None).unwrap();
        let fl = focal_term(0.5, true, 0.25, 2.0).0 + focal_term(-0.7, false, 0.25, 2.0).0;
        let expected = 2.0 * fl + 5.0 * 0.25 + 2.0 * (1.0 - giou(b, gt));
        assert_abs_diff_eq!(g.value(l).item(), expected, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss_value(2.0, 3.0, 0.5), 3.5);
        assert_eq!(total_loss_value(2.0, 3.0, 0.0), 2.0);
        assert_eq!(total_loss_value(2.0, 3.0, 1.0), 5.0);
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(3.0));
        let t = total_loss(&mut g, a, b, 0.5);
        assert_eq!(g.value(t).item(), 3.5);
    }

    #[test]
    fn loss_gradients_at_fixed_match() {
        let mut rng = Rng::new(8);
        let logits = Tensor::new(&[4, 2], (0..8).map(|_| rng.normal()).collect());
        let boxes = Tensor::from_rows(&[
            vec![0.3, 0.4, 0.2, 0.3],
            vec![0.6, 0.6, 0.3, 0.2],
            vec![0.5, 0.2, 0.1, 0.15],
            vec![0.7, 0.8, 0.25, 0.3],
        ]);
        let gts = vec![(0, BBox::new(0.32, 0.42, 0.25, 0.28)), (1, BBox::new(0.66, 0.58, 0.2, 0.25))];
        let cfg = MatchConfig::default();
        let mut g0 = Graph::new();
        let out = single_layer(&mut g0, logits.clone(), boxes.clone());
        let (_, _, matches) = branch_loss(&mut g0, &out, &gts, &cfg, None).unwrap();
        let err = grad_check(
            |g, x| {
                let b = g.constant(boxes.clone());
                let out = BranchVars { logits: vec![x], boxes: vec![b] };
                Ok(branch_loss(g, &out, &gts, &cfg, Some(&matches))?.0)
            },
            &logits,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
        let err = grad_check(
            |g, x| {
                let l = g.constant(logits.clone());
                let out = BranchVars { logits: vec![l], boxes: vec![x] };
                Ok(branch_loss(g, &out, &gts, &cfg, Some(&matches))?.0)
            },
            &boxes,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
