//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any gated criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use lmp_core::config::{coco_iou_thresholds, ModelConfig, RunConfig};
use lmp_core::decoder::{BranchOutput, DecoderStack};
use lmp_core::enhancer::{token_positions, EnhancerStack, QueryInit};
use lmp_core::episode::{generate_episode, Annotation, DomainStyle, Episode, EpisodeSpec};
use lmp_core::eval::{evaluate_map, DetBranch, Detection};
use lmp_core::geometry::{giou, iou, jitter_box, roi_align_var, BBox, JitterParams};
use lmp_core::losses::{focal_loss, giou_loss, l1_loss};
use lmp_core::backbone::TokenIndex;
use lmp_core::matching::hungarian_match;
use lmp_core::model::{Branch, Model};
use lmp_core::numeric::{grad_check, Graph, Rng, Tensor, Var};
use lmp_core::par::Exec;
use lmp_core::params::{ParamStore, Session, Trainable};
use lmp_core::pipeline::{evaluate_episode, generate_from_config, run_ablation, train_stages, Sweep};
use lmp_core::train::{episode_loss, run_training, step_rng, LogRecord, Stage};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------------------
// 1. geometry against a rasterized grid

const GRID: usize = 1 << 16;

/// Cells of a GRID-cell axis over [0, 1) whose centres fall in [lo, hi).
fn cells(lo: f64, hi: f64) -> Vec<bool> {
    (0..GRID)
        .map(|i| {
            let c = (i as f64 + 0.5) / GRID as f64;
            c >= lo && c < hi
        })
        .collect()
}

/// Counts grid cells covered by a box; box membership is separable, so the
/// 2-D count is the product of the per-axis counts of the member mask.
fn raster_count(x: &[bool], y: &[bool]) -> f64 {
    (x.iter().filter(|&&b| b).count() * y.iter().filter(|&&b| b).count()) as f64
}

fn and(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(p, q)| *p && *q).collect()
}

/// Raster IoU and GIoU of two xyxy boxes inside the unit square.
fn raster_iou_giou(a: [f64; 4], b: [f64; 4]) -> (f64, f64) {
    let (ax, ay) = (cells(a[0], a[2]), cells(a[1], a[3]));
    let (bx, by) = (cells(b[0], b[2]), cells(b[1], b[3]));
    let area_a = raster_count(&ax, &ay);
    let area_b = raster_count(&bx, &by);
    let inter = raster_count(&and(&ax, &bx), &and(&ay, &by));
    let union = area_a + area_b - inter;
    let ex = cells(a[0].min(b[0]), a[2].max(b[2]));
    let ey = cells(a[1].min(b[1]), a[3].max(b[3]));
    let enclosure = raster_count(&ex, &ey);
    let i = inter / union;
    (i, i - (enclosure - union) / enclosure)
}

fn random_xyxy(rng: &mut Rng) -> [f64; 4] {
    let w = rng.uniform(0.05, 0.6);
    let h = rng.uniform(0.05, 0.6);
    let x = rng.uniform(0.0, 1.0 - w);
    let y = rng.uniform(0.0, 1.0 - h);
    [x, y, x + w, y + h]
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let a = random_xyxy(&mut rng);
        let b = if k % 2 == 0 {
            random_xyxy(&mut rng)
        } else {
            // force overlap for half the pairs
            let w = a[2] - a[0];
            let h = a[3] - a[1];
            let dx = rng.uniform(-0.5, 0.5) * w;
            let dy = rng.uniform(-0.5, 0.5) * h;
            let s = rng.uniform(0.6, 1.3);
            let (cx, cy) = ((a[0] + a[2]) / 2.0 + dx, (a[1] + a[3]) / 2.0 + dy);
            let (hw, hh) = ((w * s / 2.0).min(cx).min(1.0 - cx), (h * s / 2.0).min(cy).min(1.0 - cy));
            [cx - hw, cy - hh, cx + hw, cy + hh]
        };
        let (ri, rg) = raster_iou_giou(a, b);
        let ba = BBox::from_xyxy(a[0], a[1], a[2], a[3]);
        let bb = BBox::from_xyxy(b[0], b[1], b[2], b[3]);
        worst = worst.max((iou(ba, bb) - ri).abs()).max((giou(ba, bb) - rg).abs());
    }
    let analytic = [
        (iou(BBox::from_xyxy(0.0, 0.0, 2.0, 2.0), BBox::from_xyxy(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0),
        (iou(BBox::from_xyxy(0.0, 0.0, 1.0, 1.0), BBox::from_xyxy(0.0, 0.0, 1.0, 1.0)), 1.0),
        (iou(BBox::from_xyxy(0.0, 0.0, 1.0, 1.0), BBox::from_xyxy(2.0, 0.0, 3.0, 1.0)), 0.0),
        (giou(BBox::from_xyxy(0.0, 0.0, 1.0, 1.0), BBox::from_xyxy(0.0, 0.0, 1.0, 1.0)), 1.0),
        (giou(BBox::from_xyxy(0.0, 0.0, 1.0, 1.0), BBox::from_xyxy(1.0, 0.0, 2.0, 1.0)), 0.0),
        (giou(BBox::from_xyxy(0.0, 0.0, 1.0, 1.0), BBox::from_xyxy(2.0, 0.0, 3.0, 1.0)), -1.0 / 3.0),
    ];
    let analytic_err = analytic.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    let el = t.elapsed();
    outcome(
        worst <= 2e-3 && analytic_err <= 1e-12 && within(el, 5.0),
        format!("max |diff| vs raster {worst:.2e} (tol 2e-3), analytic {analytic_err:.1e}, {el:.2?} (< 5 s)"),
    )
}

// ---------------------------------------------------------------------------
// 2. matching against exhaustive search

/// Minimum over all injective row->column (or column->row) maps.
fn brute_min(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, transpose: bool) {
        let n_rows = if transpose { cost[0].len() } else { cost.len() };
        if row == n_rows {
            *best = best.min(acc);
            return;
        }
        for col in 0..used.len() {
            if !used[col] {
                used[col] = true;
                let v = if transpose { cost[col][row] } else { cost[row][col] };
                rec(cost, row + 1, used, acc + v, best, transpose);
                used[col] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    if r <= c {
        rec(cost, 0, &mut vec![false; c], 0.0, &mut best, false);
    } else {
        rec(cost, 0, &mut vec![false; r], 0.0, &mut best, true);
    }
    best
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(202);
    let mut mismatches = 0;
    let mut worst_real: f64 = 0.0;
    for k in 0..1000 {
        let r = 1 + rng.below(6);
        let c = 1 + rng.below(6);
        let integral = k % 2 == 0;
        let rows: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..c).map(|_| if integral { rng.below(20) as f64 } else { rng.uniform(-5.0, 5.0) }).collect())
            .collect();
        let m = hungarian_match(&Tensor::from_rows(&rows)).expect("finite matrix");
        let own: f64 = m.pairs.iter().map(|&(q, j)| rows[q][j]).sum();
        let oracle = brute_min(&rows);
        if m.pairs.len() != r.min(c) {
            mismatches += 1;
        } else if integral {
            mismatches += (own != oracle || m.cost != oracle) as usize;
        } else {
            worst_real = worst_real.max((own - oracle).abs()).max((m.cost - oracle).abs());
        }
    }
    let el = t.elapsed();
    outcome(
        mismatches == 0 && worst_real <= 1e-12 && within(el, 10.0),
        format!("integer costs: {mismatches} mismatches (exact), real costs max diff {worst_real:.1e}, {el:.2?} (< 10 s)"),
    )
}

// ---------------------------------------------------------------------------
// 3. mAP against an independent AP recompute

fn plain_iou(a: BBox, b: BBox) -> f64 {
    let (a, b) = (a.to_xyxy(), b.to_xyxy());
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
}

/// AP of one class at one threshold by direct 101-point interpolation.
fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], class: usize, thr: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|a| a.class_id == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut all: Vec<(usize, &Detection)> =
        dets.iter().enumerate().flat_map(|(i, d)| d.iter().filter(|d| d.class_id == class).map(move |d| (i, d))).collect();
    all.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut points = Vec::new();
    for (k, (img, d)) in all.iter().enumerate() {
        let mut best = None;
        let mut best_iou = thr;
        for (j, g) in gts[*img].iter().enumerate() {
            if g.class_id != class || taken[*img][j] {
                continue;
            }
            let v = plain_iou(d.bbox, g.bbox);
            if v >= best_iou {
                if best.is_none() || v > best_iou {
                    best = Some(j);
                }
                best_iou = best_iou.max(v);
            }
        }
        if let Some(j) = best {
            taken[*img][j] = true;
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        sum += points.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

fn oracle_map(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], n_class: usize, thresholds: &[f64]) -> f64 {
    let mut per_class = Vec::new();
    for c in 0..n_class {
        let aps: Vec<f64> = thresholds.iter().filter_map(|&t| oracle_ap(dets, gts, c, t)).collect();
        if !aps.is_empty() {
            per_class.push(aps.iter().sum::<f64>() / aps.len() as f64);
        }
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

fn random_box(rng: &mut Rng) -> BBox {
    let w = rng.uniform(0.05, 0.4);
    let h = rng.uniform(0.05, 0.4);
    BBox::new(rng.uniform(w / 2.0, 1.0 - w / 2.0), rng.uniform(h / 2.0, 1.0 - h / 2.0), w, h)
}

fn det(bbox: BBox, class_id: usize, score: f64) -> Detection {
    Detection { bbox, class_id, score, branch: DetBranch::Visual }
}

fn criterion_3() -> Outcome {
    let thresholds = coco_iou_thresholds();
    let mut rng = Rng::new(303);
    let mut worst: f64 = 0.0;
    for _ in 0..49 {
        let n_img = 1 + rng.below(4);
        let n_class = 1 + rng.below(3);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..n_img {
            let g: Vec<Annotation> =
                (0..rng.below(5)).map(|_| Annotation { class_id: rng.below(n_class), bbox: random_box(&mut rng) }).collect();
            let mut d = Vec::new();
            for a in &g {
                if rng.uniform(0.0, 1.0) < 0.8 {
                    let b = a.bbox;
                    let j = BBox::new(
                        b.cx + rng.uniform(-0.15, 0.15) * b.w,
                        b.cy + rng.uniform(-0.15, 0.15) * b.h,
                        b.w * rng.uniform(0.8, 1.2),
                        b.h * rng.uniform(0.8, 1.2),
                    );
                    let class = if rng.uniform(0.0, 1.0) < 0.9 { a.class_id } else { rng.below(n_class) };
                    d.push(det(j, class, rng.uniform(0.0, 1.0)));
                }
            }
            for _ in 0..rng.below(4) {
                d.push(det(random_box(&mut rng), rng.below(n_class), rng.uniform(0.0, 1.0)));
            }
            gts.push(g);
            dets.push(d);
        }
        let got = evaluate_map(&dets, &gts, n_class, &thresholds).map;
        worst = worst.max((got - oracle_map(&dets, &gts, n_class, &thresholds)).abs());
    }
    // hand case: one GT, a false positive at 0.9 then a true positive at 0.8
    let gt = BBox::new(0.3, 0.3, 0.2, 0.2);
    let hand_dets = vec![vec![det(BBox::new(0.8, 0.8, 0.1, 0.1), 0, 0.9), det(gt, 0, 0.8)]];
    let hand_gts = vec![vec![Annotation { class_id: 0, bbox: gt }]];
    let hand = evaluate_map(&hand_dets, &hand_gts, 1, &[0.5]).map;
    let hand_oracle = oracle_map(&hand_dets, &hand_gts, 1, &[0.5]);
    worst = worst.max((hand - hand_oracle).abs());
    outcome(
        worst <= 1e-9 && (hand - 0.5).abs() <= 1e-12,
        format!("50 scenarios, max |diff| {worst:.1e} (tol 1e-9); hand case AP@0.5 = {hand}"),
    )
}

// ---------------------------------------------------------------------------
// 4. gradient suite

fn gradient_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        image_size: 16,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        enhancer_layers: 1,
        decoder_layers: 2,
        n_queries: 8,
        d_text: 6,
        roi_output: 2,
        ..ModelConfig::default()
    };
    cfg.episode.n_way = 2;
    cfg.episode.k_shot = 1;
    cfg.episode.n_query = 1;
    cfg
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
}

fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Var {
    let wv = g.constant(w.clone());
    let p = g.mul(x, wv);
    g.sum(p)
}

/// Finite-difference check of parameter gradients at a few coordinates of
/// every tensor. `loss` must be deterministic in the store.
fn param_check<F>(store: &ParamStore, grads: &BTreeMap<String, Tensor>, per_tensor: usize, h: f64, loss: F) -> (f64, usize)
where
    F: Fn(&ParamStore) -> f64,
{
    let mut rng = Rng::new(404);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, t) in store.iter() {
        let Some(gt) = grads.get(name) else { continue };
        for _ in 0..per_tensor.min(t.len()) {
            let i = rng.below(t.len());
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = gt.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
            checked += 1;
        }
    }
    (worst, checked)
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let cfg = gradient_config();
    let d = cfg.model.d_model;
    let n_q = cfg.model.n_queries;
    let mut rng = Rng::new(4);
    let mut report = Vec::new();

    // roi_align on a 16×16 map
    let fmap = random_tensor(&mut rng, &[3, 16, 16]);
    let w = random_tensor(&mut rng, &[3, 2, 2]);
    let roi = BBox::new(0.43, 0.57, 0.31, 0.27);
    let e = grad_check(
        |g, x| {
            let r = roi_align_var(g, x, roi, 2, 2)?;
            Ok(weighted_sum(g, r, &w))
        },
        &fmap,
        1e-5,
    )
    .unwrap();
    report.push(("roi_align", e));

    // enhance: inputs and parameters
    let index = TokenIndex::new(&[(4, 4)]);
    let n_tok = index.len();
    let enh = EnhancerStack::new("text", 1, d, 2, 16);
    let mut store = ParamStore::new();
    enh.init(&mut store, &mut rng);
    let x0 = random_tensor(&mut rng, &[n_tok, d]);
    let v0 = random_tensor(&mut rng, &[2, d]);
    let pos = token_positions(&index, d);
    let wx = random_tensor(&mut rng, &[n_tok + 2, d]);
    let enhance_obj = |s: &mut Session, x: Var, v: Var| -> Var {
        let p = s.g.constant(pos.clone());
        let (xo, vo) = enh.enhance(s, x, v, p).unwrap();
        let both = s.g.concat_rows(&[xo, vo]);
        weighted_sum(&mut s.g, both, &wx)
    };
    let e_x = grad_check(
        |g, x| {
            let mut s = Session::new(&store, Trainable::None);
            std::mem::swap(&mut s.g, g);
            let v = s.g.constant(v0.clone());
            let y = enhance_obj(&mut s, x, v);
            std::mem::swap(&mut s.g, g);
            Ok(y)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    let e_v = grad_check(
        |g, v| {
            let mut s = Session::new(&store, Trainable::None);
            std::mem::swap(&mut s.g, g);
            let x = s.g.constant(x0.clone());
            let y = enhance_obj(&mut s, x, v);
            std::mem::swap(&mut s.g, g);
            Ok(y)
        },
        &v0,
        1e-5,
    )
    .unwrap();
    let enh_value = |st: &ParamStore| {
        let mut s = Session::inference(st);
        let x = s.g.constant(x0.clone());
        let v = s.g.constant(v0.clone());
        let y = enhance_obj(&mut s, x, v);
        s.g.value(y).item()
    };
    let grads = {
        let mut s = Session::new(&store, Trainable::All);
        let x = s.g.constant(x0.clone());
        let v = s.g.constant(v0.clone());
        let y = enhance_obj(&mut s, x, v);
        s.param_grads(&s.g.backward(y))
    };
    let (e_p, _) = param_check(&store, &grads, 4, 1e-5, enh_value);
    report.push(("enhance", e_x.max(e_v).max(e_p)));

    // decode_branch with n_q queries
    let qi = QueryInit::new("text", d, true, n_q);
    let dec = DecoderStack::new("text", 2, d, 2, 16, false, 1.0, 0.1);
    let mut dstore = ParamStore::new();
    qi.init(&mut dstore, &mut rng);
    dec.init(&mut dstore, &mut rng);
    // give the zero-initialized box heads a nonzero slope
    for name in ["text.anchor_head.w", "text.head.box1.w"] {
        if let Some(t) = dstore.get_mut(name) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        }
    }
    let protos = random_tensor(&mut rng, &[2, d]);
    let selected: Vec<usize> = (0..n_q).map(|i| 2 * i).collect();
    let wl = random_tensor(&mut rng, &[n_q, 2]);
    let wb = random_tensor(&mut rng, &[n_q, 4]);
    let decode_obj = |s: &mut Session, tokens: Var| -> Var {
        let seeds = qi.init_query_seeds(s, tokens, &index, &selected).unwrap();
        let p = s.g.constant(pos.clone());
        let gv = s.g.constant(v0.clone());
        let pr = s.g.constant(protos.clone());
        let out = dec.decode_branch(s, &seeds, tokens, p, gv, pr).unwrap();
        let mut total = None;
        for (l, b) in out.logits.iter().zip(&out.boxes) {
            let a = weighted_sum(&mut s.g, *l, &wl);
            let c = weighted_sum(&mut s.g, *b, &wb);
            let t = s.g.add(a, c);
            total = Some(match total {
                None => t,
                Some(p) => s.g.add(p, t),
            });
        }
        total.unwrap()
    };
    let e_t = grad_check(
        |g, x| {
            let mut s = Session::new(&dstore, Trainable::None);
            std::mem::swap(&mut s.g, g);
            let y = decode_obj(&mut s, x);
            std::mem::swap(&mut s.g, g);
            Ok(y)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    let dec_value = |st: &ParamStore| {
        let mut s = Session::inference(st);
        let x = s.g.constant(x0.clone());
        let y = decode_obj(&mut s, x);
        s.g.value(y).item()
    };
    let grads = {
        let mut s = Session::new(&dstore, Trainable::All);
        let x = s.g.constant(x0.clone());
        let y = decode_obj(&mut s, x);
        s.param_grads(&s.g.backward(y))
    };
    let (e_p, _) = param_check(&dstore, &grads, 4, 1e-5, dec_value);
    report.push(("decode_branch", e_t.max(e_p)));

    // losses at a fixed assignment
    let logits = random_tensor(&mut rng, &[n_q, 2]);
    let boxes = Tensor::new(
        &[n_q, 4],
        (0..n_q).flat_map(|_| random_box(&mut rng).to_array()).collect(),
    );
    let gt_boxes = vec![random_box(&mut rng), random_box(&mut rng)];
    let pairs = vec![(1, 0), (5, 1)];
    let mut targets = vec![None; n_q];
    targets[1] = Some(0);
    targets[5] = Some(1);
    let e_f = grad_check(|g, x| Ok(focal_loss(g, x, &targets, 0.25, 2.0, 2.0)), &logits, 1e-6).unwrap();
    let e_l1 = grad_check(|g, x| Ok(l1_loss(g, x, &pairs, &gt_boxes, 2.0)), &boxes, 1e-7).unwrap();
    let e_gi = grad_check(|g, x| Ok(giou_loss(g, x, &pairs, &gt_boxes, 2.0)), &boxes, 1e-7).unwrap();
    report.push(("focal", e_f));
    report.push(("l1", e_l1));
    report.push(("giou", e_gi));

    // end-to-end total loss on a 16 px episode, selection and matching fixed
    let spec = EpisodeSpec { image_size: 16, max_objects_per_query: 2, ..EpisodeSpec::new(2, 1, 1, DomainStyle::PhotoLike) };
    let ep = generate_episode(&spec, 41).unwrap();
    let model = Model::new(&cfg.model).unwrap();
    let mut mstore = model.init_params(5).unwrap();
    for (name, t) in mstore.iter_mut() {
        if name.ends_with("anchor_head.w") || name.ends_with("box1.w") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        }
    }
    let (plan, grads) = {
        let mut s = Session::new(&mstore, Trainable::All);
        let out = episode_loss(&mut s, &model, &ep, &cfg, Stage::Two, None, &mut step_rng(1, Stage::Two, 0), None).unwrap();
        let grads = s.param_grads(&s.g.backward(out.loss));
        (out.plan, grads)
    };
    let effective_nq = plan.images[0].1.selected.len();
    let e2e_value = |st: &ParamStore| {
        let mut s = Session::inference(st);
        let out =
            episode_loss(&mut s, &model, &ep, &cfg, Stage::Two, None, &mut step_rng(1, Stage::Two, 0), Some(&plan)).unwrap();
        s.g.value(out.loss).item()
    };
    let (e_e2e, n_checked) = param_check(&mstore, &grads, 3, 1e-5, e2e_value);
    report.push(("total loss", e_e2e));

    let el = t.elapsed();
    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    let parts: Vec<String> = report.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        worst <= 1e-4 && within(el, 120.0),
        format!(
            "{} ({n_checked} parameter coordinates end to end, n_q {n_q}, {effective_nq} selected from the 16 px pyramid), {el:.2?} (< 2 min)",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. jitter gate

fn criterion_5() -> Outcome {
    let p = JitterParams::default();
    let mut rng = Rng::new(505);
    let mut accepted = 0usize;
    let mut outside = 0usize;
    while accepted < 10_000 {
        let w = rng.uniform(0.05, 0.9);
        let h = rng.uniform(0.05, 0.9);
        let gt = BBox::new(rng.uniform(w / 2.0, 1.0 - w / 2.0), rng.uniform(h / 2.0, 1.0 - h / 2.0), w, h);
        for b in jitter_box(gt, &p, &mut rng) {
            accepted += 1;
            let v = plain_iou(b, gt);
            outside += !(p.iou_lo..=p.iou_hi).contains(&v) as usize;
        }
    }
    let mut got = 0usize;
    let mut asked = 0usize;
    for _ in 0..2000 {
        let w = rng.uniform(0.15, 0.4);
        let h = rng.uniform(0.15, 0.4);
        let gt = BBox::new(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), w, h);
        got += jitter_box(gt, &p, &mut rng).len();
        asked += p.n_neg;
    }
    let yield_ = got as f64 / asked as f64;
    outcome(
        outside == 0 && yield_ >= 0.8,
        format!("{accepted} accepted, {outside} outside [0.1, 0.5]; mid-size yield {:.1}% (>= 80%)", 100.0 * yield_),
    )
}

// ---------------------------------------------------------------------------
// 6. protocol invariants

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        image_size: 32,
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        enhancer_layers: 1,
        decoder_layers: 2,
        n_queries: 8,
        d_text: 8,
        roi_output: 3,
        ..ModelConfig::default()
    };
    cfg.episode.n_way = 3;
    cfg.episode.k_shot = 2;
    cfg.episode.n_query = 2;
    cfg.train.steps_stage1 = 3;
    cfg.train.steps_stage2 = 3;
    cfg
}

fn unit_rows(t: &Tensor) -> f64 {
    t.rows().map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs()).fold(0.0, f64::max)
}

fn criterion_6() -> Outcome {
    let cfg = small_config();
    let ep = generate_from_config(&cfg, 6).unwrap();
    let model = Model::new(&cfg.model).unwrap();
    let store = model.init_params(6).unwrap();
    let c = ep.n_way;
    let mut notes = Vec::new();

    let mut s = Session::inference(&store);
    let text_p = model.text_prototypes(&mut s, &ep.class_names()).unwrap();
    let class_p = model.class_prototypes(&mut s, &ep.supports, c).unwrap();
    let feats = model.encode(&mut s, &ep.queries[0].image).unwrap();
    let gts: Vec<BBox> = ep.queries[0].annotations.iter().map(|a| a.bbox).collect();
    let mut norm_err = unit_rows(s.g.value(text_p)).max(unit_rows(s.g.value(class_p)));
    let mut columns_ok = true;
    for n_neg in [0, 1, 3, 5] {
        let jitter = JitterParams { n_neg, ..JitterParams::default() };
        let neg = model.negatives(&mut s, &feats, &gts, &jitter, &mut Rng::new(n_neg as u64)).unwrap();
        if let Some(p) = neg.protos {
            norm_err = norm_err.max(unit_rows(s.g.value(p)));
        }
        let vt = model.visual_guidance(&mut s, class_p, &neg).unwrap();
        let f = model.forward_branch(&mut s, Branch::Visual, &feats, vt.v, class_p, None).unwrap();
        for l in &f.out.logits {
            columns_ok &= s.g.value(*l).dims2().1 == c;
        }
        notes.push(format!("M={}", neg.len()));
    }

    let mut trained = store.clone();
    run_training(&model, &mut trained, &ep, &cfg, Stage::One, 3, &mut |_| {}).unwrap();
    let text_same = store
        .iter()
        .filter(|(n, _)| n.starts_with("text.") || n.starts_with("text_embed."))
        .all(|(n, t)| trained.get(n) == Some(t));
    let visual_moved = store.iter().any(|(n, t)| n.starts_with("visual.") && trained.get(n) != Some(t));

    let protos = model.prototype_tensors(&store, &ep, &[Branch::Text]).unwrap();
    let shared = vec![(Branch::Text, protos[0].1.clone()), (Branch::Visual, protos[0].1.clone())];
    let mut clone_ok = true;
    for q in &ep.queries {
        let out: Vec<(Branch, BranchOutput)> = model.predict_image(&store, q, &Branch::BOTH, &shared).unwrap();
        clone_ok &= out[0].1 == out[1].1;
    }
    outcome(
        norm_err <= 1e-12 && columns_ok && text_same && visual_moved && clone_ok,
        format!(
            "max |norm-1| {norm_err:.1e}; {c} logit columns for {}: {columns_ok}; stage 1 text bitwise unchanged: {text_same}; cloned branches identical: {clone_ok}",
            notes.join("/")
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. overfit sanity

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.episode.n_way = 3;
    cfg.episode.k_shot = 5;
    cfg
}

const OVERFIT_STEPS: usize = 500;

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let cfg = overfit_config();
    let ep = generate_from_config(&cfg, cfg.seed).unwrap();
    let model = Model::new(&cfg.model).unwrap();
    let mut store = model.init_params(cfg.seed).unwrap();
    let summary = run_training(&model, &mut store, &ep, &cfg, Stage::Two, OVERFIT_STEPS, &mut |_| {}).unwrap();
    let first = summary.losses[0];
    let last = summary.losses[OVERFIT_STEPS - 1];
    let ev = evaluate_episode(&model, &store, &ep, DetBranch::Ensemble, &cfg.eval, Exec::Sequential).unwrap();
    let el = t.elapsed();
    let ratio = first / last;
    outcome(
        ratio >= 10.0 && ev.map50 >= 0.8 && within(el, 900.0),
        format!(
            "C=3 K=5, {OVERFIT_STEPS} steps: total loss {first:.3} -> {last:.3} ({ratio:.1}x, >= 10x), mAP@0.5 {:.3} (>= 0.8), {el:.1?} (< 15 min)",
            ev.map50
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. ablation direction (report only)

fn ablation_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        d_model: 32,
        n_heads: 4,
        ffn_dim: 64,
        enhancer_layers: 2,
        decoder_layers: 2,
        n_queries: 20,
        d_text: 16,
        roi_output: 5,
        ..ModelConfig::default()
    };
    cfg.train.lr = 1e-3;
    cfg.train.backbone_lr = 1e-4;
    cfg.train.steps_stage1 = 30;
    cfg.train.steps_stage2 = 30;
    cfg.episode.n_way = 3;
    cfg.episode.k_shot = 5;
    cfg
}

fn criterion_8() -> Outcome {
    let base = ablation_config();
    let model = Model::new(&base.model).unwrap();
    let mut sums = [0.0f64; 3];
    let seeds = 5;
    for seed in 0..seeds {
        let mut pre_cfg = base.clone();
        pre_cfg.episode.style = DomainStyle::CartoonLike;
        pre_cfg.seed = 1000 + seed;
        let pre_ep = generate_from_config(&pre_cfg, pre_cfg.seed).unwrap();
        let mut pretrained = model.init_params(pre_cfg.seed).unwrap();
        train_stages(&model, &mut pretrained, &pre_ep, &pre_cfg, &[Stage::One, Stage::Two], &mut |_| {}).unwrap();

        let mut target = base.clone();
        target.seed = 2000 + seed;
        let ep = generate_from_config(&target, target.seed).unwrap();
        let run = |cfg: &RunConfig, stages: &[Stage], branch: DetBranch| {
            let mut st = pretrained.clone();
            train_stages(&model, &mut st, &ep, cfg, stages, &mut |_| {}).unwrap();
            evaluate_episode(&model, &st, &ep, branch, &cfg.eval, Exec::default_mode()).unwrap().result.map
        };
        let mut text_only = target.clone();
        text_only.matching.branch_alpha = 0.0;
        let mut no_neg = target.clone();
        no_neg.jitter.n_neg = 0;
        sums[0] += run(&text_only, &[Stage::Two], DetBranch::Text);
        sums[1] += run(&no_neg, &[Stage::One, Stage::Two], DetBranch::Ensemble);
        sums[2] += run(&target, &[Stage::One, Stage::Two], DetBranch::Ensemble);
    }
    let m: Vec<f64> = sums.iter().map(|s| s / seeds as f64).collect();
    let ordered = m[0] <= m[1] && m[1] <= m[2];
    println!("    | variant             | mean mAP ({seeds} seeds) |");
    println!("    | text only           | {:.4}              |", m[0]);
    println!("    | + class prototypes  | {:.4}              |", m[1]);
    println!("    | + hard negatives    | {:.4}              |", m[2]);
    outcome(
        ordered,
        format!("report only; ordering text <= +protos <= +negatives holds: {ordered}"),
    )
}

// ---------------------------------------------------------------------------
// 9. determinism

fn logged_run(cfg: &RunConfig, ep: &Episode) -> (Vec<String>, String) {
    let model = Model::new(&cfg.model).unwrap();
    let mut store = model.init_params(cfg.seed).unwrap();
    let mut lines = Vec::new();
    train_stages(&model, &mut store, ep, cfg, &[Stage::One, Stage::Two], &mut |r: &LogRecord| {
        lines.push(r.to_json_line())
    })
    .unwrap();
    let metrics: Vec<String> = [DetBranch::Text, DetBranch::Visual, DetBranch::Ensemble]
        .into_iter()
        .map(|b| {
            let ev = evaluate_episode(&model, &store, ep, b, &cfg.eval, Exec::default_mode()).unwrap();
            serde_json::to_string(&ev).unwrap()
        })
        .collect();
    (lines, metrics.join("\n"))
}

fn criterion_9() -> Outcome {
    let cfg = small_config();
    let ep_a = generate_from_config(&cfg, cfg.seed).unwrap();
    let ep_b = generate_from_config(&cfg, cfg.seed).unwrap();
    let episode_same = ep_a.supports.iter().zip(&ep_b.supports).all(|(a, b)| a.image == b.image)
        && ep_a.queries.iter().zip(&ep_b.queries).all(|(a, b)| a.image == b.image && a.annotations == b.annotations);
    let (log_a, met_a) = logged_run(&cfg, &ep_a);
    let (log_b, met_b) = logged_run(&cfg, &ep_b);
    let sweep: Sweep = "n_neg:0,3".parse().unwrap();
    let abl_a = run_ablation(&cfg, &sweep, Exec::Parallel).unwrap();
    let abl_b = run_ablation(&cfg, &sweep, Exec::Sequential).unwrap();
    let ok = episode_same && log_a == log_b && met_a == met_b && abl_a == abl_b;
    outcome(
        ok,
        format!(
            "episode identical: {episode_same}; {} log lines identical: {}; metrics identical: {}; ablation parallel == sequential: {}",
            log_a.len(),
            log_a == log_b,
            met_a == met_b,
            abl_a == abl_b
        ),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(usize, &str, bool, fn() -> Outcome); 9] = [
        (1, "geometry vs raster oracle", true, criterion_1),
        (2, "matching vs exhaustive search", true, criterion_2),
        (3, "mAP vs independent AP", true, criterion_3),
        (4, "gradient suite", true, criterion_4),
        (5, "jitter gate", true, criterion_5),
        (6, "protocol invariants", true, criterion_6),
        (7, "overfit sanity", true, criterion_7),
        (8, "ablation direction", false, criterion_8),
        (9, "determinism", true, criterion_9),
    ];
    let mut failed = 0;
    for (n, name, gated, run) in criteria {
        let id = format!("criterion_{n}");
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str())) {
            continue;
        }
        let o = run();
        let tag = match (o.pass, gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        println!("criterion {n} [{tag}] {name}: {}", o.detail);
        failed += (!o.pass && gated) as usize;
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
