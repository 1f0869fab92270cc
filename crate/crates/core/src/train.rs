//! Two-stage fine-tuning on one episode: AdamW with a separate backbone
//! learning rate, global gradient clipping and JSON-lines loss records.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::{RunConfig, TrainConfig};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{branch_loss, total_loss, LossBreakdown};
use crate::matching::MatchResult;
use crate::model::{Branch, Model};
use crate::numeric::{Rng, Tensor, Var};
use crate::params::{ParamStore, Session, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Stage {
    /// Visual branch and backbone on the visual loss.
    One,
    /// Everything on the combined loss.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }

    pub fn trainable(self) -> Trainable {
        match self {
            Stage::One => Trainable::Prefixes(vec!["visual.".into(), "backbone.".into()]),
            Stage::Two => Trainable::All,
        }
    }

    pub fn steps(self, t: &TrainConfig) -> usize {
        match self {
            Stage::One => t.steps_stage1,
            Stage::Two => t.steps_stage2,
        }
    }
}

pub const BACKBONE_PREFIX: &str = "backbone.";

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: TrainConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW { cfg: cfg.clone(), m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// Clips `grads` to the global norm limit, updates `store` and returns
    /// the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> f64 {
        let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip { self.cfg.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, g) in grads {
            let lr = if name.starts_with(BACKBONE_PREFIX) { c.backbone_lr } else { c.lr };
            let p = store.get_mut(name).expect("gradient for a stored parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
        norm
    }
}

/// Query selection and matches of one branch on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchPlan {
    pub selected: Vec<usize>,
    pub matches: Vec<MatchResult>,
}

/// Every discrete decision of a step, so it can be replayed exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub images: Vec<(Option<BranchPlan>, BranchPlan)>,
}

/// Losses of one step on the tape.
pub struct StepLoss {
    pub loss: Var,
    pub text: Option<LossBreakdown>,
    pub visual: LossBreakdown,
    pub n_negatives: usize,
    pub plan: StepPlan,
}

fn mean_of(s: &mut Session, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = s.g.add(acc, p);
    }
    s.g.scale(acc, 1.0 / parts.len() as f64)
}

/// Builds the stage loss averaged over the episode's query images.
/// `frozen` replaces support prototypes with fixed values; `plan` replays
/// selections and matches.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss(
    s: &mut Session,
    model: &Model,
    ep: &Episode,
    cfg: &RunConfig,
    stage: Stage,
    frozen: Option<&Tensor>,
    rng: &mut Rng,
    plan: Option<&StepPlan>,
) -> Result<StepLoss> {
    if ep.queries.is_empty() {
        return Err(Error::BadData("episode has no query images".into()));
    }
    let class_p = match frozen {
        Some(t) => s.g.constant(t.clone()),
        None => model.class_prototypes(s, &ep.supports, ep.n_way)?,
    };
    let text_p = match stage {
        Stage::Two => Some(model.text_prototypes(s, &ep.class_names())?),
        Stage::One => None,
    };
    let mut vis_losses = Vec::new();
    let mut txt_losses = Vec::new();
    let mut vis_bd = LossBreakdown::default();
    let mut txt_bd = LossBreakdown::default();
    let mut images = Vec::new();
    let mut n_negatives = 0;
    for (qi, q) in ep.queries.iter().enumerate() {
        let gts: Vec<(usize, BBox)> = q.annotations.iter().map(|a| (a.class_id, a.bbox)).collect();
        let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.1).collect();
        let feats = model.encode(s, &q.image)?;
        let forced = plan.map(|p| &p.images[qi]);

        let text_plan = match text_p {
            Some(tp) => {
                let fp = forced.and_then(|f| f.0.as_ref());
                let fwd = model.forward_branch(s, Branch::Text, &feats, tp, tp, fp.map(|p| p.selected.as_slice()))?;
                let (l, bd, m) = branch_loss(&mut s.g, &fwd.out, &gts, &cfg.matching, fp.map(|p| p.matches.as_slice()))?;
                txt_losses.push(l);
                txt_bd.accumulate(&bd);
                Some(BranchPlan { selected: fwd.selected, matches: m })
            }
            None => None,
        };

        let neg = model.negatives(s, &feats, &gt_boxes, &cfg.jitter, rng)?;
        n_negatives += neg.len();
        let vt = model.visual_guidance(s, class_p, &neg)?;
        let fp = forced.map(|f| &f.1);
        let fwd = model.forward_branch(s, Branch::Visual, &feats, vt.v, class_p, fp.map(|p| p.selected.as_slice()))?;
        let (l, bd, m) = branch_loss(&mut s.g, &fwd.out, &gts, &cfg.matching, fp.map(|p| p.matches.as_slice()))?;
        vis_losses.push(l);
        vis_bd.accumulate(&bd);
        images.push((text_plan, BranchPlan { selected: fwd.selected, matches: m }));
    }
    let n = ep.queries.len() as f64;
    let l_vis = mean_of(s, &vis_losses);
    let loss = if txt_losses.is_empty() {
        l_vis
    } else {
        let l_txt = mean_of(s, &txt_losses);
        total_loss(&mut s.g, l_txt, l_vis, cfg.matching.branch_alpha)
    };
    Ok(StepLoss {
        loss,
        text: if txt_losses.is_empty() { None } else { Some(txt_bd.scaled(1.0 / n)) },
        visual: vis_bd.scaled(1.0 / n),
        n_negatives,
        plan: StepPlan { images },
    })
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Run { config_hash: String, seed: u64, stage: u8, steps: usize },
    Loss { stage: u8, step: usize, branch: String, component: String, value: f64 },
    Step { stage: u8, step: usize, loss: f64, grad_norm: f64, n_negatives: usize },
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

fn loss_records(stage: Stage, step: usize, branch: &str, bd: &LossBreakdown) -> Vec<LogRecord> {
    [("cls", bd.cls), ("l1", bd.l1), ("giou", bd.giou), ("total", bd.total)]
        .into_iter()
        .map(|(component, value)| LogRecord::Loss {
            stage: stage.number(),
            step,
            branch: branch.into(),
            component: component.into(),
            value,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    /// Stage loss before each update.
    pub losses: Vec<f64>,
}

/// Random stream of a step's hard-negative sampling.
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> Rng {
    Rng::new(seed).fork(((stage.number() as u64) << 32) | step as u64)
}

/// Runs `steps` updates of `stage` in place on `store`, sending log records
/// to `sink`.
pub fn run_training(
    model: &Model,
    store: &mut ParamStore,
    ep: &Episode,
    cfg: &RunConfig,
    stage: Stage,
    steps: usize,
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary> {
    sink(&LogRecord::Run { config_hash: cfg.hash(), seed: cfg.seed, stage: stage.number(), steps });
    let mut opt = AdamW::new(&cfg.train);
    let frozen = if model.cfg.freeze_prototypes {
        let mut s = Session::inference(store);
        let p = model.class_prototypes(&mut s, &ep.supports, ep.n_way)?;
        Some(s.g.value(p).clone())
    } else {
        None
    };
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let fail = |e: Error| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{} step {step}: {m}", stage.tag())),
            // diverged weights usually surface as NaN norms before any NaN loss
            e @ (Error::ZeroVector { .. } | Error::DegenerateRoi { .. }) => {
                Error::NonFinite(format!("{} step {step}: {e}", stage.tag()))
            }
            other => other,
        };
        let (grads, value, n_neg) = {
            let mut s = Session::new(store, stage.trainable());
            let mut rng = step_rng(cfg.seed, stage, step);
            let out = episode_loss(&mut s, model, ep, cfg, stage, frozen.as_ref(), &mut rng, None).map_err(fail)?;
            s.g.ensure_finite().map_err(fail)?;
            let value = s.g.value(out.loss).item();
            let grads = s.param_grads(&s.g.backward(out.loss));
            if grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("{} step {step}: non-finite gradient", stage.tag())));
            }
            if let Some(t) = &out.text {
                for r in loss_records(stage, step, "text", t) {
                    sink(&r);
                }
            }
            for r in loss_records(stage, step, "visual", &out.visual) {
                sink(&r);
            }
            if stage == Stage::Two {
                sink(&LogRecord::Loss {
                    stage: stage.number(),
                    step,
                    branch: "total".into(),
                    component: "total".into(),
                    value,
                });
            }
            (grads, value, out.n_negatives)
        };
        let grad_norm = opt.step(store, &grads);
        sink(&LogRecord::Step { stage: stage.number(), step, loss: value, grad_norm, n_negatives: n_neg });
        log::debug!("{} step {step}: loss {value:.6} grad norm {grad_norm:.4}", stage.tag());
        losses.push(value);
    }
    Ok(TrainSummary { losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::episode::{generate_episode, DomainStyle, EpisodeSpec};

    fn tiny() -> (Model, RunConfig, Episode) {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            image_size: 32,
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            enhancer_layers: 1,
            decoder_layers: 2,
            n_queries: 6,
            d_text: 8,
            roi_output: 3,
            ..ModelConfig::default()
        };
        cfg.train.lr = 1e-3;
        let ep = generate_episode(&EpisodeSpec { image_size: 32, ..EpisodeSpec::new(2, 1, 2, DomainStyle::PhotoLike) }, 1)
            .unwrap();
        (Model::new(&cfg.model).unwrap(), cfg, ep)
    }

    #[test]
    fn stage_one_leaves_text_untouched() {
        let (model, cfg, ep) = tiny();
        let mut store = model.init_params(3).unwrap();
        let before = store.clone();
        let mut records = Vec::new();
        run_training(&model, &mut store, &ep, &cfg, Stage::One, 3, &mut |r| records.push(r.clone())).unwrap();
        for (name, t) in before.iter() {
            if name.starts_with("text.") || name.starts_with("text_embed.") {
                assert_eq!(store.get(name), Some(t), "{name} changed");
            }
        }
        assert_ne!(store.get("visual.head.cls.w"), before.get("visual.head.cls.w"));
        assert_ne!(store.get("backbone.stem.w"), before.get("backbone.stem.w"));
        assert!(records.iter().all(|r| !matches!(r, LogRecord::Loss { branch, .. } if branch != "visual")));
    }

    #[test]
    fn training_is_deterministic() {
        let (model, cfg, ep) = tiny();
        let run = || {
            let mut store = model.init_params(3).unwrap();
            let mut lines = Vec::new();
            run_training(&model, &mut store, &ep, &cfg, Stage::Two, 2, &mut |r| lines.push(r.to_json_line())).unwrap();
            (lines, store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(a.iter().any(|l| l.contains("\"branch\":\"text\"")));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = TrainConfig { grad_clip: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::vector(&[1.0, -1.0]));
        store.insert("backbone.w", Tensor::vector(&[1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("a.w".to_string(), Tensor::vector(&[0.5, -2.0]));
        grads.insert("backbone.w".to_string(), Tensor::vector(&[3.0]));
        AdamW::new(&cfg).step(&mut store, &grads);
        let a = store.get("a.w").unwrap().data();
        assert!((a[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((a[1] - (-1.0 + 1e-4)).abs() < 1e-9);
        assert!((store.get("backbone.w").unwrap().data()[0] - (1.0 - 1e-5)).abs() < 1e-10);
    }

    #[test]
    fn replayed_plan_reproduces_loss() {
        let (model, cfg, ep) = tiny();
        let store = model.init_params(4).unwrap();
        let mut s = Session::inference(&store);
        let out = episode_loss(&mut s, &model, &ep, &cfg, Stage::Two, None, &mut step_rng(0, Stage::Two, 0), None).unwrap();
        let v = s.g.value(out.loss).item();
        let mut s2 = Session::inference(&store);
        let again =
            episode_loss(&mut s2, &model, &ep, &cfg, Stage::Two, None, &mut step_rng(0, Stage::Two, 0), Some(&out.plan))
                .unwrap();
        assert_eq!(s2.g.value(again.loss).item(), v);
        assert_eq!(again.plan, out.plan);
    }
}
