//! End-to-end runs: staged training, episode evaluation and ablation sweeps.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{EvalConfig, RunConfig};
use crate::episode::{generate_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::eval::{detections_from_output, ensemble_detections, evaluate_map, DetBranch, Detection, MapResult};
use crate::model::{Branch, Model};
use crate::par::{self, Exec};
use crate::params::{ParamStore, Session};
use crate::prototypes::{instance_descriptor, PrototypeSet};
use crate::numeric::{l2_normalize_rows, Rng, Tensor};
use crate::geometry::BBox;
use crate::train::{run_training, LogRecord, Stage, TrainSummary};

pub const PYRAMID_LEVELS: usize = 4;

impl DetBranch {
    pub fn name(self) -> &'static str {
        match self {
            DetBranch::Text => "text",
            DetBranch::Visual => "visual",
            DetBranch::Ensemble => "ensemble",
        }
    }

    pub fn model_branches(self) -> &'static [Branch] {
        match self {
            DetBranch::Text => &[Branch::Text],
            DetBranch::Visual => &[Branch::Visual],
            DetBranch::Ensemble => &Branch::BOTH,
        }
    }
}

impl FromStr for DetBranch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(DetBranch::Text),
            "visual" => Ok(DetBranch::Visual),
            "ensemble" => Ok(DetBranch::Ensemble),
            other => Err(Error::BadConfig(format!("unknown branch {other:?}"))),
        }
    }
}

/// Episode shape from the config, at the model's image size.
pub fn episode_spec(cfg: &RunConfig) -> EpisodeSpec {
    let e = &cfg.episode;
    EpisodeSpec { image_size: cfg.model.image_size, ..EpisodeSpec::new(e.n_way, e.k_shot, e.n_query, e.style) }
}

pub fn generate_from_config(cfg: &RunConfig, seed: u64) -> Result<Episode> {
    generate_episode(&episode_spec(cfg), seed)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeEval {
    pub branch: DetBranch,
    pub result: MapResult,
    /// mAP at IoU 0.5 only.
    pub map50: f64,
    /// Per query image.
    pub detections: Vec<Vec<Detection>>,
}

/// Detections for every query image of `ep`, from one branch or both.
pub fn detect_episode(
    model: &Model,
    store: &ParamStore,
    ep: &Episode,
    branch: DetBranch,
    eval: &EvalConfig,
    exec: Exec,
) -> Result<Vec<Vec<Detection>>> {
    let outs = model.predict_with(store, ep, branch.model_branches(), exec)?;
    Ok(outs
        .iter()
        .map(|per| {
            let dets = |b: Branch, tag: DetBranch| {
                let out = &per.iter().find(|(pb, _)| *pb == b).expect("branch was predicted").1;
                detections_from_output(out, eval.top_k, eval.nms_iou, tag)
            };
            match branch {
                DetBranch::Text => dets(Branch::Text, DetBranch::Text),
                DetBranch::Visual => dets(Branch::Visual, DetBranch::Visual),
                DetBranch::Ensemble => ensemble_detections(
                    &dets(Branch::Text, DetBranch::Text),
                    &dets(Branch::Visual, DetBranch::Visual),
                    eval.nms_iou,
                    eval.ensemble,
                ),
            }
        })
        .collect())
}

/// mAP of `branch` on the episode's query images.
pub fn evaluate_episode(
    model: &Model,
    store: &ParamStore,
    ep: &Episode,
    branch: DetBranch,
    eval: &EvalConfig,
    exec: Exec,
) -> Result<EpisodeEval> {
    let detections = detect_episode(model, store, ep, branch, eval, exec)?;
    let gts: Vec<_> = ep.queries.iter().map(|q| q.annotations.clone()).collect();
    let result = evaluate_map(&detections, &gts, ep.n_way, &eval.iou_thresholds);
    let map50 = evaluate_map(&detections, &gts, ep.n_way, &[0.5]).map;
    Ok(EpisodeEval { branch, result, map50, detections })
}

/// Runs the stages in order on `store`.
pub fn train_stages(
    model: &Model,
    store: &mut ParamStore,
    ep: &Episode,
    cfg: &RunConfig,
    stages: &[Stage],
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<Vec<TrainSummary>> {
    stages.iter().map(|&st| run_training(model, store, ep, cfg, st, st.steps(&cfg.train), sink)).collect()
}

/// Support prototypes plus hard negatives jittered around every support
/// instance; `neg:j` indexes support instances in file order.
pub fn episode_prototypes(model: &Model, store: &ParamStore, ep: &Episode, cfg: &RunConfig) -> Result<PrototypeSet> {
    let mut s = Session::inference(store);
    let class_p = model.class_prototypes(&mut s, &ep.supports, ep.n_way)?;
    let mut rng = Rng::new(cfg.seed).fork(0xe5);
    let mut negs = Vec::new();
    let mut neg_parent = Vec::new();
    let mut offset = 0;
    for im in &ep.supports {
        let feats = model.encode(&mut s, &im.image)?;
        let gts: Vec<BBox> = im.annotations.iter().map(|a| a.bbox).collect();
        let neg = model.negatives(&mut s, &feats, &gts, &cfg.jitter, &mut rng)?;
        if let Some(p) = neg.protos {
            negs.push(s.g.value(p).clone());
            neg_parent.extend(neg.parent.iter().map(|j| j + offset));
        }
        offset += gts.len();
    }
    s.g.ensure_finite()?;
    let neg_protos = if negs.is_empty() {
        None
    } else {
        let d = negs[0].dims2().1;
        let rows: usize = negs.iter().map(|t| t.dims2().0).sum();
        Some(Tensor::new(&[rows, d], negs.into_iter().flat_map(Tensor::into_data).collect()))
    };
    Ok(PrototypeSet { class_protos: s.g.value(class_p).clone(), neg_protos, neg_parent })
}

/// Unit-norm RoI features of query-image objects and of hard negatives
/// around them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub image: usize,
    /// `gt` or `neg`.
    pub kind: &'static str,
    /// Class of the object (of the parent object for negatives).
    pub class_id: usize,
    pub values: Vec<f64>,
}

pub fn query_embeddings(model: &Model, store: &ParamStore, ep: &Episode, cfg: &RunConfig) -> Result<Vec<EmbeddingRow>> {
    let mut rng = Rng::new(cfg.seed).fork(0xe6);
    let mut rows = Vec::new();
    for (i, q) in ep.queries.iter().enumerate() {
        let mut s = Session::inference(store);
        let feats = model.encode(&mut s, &q.image)?;
        let gts: Vec<BBox> = q.annotations.iter().map(|a| a.bbox).collect();
        let mut raw = Vec::new();
        for (a, &b) in q.annotations.iter().zip(&gts) {
            let d = instance_descriptor(&mut s.g, &feats.pyramid, b, model.negative_spec())?;
            raw.push(("gt", a.class_id, s.g.value(d).data().to_vec()));
        }
        let neg = model.negatives(&mut s, &feats, &gts, &cfg.jitter, &mut rng)?;
        if let Some(p) = neg.protos {
            for (j, row) in neg.parent.iter().zip(s.g.value(p).rows()) {
                raw.push(("neg", q.annotations[*j].class_id, row.to_vec()));
            }
        }
        s.g.ensure_finite()?;
        for (kind, class_id, v) in raw {
            let values = if kind == "gt" {
                l2_normalize_rows(&Tensor::new(&[1, v.len()], v))?.0.into_data()
            } else {
                v
            };
            rows.push(EmbeddingRow { image: i, kind, class_id, values });
        }
    }
    Ok(rows)
}

pub fn embeddings_csv(rows: &[EmbeddingRow], class_names: &[String]) -> String {
    use std::fmt::Write;
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("image,kind,class_id,class_name");
    for k in 0..d {
        let _ = write!(out, ",d{k}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.image, r.kind, r.class_id, class_names[r.class_id]);
        for v in &r.values {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Hard negatives per ground truth.
    NNeg,
    /// Weight of the visual loss in the total.
    Alpha,
    /// Pyramid level of support and negative RoIs.
    Level,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::NNeg => "n_neg",
            SweepParam::Alpha => "alpha",
            SweepParam::Level => "level",
        }
    }

    fn integral(self) -> bool {
        !matches!(self, SweepParam::Alpha)
    }
}

/// `param:v1,v2,...` or, for integer parameters, `param:lo..hi` (inclusive).
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let bad = |why: &str| Error::BadConfig(format!("sweep {spec:?}: {why}"));
        let (name, list) = spec.split_once(':').ok_or_else(|| bad("expected param:values"))?;
        let param = match name.trim() {
            "n_neg" => SweepParam::NNeg,
            "alpha" => SweepParam::Alpha,
            "level" => SweepParam::Level,
            _ => return Err(bad("parameter must be n_neg, alpha or level")),
        };
        let values: Vec<f64> = match list.split_once("..") {
            Some((lo, hi)) if param.integral() => {
                let lo: usize = lo.trim().parse().map_err(|_| bad("bad range start"))?;
                let hi: usize = hi.trim().parse().map_err(|_| bad("bad range end"))?;
                if lo > hi {
                    return Err(bad("empty range"));
                }
                (lo..=hi).map(|v| v as f64).collect()
            }
            Some(_) => return Err(bad("ranges only apply to integer parameters")),
            None => list
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad("bad value")))
                .collect::<Result<_>>()?,
        };
        if values.is_empty() {
            return Err(bad("no values"));
        }
        for &v in &values {
            if !v.is_finite() || v < 0.0 {
                return Err(bad("values must be finite and non-negative"));
            }
            if param.integral() && v.fract() != 0.0 {
                return Err(bad("integer parameter given a fractional value"));
            }
            if param == SweepParam::Level && v as usize >= PYRAMID_LEVELS {
                return Err(bad("level out of range"));
            }
        }
        Ok(Sweep { param, values })
    }
}

impl Sweep {
    /// The base config with one sweep value applied.
    pub fn apply(&self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self.param {
            SweepParam::NNeg => cfg.jitter.n_neg = value as usize,
            SweepParam::Alpha => cfg.matching.branch_alpha = value,
            SweepParam::Level => {
                cfg.model.proto_level = value as usize;
                cfg.model.neg_level = value as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub param: String,
    pub value: f64,
    pub map_text: f64,
    pub map_visual: f64,
    pub map_ensemble: f64,
    pub map50_ensemble: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.param,
            self.value,
            self.map_text,
            self.map_visual,
            self.map_ensemble,
            self.map50_ensemble,
            self.config_hash,
            self.seed
        )
    }
}

pub const ABLATION_CSV_HEADER: &str = "param,value,map_text,map_visual,map_ensemble,map50_ensemble,config_hash,seed";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

/// Train (both stages) and evaluate one config on `ep`.
pub fn run_point(cfg: &RunConfig, ep: &Episode, exec: Exec) -> Result<[EpisodeEval; 3]> {
    let model = Model::new(&cfg.model)?;
    let mut store = model.init_params(cfg.seed)?;
    train_stages(&model, &mut store, ep, cfg, &[Stage::One, Stage::Two], &mut |_| {})?;
    let ev = |b| evaluate_episode(&model, &store, ep, b, &cfg.eval, exec);
    Ok([ev(DetBranch::Text)?, ev(DetBranch::Visual)?, ev(DetBranch::Ensemble)?])
}

/// One row per sweep value; points are independent and run through `exec`.
pub fn run_ablation(base: &RunConfig, sweep: &Sweep, exec: Exec) -> Result<Vec<AblationRow>> {
    let ep = generate_from_config(base, base.seed)?;
    let configs: Vec<(f64, RunConfig)> =
        sweep.values.iter().map(|&v| Ok((v, sweep.apply(base, v)?))).collect::<Result<_>>()?;
    par::try_map(exec, &configs, |(value, cfg)| {
        let [t, v, e] = run_point(cfg, &ep, Exec::Sequential)?;
        log::info!("{}={value}: ensemble mAP {:.4}", sweep.param.name(), e.result.map);
        Ok(AblationRow {
            param: sweep.param.name().into(),
            value: *value,
            map_text: t.result.map,
            map_visual: v.result.map,
            map_ensemble: e.result.map,
            map50_ensemble: e.map50,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        })
    })
}
