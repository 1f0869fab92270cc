//! The two-branch detector: shared encoder, text-guided and visual-guided
//! branches over one implementation.

use crate::backbone::{embed_text, init_text_projection, tokenize_pyramid, Backbone, FeaturePyramid, TokenIndex};
use crate::config::ModelConfig;
use crate::decoder::{clone_weights, BranchOutput, BranchVars, DecoderStack};
use crate::enhancer::{select_queries, token_positions, EnhancerStack, QueryInit, QuerySeeds};
use crate::episode::{Episode, EpisodeImage};
use crate::error::{Error, Result};
use crate::geometry::{BBox, JitterParams};
use crate::numeric::{Rng, Tensor, Var};
use crate::par::{self, Exec};
use crate::params::{ParamStore, Session};
use crate::prototypes::{
    assemble_visual_tokens, build_class_prototypes, build_negative_prototypes, NegativePrototypes, RoiSpec,
    SupportView, VisualTokens,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Text,
    Visual,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Text, Branch::Visual];

    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Text => "text",
            Branch::Visual => "visual",
        }
    }
}

#[derive(Clone, Debug)]
struct BranchModules {
    enh: EnhancerStack,
    qi: QueryInit,
    dec: DecoderStack,
}

/// Encoded image: pyramid, flattened tokens and their positions.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub pyramid: FeaturePyramid,
    pub tokens: Var,
    pub index: TokenIndex,
    pub pos: Var,
}

/// One branch's forward pass on one image.
#[derive(Clone, Debug)]
pub struct BranchForward {
    pub out: BranchVars,
    pub selected: Vec<usize>,
    pub seeds: QuerySeeds,
    /// Enhanced guidance tokens.
    pub guidance: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    text: BranchModules,
    visual: BranchModules,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if cfg.d_model == 0 || !cfg.d_model.is_multiple_of(8) {
            return Err(Error::BadConfig(format!("d_model {} must be a positive multiple of 8", cfg.d_model)));
        }
        if cfg.n_heads == 0 || !cfg.d_model.is_multiple_of(cfg.n_heads) {
            return Err(Error::BadConfig(format!("d_model {} not divisible by {} heads", cfg.d_model, cfg.n_heads)));
        }
        if cfg.n_queries == 0 || cfg.decoder_layers == 0 {
            return Err(Error::BadConfig("n_queries and decoder_layers must be at least 1".into()));
        }
        let make = |b: Branch, alpha: f64, tau: f64| {
            let p = b.prefix();
            BranchModules {
                enh: EnhancerStack::new(p, cfg.enhancer_layers, cfg.d_model, cfg.n_heads, cfg.ffn_dim),
                qi: QueryInit::new(p, cfg.d_model, cfg.shared_content, cfg.n_queries),
                dec: DecoderStack::new(
                    p,
                    cfg.decoder_layers,
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.ffn_dim,
                    cfg.per_layer_heads,
                    alpha,
                    tau,
                ),
            }
        };
        Ok(Model {
            cfg: cfg.clone(),
            backbone: Backbone::new(cfg.d_model),
            text: make(Branch::Text, cfg.alpha_txt, cfg.tau_txt),
            visual: make(Branch::Visual, cfg.alpha_vis, cfg.tau_vis),
        })
    }

    fn modules(&self, b: Branch) -> &BranchModules {
        match b {
            Branch::Text => &self.text,
            Branch::Visual => &self.visual,
        }
    }

    /// Fresh parameters; the visual branch starts as a copy of the text branch.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = Rng::new(seed).fork(0x1a1);
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, &mut rng);
        init_text_projection(&mut store, &mut rng, self.cfg.d_text, self.cfg.d_model);
        let t = &self.text;
        t.enh.init(&mut store, &mut rng);
        t.qi.init(&mut store, &mut rng);
        t.dec.init(&mut store, &mut rng);
        clone_weights(&mut store, "text.", "visual.")?;
        Ok(store)
    }

    pub fn support_spec(&self) -> RoiSpec {
        RoiSpec { level: self.cfg.proto_level, output: self.cfg.roi_output, samples: self.cfg.roi_samples }
    }

    pub fn negative_spec(&self) -> RoiSpec {
        RoiSpec { level: self.cfg.neg_level, output: self.cfg.roi_output, samples: self.cfg.roi_samples }
    }

    pub fn encode(&self, s: &mut Session, image: &Tensor) -> Result<ImageFeatures> {
        let img = s.g.constant(image.clone());
        let pyramid = self.backbone.extract_pyramid(s, img)?;
        let (tokens, index) = tokenize_pyramid(&mut s.g, &pyramid);
        let pos = s.g.constant(token_positions(&index, self.cfg.d_model));
        Ok(ImageFeatures { pyramid, tokens, index, pos })
    }

    /// C×D text prototypes for the episode's class names.
    pub fn text_prototypes(&self, s: &mut Session, class_names: &[String]) -> Result<Var> {
        Ok(embed_text(s, class_names, self.cfg.tau_t, &self.cfg.text_salt)?.projected)
    }

    /// C×D class prototypes from the support images, encoded on this tape.
    pub fn class_prototypes(&self, s: &mut Session, supports: &[EpisodeImage], n_class: usize) -> Result<Var> {
        let feats: Vec<ImageFeatures> = supports.iter().map(|im| self.encode(s, &im.image)).collect::<Result<_>>()?;
        let views: Vec<SupportView> = feats
            .iter()
            .zip(supports)
            .map(|(f, im)| SupportView { pyramid: &f.pyramid, annotations: &im.annotations })
            .collect();
        build_class_prototypes(&mut s.g, &views, n_class, self.support_spec())
    }

    pub fn negatives(
        &self,
        s: &mut Session,
        feats: &ImageFeatures,
        gts: &[BBox],
        jitter: &JitterParams,
        rng: &mut Rng,
    ) -> Result<NegativePrototypes> {
        build_negative_prototypes(&mut s.g, &feats.pyramid, gts, jitter, self.negative_spec(), rng)
    }

    pub fn visual_guidance(&self, s: &mut Session, class_protos: Var, neg: &NegativePrototypes) -> Result<VisualTokens> {
        assemble_visual_tokens(&mut s.g, class_protos, neg)
    }

    pub fn n_queries(&self, n_tokens: usize) -> usize {
        self.cfg.n_queries.min(n_tokens)
    }

    /// Enhance, select queries (or reuse `selected`), seed and decode.
    /// `guidance` feeds attention; `protos` defines the logit columns.
    pub fn forward_branch(
        &self,
        s: &mut Session,
        branch: Branch,
        feats: &ImageFeatures,
        guidance: Var,
        protos: Var,
        selected: Option<&[usize]>,
    ) -> Result<BranchForward> {
        let m = self.modules(branch);
        let (x, v) = m.enh.enhance(s, feats.tokens, guidance, feats.pos)?;
        let selected = match selected {
            Some(sel) => sel.to_vec(),
            None => select_queries(s.g.value(x), s.g.value(v), self.n_queries(feats.index.len()))?,
        };
        let seeds = m.qi.init_query_seeds(s, x, &feats.index, &selected)?;
        let out = m.dec.decode_branch(s, &seeds, x, feats.pos, v, protos)?;
        Ok(BranchForward { out, selected, seeds, guidance: v })
    }

    /// Per-layer outputs of the requested branches on every query image,
    /// with guidance built from the supports only (no hard negatives).
    pub fn predict(&self, store: &ParamStore, ep: &Episode, branches: &[Branch]) -> Result<Vec<Vec<(Branch, BranchOutput)>>> {
        self.predict_with(store, ep, branches, Exec::default_mode())
    }

    pub fn predict_with(
        &self,
        store: &ParamStore,
        ep: &Episode,
        branches: &[Branch],
        exec: Exec,
    ) -> Result<Vec<Vec<(Branch, BranchOutput)>>> {
        let protos = self.prototype_tensors(store, ep, branches)?;
        par::try_map(exec, &ep.queries, |q| self.predict_image(store, q, branches, &protos))
    }

    /// Guidance prototypes per requested branch, as plain tensors.
    pub fn prototype_tensors(&self, store: &ParamStore, ep: &Episode, branches: &[Branch]) -> Result<Vec<(Branch, Tensor)>> {
        let mut s = Session::inference(store);
        let mut out = Vec::new();
        for &b in branches {
            let p = match b {
                Branch::Text => self.text_prototypes(&mut s, &ep.class_names())?,
                Branch::Visual => self.class_prototypes(&mut s, &ep.supports, ep.n_way)?,
            };
            s.g.ensure_finite()?;
            out.push((b, s.g.value(p).clone()));
        }
        Ok(out)
    }

    pub fn predict_image(
        &self,
        store: &ParamStore,
        image: &EpisodeImage,
        branches: &[Branch],
        protos: &[(Branch, Tensor)],
    ) -> Result<Vec<(Branch, BranchOutput)>> {
        let mut s = Session::inference(store);
        let feats = self.encode(&mut s, &image.image)?;
        let mut per = Vec::with_capacity(branches.len());
        for &b in branches {
            let t = protos
                .iter()
                .find(|(pb, _)| *pb == b)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::BadConfig(format!("no prototypes for branch {}", b.prefix())))?;
            let p = s.g.constant(t);
            let f = self.forward_branch(&mut s, b, &feats, p, p, None)?;
            s.g.ensure_finite()?;
            per.push((b, BranchOutput::from_vars(&s.g, &f.out)));
        }
        Ok(per)
    }
}
