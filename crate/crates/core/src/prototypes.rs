//! Class prototypes from support instances, hard-negative prototypes from
//! jittered query boxes, and the visual guidance matrix built from both.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backbone::FeaturePyramid;
use crate::episode::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{jitter_box, roi_align_var, BBox, JitterParams};
use crate::numeric::{Graph, Rng, Tensor, Var};

/// RoI pooling settings shared by supports and negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiSpec {
    pub level: usize,
    pub output: usize,
    pub samples: usize,
}

/// RoIAlign + GAP descriptor of one box, as a width-D vector.
pub fn instance_descriptor(g: &mut Graph, pyramid: &FeaturePyramid, roi: BBox, spec: RoiSpec) -> Result<Var> {
    let fmap = *pyramid
        .levels
        .get(spec.level)
        .ok_or_else(|| Error::BadConfig(format!("pyramid level {} out of range", spec.level)))?;
    let pooled = roi_align_var(g, fmap, roi, spec.output, spec.samples)?;
    Ok(g.mean_inner(pooled))
}

/// One support image: its pyramid and its instance annotations.
pub struct SupportView<'a> {
    pub pyramid: &'a FeaturePyramid,
    pub annotations: &'a [Annotation],
}

/// Per-class mean of instance descriptors, normalized; C×D in class order.
pub fn build_class_prototypes(g: &mut Graph, supports: &[SupportView], n_class: usize, spec: RoiSpec) -> Result<Var> {
    let mut per_class: Vec<Vec<Var>> = vec![Vec::new(); n_class];
    for sv in supports {
        for a in sv.annotations {
            if a.class_id >= n_class {
                return Err(Error::BadData(format!("support class {} outside 0..{n_class}", a.class_id)));
            }
            per_class[a.class_id].push(instance_descriptor(g, sv.pyramid, a.bbox, spec)?);
        }
    }
    let mut means = Vec::with_capacity(n_class);
    for (c, descs) in per_class.iter().enumerate() {
        if descs.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let stacked = g.concat_rows(descs);
        means.push(g.mean_rows(stacked));
    }
    let p = g.concat_rows(&means);
    g.l2_normalize(p)
}

/// Hard negatives for one query image.
#[derive(Clone, Debug)]
pub struct NegativePrototypes {
    /// M×D unit rows, `None` when no jitter was accepted.
    pub protos: Option<Var>,
    /// GT index each negative was sampled around.
    pub parent: Vec<usize>,
    pub boxes: Vec<BBox>,
}

impl NegativePrototypes {
    pub fn empty() -> Self {
        NegativePrototypes { protos: None, parent: Vec::new(), boxes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }
}

pub fn build_negative_prototypes(
    g: &mut Graph,
    query: &FeaturePyramid,
    gts: &[BBox],
    p: &JitterParams,
    spec: RoiSpec,
    rng: &mut Rng,
) -> Result<NegativePrototypes> {
    let mut descs = Vec::new();
    let mut parent = Vec::new();
    let mut boxes = Vec::new();
    for (j, &gt) in gts.iter().enumerate() {
        for b in jitter_box(gt, p, rng) {
            descs.push(instance_descriptor(g, query, b, spec)?);
            parent.push(j);
            boxes.push(b);
        }
    }
    if descs.is_empty() {
        return Ok(NegativePrototypes::empty());
    }
    let stacked = g.concat_rows(&descs);
    let protos = Some(g.l2_normalize(stacked)?);
    Ok(NegativePrototypes { protos, parent, boxes })
}

/// Guidance matrix `V`: class rows first, then negatives.
#[derive(Clone, Debug)]
pub struct VisualTokens {
    pub v: Var,
    pub n_class: usize,
    pub n_neg: usize,
}

impl VisualTokens {
    pub fn len(&self) -> usize {
        self.n_class + self.n_neg
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn assemble_visual_tokens(g: &mut Graph, class_p: Var, neg: &NegativePrototypes) -> Result<VisualTokens> {
    let (n_class, d) = g.value(class_p).dims2();
    match neg.protos {
        None => Ok(VisualTokens { v: class_p, n_class, n_neg: 0 }),
        Some(np) => {
            let (m, dn) = g.value(np).dims2();
            if dn != d {
                return Err(Error::BadShape(format!("prototype widths differ: {d} vs {dn}")));
            }
            Ok(VisualTokens { v: g.concat_rows(&[class_p, np]), n_class, n_neg: m })
        }
    }
}

/// Plain-tensor snapshot of a prototype set.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub class_protos: Tensor,
    pub neg_protos: Option<Tensor>,
    pub neg_parent: Vec<usize>,
}

impl PrototypeSet {
    /// Row labels: the class id for class rows, `neg:j` for a negative
    /// sampled around GT `j`.
    pub fn labels(&self) -> Vec<String> {
        let c = self.class_protos.dims2().0;
        (0..c).map(|i| i.to_string()).chain(self.neg_parent.iter().map(|j| format!("neg:{j}"))).collect()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let d = self.class_protos.dims2().1;
        let mut out = String::from("label,name");
        for k in 0..d {
            let _ = write!(out, ",d{k}");
        }
        out.push('\n');
        let rows = self.class_protos.rows().chain(self.neg_protos.iter().flat_map(|t| t.rows()));
        for (i, (label, row)) in self.labels().into_iter().zip(rows).enumerate() {
            let name = class_names.get(i).filter(|_| !label.starts_with("neg")).map(String::as_str).unwrap_or("");
            let _ = write!(out, "{label},{name}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, class_names: &[String], path: &Path) -> Result<()> {
        fs::write(path, self.to_csv(class_names)).map_err(|e| Error::io(path, e))
    }
}
