//! Synthetic C-way K-shot episodes: parametric shapes on styled
//! backgrounds, and their COCO-style on-disk form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::numeric::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainStyle {
    PhotoLike,
    CartoonLike,
    TextureDefect,
    LowContrast,
}

impl DomainStyle {
    pub const ALL: [DomainStyle; 4] =
        [DomainStyle::PhotoLike, DomainStyle::CartoonLike, DomainStyle::TextureDefect, DomainStyle::LowContrast];

    pub fn name(self) -> &'static str {
        match self {
            DomainStyle::PhotoLike => "photo_like",
            DomainStyle::CartoonLike => "cartoon_like",
            DomainStyle::TextureDefect => "texture_defect",
            DomainStyle::LowContrast => "low_contrast",
        }
    }

    pub fn parse(s: &str) -> Option<DomainStyle> {
        let norm = s.replace('-', "_");
        DomainStyle::ALL.into_iter().find(|st| st.name() == norm)
    }

    fn salt(self) -> u64 {
        match self {
            DomainStyle::PhotoLike => 11,
            DomainStyle::CartoonLike => 12,
            DomainStyle::TextureDefect => 13,
            DomainStyle::LowContrast => 14,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Diamond,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
    ];

    fn name(self) -> &'static str {
        match self {
            ShapeFamily::Circle => "circle",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Cross => "cross",
        }
    }

    /// Membership in local box coordinates `u, v ∈ [-1, 1]`. Every family
    /// touches all four box edges, so the box is exact.
    fn contains(self, u: f64, v: f64) -> bool {
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        match self {
            ShapeFamily::Circle => u * u + v * v <= 1.0,
            ShapeFamily::Square => true,
            ShapeFamily::Triangle => u.abs() <= 0.5 * (v + 1.0),
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeFamily::Ring => {
                let r = u * u + v * v;
                (0.3..=1.0).contains(&r)
            }
            ShapeFamily::Cross => u.abs() <= 0.35 || v.abs() <= 0.35,
        }
    }
}

const COLOR_BANDS: [(&str, [f64; 3]); 6] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.9, 0.85, 0.1]),
    ("magenta", [0.8, 0.2, 0.8]),
    ("cyan", [0.1, 0.8, 0.85]),
];

/// Maximum number of distinct classes an episode can draw.
pub const MAX_WAY: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeFamily,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeImage {
    /// 3×S×S, values on the 1/255 grid.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub supports: Vec<EpisodeImage>,
    pub queries: Vec<EpisodeImage>,
    pub classes: Vec<ClassSpec>,
    pub n_way: usize,
    pub k_shot: usize,
    pub style: DomainStyle,
    pub seed: u64,
    pub image_size: usize,
}

impl Episode {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn support_instances(&self, class_id: usize) -> usize {
        self.supports.iter().flat_map(|s| &s.annotations).filter(|a| a.class_id == class_id).count()
    }

    /// Checks the C-way K-shot protocol and annotation validity.
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.n_way {
            return Err(Error::BadData(format!("{} classes for a {}-way episode", self.classes.len(), self.n_way)));
        }
        for c in 0..self.n_way {
            if self.support_instances(c) < self.k_shot {
                return Err(Error::BadData(format!("class {c} has fewer than {} support instances", self.k_shot)));
            }
        }
        for img in self.supports.iter().chain(&self.queries) {
            for a in &img.annotations {
                if a.class_id >= self.n_way || !a.bbox.is_valid() {
                    return Err(Error::BadData(format!("invalid annotation {a:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Episode generation request.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub style: DomainStyle,
    pub image_size: usize,
    pub max_objects_per_query: usize,
    /// Object side length range, normalized.
    pub size_range: (f64, f64),
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize, style: DomainStyle) -> Self {
        EpisodeSpec { n_way, k_shot, n_query, style, image_size: 64, max_objects_per_query: 3, size_range: (0.2, 0.4) }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Renders a deterministic episode. Geometry and class identity come from
/// one random stream and pixels from a style-specific one, so changing only
/// the style changes pixels but never boxes.
pub fn generate_episode(spec: &EpisodeSpec, seed: u64) -> Result<Episode> {
    if spec.n_way == 0 || spec.k_shot == 0 {
        return Err(Error::BadConfig("episodes need n_way >= 1 and k_shot >= 1".into()));
    }
    if spec.n_way > MAX_WAY {
        return Err(Error::BadConfig(format!("at most {MAX_WAY} classes available, asked for {}", spec.n_way)));
    }
    if spec.image_size < 8 {
        return Err(Error::BadConfig("image_size must be at least 8".into()));
    }
    let (lo, hi) = spec.size_range;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::BadConfig(format!("object size range ({lo}, {hi}) invalid")));
    }
    let root = Rng::new(seed);
    let mut geo = root.fork(1);
    let mut pix = root.fork(spec.style.salt());

    let mut shapes = ShapeFamily::ALL.to_vec();
    geo.shuffle(&mut shapes);
    let mut colors: Vec<usize> = (0..COLOR_BANDS.len()).collect();
    geo.shuffle(&mut colors);
    let classes: Vec<ClassSpec> = (0..spec.n_way)
        .map(|c| {
            let (cname, rgb) = COLOR_BANDS[colors[c]];
            ClassSpec { name: format!("{cname} {}", shapes[c].name()), shape: shapes[c], color: rgb }
        })
        .collect();

    let mut supports = Vec::new();
    for class_id in 0..spec.n_way {
        let mut remaining = spec.k_shot;
        while remaining > 0 {
            let count = remaining.min(1 + geo.below(2));
            let ids = vec![class_id; count];
            let layout = place_objects(&ids, spec, &mut geo)?;
            supports.push(render(&layout, &classes, spec, &mut geo, &mut pix));
            remaining -= count;
        }
    }
    let mut queries = Vec::with_capacity(spec.n_query);
    for q in 0..spec.n_query {
        let count = 1 + geo.below(spec.max_objects_per_query.max(1));
        // first objects cycle through the classes so every class shows up
        let ids: Vec<usize> =
            (0..count).map(|i| if i == 0 { q % spec.n_way } else { geo.below(spec.n_way) }).collect();
        let layout = place_objects(&ids, spec, &mut geo)?;
        queries.push(render(&layout, &classes, spec, &mut geo, &mut pix));
    }
    Ok(Episode {
        supports,
        queries,
        classes,
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        style: spec.style,
        seed,
        image_size: spec.image_size,
    })
}

fn place_objects(class_ids: &[usize], spec: &EpisodeSpec, geo: &mut Rng) -> Result<Vec<Annotation>> {
    let mut placed: Vec<Annotation> = Vec::with_capacity(class_ids.len());
    let (lo, hi) = spec.size_range;
    let px = 1.0 / spec.image_size as f64;
    for &class_id in class_ids {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            // snap to the pixel grid so boxes are exact in pixel units
            let w = (geo.uniform(lo, hi) * spec.image_size as f64).round().max(2.0) * px;
            let h = (geo.uniform(lo, hi) * spec.image_size as f64).round().max(2.0) * px;
            let x1 = (geo.uniform(0.0, 1.0 - w) * spec.image_size as f64).round() * px;
            let y1 = (geo.uniform(0.0, 1.0 - h) * spec.image_size as f64).round() * px;
            let b = BBox::from_xyxy(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0));
            let margin = BBox::new(b.cx, b.cy, b.w + 2.0 * px, b.h + 2.0 * px);
            if placed.iter().all(|p| iou(p.bbox, margin) == 0.0) {
                placed.push(Annotation { class_id, bbox: b });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::BadConfig(format!(
                "cannot place {} objects of size {lo}..{hi} on a {}px canvas",
                class_ids.len(),
                spec.image_size
            )));
        }
    }
    Ok(placed)
}

fn render(
    layout: &[Annotation],
    classes: &[ClassSpec],
    spec: &EpisodeSpec,
    geo: &mut Rng,
    pix: &mut Rng,
) -> EpisodeImage {
    let n = spec.image_size;
    let style = spec.style;
    // per-object color jitter belongs to the geometry stream
    let tints: Vec<[f64; 3]> = layout
        .iter()
        .map(|a| {
            let base = classes[a.class_id].color;
            [0, 1, 2].map(|c| (base[c] + geo.uniform(-0.06, 0.06)).clamp(0.0, 1.0))
        })
        .collect();

    let bg_a = [pix.uniform(0.3, 0.7), pix.uniform(0.3, 0.7), pix.uniform(0.3, 0.7)];
    let bg_b = [pix.uniform(0.3, 0.7), pix.uniform(0.3, 0.7), pix.uniform(0.3, 0.7)];
    let stripe_freq = pix.uniform(0.4, 1.2);
    let stripe_phase = pix.uniform(0.0, std::f64::consts::TAU);
    let mut data = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let mut rgb = match style {
                DomainStyle::PhotoLike => lerp3(bg_a, bg_b, 0.5 * (fx + fy)),
                DomainStyle::CartoonLike => [0.92, 0.9, 0.85],
                DomainStyle::TextureDefect => {
                    let s = 0.5 + 0.5 * (stripe_freq * (x as f64 + 0.6 * y as f64) + stripe_phase).sin();
                    let g = 0.35 + 0.25 * s;
                    [g, g, g]
                }
                DomainStyle::LowContrast => lerp3(bg_a, bg_b, fx),
            };
            for (a, tint) in layout.iter().zip(&tints) {
                let cover = coverage(a, classes[a.class_id].shape, x, y, n);
                if cover <= 0.0 {
                    continue;
                }
                let mut obj = *tint;
                match style {
                    DomainStyle::PhotoLike => {
                        let [_, y1, _, y2] = a.bbox.to_xyxy();
                        let t = ((fy - y1) / (y2 - y1)).clamp(0.0, 1.0);
                        let shade = 1.1 - 0.3 * t;
                        obj = obj.map(|v| (v * shade).min(1.0));
                    }
                    DomainStyle::CartoonLike => {
                        if is_edge(a, classes[a.class_id].shape, x, y, n) {
                            obj = [0.05, 0.05, 0.05];
                        }
                    }
                    DomainStyle::TextureDefect => obj = obj.map(|v| 0.7 * v + 0.15),
                    DomainStyle::LowContrast => {}
                }
                rgb = lerp3(rgb, obj, cover);
            }
            let noise = match style {
                DomainStyle::PhotoLike => 0.03,
                DomainStyle::CartoonLike => 0.0,
                DomainStyle::TextureDefect => 0.08,
                DomainStyle::LowContrast => 0.02,
            };
            for c in 0..3 {
                let mut v = rgb[c] + if noise > 0.0 { noise * pix.normal() } else { 0.0 };
                if style == DomainStyle::LowContrast {
                    v = 0.45 + 0.3 * (v - 0.5);
                }
                data[(c * n + y) * n + x] = quantize(v);
            }
        }
    }
    EpisodeImage { image: Tensor::new(&[3, n, n], data), annotations: layout.to_vec() }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Fraction of a pixel's 2×2 sub-samples inside the shape.
fn coverage(a: &Annotation, shape: ShapeFamily, x: usize, y: usize, n: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..2 {
        for sx in 0..2 {
            let fx = (x as f64 + 0.25 + 0.5 * sx as f64) / n as f64;
            let fy = (y as f64 + 0.25 + 0.5 * sy as f64) / n as f64;
            let u = (fx - a.bbox.cx) / (0.5 * a.bbox.w);
            let v = (fy - a.bbox.cy) / (0.5 * a.bbox.h);
            hits += shape.contains(u, v) as usize;
        }
    }
    hits as f64 / 4.0
}

fn is_edge(a: &Annotation, shape: ShapeFamily, x: usize, y: usize, n: usize) -> bool {
    let inside = |xx: i64, yy: i64| {
        if xx < 0 || yy < 0 || xx >= n as i64 || yy >= n as i64 {
            return false;
        }
        coverage(a, shape, xx as usize, yy as usize, n) >= 0.5
    };
    let (xi, yi) = (x as i64, y as i64);
    inside(xi, yi) && !(inside(xi - 1, yi) && inside(xi + 1, yi) && inside(xi, yi - 1) && inside(xi, yi + 1))
}

// ---------------------------------------------------------------------------
// COCO-style files

pub const EPISODE_FORMAT: &str = "lmp-episode";
pub const EPISODE_FILE: &str = "episode.json";

#[derive(Debug, Serialize, Deserialize)]
struct CocoInfo {
    format: String,
    version: u32,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    style: DomainStyle,
    seed: u64,
    image_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
    split: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    category_id: usize,
    /// Pixel `[x, y, w, h]`.
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
    /// Normalized `[cx, cy, w, h]`, authoritative when reading back.
    bbox_norm: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
    shape: ShapeFamily,
    color: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoEpisode {
    info: CocoInfo,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Writes `episode.json` plus one PNG per image under `dir/images/`.
pub fn save_episode(ep: &Episode, dir: &Path) -> Result<()> {
    save_episode_tagged(ep, dir, None)
}

/// As [`save_episode`], recording the hash of the generating config.
pub fn save_episode_tagged(ep: &Episode, dir: &Path, config_hash: Option<&str>) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let n = ep.image_size;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let all = ep.supports.iter().map(|i| ("support", i)).chain(ep.queries.iter().map(|i| ("query", i)));
    let mut per_split = [0usize; 2];
    for (id, (split, img)) in all.enumerate() {
        let k = (split == "query") as usize;
        let file_name = format!("images/{split}_{:03}.png", per_split[k]);
        per_split[k] += 1;
        write_png(&img.image, &dir.join(&file_name))?;
        images.push(CocoImage { id, file_name, width: n, height: n, split: split.into() });
        for a in &img.annotations {
            let [x1, y1, _, _] = a.bbox.to_xyxy();
            let s = n as f64;
            annotations.push(CocoAnnotation {
                id: annotations.len(),
                image_id: id,
                category_id: a.class_id,
                bbox: [x1 * s, y1 * s, a.bbox.w * s, a.bbox.h * s],
                area: a.bbox.w * a.bbox.h * s * s,
                iscrowd: 0,
                bbox_norm: a.bbox.to_array(),
            });
        }
    }
    let doc = CocoEpisode {
        info: CocoInfo {
            format: EPISODE_FORMAT.into(),
            version: 1,
            n_way: ep.n_way,
            k_shot: ep.k_shot,
            n_query: ep.queries.len(),
            style: ep.style,
            seed: ep.seed,
            image_size: n,
            config_hash: config_hash.map(str::to_string),
        },
        images,
        annotations,
        categories: ep
            .classes
            .iter()
            .enumerate()
            .map(|(id, c)| CocoCategory { id, name: c.name.clone(), shape: c.shape, color: c.color })
            .collect(),
    };
    let path = dir.join(EPISODE_FILE);
    fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))
}

/// Reads an episode directory written by [`save_episode`]; `path` may be the
/// directory or its `episode.json`.
pub fn load_episode(path: &Path) -> Result<Episode> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(EPISODE_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let doc: CocoEpisode = serde_json::from_str(&text)?;
    if doc.info.format != EPISODE_FORMAT {
        return Err(Error::BadData(format!("{}: not an episode file", file.display())));
    }
    let mut supports = Vec::new();
    let mut queries = Vec::new();
    for im in &doc.images {
        let image = read_png(&dir.join(&im.file_name), doc.info.image_size)?;
        let annotations = doc
            .annotations
            .iter()
            .filter(|a| a.image_id == im.id)
            .map(|a| Annotation { class_id: a.category_id, bbox: BBox::from_array(a.bbox_norm) })
            .collect();
        let entry = EpisodeImage { image, annotations };
        match im.split.as_str() {
            "support" => supports.push(entry),
            "query" => queries.push(entry),
            other => return Err(Error::BadData(format!("unknown split {other:?}"))),
        }
    }
    let ep = Episode {
        supports,
        queries,
        classes: doc
            .categories
            .iter()
            .map(|c| ClassSpec { name: c.name.clone(), shape: c.shape, color: c.color })
            .collect(),
        n_way: doc.info.n_way,
        k_shot: doc.info.k_shot,
        style: doc.info.style,
        seed: doc.info.seed,
        image_size: doc.info.image_size,
    };
    ep.validate()?;
    Ok(ep)
}

fn write_png(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (t.data()[c * plane + i] * 255.0).round() as u8))
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_png(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::BadData(format!("{}: expected {size}×{size} pixels", path.display())));
    }
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, size, size], data))
}
