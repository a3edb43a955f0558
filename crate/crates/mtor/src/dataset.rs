//! Procedural shape scenes, domain shift, perturbed training pairs, and the
//! on-disk dataset layout (`<root>/{source,target}/{images/*.png,
//! annotations.json}`, COCO-style annotations).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mtor_core::boxes::BoxCorners;
use mtor_core::eval::GroundTruth;
use mtor_core::rng::{gaussian, uniform_in};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CATEGORIES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("image_size {0} too small (minimum 64 px)")]
    ImageTooSmall(usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("invalid annotation {ann_id} (image {image_id}): {message}")]
    InvalidAnnotation { ann_id: u64, image_id: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStyle {
    Flat,
    Gradient,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive range of objects per image.
    pub num_objects: (usize, usize),
    pub categories: Vec<String>,
    pub background_style: BackgroundStyle,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            num_objects: (1, 4),
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            background_style: BackgroundStyle::Gradient,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.image_size < 64 {
            return Err(DatasetError::ImageTooSmall(self.image_size));
        }
        assert!(self.categories.len() >= 2, "need at least 2 categories");
        assert!(
            self.num_objects.0 >= 1 && self.num_objects.0 <= self.num_objects.1,
            "bad num_objects range"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub rect: BoxCorners,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// One image plus (for the source domain) its box annotations. Pixels are
/// `[3, H, W]` floats in `[0,1]`, always on the u8/255 grid so PNG
/// round-trips are lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub id: String,
    pub image: Vec<f64>,
    pub size: usize,
    pub boxes: Vec<BoxAnnotation>,
    pub domain: Domain,
}

impl DomainSample {
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.image[(c * self.size + y) * self.size + x]
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Per-(seed, index) generator stream, independent per purpose tag.
fn scene_rng(seed: u64, index: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { x0: f64, y0: f64, side: f64 },
    Triangle { cx: f64, base_y: f64, half: f64, height: f64 },
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square { x0, y0, side } => {
                x >= x0 && x <= x0 + side && y >= y0 && y <= y0 + side
            }
            Shape::Triangle { cx, base_y, half, height } => {
                if y > base_y || y < base_y - height {
                    return false;
                }
                // apex at (cx, base_y - height); width grows linearly to the base
                let frac = (base_y - y) / height;
                (x - cx).abs() <= half * (1.0 - frac)
            }
        }
    }
}

/// Deterministic scene for (spec.rng_seed, index): background plus 1..=max
/// colored shapes; boxes are the exact pixel-tight bounds of each raster.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<DomainSample, DatasetError> {
    spec.validate()?;
    let n = spec.image_size;
    let mut rng = scene_rng(spec.rng_seed, index, 1);
    let mut image = vec![0.0f64; 3 * n * n];

    // background: muted gray-blue, optionally a vertical gradient
    let base: [f64; 3] = [
        uniform_in(&mut rng, 0.55, 0.75),
        uniform_in(&mut rng, 0.55, 0.75),
        uniform_in(&mut rng, 0.6, 0.8),
    ];
    let grad = match spec.background_style {
        BackgroundStyle::Flat => 0.0,
        BackgroundStyle::Gradient => uniform_in(&mut rng, -0.12, 0.12),
    };
    for y in 0..n {
        let shade = grad * (y as f64 / n as f64 - 0.5);
        for x in 0..n {
            for c in 0..3 {
                image[(c * n + y) * n + x] = base[c] + shade;
            }
        }
    }

    let count =
        spec.num_objects.0 + (rng.next_u64() as usize) % (spec.num_objects.1 - spec.num_objects.0 + 1);
    let mut boxes = Vec::with_capacity(count);
    let mut placed: Vec<BoxCorners> = Vec::new();
    for _ in 0..count {
        let category = (rng.next_u64() as usize) % spec.categories.len();
        // strongly colored shape, clearly separable from the background
        let color: [f64; 3] = {
            let hi = (rng.next_u64() as usize) % 3;
            let mut c = [uniform_in(&mut rng, 0.0, 0.25); 3];
            c[hi] = uniform_in(&mut rng, 0.75, 1.0);
            c
        };
        // rejection-sample a placement with limited overlap
        let mut attempt = 0;
        let (shape, rect) = loop {
            attempt += 1;
            let extent = uniform_in(&mut rng, 0.12, 0.30) * n as f64;
            let cx = uniform_in(&mut rng, extent * 0.6 + 1.0, n as f64 - extent * 0.6 - 1.0);
            let cy = uniform_in(&mut rng, extent * 0.6 + 1.0, n as f64 - extent * 0.6 - 1.0);
            let shape = match category % 3 {
                0 => Shape::Circle { cx, cy, r: extent / 2.0 },
                1 => Shape::Square { x0: cx - extent / 2.0, y0: cy - extent / 2.0, side: extent },
                _ => Shape::Triangle {
                    cx,
                    base_y: cy + extent / 2.0,
                    half: extent / 2.0,
                    height: extent,
                },
            };
            let rect = raster_bounds(&shape, n);
            let Some(rect) = rect else { continue };
            let sep = placed.iter().all(|p| mtor_core::boxes::iou(p, &rect) < 0.15);
            if sep || attempt > 20 {
                break (shape, rect);
            }
        };
        for y in 0..n {
            for x in 0..n {
                if shape.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        image[(c * n + y) * n + x] = color[c];
                    }
                }
            }
        }
        placed.push(rect);
        boxes.push(BoxAnnotation { rect, category });
    }

    for v in image.iter_mut() {
        *v = quantize(*v);
    }
    Ok(DomainSample {
        id: format!("{:06}", index),
        image,
        size: n,
        boxes,
        domain: Domain::Source,
    })
}

/// Pixel-tight bounds of a shape raster; `None` if no pixel is covered.
fn raster_bounds(shape: &Shape, n: usize) -> Option<BoxCorners> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..n {
        for x in 0..n {
            if shape.covers(x as f64 + 0.5, y as f64 + 0.5) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX || x1 <= x0 + 1 || y1 <= y0 + 1 {
        return None;
    }
    Some(BoxCorners::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ShiftParams {
    pub fog_density: f64,
    pub fog_color: [f64; 3],
    pub noise_sigma: f64,
    pub hue_shift: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self { fog_density: 0.5, fog_color: [0.7, 0.7, 0.7], noise_sigma: 0.03, hue_shift: 20.0 }
    }
}

/// Fog blend + Gaussian pixel noise + hue rotation; boxes carried over
/// unchanged, domain becomes target. Output stays on the u8/255 grid.
pub fn apply_domain_shift(
    sample: &DomainSample,
    params: &ShiftParams,
    rng: &mut impl RngCore,
) -> DomainSample {
    assert_eq!(sample.domain, Domain::Source, "shift applies to source samples");
    let n = sample.size;
    let mut image = vec![0.0f64; 3 * n * n];
    let npix = n * n;
    for i in 0..npix {
        let mut rgbv = [0.0f64; 3];
        for c in 0..3 {
            let v = sample.image[c * npix + i];
            let fogged = (1.0 - params.fog_density) * v + params.fog_density * params.fog_color[c];
            rgbv[c] = fogged
                + if params.noise_sigma > 0.0 { params.noise_sigma * gaussian(rng) } else { 0.0 };
        }
        let shifted = rotate_hue(rgbv, params.hue_shift);
        for c in 0..3 {
            image[c * npix + i] = quantize(shifted[c]);
        }
    }
    DomainSample {
        id: sample.id.clone(),
        image,
        size: n,
        boxes: sample.boxes.clone(),
        domain: Domain::Target,
    }
}

/// Rotate hue by `degrees` in HSV space; value/saturation untouched.
fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    if degrees == 0.0 {
        return rgb;
    }
    let (r, g, b) = (rgb[0].clamp(0.0, 1.0), rgb[1].clamp(0.0, 1.0), rgb[2].clamp(0.0, 1.0));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let mut h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta) % 6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    h = (h + degrees).rem_euclid(360.0);
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let v = max;
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (rp, gp, bp) = match (h / 60.0) as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [rp + m, gp + m, bp + m]
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AugParams {
    /// Color-jitter strength (brightness/contrast/saturation fraction).
    pub jitter: f64,
    /// Std of the PCA-style global RGB noise.
    pub pca_noise: f64,
    /// Max fraction of each border that the shared crop window may remove.
    pub crop: f64,
    /// Enable random horizontal flip.
    pub flip: bool,
}

impl Default for AugParams {
    fn default() -> Self {
        Self { jitter: 0.25, pca_noise: 0.05, crop: 0.1, flip: true }
    }
}

/// Shared spatial transform of a perturbed pair: pixels outside the crop
/// window are zero-padded, the flip (if any) is applied to both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub crop: (usize, usize, usize, usize), // x0, y0, x1, y1 (exclusive)
    pub flip: bool,
}

#[derive(Debug, Clone)]
pub struct PerturbedPair {
    pub student_view: Vec<f64>,
    pub teacher_view: Vec<f64>,
    pub size: usize,
    pub shared_spatial: SpatialTransform,
}

fn apply_spatial(image: &[f64], n: usize, t: &SpatialTransform) -> Vec<f64> {
    let mut out = vec![0.0f64; 3 * n * n];
    for c in 0..3 {
        for y in t.crop.1..t.crop.3 {
            for x in t.crop.0..t.crop.2 {
                let sx = if t.flip { n - 1 - x } else { x };
                out[(c * n + y) * n + x] = image[(c * n + y) * n + sx];
            }
        }
    }
    out
}

fn color_jitter(image: &mut [f64], strength: f64, pca: f64, rng: &mut impl RngCore) {
    if strength > 0.0 {
        let b = uniform_in(rng, 1.0 - strength, 1.0 + strength);
        let ctr = uniform_in(rng, 1.0 - strength, 1.0 + strength);
        let sat = uniform_in(rng, 1.0 - strength, 1.0 + strength);
        let mean = image.iter().sum::<f64>() / image.len() as f64;
        let npix = image.len() / 3;
        for i in 0..npix {
            let gray = (0..3).map(|c| image[c * npix + i]).sum::<f64>() / 3.0;
            for c in 0..3 {
                let mut v = image[c * npix + i] * b;
                v = (v - mean) * ctr + mean;
                v = gray + (v - gray) * sat;
                image[c * npix + i] = v;
            }
        }
    }
    if pca > 0.0 {
        // global per-channel offset, the desk-scale stand-in for PCA noise
        let d = [pca * gaussian(rng), pca * gaussian(rng), pca * gaussian(rng)];
        let npix = image.len() / 3;
        for c in 0..3 {
            for i in 0..npix {
                image[c * npix + i] += d[c];
            }
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Sample one shared spatial transform, then two independent photometric
/// perturbations (one per view).
pub fn augment_pair(
    sample: &DomainSample,
    params: &AugParams,
    rng: &mut impl RngCore,
) -> PerturbedPair {
    let n = sample.size;
    let max_cut = ((params.crop * n as f64) as usize).min(n / 4);
    let cut = |rng: &mut dyn RngCore| {
        if max_cut == 0 { 0 } else { (rng.next_u64() as usize) % (max_cut + 1) }
    };
    let spatial = SpatialTransform {
        crop: {
            let (l, t, r, b) = (cut(rng), cut(rng), cut(rng), cut(rng));
            (l, t, n - r, n - b)
        },
        flip: params.flip && rng.next_u64() % 2 == 1,
    };
    let base = apply_spatial(&sample.image, n, &spatial);
    let mut student_view = base.clone();
    let mut teacher_view = base;
    color_jitter(&mut student_view, params.jitter, params.pca_noise, rng);
    color_jitter(&mut teacher_view, params.jitter, params.pca_noise, rng);
    PerturbedPair { student_view, teacher_view, size: n, shared_spatial: spatial }
}

// ---------- on-disk format ----------

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: usize,
    bbox: [f64; 4], // x, y, w, h
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn image_to_png(sample: &DomainSample, path: &Path) -> Result<(), DatasetError> {
    let n = sample.size as u32;
    let mut img = image::RgbImage::new(n, n);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let px = |c: usize| {
            (sample.pixel(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8
        };
        *p = image::Rgb([px(0), px(1), px(2)]);
    }
    img.save(path).map_err(|e| DatasetError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn png_to_image(path: &Path) -> Result<(Vec<f64>, usize), DatasetError> {
    let img = image::open(path)
        .map_err(|e| DatasetError::Malformed { path: path.to_path_buf(), message: e.to_string() })?
        .into_rgb8();
    let n = img.width() as usize;
    if img.height() as usize != n {
        return Err(DatasetError::Malformed {
            path: path.to_path_buf(),
            message: format!("expected square image, got {}x{}", img.width(), img.height()),
        });
    }
    let mut data = vec![0.0f64; 3 * n * n];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * n + y as usize) * n + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Ok((data, n))
}

/// Write one split. Target-domain annotations ARE written (evaluation needs
/// them) but [`read_split`] strips them; only [`read_eval_annotations`]
/// exposes them.
pub fn write_split(
    samples: &[DomainSample],
    categories: &[String],
    dir: &Path,
) -> Result<(), DatasetError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    let mut coco = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: categories
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory { id: i, name: name.clone() })
            .collect(),
    };
    let mut ann_id = 0u64;
    for (i, s) in samples.iter().enumerate() {
        let file_name = format!("{}.png", s.id);
        image_to_png(s, &images_dir.join(&file_name))?;
        coco.images.push(CocoImage {
            id: i as u64,
            file_name,
            width: s.size,
            height: s.size,
        });
        for b in &s.boxes {
            coco.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: i as u64,
                category_id: b.category,
                bbox: [b.rect.x_min, b.rect.y_min, b.rect.width(), b.rect.height()],
            });
            ann_id += 1;
        }
    }
    let path = dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&coco).expect("serializable");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(())
}

fn load_coco(dir: &Path) -> Result<CocoFile, DatasetError> {
    let path = dir.join("annotations.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let coco: CocoFile = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Malformed { path: path.clone(), message: e.to_string() })?;
    for a in &coco.annotations {
        if !(a.bbox[2] > 0.0 && a.bbox[3] > 0.0) {
            return Err(DatasetError::InvalidAnnotation {
                ann_id: a.id,
                image_id: a.image_id,
                message: format!("degenerate bbox {:?} (w/h must be > 0)", a.bbox),
            });
        }
        if a.category_id >= coco.categories.len() {
            return Err(DatasetError::InvalidAnnotation {
                ann_id: a.id,
                image_id: a.image_id,
                message: format!("category_id {} out of range", a.category_id),
            });
        }
    }
    Ok(coco)
}

/// Read one split for training. `domain` controls annotation exposure:
/// target samples come back with empty box lists.
pub fn read_split(dir: &Path, domain: Domain) -> Result<Vec<DomainSample>, DatasetError> {
    let coco = load_coco(dir)?;
    let mut by_image: BTreeMap<u64, Vec<BoxAnnotation>> = BTreeMap::new();
    for a in &coco.annotations {
        by_image.entry(a.image_id).or_default().push(BoxAnnotation {
            rect: BoxCorners::new(
                a.bbox[0],
                a.bbox[1],
                a.bbox[0] + a.bbox[2],
                a.bbox[1] + a.bbox[3],
            ),
            category: a.category_id,
        });
    }
    let mut samples = Vec::with_capacity(coco.images.len());
    for im in &coco.images {
        let (image, size) = png_to_image(&dir.join("images").join(&im.file_name))?;
        let boxes = match domain {
            Domain::Source => by_image.remove(&im.id).unwrap_or_default(),
            Domain::Target => Vec::new(),
        };
        samples.push(DomainSample {
            id: im.file_name.trim_end_matches(".png").to_string(),
            image,
            size,
            boxes,
            domain,
        });
    }
    Ok(samples)
}

/// Evaluation-scoped annotation reader: ground truth of a split keyed the
/// way `mtor_core::eval` expects, without going through training types.
pub fn read_eval_annotations(dir: &Path) -> Result<Vec<GroundTruth>, DatasetError> {
    let coco = load_coco(dir)?;
    Ok(coco
        .annotations
        .iter()
        .map(|a| GroundTruth {
            rect: BoxCorners::new(
                a.bbox[0],
                a.bbox[1],
                a.bbox[0] + a.bbox[2],
                a.bbox[1] + a.bbox[3],
            ),
            category: a.category_id,
            image_id: a.image_id,
        })
        .collect())
}

pub fn category_names(dir: &Path) -> Result<Vec<String>, DatasetError> {
    let coco = load_coco(dir)?;
    let mut cats = coco.categories;
    cats.sort_by_key(|c| c.id);
    Ok(cats.into_iter().map(|c| c.name).collect())
}

/// Generate and persist both splits: clean labeled source plus shifted
/// target. The same scenes are NOT reused across domains; indices
/// `0..source` feed the source split and `source..source+target` the target
/// split, so the domains share the generating distribution but not images.
pub fn generate_dataset(
    spec: &SceneSpec,
    shift: &ShiftParams,
    source: usize,
    target: usize,
    root: &Path,
) -> Result<(), DatasetError> {
    spec.validate()?;
    let mut src = Vec::with_capacity(source);
    for i in 0..source {
        src.push(generate_scene(spec, i as u64)?);
    }
    write_split(&src, &spec.categories, &root.join("source"))?;
    let mut tgt = Vec::with_capacity(target);
    for i in 0..target {
        let idx = (source + i) as u64;
        let clean = generate_scene(spec, idx)?;
        let mut rng = scene_rng(spec.rng_seed, idx, 2);
        tgt.push(apply_domain_shift(&clean, shift, &mut rng));
    }
    write_split(&tgt, &spec.categories, &root.join("target"))?;
    Ok(())
}
