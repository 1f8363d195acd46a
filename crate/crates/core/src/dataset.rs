//! Synthetic shape scenes, COCO-subset ingestion and the crop-resize view
//! augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::{imageops, Rgb, RgbImage};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxCxcywh, BoxXyxy};
use crate::pseudo_label::{CropTransform, Target};
use crate::tensor::Tensor;

pub const ARCHETYPES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    fn of_class(class: usize) -> Shape {
        [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross][(class - 1) % 4]
    }

    /// Whether normalized box coordinates `(u, v)` fall inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self {
            Shape::Square => true,
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
            Shape::Cross => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
        }
    }
}

/// Class names of the eight archetypes, 1-based.
pub fn class_name(class: usize) -> String {
    let family = if class <= 4 { "red" } else { "blue" };
    let shape = match Shape::of_class(class) {
        Shape::Circle => "circle",
        Shape::Square => "square",
        Shape::Triangle => "triangle",
        Shape::Cross => "cross",
    };
    format!("{family}_{shape}")
}

fn class_color(class: usize) -> [u8; 3] {
    const RED: [[u8; 3]; 4] = [[220, 50, 40], [230, 110, 30], [200, 40, 120], [240, 170, 40]];
    const BLUE: [[u8; 3]; 4] = [[40, 80, 220], [30, 170, 200], [110, 60, 210], [40, 190, 120]];
    if class <= 4 {
        RED[class - 1]
    } else {
        BLUE[class - 5]
    }
}

/// An image with every object it contains, labeled with its true class.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub id: u64,
    pub raster: RgbImage,
    pub annotations: Vec<Target>,
}

impl SceneImage {
    /// HWC tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = self.raster.dimensions();
        let data = self.raster.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new(vec![h as usize, w as usize, 3], data).expect("raster size")
    }

    /// Annotations visible when only `known` classes are labeled.
    pub fn training_targets(&self, known: &BTreeSet<usize>) -> Vec<Target> {
        self.annotations
            .iter()
            .filter(|t| known.contains(&t.label))
            .copied()
            .collect()
    }

    /// Indices into `annotations` of [`Self::training_targets`].
    pub fn training_indices(&self, known: &BTreeSet<usize>) -> Vec<usize> {
        (0..self.annotations.len())
            .filter(|&i| known.contains(&self.annotations[i].label))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train: Vec<u64>,
    pub eval: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    /// `(id, name)` of every class.
    pub classes: Vec<(usize, String)>,
    /// Classes introduced by each task.
    pub groups: Vec<Vec<usize>>,
    pub tasks: Vec<TaskSplit>,
}

impl SplitManifest {
    /// Classes known after task `t` (0-based).
    pub fn known_after(&self, t: usize) -> BTreeSet<usize> {
        self.groups[..=t].iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub manifest: SplitManifest,
    pub images: BTreeMap<u64, SceneImage>,
}

impl Dataset {
    pub fn image(&self, id: u64) -> Result<&SceneImage> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown image id {id}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub groups: Vec<Vec<usize>>,
    pub train_images_per_task: usize,
    pub eval_images: usize,
    pub image_size: u32,
    pub max_objects: usize,
    pub min_object_px: u32,
    pub max_object_px: u32,
    /// Half-width of the uniform background noise, in 8-bit levels.
    pub noise: u8,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            groups: vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]],
            train_images_per_task: 400,
            eval_images: 100,
            image_size: 64,
            max_objects: 4,
            min_object_px: 12,
            max_object_px: 24,
            noise: 6,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups.len() < 2 {
            return Err(Error::InvalidArgument("at least two class groups are required".into()));
        }
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::InvalidArgument("empty class group".into()));
            }
            for &c in g {
                if !(1..=ARCHETYPES).contains(&c) {
                    return Err(Error::InvalidArgument(format!("class {c} outside 1..={ARCHETYPES}")));
                }
                if !seen.insert(c) {
                    return Err(Error::InvalidArgument(format!("class {c} appears in two groups")));
                }
            }
        }
        if self.max_objects == 0 || self.min_object_px == 0 || self.min_object_px > self.max_object_px {
            return Err(Error::InvalidArgument("invalid object count or size range".into()));
        }
        if self.max_object_px + 4 > self.image_size {
            return Err(Error::InvalidArgument("objects do not fit the image".into()));
        }
        Ok(())
    }
}

/// Nominal pixel box of a rendered object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Placement {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

impl Placement {
    /// Disjoint with at least `gap` pixels between the boxes.
    fn separated(&self, o: &Placement, gap: u32) -> bool {
        self.x + self.w + gap <= o.x || o.x + o.w + gap <= self.x || self.y + self.h + gap <= o.y || o.y + o.h + gap <= self.y
    }

    fn normalized(&self, size: u32) -> BoxCxcywh {
        let s = size as f64;
        BoxCxcywh::new(
            (self.x as f64 + self.w as f64 / 2.0) / s,
            (self.y as f64 + self.h as f64 / 2.0) / s,
            self.w as f64 / s,
            self.h as f64 / s,
        )
    }
}

fn render(raster: &mut RgbImage, class: usize, p: &Placement) {
    let shape = Shape::of_class(class);
    let color = Rgb(class_color(class));
    for py in p.y..p.y + p.h {
        for px in p.x..p.x + p.w {
            let u = (px - p.x) as f64 + 0.5;
            let v = (py - p.y) as f64 + 0.5;
            if shape.contains(u / p.w as f64, v / p.h as f64) {
                raster.put_pixel(px, py, color);
            }
        }
    }
}

/// One scene: the first object is drawn from `first`, the rest from `pool`.
/// Draws the object count unless `fixed` gives it; placement can still fall
/// short in crowded images.
fn scene(cfg: &SyntheticConfig, id: u64, first: &[usize], pool: &[usize], fixed: Option<usize>) -> SceneImage {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id);
    let s = cfg.image_size;
    let base = 128i32;
    let noise = cfg.noise as i32;
    let mut raster = RgbImage::from_fn(s, s, |_, _| {
        let v = (base + rng.random_range(-noise..=noise)).clamp(0, 255) as u8;
        Rgb([v, v, v])
    });
    let count = fixed.unwrap_or_else(|| rng.random_range(1..=cfg.max_objects));
    let mut placed: Vec<Placement> = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..count {
        let classes = if i == 0 { first } else { pool };
        let class = classes[rng.random_range(0..classes.len())];
        let mut spot = None;
        for _ in 0..100 {
            let w = rng.random_range(cfg.min_object_px..=cfg.max_object_px);
            let h = rng.random_range(cfg.min_object_px..=cfg.max_object_px);
            let cand = Placement {
                x: rng.random_range(1..s - w),
                y: rng.random_range(1..s - h),
                w,
                h,
            };
            if placed.iter().all(|p| p.separated(&cand, 3)) {
                spot = Some(cand);
                break;
            }
        }
        let Some(p) = spot else { break };
        render(&mut raster, class, &p);
        placed.push(p);
        annotations.push(Target::annotated(class, p.normalized(s)));
    }
    SceneImage {
        id,
        raster,
        annotations,
    }
}

/// Deterministic synthetic benchmark. Training images of task `t` contain at
/// least one object of group `t` and otherwise objects of any group, so both
/// earlier and later classes appear there unannotated. Evaluation images draw
/// from every group and are shared by all tasks.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut images = BTreeMap::new();
    let mut tasks = Vec::new();
    let mut next_id = 0u64;
    let all: Vec<usize> = cfg.groups.iter().flatten().copied().collect();
    for t in 0..cfg.groups.len() {
        let mut train = Vec::new();
        for _ in 0..cfg.train_images_per_task {
            let img = scene(cfg, next_id, &cfg.groups[t], &all, None);
            train.push(img.id);
            images.insert(img.id, img);
            next_id += 1;
        }
        tasks.push(TaskSplit { train, eval: Vec::new() });
    }
    let mut eval = Vec::new();
    for _ in 0..cfg.eval_images {
        let img = scene(cfg, next_id, &all, &all, None);
        eval.push(img.id);
        images.insert(img.id, img);
        next_id += 1;
    }
    for t in &mut tasks {
        t.eval = eval.clone();
    }
    let mut classes: Vec<(usize, String)> = all.iter().map(|&c| (c, class_name(c))).collect();
    classes.sort();
    Ok(Dataset {
        manifest: SplitManifest {
            classes,
            groups: cfg.groups.clone(),
            tasks,
        },
        images,
    })
}

/// `n` scenes with exactly `objects` shapes each, classes drawn from every
/// group. Scenes where placement falls short are skipped.
pub fn fixed_count_scenes(cfg: &SyntheticConfig, n: usize, objects: usize) -> Result<Vec<SceneImage>> {
    cfg.validate()?;
    if objects == 0 {
        return Err(Error::InvalidArgument("scenes need at least one object".into()));
    }
    let all: Vec<usize> = cfg.groups.iter().flatten().copied().collect();
    let mut out = Vec::with_capacity(n);
    for id in 0..(n as u64) * 100 {
        if out.len() == n {
            break;
        }
        let img = scene(cfg, id, &all, &all, Some(objects));
        if img.annotations.len() == objects {
            out.push(img);
        }
    }
    if out.len() < n {
        return Err(Error::InvalidArgument(format!("{objects} objects do not fit the image")));
    }
    Ok(out)
}

/// An augmented view and its relation to the source image.
#[derive(Clone, Debug)]
pub struct AugmentedView {
    pub image: SceneImage,
    pub transform: CropTransform,
    /// For each surviving annotation of the view, its index in the source.
    pub kept: Vec<usize>,
}

/// Random crop keeping 60-100% of each side, resized back to full size.
pub fn augment_view(image: &SceneImage, seed: u64) -> AugmentedView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = image.raster.dimensions();
    let cw = rng.random_range((w * 3).div_ceil(5)..=w);
    let ch = rng.random_range((h * 3).div_ceil(5)..=h);
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    crop_view(image, x0, y0, cw, ch)
}

/// Crops the pixel window `(x0, y0, cw, ch)` and resizes it to the source size.
pub fn crop_view(image: &SceneImage, x0: u32, y0: u32, cw: u32, ch: u32) -> AugmentedView {
    let (w, h) = image.raster.dimensions();
    let transform = CropTransform {
        x0: x0 as f64 / w as f64,
        y0: y0 as f64 / h as f64,
        w: cw as f64 / w as f64,
        h: ch as f64 / h as f64,
    };
    let raster = if (x0, y0, cw, ch) == (0, 0, w, h) {
        image.raster.clone()
    } else {
        let cropped = imageops::crop_imm(&image.raster, x0, y0, cw, ch).to_image();
        imageops::resize(&cropped, w, h, imageops::FilterType::Triangle)
    };
    let mut annotations = Vec::new();
    let mut kept = Vec::new();
    for (i, t) in image.annotations.iter().enumerate() {
        if let Some(b) = transform.apply(&t.bbox) {
            annotations.push(Target { bbox: b, ..*t });
            kept.push(i);
        }
    }
    AugmentedView {
        image: SceneImage {
            id: image.id,
            raster,
            annotations,
        },
        transform,
        kept,
    }
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Pixel `[x, y, w, h]` to a normalized center box, clipped to the image.
/// The flag reports whether clipping changed the box.
pub fn coco_box_to_cxcywh(bbox: [f64; 4], width: f64, height: f64) -> (BoxCxcywh, bool) {
    let raw = BoxXyxy::new(
        bbox[0] / width,
        bbox[1] / height,
        (bbox[0] + bbox[2]) / width,
        (bbox[1] + bbox[3]) / height,
    );
    let clipped = raw.clip_unit();
    (clipped.to_cxcywh(), clipped != raw)
}

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Reads a COCO annotation file. Rasters are loaded from `file_name` relative
/// to the document and resized to `image_size`. Category ids are remapped to
/// `1..=C` in ascending order. Images without annotations are skipped.
pub fn load_coco_subset(path: &Path, image_size: u32) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingPrerequisite(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let doc: CocoDocument = serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));

    let mut cat_ids: Vec<u64> = doc.categories.iter().map(|c| c.id).collect();
    cat_ids.sort_unstable();
    cat_ids.dedup();
    if cat_ids.len() != doc.categories.len() {
        return Err(malformed(path, "duplicate category ids"));
    }
    let remap: BTreeMap<u64, usize> = cat_ids.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
    let mut classes: Vec<(usize, String)> = doc.categories.iter().map(|c| (remap[&c.id], c.name.clone())).collect();
    classes.sort();

    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for (i, a) in doc.annotations.iter().enumerate() {
        if !remap.contains_key(&a.category_id) {
            return Err(malformed(path, format!("annotations[{i}]: unknown category {}", a.category_id)));
        }
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut images = BTreeMap::new();
    for (i, im) in doc.images.iter().enumerate() {
        if im.width == 0 || im.height == 0 {
            return Err(malformed(path, format!("images[{i}]: zero size")));
        }
        let Some(anns) = by_image.get(&im.id) else {
            warn!("image {} has no annotations; skipped", im.id);
            continue;
        };
        let mut annotations = Vec::new();
        for a in anns {
            let (b, clipped) = coco_box_to_cxcywh(a.bbox, im.width as f64, im.height as f64);
            if clipped {
                warn!("annotation {} exceeds the bounds of image {}; clipped", a.id, im.id);
            }
            if b.area() <= 0.0 {
                warn!("annotation {} is empty after clipping; dropped", a.id);
                continue;
            }
            annotations.push(Target::annotated(remap[&a.category_id], b));
        }
        let raster = image::open(dir.join(&im.file_name))?.to_rgb8();
        let raster = if raster.dimensions() == (image_size, image_size) {
            raster
        } else {
            imageops::resize(&raster, image_size, image_size, imageops::FilterType::Triangle)
        };
        images.insert(
            im.id,
            SceneImage {
                id: im.id,
                raster,
                annotations,
            },
        );
    }
    for id in by_image.keys() {
        if !doc.images.iter().any(|im| im.id == *id) {
            return Err(malformed(path, format!("annotations reference missing image {id}")));
        }
    }
    let ids: Vec<u64> = images.keys().copied().collect();
    Ok(Dataset {
        manifest: SplitManifest {
            groups: vec![classes.iter().map(|c| c.0).collect()],
            classes,
            tasks: vec![TaskSplit {
                train: ids,
                eval: Vec::new(),
            }],
        },
        images,
    })
}

/// Writes `images` as PNG files plus a COCO annotation document `path`.
pub fn export_coco(path: &Path, images: &[&SceneImage], classes: &[(usize, String)]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut doc = CocoDocument {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: classes
            .iter()
            .map(|(id, name)| CocoCategory {
                id: *id as u64,
                name: name.clone(),
            })
            .collect(),
    };
    for img in images {
        let (w, h) = img.raster.dimensions();
        let file_name = format!("{:06}.png", img.id);
        img.raster.save(dir.join(&file_name))?;
        doc.images.push(CocoImage {
            id: img.id,
            file_name,
            width: w,
            height: h,
        });
        for t in &img.annotations {
            let b = t.bbox.to_xyxy();
            let bbox = [
                b.x1 * w as f64,
                b.y1 * h as f64,
                (b.x2 - b.x1) * w as f64,
                (b.y2 - b.y1) * h as f64,
            ];
            doc.annotations.push(CocoAnnotation {
                id: doc.annotations.len() as u64 + 1,
                image_id: img.id,
                category_id: t.label as u64,
                bbox,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
            });
        }
    }
    fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou_cxcywh;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_images_per_task: 12,
            eval_images: 8,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.images, b.images);
        assert_eq!(
            serde_json::to_string(&a.manifest).unwrap(),
            serde_json::to_string(&b.manifest).unwrap()
        );
    }

    #[test]
    fn task_annotations_follow_groups() {
        let d = generate_synthetic(&small()).unwrap();
        let known = d.manifest.known_after(0);
        for id in &d.manifest.tasks[0].train {
            let img = d.image(*id).unwrap();
            let visible = img.training_targets(&known);
            assert!(!visible.is_empty());
            assert!(visible.iter().all(|t| (1..=4).contains(&t.label)));
        }
        for t in &d.manifest.tasks {
            assert!(t.train.iter().all(|id| !t.eval.contains(id)));
        }
        // Later-task classes show up unannotated in task-1 training images.
        let hidden = d.manifest.tasks[0]
            .train
            .iter()
            .flat_map(|id| d.images[id].annotations.iter())
            .filter(|t| t.label > 4)
            .count();
        assert!(hidden > 0);
    }

    #[test]
    fn overlapping_groups_rejected() {
        let cfg = SyntheticConfig {
            groups: vec![vec![1, 2], vec![2, 3]],
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rendered_extent_matches_box() {
        let d = generate_synthetic(&small()).unwrap();
        for img in d.images.values() {
            for t in &img.annotations {
                let color = Rgb(class_color(t.label));
                let b = t.bbox.to_xyxy();
                let s = 64.0;
                let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0, 0);
                for y in (b.y1 * s).round() as u32..(b.y2 * s).round() as u32 {
                    for x in (b.x1 * s).round() as u32..(b.x2 * s).round() as u32 {
                        if *img.raster.get_pixel(x, y) == color {
                            x1 = x1.min(x);
                            y1 = y1.min(y);
                            x2 = x2.max(x + 1);
                            y2 = y2.max(y + 1);
                        }
                    }
                }
                let extent = BoxXyxy::new(x1 as f64 / s, y1 as f64 / s, x2 as f64 / s, y2 as f64 / s).to_cxcywh();
                assert!(iou_cxcywh(&extent, &t.bbox) >= 0.9, "class {} {:?}", t.label, t.bbox);
            }
            for (i, a) in img.annotations.iter().enumerate() {
                for b in &img.annotations[i + 1..] {
                    assert!(iou_cxcywh(&a.bbox, &b.bbox) < 0.1);
                }
            }
        }
    }

    fn fixture() -> SceneImage {
        let mut raster = RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]));
        let left = Placement { x: 4, y: 8, w: 16, h: 16 };
        let right = Placement { x: 44, y: 30, w: 16, h: 16 };
        render(&mut raster, 2, &left);
        render(&mut raster, 6, &right);
        SceneImage {
            id: 7,
            raster,
            annotations: vec![
                Target::annotated(2, left.normalized(64)),
                Target::annotated(6, right.normalized(64)),
            ],
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let img = fixture();
        let v = crop_view(&img, 0, 0, 64, 64);
        assert_eq!(v.transform, CropTransform::identity());
        assert_eq!(v.image, img);
        assert_eq!(v.kept, vec![0, 1]);
    }

    #[test]
    fn left_half_crop_drops_right_objects() {
        let v = crop_view(&fixture(), 0, 0, 32, 64);
        assert_eq!(v.kept, vec![0]);
        assert_eq!(v.image.annotations.len(), 1);
    }

    #[test]
    fn known_window_remaps_boxes() {
        // Window x in [4, 52), y in [0, 48): scale 64/48 on both axes.
        let v = crop_view(&fixture(), 4, 0, 48, 48);
        let b = v.image.annotations[0].bbox;
        // Left box: x in [4, 20) -> [0, 16) * 4/3; y in [8, 24) -> * 4/3.
        let expect = BoxCxcywh::new(8.0 / 48.0, 16.0 / 48.0, 16.0 / 48.0, 16.0 / 48.0);
        for (x, y) in b.to_array().iter().zip(expect.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
        // Right box: x in [44, 60) -> [40, 56) of 48, clipped to [40, 48): half survives.
        let r = v.image.annotations[1].bbox;
        assert!((r.w - 8.0 / 48.0).abs() < 1e-12);
        let back = v.transform.invert(&b);
        for (x, y) in back.to_array().iter().zip(fixture().annotations[0].bbox.to_array()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn augment_is_seeded_and_bounded() {
        let img = fixture();
        for seed in 0..20 {
            let a = augment_view(&img, seed);
            let b = augment_view(&img, seed);
            assert_eq!(a.image, b.image);
            assert!(a.transform.w >= 0.6 && a.transform.h >= 0.6);
            assert!(a.transform.x0 + a.transform.w <= 1.0 + 1e-12);
            assert_eq!(a.image.raster.dimensions(), (64, 64));
            for (t, &i) in a.image.annotations.iter().zip(&a.kept) {
                assert!(t.bbox.is_normalized());
                assert_eq!(t.label, img.annotations[i].label);
            }
        }
    }

    #[test]
    fn coco_conversion_example() {
        let (b, clipped) = coco_box_to_cxcywh([10.0, 20.0, 30.0, 40.0], 100.0, 200.0);
        assert!(!clipped);
        for (x, y) in b.to_array().iter().zip([0.25, 0.2, 0.3, 0.2]) {
            assert!((x - y).abs() < 1e-12);
        }
        let (b, clipped) = coco_box_to_cxcywh([90.0, 0.0, 20.0, 10.0], 100.0, 100.0);
        assert!(clipped);
        assert!((b.w - 0.1).abs() < 1e-12);
    }

    #[test]
    fn coco_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&small()).unwrap();
        let imgs: Vec<&SceneImage> = d.images.values().take(5).collect();
        let path = dir.path().join("ann.json");
        export_coco(&path, &imgs, &d.manifest.classes).unwrap();
        let back = load_coco_subset(&path, 64).unwrap();
        assert_eq!(back.images.len(), 5);
        for img in imgs {
            let other = &back.images[&img.id];
            assert_eq!(other.raster, img.raster);
            assert_eq!(other.annotations.len(), img.annotations.len());
            for (a, b) in other.annotations.iter().zip(&img.annotations) {
                assert_eq!(a.label, b.label);
                for (x, y) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn coco_errors_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\"images\": [}").unwrap();
        match load_coco_subset(&path, 64) {
            Err(Error::Malformed { message, .. }) => assert!(message.contains("line 1")),
            other => panic!("{other:?}"),
        }
        RgbImage::new(10, 10).save(dir.path().join("a.png")).unwrap();
        fs::write(
            &path,
            r#"{"images":[{"id":1,"file_name":"a.png","width":10,"height":10}],"annotations":[],"categories":[{"id":3,"name":"x"}]}"#,
        )
        .unwrap();
        let d = load_coco_subset(&path, 64).unwrap();
        assert!(d.images.is_empty());
        assert_eq!(d.manifest.classes, vec![(1, "x".to_string())]);
    }
}
