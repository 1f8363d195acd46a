//! Selective search: graph-based over-segmentation followed by greedy
//! hierarchical grouping on color, size and fill similarity.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCxcywh;

pub const HIST_BINS: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectiveSearchConfig {
    /// Segmentation scale; larger values give larger components.
    pub k: f64,
    pub min_size: usize,
    /// Gaussian pre-smoothing; 0 disables.
    pub sigma: f32,
    pub seed: u64,
}

impl Default for SelectiveSearchConfig {
    fn default() -> Self {
        Self {
            k: 200.0,
            min_size: 10,
            sigma: 0.8,
            seed: 0,
        }
    }
}

/// Per-pixel region ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
    pub region_count: usize,
}

/// Pixel box with exclusive upper corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn union(&self, o: &Self) -> Self {
        Self {
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
            x2: self.x2.max(o.x2),
            y2: self.y2.max(o.y2),
        }
    }

    pub fn normalized(&self, width: usize, height: usize) -> BoxCxcywh {
        let (w, h) = (width as f64, height as f64);
        crate::geometry::BoxXyxy::new(
            self.x1 as f64 / w,
            self.y1 as f64 / h,
            self.x2 as f64 / w,
            self.y2 as f64 / h,
        )
        .to_cxcywh()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub size: usize,
    pub bbox: PixelBox,
    /// `3 * HIST_BINS` values; each channel's block sums to 1.
    pub hist: Vec<f64>,
}

impl Region {
    fn merge(&self, o: &Self) -> Self {
        let total = (self.size + o.size) as f64;
        let (wa, wb) = (self.size as f64 / total, o.size as f64 / total);
        Self {
            size: self.size + o.size,
            bbox: self.bbox.union(&o.bbox),
            hist: self.hist.iter().zip(&o.hist).map(|(a, b)| wa * a + wb * b).collect(),
        }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, w: f64) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = w;
    }
}

fn smoothed(image: &RgbImage, sigma: f32) -> Vec<[f64; 3]> {
    let img = if sigma > 0.0 {
        image::imageops::blur(image, sigma)
    } else {
        image.clone()
    };
    img.pixels().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect()
}

fn edges(width: usize, height: usize, px: &[[f64; 3]]) -> Vec<(f64, usize, usize)> {
    let dist = |a: usize, b: usize| {
        px[a]
            .iter()
            .zip(&px[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut out = Vec::with_capacity(2 * width * height);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                out.push((dist(i, i + 1), i, i + 1));
            }
            if y + 1 < height {
                out.push((dist(i, i + width), i, i + width));
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    out
}

/// Minimum-spanning-tree segmentation with threshold `k / |C|`; components
/// smaller than `min_size` are then absorbed along the cheapest edges.
pub fn graph_segment(image: &RgbImage, k: f64, min_size: usize, sigma: f32) -> Result<Segmentation> {
    let (width, height) = (image.width() as usize, image.height() as usize);
    if width == 0 || height == 0 {
        return Err(Error::Empty("image"));
    }
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("segmentation scale k = {k} must be positive")));
    }
    let px = smoothed(image, sigma);
    let edges = edges(width, height, &px);
    let mut ds = DisjointSet::new(width * height);
    for &(w, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra == rb {
            continue;
        }
        let ta = ds.internal[ra] + k / ds.size[ra] as f64;
        let tb = ds.internal[rb] + k / ds.size[rb] as f64;
        if w <= ta.min(tb) {
            ds.union(ra, rb, w);
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra] < min_size || ds.size[rb] < min_size) {
            let w = ds.internal[ra].max(ds.internal[rb]);
            ds.union(ra, rb, w);
        }
    }
    let mut ids = BTreeMap::new();
    let mut labels = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let root = ds.find(i);
        let next = ids.len();
        labels.push(*ids.entry(root).or_insert(next));
    }
    Ok(Segmentation {
        width,
        height,
        labels,
        region_count: ids.len(),
    })
}

/// Initial regions of a segmentation, indexed by region id.
pub fn regions(seg: &Segmentation, image: &RgbImage) -> Vec<Region> {
    let mut sizes = vec![0usize; seg.region_count];
    let mut boxes: Vec<Option<PixelBox>> = vec![None; seg.region_count];
    let mut hist = vec![vec![0.0; 3 * HIST_BINS]; seg.region_count];
    for (i, &r) in seg.labels.iter().enumerate() {
        let (x, y) = (i % seg.width, i / seg.width);
        sizes[r] += 1;
        let pb = PixelBox {
            x1: x,
            y1: y,
            x2: x + 1,
            y2: y + 1,
        };
        boxes[r] = Some(boxes[r].map_or(pb, |b| b.union(&pb)));
        let p = image.get_pixel(x as u32, y as u32);
        for c in 0..3 {
            let bin = (p[c] as usize * HIST_BINS / 256).min(HIST_BINS - 1);
            hist[r][c * HIST_BINS + bin] += 1.0;
        }
    }
    (0..seg.region_count)
        .map(|r| Region {
            size: sizes[r],
            bbox: boxes[r].expect("every region has a pixel"),
            hist: hist[r].iter().map(|v| v / sizes[r] as f64).collect(),
        })
        .collect()
}

/// Mean of color, size and fill similarity, each in `[0, 1]`. Color
/// similarity is the histogram intersection averaged over channels.
pub fn region_similarity(a: &Region, b: &Region, image_size: usize) -> f64 {
    let total = image_size as f64;
    let color = a.hist.iter().zip(&b.hist).map(|(x, y)| x.min(*y)).sum::<f64>() / 3.0;
    let size = 1.0 - (a.size + b.size) as f64 / total;
    let fill = 1.0 - (a.bbox.union(&b.bbox).area() as f64 - a.size as f64 - b.size as f64) / total;
    (color.clamp(0.0, 1.0) + size.clamp(0.0, 1.0) + fill.clamp(0.0, 1.0)) / 3.0
}

fn adjacency(seg: &Segmentation) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    let (w, h) = (seg.width, seg.height);
    for y in 0..h {
        for x in 0..w {
            let a = seg.labels[y * w + x];
            let mut add = |b: usize| {
                if a != b {
                    out.insert((a.min(b), a.max(b)));
                }
            };
            if x + 1 < w {
                add(seg.labels[y * w + x + 1]);
            }
            if y + 1 < h {
                add(seg.labels[(y + 1) * w + x]);
            }
        }
    }
    out
}

/// Every region created while greedily merging the most similar adjacent
/// pair: initial regions first, then one new region per merge.
pub fn merge_hierarchy(seg: &Segmentation, image: &RgbImage) -> Vec<Region> {
    let image_size = seg.width * seg.height;
    let mut all = regions(seg, image);
    let mut alive: BTreeSet<usize> = (0..all.len()).collect();
    let mut sims: BTreeMap<(usize, usize), f64> = adjacency(seg)
        .into_iter()
        .map(|(a, b)| ((a, b), region_similarity(&all[a], &all[b], image_size)))
        .collect();
    while let Some((&(a, b), _)) = sims
        .iter()
        .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(x.0)))
    {
        let merged = all[a].merge(&all[b]);
        let id = all.len();
        all.push(merged);
        alive.remove(&a);
        alive.remove(&b);
        let neighbours: BTreeSet<usize> = sims
            .keys()
            .filter(|(x, y)| [a, b].contains(x) || [a, b].contains(y))
            .flat_map(|&(x, y)| [x, y])
            .filter(|n| *n != a && *n != b)
            .collect();
        sims.retain(|(x, y), _| ![a, b].contains(x) && ![a, b].contains(y));
        for n in neighbours {
            sims.insert((n, id), region_similarity(&all[n], &all[id], image_size));
        }
        alive.insert(id);
    }
    debug_assert!(alive.len() <= 1 || seg.region_count == 0);
    all
}

/// Ranked, de-duplicated proposal boxes in normalized coordinates.
///
/// Region `j` (creation order) gets priority `u_j * (j + 1)` with `u_j`
/// uniform from a seeded generator; lower priority ranks first.
pub fn hierarchical_merge(seg: &Segmentation, image: &RgbImage, seed: u64) -> Vec<BoxCxcywh> {
    let all = merge_hierarchy(seg, image);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranked: Vec<(f64, usize)> = (0..all.len())
        .map(|j| (rng.random::<f64>() * (j + 1) as f64, j))
        .collect();
    ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut seen = HashSet::new();
    ranked
        .into_iter()
        .filter(|&(_, j)| seen.insert(all[j].bbox))
        .map(|(_, j)| all[j].bbox.normalized(seg.width, seg.height))
        .collect()
}

/// Segmentation followed by hierarchical grouping.
pub fn selective_search(image: &RgbImage, cfg: &SelectiveSearchConfig) -> Result<Vec<BoxCxcywh>> {
    let seg = graph_segment(image, cfg.k, cfg.min_size, cfg.sigma)?;
    Ok(hierarchical_merge(&seg, image, cfg.seed))
}
