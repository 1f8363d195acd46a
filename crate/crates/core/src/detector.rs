//! Toy query-based detector.
//!
//! Backbone: two strided patch convolutions (4x4 then 2x2) over an RGB raster,
//! giving an 8x8 grid for 64x64 inputs. A linear projection maps the grid to
//! the model width `d`; the result `f` is what feature distillation compares.
//! One cross-attention layer lets `N` learned queries read the grid. Each
//! query owns a learned reference point and its attention logits carry a
//! penalty proportional to the squared distance between that point and each
//! grid cell, so a query mostly looks at its own neighbourhood. Boxes are
//! predicted relative to the reference point.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::BoxCxcywh;
use crate::tensor::Tensor;

/// Initial bias of the class and objectness heads, `-ln(99)`.
pub const PRIOR_BIAS: f64 = -4.595_119_850_134_59;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    Projection,
    Decoder,
    ClassHead,
    BinaryHead,
    RegressionHead,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Backbone,
        Component::Projection,
        Component::Decoder,
        Component::ClassHead,
        Component::BinaryHead,
        Component::RegressionHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Projection => "projection",
            Component::Decoder => "decoder",
            Component::ClassHead => "class_head",
            Component::BinaryHead => "binary_head",
            Component::RegressionHead => "regression_head",
        }
    }

    fn of(param: &str) -> Component {
        let prefix = param.split('.').next().unwrap_or_default();
        Component::ALL
            .into_iter()
            .find(|c| c.name() == prefix)
            .unwrap_or_else(|| panic!("parameter {param} has no component prefix"))
    }
}

/// Which components receive optimizer updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezePolicy {
    pub backbone: bool,
    pub projection: bool,
    pub decoder: bool,
    pub class_head: bool,
    pub binary_head: bool,
    pub regression_head: bool,
}

impl FreezePolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            backbone: true,
            projection: true,
            decoder: true,
            class_head: true,
            binary_head: true,
            regression_head: true,
        }
    }

    /// Open-world fine-tuning: only the class-specific parts and the
    /// objectness head train.
    pub fn stage2() -> Self {
        Self {
            backbone: true,
            decoder: true,
            regression_head: true,
            ..Self::none()
        }
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        match c {
            Component::Backbone => self.backbone,
            Component::Projection => self.projection,
            Component::Decoder => self.decoder,
            Component::ClassHead => self.class_head,
            Component::BinaryHead => self.binary_head,
            Component::RegressionHead => self.regression_head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Square input side in pixels; must be a multiple of 8.
    pub image_size: usize,
    pub d_model: usize,
    pub n_queries: usize,
    pub backbone_channels: [usize; 2],
    pub ffn_dim: usize,
    pub regression_hidden: usize,
    /// Strength of the distance penalty in attention logits.
    pub locality: f64,
    pub init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            d_model: 32,
            n_queries: 20,
            backbone_channels: [16, 32],
            ffn_dim: 64,
            regression_hidden: 32,
            locality: 40.0,
            init_seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "image_size {} is not a positive multiple of 8",
                self.image_size
            )));
        }
        if self.d_model < 4 || !self.d_model.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not a multiple of 4",
                self.d_model
            )));
        }
        if self.n_queries == 0 {
            return Err(Error::InvalidArgument("n_queries must be positive".into()));
        }
        Ok(())
    }

    /// Side of the feature grid.
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }
}

/// One query's decoded output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `n_known + 1` logits, the unknown class last.
    pub class_logits: Vec<f64>,
    pub binary_logit: f64,
    pub bbox: BoxCxcywh,
    pub query_feature: Vec<f64>,
}

/// Head outputs of one image as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `N x (n + 1)`.
    pub class_logits: Var,
    /// `N x 1`.
    pub binary_logits: Var,
    /// `N x 4`, `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `N x d`.
    pub query_features: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub heads: HeadVars,
    /// Projected feature grid, `grid^2 x d`.
    pub features: Var,
}

/// All detector weights, keyed `component.name`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub config: DetectorConfig,
    /// Known-class count; the class head has `n_known + 1` outputs.
    pub n_known: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl DetectorParams {
    pub fn new(config: DetectorConfig, n_known: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.d_model;
        let [c1, c2] = config.backbone_channels;
        let n = config.n_queries;
        let h = config.regression_hidden;
        let f = config.ffn_dim;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let lin = |fan_in: usize| (1.0 / fan_in as f64).sqrt();

        let mut t = BTreeMap::new();
        let mut put = |name: &str, v: Tensor| {
            t.insert(name.to_string(), v);
        };
        put("backbone.conv1_w", normal(&mut rng, &[PATCH_INPUTS, c1], he(PATCH_INPUTS)));
        put("backbone.conv1_b", Tensor::zeros(&[1, c1]));
        put("backbone.conv2_w", normal(&mut rng, &[4 * c1, c2], he(4 * c1)));
        put("backbone.conv2_b", Tensor::zeros(&[1, c2]));
        put("projection.w", normal(&mut rng, &[c2, d], lin(c2)));
        put("projection.b", Tensor::zeros(&[1, d]));
        put("decoder.query_embed", normal(&mut rng, &[n, d], 0.1));
        put("decoder.reference", reference_grid(n));
        put("decoder.w_q", normal(&mut rng, &[d, d], lin(d)));
        put("decoder.w_k", normal(&mut rng, &[d, d], lin(d)));
        put("decoder.w_v", normal(&mut rng, &[d, d], lin(d)));
        put("decoder.w_o", normal(&mut rng, &[d, d], lin(d)));
        put("decoder.ffn1_w", normal(&mut rng, &[d, f], he(d)));
        put("decoder.ffn1_b", Tensor::zeros(&[1, f]));
        put("decoder.ffn2_w", normal(&mut rng, &[f, d], lin(f)));
        put("decoder.ffn2_b", Tensor::zeros(&[1, d]));
        put("class_head.w", normal(&mut rng, &[d, n_known + 1], lin(d)));
        put("class_head.b", Tensor::full(&[1, n_known + 1], PRIOR_BIAS));
        put("binary_head.w", normal(&mut rng, &[d, 1], lin(d)));
        put("binary_head.b", Tensor::full(&[1, 1], PRIOR_BIAS));
        put("regression_head.w1", normal(&mut rng, &[d, h], he(d)));
        put("regression_head.b1", Tensor::zeros(&[1, h]));
        put("regression_head.w2", normal(&mut rng, &[h, h], he(h)));
        put("regression_head.b2", Tensor::zeros(&[1, h]));
        put("regression_head.w3", normal(&mut rng, &[h, 4], 1e-3));
        // Default size a quarter of the image side.
        put(
            "regression_head.b3",
            Tensor::row_vector(vec![0.0, 0.0, logit(0.25), logit(0.25)]),
        );
        Ok(Self {
            config,
            n_known,
            tensors: t,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn class_count(&self) -> usize {
        self.n_known
    }

    /// SHA-256 over the raw bytes of one component's tensors.
    pub fn component_hash(&self, c: Component) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if Component::of(name) == c {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers every tensor on `tape`; frozen components become constants.
    pub fn bind(&self, tape: &mut Tape, policy: &FreezePolicy) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let trainable = !policy.is_frozen(Component::of(name));
                (name.clone(), tape.leaf(t.clone(), trainable))
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds classes to the class head. Existing columns are copied, the
    /// unknown column stays last, new weights are drawn from `N(0, 0.01^2)`.
    pub fn expand_class_head(&self, new_class_count: usize, seed: u64) -> Result<Self> {
        if new_class_count <= self.n_known {
            return Err(Error::ClassCountRegression {
                from: self.n_known,
                to: new_class_count,
            });
        }
        let d = self.config.d_model;
        let old_w = self.get("class_head.w");
        let old_b = self.get("class_head.b");
        let (old_c, new_c) = (self.n_known + 1, new_class_count + 1);
        let added = new_class_count - self.n_known;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = normal(&mut rng, &[d, added], 0.01);

        let mut w = Vec::with_capacity(d * new_c);
        for i in 0..d {
            let row = old_w.row(i);
            w.extend_from_slice(&row[..old_c - 1]);
            w.extend_from_slice(fresh.row(i));
            w.push(row[old_c - 1]);
        }
        let mut b = old_b.data()[..old_c - 1].to_vec();
        b.extend(std::iter::repeat_n(PRIOR_BIAS, added));
        b.push(old_b.data()[old_c - 1]);

        let mut out = self.clone();
        out.n_known = new_class_count;
        out.tensors.insert("class_head.w".into(), Tensor::new(vec![d, new_c], w)?);
        out.tensors.insert("class_head.b".into(), Tensor::row_vector(b));
        Ok(out)
    }

    /// Deep copy used as a frozen teacher.
    pub fn snapshot_teacher(&self) -> Teacher {
        Teacher { params: self.clone() }
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, image: &Tensor) -> Result<(Vec<Prediction>, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &FreezePolicy::all());
        let out = forward(&mut tape, self, &bound, image)?;
        let preds = to_predictions(&tape, &out.heads);
        Ok((preds, tape.value(out.features).clone()))
    }

    /// Writes a JSON checkpoint stamped with the run's config hash and seed.
    pub fn save(&self, path: &Path, config_hash: &str, seed: u64) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            params: self.clone(),
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    /// Loads a checkpoint written with the same config hash.
    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                message: format!("unsupported checkpoint version {}", ck.version),
            });
        }
        if ck.config_hash != expected_hash {
            return Err(Error::ConfigHashMismatch {
                expected: expected_hash.to_string(),
                found: ck.config_hash,
            });
        }
        ck.params.check_shapes(path)?;
        Ok(ck.params)
    }

    fn check_shapes(&self, path: &Path) -> Result<()> {
        let fresh = Self::new(self.config.clone(), self.n_known)?;
        for (name, t) in &fresh.tensors {
            let ok = self
                .tensors
                .get(name)
                .is_some_and(|v| v.shape() == t.shape() && v.len() == t.len() && v.all_finite());
            if !ok {
                return Err(Error::Malformed {
                    path: path.display().to_string(),
                    message: format!("parameter {name} missing, misshapen or non-finite"),
                });
            }
        }
        if fresh.tensors.len() != self.tensors.len() {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                message: "unexpected parameters".into(),
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: String,
    seed: u64,
    params: DetectorParams,
}

/// Reference points on a near-square lattice, stored as logits.
fn reference_grid(n: usize) -> Tensor {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        data.push(logit((c as f64 + 0.5) / cols as f64));
        data.push(logit((r as f64 + 0.5) / rows as f64));
    }
    Tensor::new(vec![n, 2], data).expect("shape")
}

/// Frozen copy of a previous-task detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    params: DetectorParams,
}

impl Teacher {
    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    pub fn predict(&self, image: &Tensor) -> Result<(Vec<Prediction>, Tensor)> {
        self.params.predict(image)
    }
}

/// Tape handles for one bound parameter set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Substitutes the handle of one parameter.
    pub fn set(&mut self, name: &str, v: Var) {
        *self.vars.get_mut(name).expect("known parameter") = v;
    }

    /// Gradients of trainable parameters, keyed like [`DetectorParams::tensors`].
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Stem channels per pixel: RGB, then the absolute deviation of each channel
/// from its image mean.
const STEM_CHANNELS: usize = 6;
const PATCH_INPUTS: usize = 16 * STEM_CHANNELS;

fn stem(image: &Tensor) -> Tensor {
    let px = image.len() / 3;
    let data = image.data();
    let mut mean = [0.0; 3];
    for (i, v) in data.iter().enumerate() {
        mean[i % 3] += v / px as f64;
    }
    let mut out = Vec::with_capacity(px * STEM_CHANNELS);
    for rgb in data.chunks(3) {
        out.extend_from_slice(rgb);
        out.extend((0..3).map(|c| (rgb[c] - mean[c]).abs()));
    }
    Tensor::new(vec![px, STEM_CHANNELS], out).expect("stem shape")
}

fn conv1_indices(size: usize) -> Vec<usize> {
    let g = size / 4;
    let mut idx = Vec::with_capacity(g * g * PATCH_INPUTS);
    for gy in 0..g {
        for gx in 0..g {
            for dy in 0..4 {
                for dx in 0..4 {
                    let pix = (gy * 4 + dy) * size + gx * 4 + dx;
                    idx.extend((0..STEM_CHANNELS).map(|c| pix * STEM_CHANNELS + c));
                }
            }
        }
    }
    idx
}

fn conv2_indices(g1: usize, ch: usize) -> Vec<usize> {
    let g = g1 / 2;
    let mut idx = Vec::with_capacity(g * g * 4 * ch);
    for y in 0..g {
        for x in 0..g {
            for dy in 0..2 {
                for dx in 0..2 {
                    let row = (2 * y + dy) * g1 + 2 * x + dx;
                    idx.extend((0..ch).map(|c| row * ch + c));
                }
            }
        }
    }
    idx
}

/// Cell centers of a `g x g` grid, row-major, as `g^2 x 2` `(x, y)`.
pub fn grid_positions(g: usize) -> Vec<[f64; 2]> {
    (0..g * g)
        .map(|i| [((i % g) as f64 + 0.5) / g as f64, ((i / g) as f64 + 0.5) / g as f64])
        .collect()
}

/// 2-D sinusoidal encoding: the first half of the channels encode x, the
/// second half y.
fn positional_encoding(g: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let mut data = Vec::with_capacity(g * g * d);
    for p in grid_positions(g) {
        for coord in p {
            for k in 0..quarter {
                let a = coord * std::f64::consts::PI * 2f64.powf(k as f64 / 2.0);
                data.push(a.sin());
                data.push(a.cos());
            }
        }
    }
    Tensor::new(vec![g * g, d], data).expect("shape")
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Forward pass of one `size x size x 3` image (HWC, values in `[0, 1]`).
pub fn forward(tape: &mut Tape, params: &DetectorParams, bound: &BoundParams, image: &Tensor) -> Result<ForwardVars> {
    let cfg = &params.config;
    let s = cfg.image_size;
    if image.shape() != [s, s, 3] {
        return Err(Error::shape("forward", format!("image {:?}, expected [{s}, {s}, 3]", image.shape())));
    }
    let d = cfg.d_model;
    let n = cfg.n_queries;
    let [c1, _] = cfg.backbone_channels;
    let g1 = s / 4;
    let g = cfg.grid();
    let p = |name: &str| bound.var(name);

    let x = tape.constant(stem(image));
    let patches = tape.gather(x, conv1_indices(s), vec![g1 * g1, PATCH_INPUTS])?;
    let h1 = linear(tape, patches, p("backbone.conv1_w"), p("backbone.conv1_b"))?;
    let h1 = tape.relu(h1);
    let patches2 = tape.gather(h1, conv2_indices(g1, c1), vec![g * g, 4 * c1])?;
    let h2 = linear(tape, patches2, p("backbone.conv2_w"), p("backbone.conv2_b"))?;
    let h2 = tape.relu(h2);
    let features = linear(tape, h2, p("projection.w"), p("projection.b"))?;

    let pe = tape.constant(positional_encoding(g, d));
    let memory = tape.add(features, pe)?;
    let keys = tape.matmul(memory, p("decoder.w_k"))?;
    let values = tape.matmul(features, p("decoder.w_v"))?;
    let queries = p("decoder.query_embed");
    let q = tape.matmul(queries, p("decoder.w_q"))?;
    let kt = tape.transpose(keys)?;
    let content = tape.matmul(q, kt)?;
    let content = tape.scale(content, 1.0 / (d as f64).sqrt());

    // -beta * |r - p|^2 without the per-row |r|^2, which softmax ignores.
    let reference = tape.sigmoid(p("decoder.reference"));
    let pos = grid_positions(g);
    let pos_t = tape.constant(Tensor::new(
        vec![2, g * g],
        pos.iter().map(|q| q[0]).chain(pos.iter().map(|q| q[1])).collect(),
    )?);
    let pos_sq = tape.constant(Tensor::row_vector(
        pos.iter().map(|q| -cfg.locality * (q[0] * q[0] + q[1] * q[1])).collect(),
    ));
    let cross = tape.matmul(reference, pos_t)?;
    let cross = tape.scale(cross, 2.0 * cfg.locality);
    let bias = tape.add_row(cross, pos_sq)?;
    let logits = tape.add(content, bias)?;
    let attn = tape.softmax(logits);
    let read = tape.matmul(attn, values)?;
    let read = tape.matmul(read, p("decoder.w_o"))?;
    let h = tape.add(queries, read)?;
    let ff = linear(tape, h, p("decoder.ffn1_w"), p("decoder.ffn1_b"))?;
    let ff = tape.relu(ff);
    let ff = linear(tape, ff, p("decoder.ffn2_w"), p("decoder.ffn2_b"))?;
    let q_hat = tape.add(h, ff)?;

    let class_logits = linear(tape, q_hat, p("class_head.w"), p("class_head.b"))?;
    let binary_logits = linear(tape, q_hat, p("binary_head.w"), p("binary_head.b"))?;

    let r = linear(tape, q_hat, p("regression_head.w1"), p("regression_head.b1"))?;
    let r = tape.relu(r);
    let r = linear(tape, r, p("regression_head.w2"), p("regression_head.b2"))?;
    let r = tape.relu(r);
    let delta = linear(tape, r, p("regression_head.w3"), p("regression_head.b3"))?;
    // Box centers are offsets from the attention centroid, in logit space.
    let pos_all = tape.constant(Tensor::new(vec![g * g, 2], pos.iter().flatten().copied().collect())?);
    let centroid = tape.matmul(attn, pos_all)?;
    let log_c = tape.ln(centroid);
    let rest = tape.neg(centroid);
    let rest = tape.add_scalar(rest, 1.0);
    let log_rest = tape.ln(rest);
    let centroid_logit = tape.sub(log_c, log_rest)?;
    let zeros = tape.constant(Tensor::zeros(&[n, 2]));
    let base = tape.concat_cols(&[centroid_logit, zeros])?;
    let pre = tape.add(delta, base)?;
    let boxes = tape.sigmoid(pre);

    for (what, v) in [
        ("features", features),
        ("class logits", class_logits),
        ("binary logits", binary_logits),
        ("boxes", boxes),
        ("query features", q_hat),
    ] {
        if !tape.value(v).all_finite() {
            return Err(Error::NonFinite(format!("detector forward ({what})")));
        }
    }
    Ok(ForwardVars {
        heads: HeadVars {
            class_logits,
            binary_logits,
            boxes,
            query_features: q_hat,
        },
        features,
    })
}

/// Reads head outputs off the tape.
pub fn to_predictions(tape: &Tape, heads: &HeadVars) -> Vec<Prediction> {
    let cls = tape.value(heads.class_logits);
    let bin = tape.value(heads.binary_logits);
    let boxes = tape.value(heads.boxes);
    let q = tape.value(heads.query_features);
    (0..cls.dims2().0)
        .map(|i| Prediction {
            class_logits: cls.row(i).to_vec(),
            binary_logit: bin.at(i, 0),
            bbox: BoxCxcywh::from_slice(boxes.row(i)),
            query_feature: q.row(i).to_vec(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Learning-rate multiplier for backbone parameters.
    pub backbone_lr_scale: f64,
    steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            clip_norm,
            backbone_lr_scale: 1.0,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every non-frozen parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut DetectorParams,
        grads: &BTreeMap<String, Tensor>,
        policy: &FreezePolicy,
    ) -> Result<()> {
        let live: Vec<(&String, &Tensor)> = grads
            .iter()
            .filter(|(name, _)| !policy.is_frozen(Component::of(name)))
            .collect();
        let norm = live
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in live {
            let p = params
                .tensors
                .get_mut(name.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let lr = if Component::of(name) == Component::Backbone {
                self.lr * self.backbone_lr_scale
            } else {
                self.lr
            };
            let len = p.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            if m.len() != len {
                *m = vec![0.0; len];
            }
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let grad = gv * clip + self.weight_decay * *w;
                        *mv = momentum * *mv + grad;
                        *w -= lr * *mv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
                    if v.len() != len {
                        *v = vec![0.0; len];
                    }
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let grad = gv * clip;
                        *mv = beta1 * *mv + (1.0 - beta1) * grad;
                        *vv = beta2 * *vv + (1.0 - beta2) * grad * grad;
                        *w -= lr * ((*mv / c1) / ((*vv / c2).sqrt() + eps) + self.weight_decay * *w);
                    }
                }
            }
        }
        debug!("optimizer step {} grad norm {norm:.4e}", self.steps);
        Ok(())
    }

    /// Drops moment estimates, e.g. after the class head changes shape.
    pub fn reset(&mut self) {
        self.steps = 0;
        self.first.clear();
        self.second.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    fn small() -> DetectorConfig {
        DetectorConfig {
            image_size: 16,
            d_model: 8,
            n_queries: 4,
            backbone_channels: [4, 6],
            ffn_dim: 8,
            regression_hidden: 6,
            locality: 10.0,
            init_seed: 3,
        }
    }

    fn image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        Tensor::new(vec![size, size, 3], (0..size * size * 3).map(|_| dist.sample(&mut rng)).collect()).unwrap()
    }

    fn scalar_loss(tape: &mut Tape, out: &ForwardVars) -> Result<Var> {
        let mut total = tape.constant(Tensor::scalar(0.0));
        for v in [
            out.heads.class_logits,
            out.heads.binary_logits,
            out.heads.boxes,
            out.heads.query_features,
            out.features,
        ] {
            let sq = tape.square(v);
            let s = tape.mean(sq);
            total = tape.add(total, s)?;
        }
        Ok(total)
    }

    #[test]
    fn shapes_and_determinism() {
        let params = DetectorParams::new(DetectorConfig::default(), 4).unwrap();
        let img = image(64, 1);
        let (a, fa) = params.predict(&img).unwrap();
        let (b, fb) = params.predict(&img).unwrap();
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|p| p.class_logits.len() == 5 && p.query_feature.len() == 32));
        assert!(a.iter().all(|p| p.bbox.to_array().iter().all(|&v| v > 0.0 && v < 1.0)));
        assert_eq!(fa.shape(), &[64, 32]);
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        let again = DetectorParams::new(DetectorConfig::default(), 4).unwrap();
        assert_eq!(params, again);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let params = DetectorParams::new(small(), 2).unwrap();
        assert!(matches!(params.predict(&image(8, 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = DetectorParams::new(small(), 2).unwrap();
        let img = image(16, 7);
        for name in params.tensors.keys() {
            let worst = finite_difference_check(
                |tape, x| {
                    let mut bound = params.bind(tape, &FreezePolicy::all());
                    bound.set(name, x);
                    let out = forward(tape, &params, &bound, &img)?;
                    scalar_loss(tape, &out)
                },
                params.get(name),
                1e-6,
            )
            .unwrap();
            assert!(worst < 1e-4, "{name}: {worst}");
        }
    }

    fn train(params: &mut DetectorParams, policy: FreezePolicy, steps: usize) -> Vec<f64> {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.05, 0.0, 0.0);
        let img = image(16, 11);
        let mut losses = Vec::new();
        for _ in 0..steps {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, &policy);
            let out = forward(&mut tape, params, &bound, &img).unwrap();
            let loss = scalar_loss(&mut tape, &out).unwrap();
            losses.push(tape.value(loss).item());
            tape.backward(loss).unwrap();
            let grads = bound.grads(&tape);
            opt.step(params, &grads, &policy).unwrap();
        }
        losses
    }

    #[test]
    fn stage2_policy_changes_exactly_the_class_specific_parts() {
        let mut params = DetectorParams::new(small(), 2).unwrap();
        let before: Vec<String> = Component::ALL.iter().map(|&c| params.component_hash(c)).collect();
        train(&mut params, FreezePolicy::stage2(), 10);
        for (c, h) in Component::ALL.iter().zip(before) {
            let changed = params.component_hash(*c) != h;
            assert_eq!(changed, !FreezePolicy::stage2().is_frozen(*c), "{c:?}");
        }
    }

    #[test]
    fn all_frozen_keeps_loss_constant() {
        let mut params = DetectorParams::new(small(), 2).unwrap();
        let initial = params.clone();
        let losses = train(&mut params, FreezePolicy::all(), 3);
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(params, initial);
    }

    #[test]
    fn no_freeze_updates_every_parameter_with_gradient() {
        let mut params = DetectorParams::new(small(), 2).unwrap();
        let initial = params.clone();
        let img = image(16, 11);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &FreezePolicy::none());
        let out = forward(&mut tape, &params, &bound, &img).unwrap();
        let loss = scalar_loss(&mut tape, &out).unwrap();
        tape.backward(loss).unwrap();
        let grads = bound.grads(&tape);
        Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.05, 0.0, 0.0)
            .step(&mut params, &grads, &FreezePolicy::none())
            .unwrap();
        for (name, g) in &grads {
            for (i, &gv) in g.data().iter().enumerate() {
                if gv != 0.0 {
                    assert_ne!(params.get(name).data()[i], initial.get(name).data()[i], "{name}[{i}]");
                }
            }
        }
    }

    #[test]
    fn expansion_preserves_old_classes() {
        let params = DetectorParams::new(small(), 10).unwrap();
        let img = image(16, 2);
        let (before, _) = params.predict(&img).unwrap();
        let grown = params.expand_class_head(20, 5).unwrap();
        assert_eq!(grown.get("class_head.w").shape(), &[8, 21]);
        for i in 0..8 {
            let (o, n) = (params.get("class_head.w").row(i), grown.get("class_head.w").row(i));
            assert_eq!(&o[..10], &n[..10]);
            assert_eq!(o[10], n[20]);
        }
        let (after, _) = grown.predict(&img).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.class_logits[..10], b.class_logits[..10]);
            assert_eq!(a.class_logits[10], b.class_logits[20]);
            assert_eq!(a.bbox, b.bbox);
        }
        assert!(matches!(
            grown.expand_class_head(10, 0),
            Err(Error::ClassCountRegression { from: 20, to: 10 })
        ));
    }

    #[test]
    fn teacher_is_detached() {
        let mut student = DetectorParams::new(small(), 2).unwrap();
        let teacher = student.snapshot_teacher();
        let img = image(16, 4);
        assert_eq!(teacher.predict(&img).unwrap(), student.predict(&img).unwrap());
        train(&mut student, FreezePolicy::none(), 2);
        let student = student.expand_class_head(4, 1).unwrap();
        assert_ne!(teacher.predict(&img).unwrap().0, student.predict(&img).unwrap().0);
        assert_eq!(teacher.params().n_known, 2);
        assert_eq!(teacher.predict(&img).unwrap().0[0].class_logits.len(), 3);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let params = DetectorParams::new(small(), 2).unwrap();
        params.save(&path, "abc", 7).unwrap();
        assert_eq!(DetectorParams::load(&path, "abc").unwrap(), params);
        assert!(matches!(
            DetectorParams::load(&path, "def"),
            Err(Error::ConfigHashMismatch { .. })
        ));
        assert!(matches!(
            DetectorParams::load(&dir.path().join("missing.json"), "abc"),
            Err(Error::MissingPrerequisite(_))
        ));
        std::fs::write(&path, b"{").unwrap();
        assert!(matches!(DetectorParams::load(&path, "abc"), Err(Error::Malformed { .. })));
    }
}
