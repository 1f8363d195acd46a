//! Training orchestration: pre-training, open-world fine-tuning, incremental
//! steps with distillation and exemplar replay, and inference read-out.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_in_place, Tape, Var};
use crate::dataset::{augment_view, Dataset};
use crate::detector::{
    forward, to_predictions, BoundParams, DetectorParams, ForwardVars, FreezePolicy, Optimizer, OptimizerKind,
    Prediction, Teacher,
};
use crate::error::{Error, Result};
use crate::geometry::{max_iou, BoxCxcywh};
use crate::losses::{
    consistency_loss, feat_distill_masked, hungarian_loss_bin, kl_class_distill, total_owl_loss,
    total_owl_loss_with_kd, total_pretrain_loss, DistillTerms, FeatureMask, LossWeights,
};
use crate::matching::{class_match_cost, dual_match, hungarian_solve, CostWeights};
use crate::metrics::{evaluate_split, ClassSplit, DetLabel, Detection, EvalReport, GroundTruth, MetricConfig};
use crate::pseudo_label::{build_swapped_targets, count_overlap_violations, PseudoLabelConfig, Target, TargetSource};
use crate::selective_search::{selective_search, SelectiveSearchConfig};
use crate::tensor::Tensor;

/// Class groups introduced task by task. Classes are `1..=C` and the groups,
/// concatenated, list them in order, so the classes known after task `t` are
/// exactly `1..=n_known(t)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub groups: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let flat: Vec<usize> = groups.iter().flatten().copied().collect();
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("every task needs at least one class".into()));
        }
        if flat != (1..=flat.len()).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!(
                "task groups must list classes 1..=C in order, got {groups:?}"
            )));
        }
        Ok(Self { groups })
    }

    pub fn tasks(&self) -> usize {
        self.groups.len()
    }

    pub fn class_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// `K^t` (0-based `t`).
    pub fn known(&self, t: usize) -> BTreeSet<usize> {
        self.groups[..=t].iter().flatten().copied().collect()
    }

    /// `U^t`.
    pub fn unknown(&self, t: usize) -> BTreeSet<usize> {
        self.groups[t + 1..].iter().flatten().copied().collect()
    }

    pub fn n_known(&self, t: usize) -> usize {
        self.groups[..=t].iter().map(Vec::len).sum()
    }

    pub fn class_split(&self, t: usize) -> ClassSplit {
        ClassSplit {
            previous: self.groups[..t].iter().flatten().copied().collect(),
            current: self.groups[t].iter().copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_decay_epoch: usize,
    pub owl_epochs: usize,
    pub owl_decay_epoch: usize,
    /// Pre-training epochs on new data in an incremental step.
    pub incremental_epochs: usize,
    pub incremental_decay_epoch: usize,
    pub replay_epochs: usize,
    pub lr: f64,
    pub lr_owl: f64,
    pub lr_replay: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Backbone learning rate relative to the stage learning rate.
    pub backbone_lr_scale: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossWeights,
    pub cost: CostWeights,
    pub pseudo: PseudoLabelConfig,
    pub selective_search: SelectiveSearchConfig,
    pub teacher_threshold: f64,
    pub exemplars_per_class: usize,
    pub replay_policy: FreezePolicy,
    pub top_k: usize,
    pub metrics: MetricConfig,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            pretrain_epochs: 30,
            pretrain_decay_epoch: 24,
            owl_epochs: 5,
            owl_decay_epoch: 3,
            incremental_epochs: 30,
            incremental_decay_epoch: 24,
            replay_epochs: 5,
            lr: 1e-3,
            lr_owl: 1e-3,
            lr_replay: 1e-3,
            lr_decay: 0.1,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            backbone_lr_scale: 0.1,
            optimizer: OptimizerKind::default(),
            loss: LossWeights::default(),
            cost: CostWeights::default(),
            pseudo: PseudoLabelConfig::default(),
            selective_search: SelectiveSearchConfig::default(),
            teacher_threshold: 0.5,
            exemplars_per_class: 50,
            replay_policy: FreezePolicy::stage2(),
            top_k: 50,
            metrics: MetricConfig::default(),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, n_queries: usize) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let p = &self.pseudo;
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta {} outside (0, 1)", p.delta)));
        }
        if !(self.backbone_lr_scale >= 0.0 && self.backbone_lr_scale.is_finite()) {
            return Err(Error::InvalidArgument("backbone_lr_scale must be finite and nonnegative".into()));
        }
        if self.exemplars_per_class == 0 {
            return Err(Error::InvalidArgument("exemplars_per_class must be at least 1".into()));
        }
        if p.k + p.k_ss >= n_queries {
            return Err(Error::InvalidArgument(format!(
                "k + k_ss = {} leaves no queries for annotated objects among {n_queries}",
                p.k + p.k_ss
            )));
        }
        Ok(())
    }
}

/// A training image and the annotations visible for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image_id: u64,
    pub targets: Vec<Target>,
}

/// Training samples of task `t`: its images annotated with the classes the
/// task introduces. Objects of other classes stay unlabeled.
pub fn task_samples(dataset: &Dataset, schedule: &TaskSchedule, t: usize) -> Result<Vec<Sample>> {
    let known: BTreeSet<usize> = schedule
        .groups
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("schedule has no task {}", t + 1)))?
        .iter()
        .copied()
        .collect();
    let ids = &dataset
        .manifest
        .tasks
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("dataset has no task {}", t + 1)))?
        .train;
    ids.iter()
        .map(|&id| {
            Ok(Sample {
                image_id: id,
                targets: dataset.image(id)?.training_targets(&known),
            })
        })
        .filter(|s: &Result<Sample>| s.as_ref().map_or(true, |s| !s.targets.is_empty()))
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub task: usize,
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Per-image means of the loss terms, plus pseudo-label counters.
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, w: &mut impl Write, header: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut *w, header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn stage(&self, stage: &str) -> impl Iterator<Item = &LogRecord> {
        let stage = stage.to_string();
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

/// Per-class exemplar instances and the annotations stored with each image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub cap: usize,
    /// Class -> `(image id, annotation index)` instances.
    pub per_class: BTreeMap<usize, Vec<(u64, usize)>>,
    pub annotations: BTreeMap<u64, Vec<Target>>,
}

impl ExemplarStore {
    pub fn counts(&self) -> BTreeMap<usize, usize> {
        self.per_class.iter().map(|(c, v)| (*c, v.len())).collect()
    }

    /// Each stored image once, with all its stored annotations.
    pub fn replay_samples(&self) -> Vec<Sample> {
        let ids: BTreeSet<u64> = self.per_class.values().flatten().map(|x| x.0).collect();
        ids.into_iter()
            .map(|id| Sample {
                image_id: id,
                targets: self.annotations[&id].clone(),
            })
            .collect()
    }
}

/// Up to `m` instances of each class in `classes`, sampled with a seeded
/// shuffle.
pub fn exemplar_select_balanced(samples: &[Sample], classes: &BTreeSet<usize>, m: usize, seed: u64) -> ExemplarStore {
    let mut store = ExemplarStore {
        cap: m,
        ..ExemplarStore::default()
    };
    for &c in classes {
        let mut instances: Vec<(u64, usize)> = samples
            .iter()
            .flat_map(|s| {
                s.targets
                    .iter()
                    .enumerate()
                    .filter(move |(_, t)| t.label == c)
                    .map(move |(i, _)| (s.image_id, i))
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        instances.shuffle(&mut rng);
        instances.truncate(m);
        instances.sort_unstable();
        if instances.is_empty() {
            continue;
        }
        for &(id, _) in &instances {
            let s = samples.iter().find(|s| s.image_id == id).expect("instance comes from samples");
            store.annotations.insert(id, s.targets.clone());
        }
        store.per_class.insert(c, instances);
    }
    store
}

/// Teacher predictions confident on a previously known class (max old-class
/// probability above `threshold`) whose box touches no current known box.
/// Returns `(teacher prediction index, pseudo target)`.
pub fn select_teacher_pseudo_gt(
    teacher_preds: &[Prediction],
    known_gt: &[BoxCxcywh],
    threshold: f64,
    n_old: usize,
) -> Vec<(usize, Target)> {
    teacher_preds
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (slot, logit) = p.class_logits[..n_old]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (j, &v)| if v > a.1 { (j, v) } else { a });
            let keep = n_old > 0 && sigmoid(logit) > threshold && max_iou(&p.bbox, known_gt) <= 0.0;
            keep.then(|| {
                (
                    i,
                    Target {
                        label: slot + 1,
                        bbox: p.bbox,
                        source: TargetSource::Annotated,
                    },
                )
            })
        })
        .collect()
}

/// Detections of one image: label from the highest class slot (the last slot
/// reads as unknown), score its sigmoid probability, best `top_k` kept.
pub fn inference_postprocess(preds: &[Prediction], n_known: usize, top_k: usize, image_id: u64) -> Vec<Detection> {
    let mut dets: Vec<Detection> = preds
        .iter()
        .map(|p| {
            let (slot, logit) = p
                .class_logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (j, &v)| if v > a.1 { (j, v) } else { a });
            Detection {
                image_id,
                label: if slot == n_known {
                    DetLabel::Unknown
                } else {
                    DetLabel::Known(slot + 1)
                },
                score: sigmoid(logit),
                bbox: p.bbox,
            }
        })
        .collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(top_k);
    dets
}

/// Runs the detector on task `t`'s evaluation images and scores it with every
/// class of later tasks treated as unknown.
pub fn evaluate(params: &DetectorParams, dataset: &Dataset, schedule: &TaskSchedule, t: usize, cfg: &EngineConfig) -> Result<EvalReport> {
    let ids = &dataset
        .manifest
        .tasks
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("dataset has no task {}", t + 1)))?
        .eval;
    let (dets, gts) = detect_split(params, dataset, ids, cfg.top_k)?;
    evaluate_split(&dets, &gts, &schedule.class_split(t), &cfg.metrics)
}

/// Detections and true-label ground truth of the given images.
pub fn detect_split(
    params: &DetectorParams,
    dataset: &Dataset,
    ids: &[u64],
    top_k: usize,
) -> Result<(Vec<Detection>, Vec<GroundTruth>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for &id in ids {
        let img = dataset.image(id)?;
        let (preds, _) = params.predict(&img.to_tensor())?;
        dets.extend(inference_postprocess(&preds, params.n_known, top_k, id));
        gts.extend(img.annotations.iter().map(|a| GroundTruth {
            image_id: id,
            class: a.label,
            bbox: a.bbox,
        }));
    }
    Ok((dets, gts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Pretrain,
    Owl,
    Replay,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Owl => "owl",
            Stage::Replay => "replay",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Owl => 2,
            Stage::Replay => 3,
        }
    }
}

/// Which forgetting mitigations an incremental step applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mitigation {
    pub distillation: bool,
    pub replay: bool,
}

impl Default for Mitigation {
    fn default() -> Self {
        Mitigation::FULL
    }
}

impl Mitigation {
    pub const NONE: Mitigation = Mitigation {
        distillation: false,
        replay: false,
    };

    pub const FULL: Mitigation = Mitigation {
        distillation: true,
        replay: true,
    };
}

#[derive(Default)]
struct Stats {
    sums: BTreeMap<String, f64>,
    images: usize,
}

impl Stats {
    fn add(&mut self, key: &str, v: f64) {
        *self.sums.entry(key.to_string()).or_insert(0.0) += v;
    }
}

/// Training state shared across stages: dataset, schedule, config, the
/// selective-search cache and the log.
pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub schedule: TaskSchedule,
    pub cfg: EngineConfig,
    pub log: TrainLog,
    ss_cache: BTreeMap<u64, Vec<BoxCxcywh>>,
}

fn value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, schedule: TaskSchedule, cfg: EngineConfig) -> Self {
        Self {
            dataset,
            schedule,
            cfg,
            log: TrainLog::default(),
            ss_cache: BTreeMap::new(),
        }
    }

    fn proposals(&mut self, id: u64) -> Result<Vec<BoxCxcywh>> {
        if let Some(p) = self.ss_cache.get(&id) {
            return Ok(p.clone());
        }
        let img = self.dataset.image(id)?;
        let p = selective_search(&img.raster, &self.cfg.selective_search)?;
        self.ss_cache.insert(id, p.clone());
        Ok(p)
    }

    /// Pre-training on task `t` samples. With a teacher the loss adds
    /// feature and classification distillation.
    pub fn run_pretrain_stage(
        &mut self,
        t: usize,
        params: &mut DetectorParams,
        samples: &[Sample],
        teacher: Option<&Teacher>,
    ) -> Result<()> {
        let (epochs, decay) = if teacher.is_some() {
            (self.cfg.incremental_epochs, self.cfg.incremental_decay_epoch)
        } else {
            (self.cfg.pretrain_epochs, self.cfg.pretrain_decay_epoch)
        };
        let lr = self.cfg.lr;
        self.run_epochs(Stage::Pretrain, t, params, samples, teacher, epochs, decay, lr, FreezePolicy::none())
    }

    /// Open-world fine-tuning with multi-view self-labeling under the
    /// stage-2 freeze policy.
    pub fn run_owl_stage(
        &mut self,
        t: usize,
        params: &mut DetectorParams,
        samples: &[Sample],
        teacher: Option<&Teacher>,
    ) -> Result<()> {
        let (epochs, decay, lr) = (self.cfg.owl_epochs, self.cfg.owl_decay_epoch, self.cfg.lr_owl);
        self.run_epochs(Stage::Owl, t, params, samples, teacher, epochs, decay, lr, FreezePolicy::stage2())
    }

    /// Moves from task `t - 1` to task `t`: grows the class head, trains on
    /// the new data (with distillation from the previous model if enabled),
    /// then fine-tunes on a balanced exemplar set (if enabled).
    pub fn run_incremental_step(
        &mut self,
        t: usize,
        previous: &DetectorParams,
        store: &mut ExemplarStore,
        mitigation: Mitigation,
    ) -> Result<DetectorParams> {
        if t == 0 || t >= self.schedule.tasks() {
            return Err(Error::InvalidArgument(format!("no incremental step into task {}", t + 1)));
        }
        let n_new = self.schedule.n_known(t);
        let mut params = previous.expand_class_head(n_new, self.cfg.seed ^ t as u64)?;
        let teacher = previous.snapshot_teacher();
        let kd = mitigation.distillation.then_some(&teacher);
        let samples = task_samples(self.dataset, &self.schedule, t)?;
        self.run_pretrain_stage(t, &mut params, &samples, kd)?;
        self.run_owl_stage(t, &mut params, &samples, kd)?;

        let mut pool: Vec<Sample> = store.replay_samples();
        let stored: BTreeSet<u64> = pool.iter().map(|s| s.image_id).collect();
        pool.extend(samples.iter().filter(|s| !stored.contains(&s.image_id)).cloned());
        *store = exemplar_select_balanced(&pool, &self.schedule.known(t), self.cfg.exemplars_per_class, self.cfg.seed);
        if mitigation.replay {
            let replay = store.replay_samples();
            let policy = self.cfg.replay_policy;
            let (epochs, lr) = (self.cfg.replay_epochs, self.cfg.lr_replay);
            self.run_epochs(Stage::Replay, t, &mut params, &replay, kd, epochs, epochs, lr, policy)?;
        }
        Ok(params)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_epochs(
        &mut self,
        stage: Stage,
        t: usize,
        params: &mut DetectorParams,
        samples: &[Sample],
        teacher: Option<&Teacher>,
        epochs: usize,
        decay_epoch: usize,
        base_lr: f64,
        policy: FreezePolicy,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut opt = Optimizer::new(self.cfg.optimizer, base_lr, self.cfg.weight_decay, self.cfg.clip_norm);
        opt.backbone_lr_scale = self.cfg.backbone_lr_scale;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..epochs {
            let lr = if epoch >= decay_epoch { base_lr * self.cfg.lr_decay } else { base_lr };
            opt.lr = lr;
            let epoch_seed = self.cfg.seed ^ (stage.tag() << 56) ^ ((t as u64) << 48) ^ epoch as u64;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
            let mut stats = Stats::default();
            let mut steps = 0;
            for batch in order.chunks(self.cfg.batch_size) {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, &policy);
                let mut total: Option<Var> = None;
                for &i in batch {
                    let s = &samples[i];
                    let loss = match stage {
                        Stage::Pretrain => self.pretrain_loss(&mut tape, params, &bound, s, teacher, &mut stats)?,
                        Stage::Owl | Stage::Replay => {
                            let view_seed = epoch_seed ^ s.image_id.wrapping_mul(0x2545_F491_4F6C_DD1D);
                            self.owl_loss(&mut tape, params, &bound, s, teacher, view_seed, &mut stats)?
                        }
                    };
                    stats.images += 1;
                    total = Some(match total {
                        None => loss,
                        Some(acc) => tape.add(acc, loss)?,
                    });
                }
                let total = total.expect("non-empty batch");
                let total = tape.scale(total, 1.0 / batch.len() as f64);
                if !value(&tape, total).is_finite() {
                    return Err(Error::NonFinite(format!("{} loss at epoch {epoch}", stage.name())));
                }
                tape.backward(total)?;
                opt.step(params, &bound.grads(&tape), &policy)?;
                steps += 1;
            }
            let n = stats.images as f64;
            let terms: BTreeMap<String, f64> = stats
                .sums
                .into_iter()
                .map(|(k, v)| if k.starts_with("n_") { (k, v) } else { (k, v / n) })
                .collect();
            info!(
                "task {} {} epoch {epoch} lr {lr:.1e} loss {:.4}",
                t + 1,
                stage.name(),
                terms.get("loss").copied().unwrap_or(f64::NAN)
            );
            self.log.records.push(LogRecord {
                stage: stage.name().to_string(),
                task: t + 1,
                epoch,
                lr,
                steps,
                terms,
            });
        }
        Ok(())
    }

    /// Feature and classification distillation for one view.
    #[allow(clippy::too_many_arguments)]
    fn distill(
        &self,
        tape: &mut Tape,
        teacher: &Teacher,
        image: &Tensor,
        out: &ForwardVars,
        preds: &[Prediction],
        current_gt: &[BoxCxcywh],
        stats: &mut Stats,
        suffix: &str,
    ) -> Result<DistillTerms> {
        let (t_preds, t_features) = teacher.predict(image)?;
        let g = teacher.params().config.grid();
        let mask = FeatureMask::from_boxes(current_gt, g, g);
        let feat = feat_distill_masked(tape, out.features, &t_features, &mask)?;

        let n_old = teacher.params().n_known;
        let pseudo = select_teacher_pseudo_gt(&t_preds, current_gt, self.cfg.teacher_threshold, n_old);
        let cls = if pseudo.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let targets: Vec<Target> = pseudo.iter().map(|p| p.1).collect();
            let assign = hungarian_solve(&class_match_cost(&targets, preds, &self.cfg.cost)?)?;
            let width = preds[0].class_logits.len();
            let mut p_pre = Vec::new();
            let mut idx = Vec::new();
            for &(ti, pj) in &assign.pairs {
                let mut row = t_preds[pseudo[ti].0].class_logits.clone();
                softmax_in_place(&mut row);
                p_pre.extend(row);
                idx.extend((0..n_old).map(|s| pj * width + s));
                idx.push(pj * width + width - 1);
            }
            let rows = assign.pairs.len();
            let gathered = tape.gather(out.heads.class_logits, idx, vec![rows, n_old + 1])?;
            let p_cur = tape.softmax(gathered);
            kl_class_distill(tape, p_cur, &Tensor::new(vec![rows, n_old + 1], p_pre)?)?
        };
        stats.add(&format!("feat_kd{suffix}"), value(tape, feat));
        stats.add(&format!("cls_kd{suffix}"), value(tape, cls));
        stats.add(&format!("n_teacher_pseudo{suffix}"), pseudo.len() as f64);
        Ok(DistillTerms { feat, cls })
    }

    #[allow(clippy::too_many_arguments)]
    fn pretrain_loss(
        &self,
        tape: &mut Tape,
        params: &DetectorParams,
        bound: &BoundParams,
        sample: &Sample,
        teacher: Option<&Teacher>,
        stats: &mut Stats,
    ) -> Result<Var> {
        let image = self.dataset.image(sample.image_id)?.to_tensor();
        let out = forward(tape, params, bound, &image)?;
        let preds = to_predictions(tape, &out.heads);
        let (ca, ba) = dual_match(&sample.targets, &preds, &self.cfg.cost)?;
        let hg = hungarian_loss_bin(tape, &out.heads, &sample.targets, &ca, &ba, &self.cfg.loss)?;
        stats.add("hungarian", value(tape, hg.total));
        stats.add("class", value(tape, hg.class));
        stats.add("binary", value(tape, hg.binary));
        stats.add("boxes", hg.boxes.map_or(0.0, |b| value(tape, b)));
        let kd = match teacher {
            Some(te) => {
                let gt: Vec<BoxCxcywh> = sample.targets.iter().map(|t| t.bbox).collect();
                Some(self.distill(tape, te, &image, &out, &preds, &gt, stats, "")?)
            }
            None => None,
        };
        let total = total_pretrain_loss(tape, hg.total, kd, &self.cfg.loss)?;
        stats.add("loss", value(tape, total));
        Ok(total)
    }

    #[allow(clippy::too_many_arguments)]
    fn owl_loss(
        &mut self,
        tape: &mut Tape,
        params: &DetectorParams,
        bound: &BoundParams,
        sample: &Sample,
        teacher: Option<&Teacher>,
        view_seed: u64,
        stats: &mut Stats,
    ) -> Result<Var> {
        let proposals = self.proposals(sample.image_id)?;
        let img = self.dataset.image(sample.image_id)?;
        // The augmented view starts from the sample's annotations only.
        let visible = crate::dataset::SceneImage {
            id: img.id,
            raster: img.raster.clone(),
            annotations: sample.targets.clone(),
        };
        let view = augment_view(&visible, view_seed);
        let pairs: Vec<(usize, usize)> = view.kept.iter().enumerate().map(|(a, &i)| (i, a)).collect();

        let image = visible.to_tensor();
        let image_aug = view.image.to_tensor();
        let out = forward(tape, params, bound, &image)?;
        let out_aug = forward(tape, params, bound, &image_aug)?;
        let preds = to_predictions(tape, &out.heads);
        let preds_aug = to_predictions(tape, &out_aug.heads);

        let unknown_label = params.n_known + 1;
        let swapped = build_swapped_targets(
            &view.transform,
            &preds,
            &preds_aug,
            &sample.targets,
            &view.image.annotations,
            &pairs,
            &proposals,
            &self.cfg.pseudo,
            unknown_label,
        )?;
        let overlap = self.cfg.pseudo.overlap_iou;
        let violations = count_overlap_violations(&swapped.targets, overlap)
            + count_overlap_violations(&swapped.targets_aug, overlap);
        stats.add("n_hygiene_violations", violations as f64);
        for (ts, suffix) in [(&swapped.targets, ""), (&swapped.targets_aug, "_aug")] {
            for (src, key) in [(TargetSource::PseudoBinary, "n_pseudo_binary"), (TargetSource::PseudoSs, "n_pseudo_ss")] {
                stats.add(&format!("{key}{suffix}"), ts.iter().filter(|x| x.source == src).count() as f64);
            }
        }

        let (ca, ba) = dual_match(&swapped.targets, &preds, &self.cfg.cost)?;
        let (ca_aug, ba_aug) = dual_match(&swapped.targets_aug, &preds_aug, &self.cfg.cost)?;
        let w = &self.cfg.loss;
        let hg = hungarian_loss_bin(tape, &out.heads, &swapped.targets, &ca, &ba, w)?;
        let hg_aug = hungarian_loss_bin(tape, &out_aug.heads, &swapped.targets_aug, &ca_aug, &ba_aug, w)?;
        let query_pairs: Vec<(usize, usize)> = swapped
            .corresponding
            .iter()
            .filter_map(|&(a, b)| Some((ca.prediction_for(a)?, ca_aug.prediction_for(b)?)))
            .collect();
        let con = consistency_loss(tape, out.heads.query_features, out_aug.heads.query_features, &query_pairs)?;
        let mut total = total_owl_loss(tape, hg.total, hg_aug.total, con, w)?;
        stats.add("hungarian", value(tape, hg.total));
        stats.add("hungarian_aug", value(tape, hg_aug.total));
        stats.add("consistency", value(tape, con));

        if let Some(te) = teacher {
            let gt: Vec<BoxCxcywh> = sample.targets.iter().map(|t| t.bbox).collect();
            let gt_aug: Vec<BoxCxcywh> = view.image.annotations.iter().map(|t| t.bbox).collect();
            let kd = self.distill(tape, te, &image, &out, &preds, &gt, stats, "")?;
            let kd_aug = self.distill(tape, te, &image_aug, &out_aug, &preds_aug, &gt_aug, stats, "_aug")?;
            total = total_owl_loss_with_kd(tape, total, kd, kd_aug, w)?;
        }
        stats.add("loss", value(tape, total));
        Ok(total)
    }
}
