//! Command implementations over a run directory.
//!
//! Layout under the run directory:
//!
//! ```text
//! run.json                      config hash and seed of the run
//! config.toml                   resolved configuration
//! task1/pretrain.ckpt.json      task1/pretrain.log.jsonl
//! task1/owl.ckpt.json           task1/owl.log.jsonl    task1/exemplars.json
//! taskT/incremental.ckpt.json   taskT/incremental.log.jsonl    taskT/exemplars.json
//! taskT/eval-<split>.json       taskT/eval-<split>.txt
//! report.txt                    report.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, Dataset};
use crate::detector::DetectorParams;
use crate::engine::{
    detect_split, exemplar_select_balanced, task_samples, ExemplarStore, TaskSchedule, TrainLog, Trainer,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, DetLabel, EvalReport};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "OWDETR_OUT";

/// Provenance written into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}` (expected `train` or `eval`)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ExemplarFile {
    #[serde(flatten)]
    stamp: Stamp,
    task: usize,
    store: ExemplarStore,
}

/// Evaluation output as written to `eval-<split>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub task: usize,
    pub split: Split,
    pub checkpoint: String,
    pub report: EvalReport,
}

/// One detection in COCO results format (pixel `[x, y, w, h]`; the unknown
/// class is category `n_known + 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// An opened run: resolved config, hash, generated data.
pub struct Run {
    pub config: RunConfig,
    pub stamp: Stamp,
    pub dir: PathBuf,
    pub dataset: Dataset,
    pub schedule: TaskSchedule,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(path.to_path_buf()));
    }
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

impl Run {
    /// Validates the config and binds it to `dir`. A directory already used
    /// by a different config is refused.
    pub fn open(config: &RunConfig, dir: &Path) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let stamp = Stamp {
            config_hash: config.hash(),
            seed: config.seed,
        };
        let marker = dir.join("run.json");
        if marker.exists() {
            let found: Stamp = read_json(&marker)?;
            if found.config_hash != stamp.config_hash {
                return Err(Error::ConfigHashMismatch {
                    expected: stamp.config_hash,
                    found: found.config_hash,
                });
            }
        } else {
            write_json(&marker, &stamp)?;
            fs::write(dir.join("config.toml"), config.to_toml())?;
        }
        let dataset = generate_synthetic(&config.data)?;
        let schedule = config.schedule()?;
        Ok(Self {
            config,
            stamp,
            dir: dir.to_path_buf(),
            dataset,
            schedule,
        })
    }

    pub fn task_dir(&self, task: usize) -> PathBuf {
        self.dir.join(format!("task{task}"))
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.task_dir(1).join("pretrain.ckpt.json")
    }

    /// Checkpoint a task ends with: the open-world model for task 1, the
    /// incremental model afterwards.
    pub fn final_checkpoint(&self, task: usize) -> PathBuf {
        if task == 1 {
            self.task_dir(1).join("owl.ckpt.json")
        } else {
            self.task_dir(task).join("incremental.ckpt.json")
        }
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task == 0 || task > self.schedule.tasks() {
            return Err(Error::InvalidArgument(format!(
                "task {task} outside 1..={}",
                self.schedule.tasks()
            )));
        }
        Ok(())
    }

    fn write_log(&self, path: &Path, log: &TrainLog, stage: &str, task: usize) -> Result<()> {
        let header = serde_json::json!({
            "config_hash": self.stamp.config_hash,
            "seed": self.stamp.seed,
            "stage": stage,
            "task": task,
        });
        let mut w = BufWriter::new(fs::File::create(path)?);
        log.write_jsonl(&mut w, &header)?;
        Ok(())
    }

    fn load(&self, path: &Path) -> Result<DetectorParams> {
        DetectorParams::load(path, &self.stamp.config_hash)
    }

    fn save(&self, params: &DetectorParams, path: &Path) -> Result<()> {
        params.save(path, &self.stamp.config_hash, self.stamp.seed)
    }

    fn trainer(&self) -> Trainer<'_> {
        Trainer::new(&self.dataset, self.schedule.clone(), self.config.engine.clone())
    }

    /// Stage-1 training of task 1.
    pub fn pretrain(&self) -> Result<PathBuf> {
        let samples = task_samples(&self.dataset, &self.schedule, 0)?;
        let mut params = DetectorParams::new(self.config.detector.clone(), self.schedule.n_known(0))?;
        let mut trainer = self.trainer();
        trainer.run_pretrain_stage(0, &mut params, &samples, None)?;
        let ckpt = self.pretrain_checkpoint();
        self.save(&params, &ckpt)?;
        self.write_log(&self.task_dir(1).join("pretrain.log.jsonl"), &trainer.log, "pretrain", 1)?;
        info!("wrote {}", ckpt.display());
        Ok(ckpt)
    }

    /// Open-world stage of task 1, from the pre-training checkpoint. Also
    /// stores the task-1 exemplar set.
    pub fn owl(&self) -> Result<PathBuf> {
        let mut params = self.load(&self.pretrain_checkpoint())?;
        let samples = task_samples(&self.dataset, &self.schedule, 0)?;
        let mut trainer = self.trainer();
        trainer.run_owl_stage(0, &mut params, &samples, None)?;
        let ckpt = self.final_checkpoint(1);
        self.save(&params, &ckpt)?;
        self.write_log(&self.task_dir(1).join("owl.log.jsonl"), &trainer.log, "owl", 1)?;
        let store = exemplar_select_balanced(
            &samples,
            &self.schedule.known(0),
            self.config.engine.exemplars_per_class,
            self.config.seed,
        );
        self.write_exemplars(1, store)?;
        info!("wrote {}", ckpt.display());
        Ok(ckpt)
    }

    fn write_exemplars(&self, task: usize, store: ExemplarStore) -> Result<()> {
        let file = ExemplarFile {
            stamp: self.stamp.clone(),
            task,
            store,
        };
        write_json(&self.task_dir(task).join("exemplars.json"), &file)
    }

    fn read_exemplars(&self, task: usize) -> Result<ExemplarStore> {
        let file: ExemplarFile = read_json(&self.task_dir(task).join("exemplars.json"))?;
        if file.stamp.config_hash != self.stamp.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: self.stamp.config_hash.clone(),
                found: file.stamp.config_hash,
            });
        }
        Ok(file.store)
    }

    /// Incremental step into `task` (2-based), from the previous task's final
    /// checkpoint and exemplars.
    pub fn incremental(&self, task: usize) -> Result<PathBuf> {
        self.check_task(task)?;
        if task < 2 {
            return Err(Error::InvalidArgument("incremental steps start at task 2".into()));
        }
        let previous = self.load(&self.final_checkpoint(task - 1))?;
        let mut store = self.read_exemplars(task - 1)?;
        let mut trainer = self.trainer();
        let params = trainer.run_incremental_step(task - 1, &previous, &mut store, self.config.mitigation)?;
        let ckpt = self.final_checkpoint(task);
        self.save(&params, &ckpt)?;
        self.write_log(&self.task_dir(task).join("incremental.log.jsonl"), &trainer.log, "incremental", task)?;
        self.write_exemplars(task, store)?;
        info!("wrote {}", ckpt.display());
        Ok(ckpt)
    }

    /// Scores a checkpoint (default: the task's final one) on a split with
    /// the task's known/unknown partition. Writes JSON and a text table, and
    /// optionally the raw detections.
    pub fn evaluate(
        &self,
        task: usize,
        checkpoint: Option<&Path>,
        split: Split,
        dump_detections: bool,
    ) -> Result<EvalArtifact> {
        self.check_task(task)?;
        let path = checkpoint.map_or_else(|| self.final_checkpoint(task), Path::to_path_buf);
        let params = self.load(&path)?;
        if params.n_known != self.schedule.n_known(task - 1) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint knows {} classes but task {task} has {}",
                params.n_known,
                self.schedule.n_known(task - 1)
            )));
        }
        let split_ids = &self.dataset.manifest.tasks[task - 1];
        let ids = match split {
            Split::Train => &split_ids.train,
            Split::Eval => &split_ids.eval,
        };
        let (dets, gts) = detect_split(&params, &self.dataset, ids, self.config.engine.top_k)?;
        let report = evaluate_split(&dets, &gts, &self.schedule.class_split(task - 1), &self.config.engine.metrics)?;
        let artifact = EvalArtifact {
            stamp: self.stamp.clone(),
            task,
            split,
            checkpoint: path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            report,
        };
        let dir = self.task_dir(task);
        write_json(&dir.join(format!("eval-{}.json", split.name())), &artifact)?;
        let label = format!("task {task} ({})", split.name());
        let text = format!(
            "config {} seed {}\n{}",
            self.stamp.config_hash,
            self.stamp.seed,
            EvalReport::table(&[(&label, &artifact.report)])
        );
        fs::write(dir.join(format!("eval-{}.txt", split.name())), text)?;
        if dump_detections {
            let s = self.config.detector.image_size as f64;
            let results: Vec<CocoResult> = dets
                .iter()
                .map(|d| {
                    let b = d.bbox.to_xyxy();
                    CocoResult {
                        image_id: d.image_id,
                        category_id: match d.label {
                            DetLabel::Known(c) => c,
                            DetLabel::Unknown => params.n_known + 1,
                        },
                        bbox: [b.x1 * s, b.y1 * s, (b.x2 - b.x1) * s, (b.y2 - b.y1) * s],
                        score: d.score,
                    }
                })
                .collect();
            write_json(
                &dir.join(format!("detections-{}.json", split.name())),
                &serde_json::json!({ "config_hash": self.stamp.config_hash, "seed": self.stamp.seed, "results": results }),
            )?;
        }
        Ok(artifact)
    }
}

/// One row of the cross-task table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: usize,
    pub split: Split,
    pub config_hash: String,
    pub seed: u64,
    pub u_recall: Option<f64>,
    pub map_previous: Option<f64>,
    pub map_current: Option<f64>,
    pub map_both: Option<f64>,
    pub wi: Option<f64>,
    pub a_ose: usize,
}

impl ReportRow {
    fn from_artifact(a: &EvalArtifact) -> Self {
        Self {
            task: a.task,
            split: a.split,
            config_hash: a.stamp.config_hash.clone(),
            seed: a.stamp.seed,
            u_recall: a.report.u_recall,
            map_previous: a.report.map_previous,
            map_current: a.report.map_current,
            map_both: a.report.map_both,
            wi: a.report.wi,
            a_ose: a.report.a_ose,
        }
    }
}

const CSV_HEADER: [&str; 10] = [
    "task",
    "split",
    "config_hash",
    "seed",
    "u_recall",
    "map_previous",
    "map_current",
    "map_both",
    "wi",
    "a_ose",
];

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// Collects every `task*/eval-*.json` under `dir`, ordered by task then
/// split, and writes `report.txt` and `report.csv`.
pub fn aggregate_report(dir: &Path) -> Result<Vec<ReportRow>> {
    if !dir.is_dir() {
        return Err(Error::MissingPrerequisite(dir.to_path_buf()));
    }
    let mut artifacts = Vec::new();
    for entry in fs::read_dir(dir)? {
        let task_dir = entry?.path();
        let is_task = task_dir
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("task"));
        if !task_dir.is_dir() || !is_task {
            continue;
        }
        for f in fs::read_dir(&task_dir)? {
            let p = f?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with("eval-") && name.ends_with(".json") {
                artifacts.push(read_json::<EvalArtifact>(&p)?);
            }
        }
    }
    if artifacts.is_empty() {
        return Err(Error::Empty("evaluation reports"));
    }
    artifacts.sort_by_key(|a| (a.task, a.split.name()));
    let rows: Vec<ReportRow> = artifacts.iter().map(ReportRow::from_artifact).collect();

    let labels: Vec<String> = artifacts
        .iter()
        .map(|a| format!("task {} ({})", a.task, a.split.name()))
        .collect();
    let table: Vec<(&str, &EvalReport)> = labels.iter().map(String::as_str).zip(artifacts.iter().map(|a| &a.report)).collect();
    let mut text = String::new();
    let stamps: std::collections::BTreeSet<(&str, u64)> =
        rows.iter().map(|r| (r.config_hash.as_str(), r.seed)).collect();
    for (hash, seed) in stamps {
        writeln!(text, "config {hash} seed {seed}").expect("string write");
    }
    text.push_str(&EvalReport::table(&table));
    fs::write(dir.join("report.txt"), text)?;

    let mut w = csv::Writer::from_path(dir.join("report.csv")).map_err(csv_error)?;
    w.write_record(CSV_HEADER).map_err(csv_error)?;
    for r in &rows {
        w.write_record([
            r.task.to_string(),
            r.split.name().to_string(),
            r.config_hash.clone(),
            r.seed.to_string(),
            opt_field(r.u_recall),
            opt_field(r.map_previous),
            opt_field(r.map_current),
            opt_field(r.map_both),
            opt_field(r.wi),
            r.a_ose.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Parses a `report.csv` written by [`aggregate_report`].
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let bad = |m: String| Error::Malformed {
        path: path.display().to_string(),
        message: m,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != CSV_HEADER.len() {
            return Err(bad(format!("row {}: expected {} fields", i + 1, CSV_HEADER.len())));
        }
        let num = |j: usize| parse_opt(&rec[j]).map_err(|e| bad(format!("row {}: {}: {e}", i + 1, CSV_HEADER[j])));
        rows.push(ReportRow {
            task: rec[0].parse().map_err(|_| bad(format!("row {}: task", i + 1)))?,
            split: rec[1].parse()?,
            config_hash: rec[2].to_string(),
            seed: rec[3].parse().map_err(|_| bad(format!("row {}: seed", i + 1)))?,
            u_recall: num(4)?,
            map_previous: num(5)?,
            map_current: num(6)?,
            map_both: num(7)?,
            wi: num(8)?,
            a_ose: rec[9].parse().map_err(|_| bad(format!("row {}: a_ose", i + 1)))?,
        });
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SyntheticConfig;
    use crate::engine::EngineConfig;

    fn tiny() -> RunConfig {
        RunConfig {
            data: SyntheticConfig {
                train_images_per_task: 4,
                eval_images: 4,
                ..SyntheticConfig::default()
            },
            engine: EngineConfig {
                pretrain_epochs: 1,
                owl_epochs: 1,
                incremental_epochs: 1,
                replay_epochs: 1,
                ..EngineConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn split_names() {
        assert_eq!("eval".parse::<Split>().unwrap(), Split::Eval);
        assert!(matches!("test".parse::<Split>(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn owl_requires_pretrain_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::open(&tiny(), dir.path()).unwrap();
        assert!(matches!(run.owl(), Err(Error::MissingPrerequisite(_))));
        assert!(matches!(run.incremental(2), Err(Error::MissingPrerequisite(_))));
    }

    #[test]
    fn directory_bound_to_one_config() {
        let dir = tempfile::tempdir().unwrap();
        Run::open(&tiny(), dir.path()).unwrap();
        let other = RunConfig { seed: 5, ..tiny() };
        assert!(matches!(
            Run::open(&other, dir.path()),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }

    #[test]
    fn empty_run_dir_has_no_report() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(aggregate_report(dir.path()), Err(Error::Empty(_))));
    }

    #[test]
    fn full_run_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::open(&tiny(), dir.path()).unwrap();
        run.pretrain().unwrap();
        run.owl().unwrap();
        let first = run.evaluate(1, None, Split::Eval, true).unwrap();
        let json1 = fs::read(dir.path().join("task1/eval-eval.json")).unwrap();
        assert_eq!(run.evaluate(1, None, Split::Eval, true).unwrap(), first);
        assert_eq!(fs::read(dir.path().join("task1/eval-eval.json")).unwrap(), json1);

        let single = aggregate_report(dir.path()).unwrap();
        assert_eq!(single.len(), 1);

        run.incremental(2).unwrap();
        run.evaluate(2, None, Split::Eval, false).unwrap();
        let rows = aggregate_report(dir.path()).unwrap();
        assert_eq!(rows.iter().map(|r| r.task).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(read_report_csv(&dir.path().join("report.csv")).unwrap(), rows);
        assert!(matches!(
            run.evaluate(2, Some(&run.pretrain_checkpoint()), Split::Eval, false),
            Err(Error::InvalidArgument(_))
        ));
    }
}
