//! Live annotation sessions and their on-disk form.
//!
//! A session directory holds `meta.json`, `image.ppm`, optional `gt.pgm`,
//! `clicks.jsonl`, `p0.prob`, and model directories `theta0/`, `theta/` and
//! `undo/<click_count>/`.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use segsteer_core::adapt::{AdaptConfig, LossTrace, Session, SessionOptions};
use segsteer_core::annotation::Click;
use segsteer_core::metrics::{confusion, iou, CurvePoint, IouCurve, IouReport};
use segsteer_core::raster::{read_pgm, read_ppm, read_prob, write_pgm, write_ppm, write_prob, ImageTensor, LabelMap, ProbMap};
use segsteer_core::segnet::{load_model, save_model};
use segsteer_core::tensor::ParamSet;
use segsteer_core::{Error, Result};

use crate::registry::{ModelEntry, Registry};

/// Parameter snapshots kept for undo.
pub const UNDO_DEPTH: usize = 16;

#[derive(Clone, Debug)]
pub struct Snapshot {
    /// Clicks in the session when the snapshot was taken.
    pub click_count: usize,
    pub theta: ParamSet,
}

#[derive(Clone, Debug)]
pub struct SessionRecord {
    pub id: String,
    pub created_at: u64,
    pub model_id: String,
    pub gt: Option<LabelMap>,
    pub session: Session,
    pub undo: VecDeque<Snapshot>,
    pub curve: IouCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    id: String,
    created_at: u64,
    model_id: String,
    options: SessionOptions,
    curve: IouCurve,
    undo: Vec<usize>,
}

/// Outcome of an undo request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Undone {
    pub click: Click,
    /// False when the snapshot had already left the undo ring.
    pub theta_restored: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl SessionRecord {
    pub fn new(id: String, entry: &ModelEntry, image: ImageTensor, gt: Option<LabelMap>, options: SessionOptions) -> Result<Self> {
        if let Some(gt) = &gt {
            if (gt.height(), gt.width()) != (image.height(), image.width()) {
                return Err(Error::Invalid("ground truth and image differ in size".into()));
            }
            gt.validate(entry.model.num_classes())?;
        }
        let session = Session::new(entry.model.clone(), entry.params.clone(), image, options)?;
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut rec = Self {
            id,
            created_at,
            model_id: entry.model_id.clone(),
            gt,
            session,
            undo: VecDeque::new(),
            curve: IouCurve::default(),
        };
        if let Some(report) = rec.score(&rec.session.p0().argmax())? {
            rec.curve.push(CurvePoint {
                click_count: 0,
                miou: report.mean,
                per_class_iou: report.per_class,
            })?;
        }
        Ok(rec)
    }

    pub fn num_classes(&self) -> usize {
        self.session.model().num_classes()
    }

    /// IoU of `pred` against the session's ground truth, if it has one.
    pub fn score(&self, pred: &LabelMap) -> Result<Option<IouReport>> {
        match &self.gt {
            Some(gt) => Ok(Some(iou(&confusion(pred, gt, self.num_classes())?)?)),
            None => Ok(None),
        }
    }

    pub fn initial_miou(&self) -> Option<f64> {
        self.curve.records.first().map(|p| p.miou)
    }

    pub fn prediction(&self) -> Result<ProbMap> {
        self.session.disir_infer()
    }

    /// Re-scores the current prediction into the curve.
    pub fn refresh_curve(&mut self) -> Result<Option<f64>> {
        let pred = self.prediction()?.argmax();
        let Some(report) = self.score(&pred)? else {
            return Ok(None);
        };
        let miou = report.mean;
        self.curve.upsert(CurvePoint {
            click_count: self.session.clicks().len(),
            miou,
            per_class_iou: report.per_class,
        })?;
        Ok(Some(miou))
    }

    pub fn add_click(&mut self, row: usize, col: usize, class_id: usize) -> Result<Click> {
        let before = Snapshot {
            click_count: self.session.clicks().len(),
            theta: self.session.theta().clone(),
        };
        let click = self.session.add_click(row, col, class_id)?;
        self.undo.push_back(before);
        while self.undo.len() > UNDO_DEPTH {
            self.undo.pop_front();
        }
        self.refresh_curve()?;
        Ok(click)
    }

    pub fn adapt(&mut self, config: &AdaptConfig) -> Result<(LossTrace, Option<f64>)> {
        let trace = self.session.adapt(config)?;
        let miou = self.refresh_curve()?;
        Ok((trace, miou))
    }

    /// Drops the last click and restores θ to its value before that click.
    pub fn undo(&mut self) -> Result<Option<Undone>> {
        let Some(click) = self.session.pop_click() else {
            return Ok(None);
        };
        let count = self.session.clicks().len();
        let mut theta_restored = false;
        if self.undo.back().is_some_and(|s| s.click_count == count) {
            let snap = self.undo.pop_back().expect("checked non-empty");
            self.session.set_theta(snap.theta)?;
            theta_restored = true;
        }
        self.curve.truncate(count);
        self.refresh_curve()?;
        Ok(Some(Undone { click, theta_restored }))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let config = self.session.model().config();
        let meta = Meta {
            id: self.id.clone(),
            created_at: self.created_at,
            model_id: self.model_id.clone(),
            options: *self.session.options(),
            curve: self.curve.clone(),
            undo: self.undo.iter().map(|s| s.click_count).collect(),
        };
        write_ppm(&dir.join("image.ppm"), self.session.image())?;
        if let Some(gt) = &self.gt {
            write_pgm(&dir.join("gt.pgm"), gt)?;
        }
        let mut clicks = String::new();
        for c in self.session.clicks() {
            clicks.push_str(&serde_json::to_string(c).expect("click serializes"));
            clicks.push('\n');
        }
        let path = dir.join("clicks.jsonl");
        fs::write(&path, clicks).map_err(io_err(&path))?;
        write_prob(&dir.join("p0.prob"), self.session.p0())?;
        save_model(self.session.theta0(), config, &dir.join("theta0"))?;
        save_model(self.session.theta(), config, &dir.join("theta"))?;
        let undo_dir = dir.join("undo");
        if undo_dir.exists() {
            fs::remove_dir_all(&undo_dir).map_err(io_err(&undo_dir))?;
        }
        for snap in &self.undo {
            save_model(&snap.theta, config, &undo_dir.join(snap.click_count.to_string()))?;
        }
        // meta last: a directory without it is an interrupted write
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(io_err(&path))
    }

    /// Rebuilds a session from `dir`; the cached p0 must match a fresh forward pass.
    pub fn load(dir: &Path, registry: &Registry) -> Result<Self> {
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let entry = registry
            .get(Some(&meta.model_id))
            .ok_or_else(|| Error::Invalid(format!("session {} uses unknown model {}", meta.id, meta.model_id)))?;
        let image = read_ppm(&dir.join("image.ppm"))?;
        let gt_path = dir.join("gt.pgm");
        let gt = if gt_path.exists() {
            Some(read_pgm(&gt_path, Some(entry.model.num_classes()))?)
        } else {
            None
        };
        let (theta0, _) = load_model(&dir.join("theta0"))?;
        let mut session = Session::new(entry.model.clone(), theta0, image, meta.options)?;
        if !session.p0().bit_eq(&read_prob(&dir.join("p0.prob"))?) {
            return Err(Error::Format(format!("session {}: stored p0 disagrees with θ0", meta.id)));
        }
        let path = dir.join("clicks.jsonl");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let click: Click = serde_json::from_str(line).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            session.push_click(click)?;
        }
        session.set_theta(load_model(&dir.join("theta"))?.0)?;
        let mut undo = VecDeque::new();
        for count in meta.undo {
            let theta = load_model(&dir.join("undo").join(count.to_string()))?.0;
            undo.push_back(Snapshot { click_count: count, theta });
        }
        Ok(Self {
            id: meta.id,
            created_at: meta.created_at,
            model_id: meta.model_id,
            gt,
            session,
            undo,
            curve: meta.curve,
        })
    }
}
