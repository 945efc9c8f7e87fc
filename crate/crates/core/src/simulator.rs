//! Simulated annotator and benchmark sessions.
//!
//! The annotator looks at the current argmax map, finds the largest
//! connected region of wrongly labelled pixels, and clicks its inner-most
//! pixel with the ground-truth class.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapt::{initial_prediction, AdaptConfig, LossTrace, Session, SessionOptions};
use crate::annotation::Click;
use crate::error::{Error, Result};
use crate::metrics::{confusion, iou};
use crate::raster::{ImageTensor, LabelMap};
use crate::segnet::MiniLink;
use crate::tensor::ParamSet;

/// `H×W` booleans, true where prediction and ground truth disagree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ErrorMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("error mask", "length differs from height·width"));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }
    pub fn clear(&mut self, row: usize, col: usize) {
        self.data[row * self.width + col] = false;
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

pub fn error_mask(pred: &LabelMap, gt: &LabelMap) -> Result<ErrorMask> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape("error mask", "prediction and ground truth differ in size"));
    }
    let data = pred.data().iter().zip(gt.data()).map(|(p, g)| p != g).collect();
    ErrorMask::new(pred.height(), pred.width(), data)
}

/// A maximal 4-connected set of mask pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// Pixels as `(row, col)`, sorted.
    pub pixels: Vec<(usize, usize)>,
    pub area: usize,
    /// Lexicographically smallest pixel.
    pub anchor: (usize, usize),
}

fn neighbors(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (r > 0).then(|| (r - 1, c));
    let down = (r + 1 < h).then(|| (r + 1, c));
    let left = (c > 0).then(|| (r, c - 1));
    let right = (c + 1 < w).then(|| (r, c + 1));
    [up, down, left, right].into_iter().flatten()
}

/// Components sorted by area descending, then anchor ascending.
pub fn connected_components(mask: &ErrorMask) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back((start / w, start % w));
        let mut pixels = Vec::new();
        while let Some((r, c)) = queue.pop_front() {
            pixels.push((r, c));
            for (nr, nc) in neighbors(r, c, h, w) {
                let i = nr * w + nc;
                if mask.data[i] && !seen[i] {
                    seen[i] = true;
                    queue.push_back((nr, nc));
                }
            }
        }
        pixels.sort_unstable();
        // row-major scan reaches the smallest pixel first
        let anchor = pixels[0];
        out.push(Component {
            area: pixels.len(),
            anchor,
            pixels,
        });
    }
    out.sort_by(|a, b| b.area.cmp(&a.area).then(a.anchor.cmp(&b.anchor)));
    out
}

/// The component pixel farthest (4-connected steps) from any pixel outside
/// the mask. The image exterior only counts as outside when the mask covers
/// the whole image.
pub fn place_click(component: &Component, gt: &LabelMap, mask: &ErrorMask, order: u64) -> Click {
    let (h, w) = (mask.height, mask.width);
    let full = mask.data.iter().all(|&v| v);
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    for &(r, c) in &component.pixels {
        let on_edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
        if (full && on_edge) || neighbors(r, c, h, w).any(|(nr, nc)| !mask.get(nr, nc)) {
            dist[r * w + c] = 1;
            queue.push_back((r, c));
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[r * w + c];
        for (nr, nc) in neighbors(r, c, h, w) {
            let i = nr * w + nc;
            if mask.get(nr, nc) && dist[i] == usize::MAX {
                dist[i] = d + 1;
                queue.push_back((nr, nc));
            }
        }
    }
    let mut best = component.pixels[0];
    for &(r, c) in &component.pixels {
        // pixels are sorted, so strict comparison keeps the smallest on ties
        if dist[r * w + c] > dist[best.0 * w + best.1] {
            best = (r, c);
        }
    }
    Click::new(best.0, best.1, gt.get(best.0, best.1) as usize, order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Guidance channels only; parameters stay at θ0.
    Disir,
    /// Guidance plus click fine-tuning.
    Disca,
}

impl SimMode {
    pub fn name(self) -> &'static str {
        match self {
            SimMode::Disir => "disir",
            SimMode::Disca => "disca",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Adapt after every click.
    #[default]
    Incremental,
    /// Adapt once after the last click.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub click: Click,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Empty when no adaptation ran after this click.
    pub loss_trace: LossTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: SimMode,
    pub initial_miou: f64,
    pub records: Vec<SimRecord>,
    /// The prediction became perfect before all clicks were issued.
    pub saturated: bool,
}

impl SimReport {
    pub fn final_miou(&self) -> f64 {
        self.records.last().map_or(self.initial_miou, |r| r.miou)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: SimMode,
    pub num_clicks: usize,
    pub protocol: Protocol,
    pub adapt: AdaptConfig,
    pub session: SessionOptions,
}

impl SimConfig {
    pub fn new(mode: SimMode) -> Self {
        Self {
            mode,
            num_clicks: 10,
            protocol: Protocol::Incremental,
            adapt: AdaptConfig::default(),
            session: SessionOptions::default(),
        }
    }
}

/// Runs one simulated annotation session on a single image.
pub fn run_session(model: &MiniLink, theta0: &ParamSet, image: &ImageTensor, gt: &LabelMap, config: &SimConfig) -> Result<SimReport> {
    if config.num_clicks == 0 {
        return Err(Error::Invalid("a session needs at least one click".into()));
    }
    let classes = model.num_classes();
    gt.validate(classes)?;
    if (gt.height(), gt.width()) != (image.height(), image.width()) {
        return Err(Error::shape("session", "image and ground truth differ in size"));
    }
    let initial = initial_prediction(model, theta0, image)?.argmax();
    let initial_miou = iou(&confusion(&initial, gt, classes)?)?.mean;
    let mut session = Session::new(model.clone(), theta0.clone(), image.clone(), config.session)?;
    let mut records = Vec::with_capacity(config.num_clicks);
    let mut saturated = false;
    let mut pred = session.disir_infer()?.argmax();
    for i in 0..config.num_clicks {
        let mut mask = error_mask(&pred, gt)?;
        for c in session.clicks() {
            mask.clear(c.row, c.col);
        }
        let Some(largest) = connected_components(&mask).into_iter().next() else {
            saturated = true;
            break;
        };
        let click = place_click(&largest, gt, &mask, i as u64);
        session.push_click(click)?;
        let adapt_now = config.mode == SimMode::Disca
            && (config.protocol == Protocol::Incremental || i + 1 == config.num_clicks);
        let loss_trace = if adapt_now {
            session.adapt(&config.adapt)?
        } else {
            Vec::new()
        };
        pred = session.disir_infer()?.argmax();
        let report = iou(&confusion(&pred, gt, classes)?)?;
        records.push(SimRecord {
            click,
            miou: report.mean,
            per_class_iou: report.per_class,
            loss_trace,
        });
    }
    // Batch runs that saturate early still owe their single adaptation.
    if saturated && config.mode == SimMode::Disca && config.protocol == Protocol::Batch && !records.is_empty() {
        let trace = session.adapt(&config.adapt)?;
        pred = session.disir_infer()?.argmax();
        let report = iou(&confusion(&pred, gt, classes)?)?;
        let last = records.last_mut().expect("non-empty");
        last.miou = report.mean;
        last.per_class_iou = report.per_class;
        last.loss_trace = trace;
    }
    Ok(SimReport {
        mode: config.mode,
        initial_miou,
        records,
        saturated,
    })
}

/// CSV of per-click mIoU: `fixture_id, mode, click_index, row, col, class, miou`.
///
/// Each report contributes a click-0 row holding the initial mIoU, with the
/// click columns left empty.
pub fn reports_csv(reports: &[(String, SimReport)]) -> String {
    let mut out = String::from("fixture_id,mode,click_index,row,col,class,miou\n");
    for (id, rep) in reports {
        let mode = rep.mode.name();
        writeln!(out, "{id},{mode},0,,,,{}", rep.initial_miou).unwrap();
        for (i, r) in rep.records.iter().enumerate() {
            writeln!(
                out,
                "{id},{mode},{},{},{},{},{}",
                i + 1,
                r.click.row,
                r.click.col,
                r.click.class_id,
                r.miou
            )
            .unwrap();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub fixture_id: String,
    pub mode: SimMode,
    pub initial_miou: f64,
    pub final_miou: f64,
    pub clicks: usize,
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: SimMode,
    pub fixtures: usize,
    pub mean_initial_miou: f64,
    pub mean_final_miou: f64,
    /// `mean_final_miou − mean_initial_miou`.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub fixtures: Vec<FixtureSummary>,
    pub modes: Vec<ModeSummary>,
    /// Mean final DISCA minus mean final DISIR, when both modes ran.
    pub disca_minus_disir: Option<f64>,
}

impl BenchmarkSummary {
    pub fn mode(&self, mode: SimMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

pub fn summarize(reports: &[(String, SimReport)]) -> BenchmarkSummary {
    let fixtures: Vec<FixtureSummary> = reports
        .iter()
        .map(|(id, r)| FixtureSummary {
            fixture_id: id.clone(),
            mode: r.mode,
            initial_miou: r.initial_miou,
            final_miou: r.final_miou(),
            clicks: r.records.len(),
            saturated: r.saturated,
        })
        .collect();
    let mut modes = Vec::new();
    for mode in [SimMode::Disir, SimMode::Disca] {
        let rows: Vec<&FixtureSummary> = fixtures.iter().filter(|f| f.mode == mode).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let mean_initial_miou = rows.iter().map(|f| f.initial_miou).sum::<f64>() / n;
        let mean_final_miou = rows.iter().map(|f| f.final_miou).sum::<f64>() / n;
        modes.push(ModeSummary {
            mode,
            fixtures: rows.len(),
            mean_initial_miou,
            mean_final_miou,
            margin: mean_final_miou - mean_initial_miou,
        });
    }
    let final_of = |m: SimMode| modes.iter().find(|s: &&ModeSummary| s.mode == m).map(|s| s.mean_final_miou);
    let disca_minus_disir = match (final_of(SimMode::Disca), final_of(SimMode::Disir)) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    BenchmarkSummary {
        fixtures,
        modes,
        disca_minus_disir,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::MiniLinkConfig;

    fn mask_from(rows: &[&str]) -> ErrorMask {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
        ErrorMask::new(h, w, data).unwrap()
    }

    #[test]
    fn error_mask_cases() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(error_mask(&gt, &gt).unwrap().count(), 0);
        let inv = LabelMap::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(error_mask(&inv, &gt).unwrap().count(), 4);
        let mut one = gt.clone();
        one.set(1, 1, 1);
        let m = error_mask(&one, &gt).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 1));
        assert!(error_mask(&LabelMap::filled(2, 3, 0), &gt).is_err());
    }

    #[test]
    fn diagonal_pixels_are_separate() {
        let m = mask_from(&["#.", ".#"]);
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 2);
        assert!(cc.iter().all(|c| c.area == 1));
        assert_eq!(cc[0].anchor, (0, 0));
        assert!(connected_components(&mask_from(&["..", ".."])).is_empty());
    }

    #[test]
    fn components_sorted_by_area_then_anchor() {
        let m = mask_from(&["#..##", "#....", "...##"]);
        let cc = connected_components(&m);
        let summary: Vec<_> = cc.iter().map(|c| (c.area, c.anchor)).collect();
        assert_eq!(summary, vec![(2, (0, 0)), (2, (0, 3)), (2, (2, 3))]);
    }

    #[test]
    fn click_placement_cases() {
        let gt = LabelMap::filled(5, 7, 1);
        let single = mask_from(&[".......", ".......", "...#...", ".......", "......."]);
        let c = &connected_components(&single)[0];
        assert_eq!(place_click(c, &gt, &single, 0), Click::new(2, 3, 1, 0));

        let square = mask_from(&[".......", ".###...", ".###...", ".###...", "......."]);
        let c = &connected_components(&square)[0];
        let click = place_click(c, &gt, &square, 3);
        assert_eq!((click.row, click.col, click.order), (2, 2, 3));

        let line = mask_from(&[".#####."]);
        let c = &connected_components(&line)[0];
        let click = place_click(c, &LabelMap::filled(1, 7, 0), &line, 0);
        assert_eq!((click.row, click.col), (0, 1 + 2));

        // the image border is not a boundary while some pixel is correct
        let corner = mask_from(&["###.", "###.", "###.", "...."]);
        let c = &connected_components(&corner)[0];
        let click = place_click(c, &LabelMap::filled(4, 4, 0), &corner, 0);
        assert_eq!((click.row, click.col), (0, 0));
    }

    #[test]
    fn placement_ties_pick_smallest_pixel() {
        let gt = LabelMap::new(1, 4, vec![0, 1, 0, 1]).unwrap();
        let all = mask_from(&["####"]);
        let c = &connected_components(&all)[0];
        // a full mask falls back to the image border: every pixel is at distance 1
        assert_eq!(place_click(c, &gt, &all, 0), Click::new(0, 0, 0, 0));
    }

    fn tiny_scene() -> (MiniLink, ParamSet, ImageTensor, LabelMap) {
        let model = MiniLink::new(MiniLinkConfig::default()).unwrap();
        let params = model.init_params();
        let mut img = ImageTensor::zeros(16, 16, 3);
        let mut gt = LabelMap::filled(16, 16, 0);
        for r in 4..12 {
            for c in 4..12 {
                gt.set(r, c, 1);
                for ch in 0..3 {
                    img.set(r, c, ch, 0.8);
                }
            }
        }
        (model, params, img, gt)
    }

    #[test]
    fn perfect_prediction_saturates_immediately() {
        let (model, params, img, _) = tiny_scene();
        let pred = initial_prediction(&model, &params, &img).unwrap().argmax();
        let mut cfg = SimConfig::new(SimMode::Disir);
        cfg.num_clicks = 1;
        let rep = run_session(&model, &params, &img, &pred, &cfg).unwrap();
        assert!(rep.saturated);
        assert!(rep.records.is_empty());
        assert_eq!(rep.final_miou(), rep.initial_miou);
    }

    #[test]
    fn clicks_are_on_wrong_pixels_and_distinct() {
        let (model, params, img, gt) = tiny_scene();
        for mode in [SimMode::Disir, SimMode::Disca] {
            let mut cfg = SimConfig::new(mode);
            cfg.num_clicks = 5;
            cfg.adapt.steps = 2;
            let rep = run_session(&model, &params, &img, &gt, &cfg).unwrap();
            let mut seen = std::collections::HashSet::new();
            for r in &rep.records {
                assert_eq!(r.click.class_id, gt.get(r.click.row, r.click.col) as usize);
                assert!(seen.insert((r.click.row, r.click.col)));
                assert_eq!(r.loss_trace.is_empty(), mode == SimMode::Disir);
            }
        }
    }

    #[test]
    fn summary_and_csv() {
        let rep = SimReport {
            mode: SimMode::Disca,
            initial_miou: 0.5,
            records: vec![SimRecord {
                click: Click::new(1, 2, 1, 0),
                miou: 0.75,
                per_class_iou: vec![Some(0.5), Some(1.0)],
                loss_trace: Vec::new(),
            }],
            saturated: false,
        };
        let reports = vec![("s0".to_string(), rep)];
        assert_eq!(
            reports_csv(&reports),
            "fixture_id,mode,click_index,row,col,class,miou\ns0,disca,0,,,,0.5\ns0,disca,1,1,2,1,0.75\n"
        );
        let s = summarize(&reports);
        let m = s.mode(SimMode::Disca).unwrap();
        assert_eq!((m.mean_initial_miou, m.mean_final_miou, m.margin), (0.5, 0.75, 0.25));
        assert!(s.disca_minus_disir.is_none());
    }
}
