//! Click-driven test-time adaptation.
//!
//! The fine-tuning loss over a target image is
//!
//! ```text
//! L(θ) = (1/|A|) Σ_{q∈A} −log f(x; θ)[q, c(q)]  +  λ · ‖f(x; θ) − p0‖₁
//! ```
//!
//! where `A` is the set of clicked pixels, `c(q)` the clicked class, and
//! `p0 = f(x; θ0)` the prediction of the model before any adaptation. During
//! fine-tuning the guidance channels are held at zero; the clicks are only
//! encoded into the input for the final, displayed inference.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{build_sparse_target, encode_clicks, sample_random_clicks, zero_encoding, Click, SparseTarget};
use crate::annotation::DESK_RADIUS;
use crate::error::{Error, Result};
use crate::raster::{stitch, tile_grid, ImageTensor, LabeledImage, ProbMap, TileSpec};
use crate::segnet::MiniLink;
use crate::tensor::{GradMap, Graph, NodeId, ParamSet};

/// Learning rate reported for a full-size LinkNet; far too small for MiniLink.
pub const PAPER_LR: f64 = 2e-7;

/// Desk-scale default learning rate for the click fine-tuning loop.
pub const DESK_LR: f64 = 3e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Mode {
    /// Mean over all `H·W·N` entries.
    #[default]
    Mean,
    /// Plain sum, the unnormalised `‖·‖₁`.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub l1_mode: L1Mode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            lr: DESK_LR,
            lambda: 1.0,
            l1_mode: L1Mode::Mean,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Invalid("adaptation needs at least one step".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Invalid(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub reg: f64,
    pub total: f64,
}

/// Direct evaluation of the adaptation loss on probability maps.
pub fn loss_eq1(f: &ProbMap, c: &SparseTarget, p0: &ProbMap, lambda: f64, mode: L1Mode) -> Result<LossBreakdown> {
    let dims = (f.height(), f.width(), f.classes());
    if dims != (p0.height(), p0.width(), p0.classes()) || (c.height(), c.width()) != (dims.0, dims.1) {
        return Err(Error::shape("loss", "prediction, target and initial prediction must agree"));
    }
    let labeled = c.labeled();
    let mut ce = 0.0;
    for &(r, col, k) in &labeled {
        if k >= dims.2 {
            return Err(Error::ClassRange {
                class_id: k,
                num_classes: dims.2,
            });
        }
        let v = f.get(r, col, k);
        if !(v > 0.0) {
            return Err(Error::LogDomain { value: v });
        }
        ce -= v.ln();
    }
    if !labeled.is_empty() {
        ce /= labeled.len() as f64;
    }
    let l1 = f.l1_distance(p0);
    let reg = match mode {
        L1Mode::Mean => l1 / f.planar().len() as f64,
        L1Mode::Sum => l1,
    };
    Ok(LossBreakdown {
        ce,
        reg,
        total: ce + lambda * reg,
    })
}

/// Nodes of a recorded loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub ce: Option<NodeId>,
    pub reg: NodeId,
    pub total: NodeId,
}

/// Records the loss for prediction node `f` (`[N, H, W]`) on `g`.
///
/// `ce_scale` multiplies the summed negative log-likelihood of the labelled
/// pixels and `reg_scale` the summed absolute deviation from `p0`.
pub fn record_loss(
    g: &mut Graph,
    f: NodeId,
    target: &SparseTarget,
    p0: &ProbMap,
    lambda: f64,
    ce_scale: f64,
    reg_scale: f64,
) -> Result<LossNodes> {
    let classes = p0.classes();
    let ce = if target.labeled_count() > 0 {
        let logf = g.log(f)?;
        let picked = g.masked_select_sum(logf, target.target_mask(classes))?;
        Some(g.mul_scalar(picked, -ce_scale)?)
    } else {
        None
    };
    let p0n = g.constant(p0.to_tensor());
    let neg = g.neg(p0n)?;
    let diff = g.add(f, neg)?;
    let abs = g.abs(diff)?;
    let l1 = g.sum(abs)?;
    let reg = g.mul_scalar(l1, reg_scale)?;
    let weighted = g.mul_scalar(reg, lambda)?;
    let total = match ce {
        Some(ce) => g.add(ce, weighted)?,
        None => weighted,
    };
    Ok(LossNodes { ce, reg, total })
}

/// The prediction of the unadapted model with neutral guidance.
pub fn initial_prediction(model: &MiniLink, theta0: &ParamSet, image: &ImageTensor) -> Result<ProbMap> {
    let ann = zero_encoding(image.height(), image.width(), model.num_classes());
    model.forward(theta0, image, &ann)
}

/// Inference with the clicks encoded into the guidance channels.
pub fn disir_infer(
    model: &MiniLink,
    theta: &ParamSet,
    image: &ImageTensor,
    clicks: &[Click],
    radius: f64,
) -> Result<ProbMap> {
    let ann = encode_clicks(clicks, image.height(), image.width(), model.num_classes(), radius)?;
    model.forward(theta, image, &ann)
}

/// Loss values before each step and after the last.
pub type LossTrace = Vec<LossBreakdown>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub click_count: usize,
    pub trace: LossTrace,
}

/// CSV with columns `round, step, ce, reg, total`.
pub fn loss_trace_csv(rounds: &[RoundTrace]) -> String {
    let mut out = String::from("round,step,ce,reg,total\n");
    for r in rounds {
        for (step, l) in r.trace.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", r.round, step, l.ce, l.reg, l.total).unwrap();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionOptions {
    pub radius: f64,
    /// Process the image tile by tile when it exceeds the tile size.
    pub tiling: Option<TileSpec>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            radius: DESK_RADIUS,
            tiling: None,
        }
    }
}

/// One unit of the forward pass: a tile, or the whole image.
#[derive(Clone, Debug)]
struct Piece {
    origin: (usize, usize),
    image: ImageTensor,
    p0: ProbMap,
}

/// Adaptation state for one target image.
#[derive(Clone, Debug)]
pub struct Session {
    model: MiniLink,
    image: ImageTensor,
    options: SessionOptions,
    theta0: ParamSet,
    theta: ParamSet,
    p0: ProbMap,
    pieces: Vec<Piece>,
    clicks: Vec<Click>,
    next_order: u64,
    rounds: Vec<RoundTrace>,
}

impl Session {
    pub fn new(model: MiniLink, theta0: ParamSet, image: ImageTensor, options: SessionOptions) -> Result<Self> {
        model.check_params(&theta0)?;
        if !(options.radius > 0.0) {
            return Err(Error::Invalid("guidance radius must be positive".into()));
        }
        let (h, w) = (image.height(), image.width());
        let origins = match options.tiling {
            Some(spec) if h > spec.size || w > spec.size => tile_grid(h, w, spec)?.origins,
            _ => vec![(0, 0)],
        };
        let mut pieces = Vec::with_capacity(origins.len());
        for origin in origins {
            let crop = if pieces.is_empty() && (h, w) == piece_dims(&options, h, w) {
                image.clone()
            } else {
                let (th, tw) = piece_dims(&options, h, w);
                image.crop(origin.0, origin.1, th, tw)?
            };
            let p0 = initial_prediction(&model, &theta0, &crop)?;
            pieces.push(Piece { origin, image: crop, p0 });
        }
        let p0 = if pieces.len() == 1 {
            pieces[0].p0.clone()
        } else {
            let tiles: Vec<_> = pieces.iter().map(|p| (p.origin, p.p0.clone())).collect();
            stitch(&tiles, h, w)?
        };
        Ok(Self {
            model,
            image,
            options,
            theta: theta0.clone(),
            theta0,
            p0,
            pieces,
            clicks: Vec::new(),
            next_order: 0,
            rounds: Vec::new(),
        })
    }

    pub fn model(&self) -> &MiniLink {
        &self.model
    }
    pub fn image(&self) -> &ImageTensor {
        &self.image
    }
    pub fn options(&self) -> &SessionOptions {
        &self.options
    }
    pub fn theta0(&self) -> &ParamSet {
        &self.theta0
    }
    pub fn theta(&self) -> &ParamSet {
        &self.theta
    }
    /// Cached initial prediction; never recomputed.
    pub fn p0(&self) -> &ProbMap {
        &self.p0
    }
    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }
    pub fn rounds(&self) -> &[RoundTrace] {
        &self.rounds
    }
    pub fn num_tiles(&self) -> usize {
        self.pieces.len()
    }

    /// Replaces the working parameters, e.g. when undoing a round.
    pub fn set_theta(&mut self, theta: ParamSet) -> Result<()> {
        if !theta.congruent(&self.theta0) {
            return Err(Error::shape("set_theta", "parameter layout differs from the session model"));
        }
        self.theta = theta;
        Ok(())
    }

    /// Records a click with the next order number.
    pub fn add_click(&mut self, row: usize, col: usize, class_id: usize) -> Result<Click> {
        let click = Click::new(row, col, class_id, self.next_order);
        self.push_click(click)?;
        Ok(click)
    }

    /// Records a click whose order must exceed every earlier click's.
    pub fn push_click(&mut self, click: Click) -> Result<()> {
        click.check_bounds(self.image.height(), self.image.width())?;
        if click.class_id >= self.model.num_classes() {
            return Err(Error::ClassRange {
                class_id: click.class_id,
                num_classes: self.model.num_classes(),
            });
        }
        if click.order < self.next_order {
            return Err(Error::Invalid(format!(
                "click order {} is not above the previous order",
                click.order
            )));
        }
        self.next_order = click.order + 1;
        self.clicks.push(click);
        Ok(())
    }

    /// Removes and returns the most recent click.
    pub fn pop_click(&mut self) -> Option<Click> {
        let c = self.clicks.pop()?;
        self.rounds.retain(|r| r.click_count <= self.clicks.len());
        Some(c)
    }

    pub fn sparse_target(&self) -> Result<SparseTarget> {
        build_sparse_target(&self.clicks, self.image.height(), self.image.width())
    }

    /// The displayed prediction: current parameters, clicks encoded as guidance.
    pub fn disir_infer(&self) -> Result<ProbMap> {
        self.infer_with(&self.theta)
    }

    /// Guided inference with arbitrary parameters of the session's layout.
    pub fn infer_with(&self, theta: &ParamSet) -> Result<ProbMap> {
        if self.pieces.len() == 1 {
            return disir_infer(&self.model, theta, &self.image, &self.clicks, self.options.radius);
        }
        let (h, w) = (self.image.height(), self.image.width());
        let full = encode_clicks(&self.clicks, h, w, self.model.num_classes(), self.options.radius)?;
        let mut tiles = Vec::with_capacity(self.pieces.len());
        for piece in &self.pieces {
            let ann = full.crop(piece.origin.0, piece.origin.1, piece.image.height(), piece.image.width())?;
            tiles.push((piece.origin, self.model.forward(theta, &piece.image, &ann)?));
        }
        stitch(&tiles, h, w)
    }

    /// Loss at `theta`, with its gradient when `with_grad` is set.
    pub fn loss_at(&self, theta: &ParamSet, config: &AdaptConfig, with_grad: bool) -> Result<(LossBreakdown, Option<GradMap>)> {
        let target = self.sparse_target()?;
        let labeled = target.labeled_count();
        let ce_scale = if labeled > 0 { 1.0 / labeled as f64 } else { 0.0 };
        let entries: usize = self.pieces.iter().map(|p| p.p0.planar().len()).sum();
        let reg_scale = match config.l1_mode {
            L1Mode::Mean => 1.0 / entries as f64,
            L1Mode::Sum => 1.0,
        };
        let classes = self.model.num_classes();
        let mut grads = with_grad.then(|| GradMap::zeros_like(theta));
        let (mut ce, mut reg) = (0.0, 0.0);
        for piece in &self.pieces {
            let (ph, pw) = (piece.image.height(), piece.image.width());
            let piece_target = if self.pieces.len() == 1 {
                target.clone()
            } else {
                target.crop(piece.origin.0, piece.origin.1, ph, pw)?
            };
            let mut g = Graph::new();
            let f = self.model.record(&mut g, theta, &piece.image, &zero_encoding(ph, pw, classes))?;
            let nodes = record_loss(&mut g, f, &piece_target, &piece.p0, config.lambda, ce_scale, reg_scale)?;
            ce += nodes.ce.map_or(0.0, |n| g.value(n).item());
            reg += g.value(nodes.reg).item();
            if let Some(acc) = grads.as_mut() {
                acc.accumulate(&g.backward(nodes.total, theta)?)?;
            }
        }
        let total = ce + config.lambda * reg;
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "adaptation loss" });
        }
        Ok((LossBreakdown { ce, reg, total }, grads))
    }

    /// Runs `config.steps` plain SGD steps on the current clicks and records
    /// the trace as a new round. On failure the parameters are left as they
    /// were before the call.
    pub fn adapt(&mut self, config: &AdaptConfig) -> Result<LossTrace> {
        config.validate()?;
        let before = self.theta.clone();
        match self.adapt_inner(config) {
            Ok(trace) => {
                self.rounds.push(RoundTrace {
                    round: self.rounds.len(),
                    click_count: self.clicks.len(),
                    trace: trace.clone(),
                });
                Ok(trace)
            }
            Err(e) => {
                self.theta = before;
                Err(e)
            }
        }
    }

    fn adapt_inner(&mut self, config: &AdaptConfig) -> Result<LossTrace> {
        let mut trace = Vec::with_capacity(config.steps + 1);
        for _ in 0..config.steps {
            let (loss, grads) = self.loss_at(&self.theta, config, true)?;
            let grads = grads.expect("gradient requested");
            if !grads.is_finite() {
                return Err(Error::NonFinite { op: "adaptation gradient" });
            }
            trace.push(loss);
            self.theta.sgd_step(&grads, config.lr)?;
        }
        let (last, _) = self.loss_at(&self.theta, config, false)?;
        trace.push(last);
        Ok(trace)
    }
}

fn piece_dims(options: &SessionOptions, h: usize, w: usize) -> (usize, usize) {
    match options.tiling {
        Some(spec) if h > spec.size || w > spec.size => (spec.size, spec.size),
        _ => (h, w),
    }
}

/// Fine-tunes `session`'s parameters on its clicks; see [`Session::adapt`].
pub fn disca_adapt(session: &mut Session, config: &AdaptConfig) -> Result<LossTrace> {
    session.adapt(config)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Each patch draws `k ~ U{0..=max_clicks}` simulated clicks.
    pub max_clicks: usize,
    pub seed: u64,
    pub radius: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            max_clicks: 10,
            seed: 0,
            radius: DESK_RADIUS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean pre-step loss over the epoch's patches.
    pub train_loss: f64,
    /// Dense cross-entropy on the validation patches with neutral guidance.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ParamSet,
    pub log: Vec<EpochLog>,
}

/// Records mean dense cross-entropy of prediction `f` against `labels`.
fn record_dense_ce(g: &mut Graph, f: NodeId, sample: &LabeledImage, classes: usize) -> Result<NodeId> {
    let (h, w) = (sample.labels.height(), sample.labels.width());
    let hw = h * w;
    let mut mask = vec![false; classes * hw];
    for (p, &k) in sample.labels.data().iter().enumerate() {
        mask[k as usize * hw + p] = true;
    }
    let logf = g.log(f)?;
    let picked = g.masked_select_sum(logf, mask)?;
    g.mul_scalar(picked, -1.0 / hw as f64)
}

/// Mean dense cross-entropy of the model on `samples` with neutral guidance.
pub fn dense_ce(model: &MiniLink, params: &ParamSet, samples: &[LabeledImage]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let ann = zero_encoding(s.image.height(), s.image.width(), model.num_classes());
        let mut g = Graph::new();
        let f = model.record(&mut g, params, &s.image, &ann)?;
        let l = record_dense_ce(&mut g, f, s, model.num_classes())?;
        total += g.value(l).item();
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Supervised training with randomly simulated clicks as guidance.
pub fn pretrain(model: &MiniLink, train: &[LabeledImage], val: &[LabeledImage], config: &PretrainConfig) -> Result<Pretrained> {
    let classes = model.num_classes();
    for s in train.iter().chain(val) {
        s.labels.validate(classes)?;
    }
    let mut params = model.init_params();
    let mut log = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let sample = &train[i];
            let k = rng.gen_range(0..=config.max_clicks);
            let clicks = sample_random_clicks(&sample.labels, k, rng.gen())?;
            let (h, w) = (sample.image.height(), sample.image.width());
            let ann = encode_clicks(&clicks, h, w, classes, config.radius)?;
            let mut g = Graph::new();
            let f = model.record(&mut g, &params, &sample.image, &ann)?;
            let loss = record_dense_ce(&mut g, f, sample, classes)?;
            let value = g.value(loss).item();
            let grads = g.backward(loss, &params)?;
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite { op: "pretraining" });
            }
            epoch_loss += value;
            params.sgd_step(&grads, config.lr)?;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(dense_ce(model, &params, val)?)
        };
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train.len().max(1) as f64,
            val_loss,
        });
    }
    Ok(Pretrained { params, log })
}
