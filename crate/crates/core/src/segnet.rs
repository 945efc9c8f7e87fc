//! MiniLink: a small LinkNet-style encoder-decoder.
//!
//! The input is the RGB image concatenated with `N` annotation channels.
//! Each of the `D` encoder stages is `conv → relu → maxpool2`; each decoder
//! stage is `upsample → conv → relu` followed by an additive skip from the
//! encoder stage at the same resolution. A 1×1 head produces `N` logits and
//! a channel softmax turns them into a [`ProbMap`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::EncodedAnnotations;
use crate::error::{Error, Result};
use crate::raster::ImageTensor;
pub use crate::raster::ProbMap;
use crate::tensor::{io as tensor_io, Graph, NodeId, Tensor};
pub use crate::tensor::ParamSet;

pub const IMAGE_CHANNELS: usize = 3;
pub const MAX_CLASSES: usize = 64;
const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "MINILINK v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniLinkConfig {
    pub num_classes: usize,
    /// Number of pool/unpool stages, 1..=3.
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for MiniLinkConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            depth: 2,
            base_channels: 8,
            kernel_size: 3,
            seed: 0,
        }
    }
}

impl MiniLinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Invalid(format!(
                "num_classes {} must be in [2, {MAX_CLASSES}]",
                self.num_classes
            )));
        }
        if !(1..=3).contains(&self.depth) {
            return Err(Error::Invalid(format!("depth {} must be in [1, 3]", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Invalid("base_channels must be at least 4".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Invalid("kernel_size must be odd".into()));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Expected `(name, shape)` of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut out = Vec::new();
        let mut in_ch = IMAGE_CHANNELS + self.num_classes;
        for i in 0..self.depth {
            let c = self.stage_channels(i);
            out.push((format!("enc{i}.weight"), vec![c, in_ch, k, k]));
            out.push((format!("enc{i}.bias"), vec![c]));
            in_ch = c;
        }
        for j in (0..self.depth).rev() {
            let c = self.stage_channels(j);
            out.push((format!("dec{j}.weight"), vec![c, in_ch, k, k]));
            out.push((format!("dec{j}.bias"), vec![c]));
            in_ch = c;
        }
        out.push(("head.weight".into(), vec![self.num_classes, in_ch, 1, 1]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

/// The network definition; parameters are held separately in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct MiniLink {
    config: MiniLinkConfig,
}

impl MiniLink {
    pub fn new(config: MiniLinkConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &MiniLinkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Weights uniform in `[−a, a]` with `a = sqrt(1 / fan_in)`, zero biases.
    pub fn init_params(&self) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut params = ParamSet::new();
        for (name, shape) in self.config.param_shapes() {
            let tensor = if shape.len() == 4 {
                let fan_in = shape[1] * shape[2] * shape[3];
                let a = (1.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a);
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
                    .expect("param shapes are positive")
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, tensor);
        }
        params
    }

    /// Checks names and shapes against the configuration.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected = self.config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::shape(
                "params",
                format!("expected {} tensors, got {}", expected.len(), params.len()),
            ));
        }
        for ((name, shape), (have_name, have)) in expected.iter().zip(params.iter()) {
            if name != have_name || shape[..] != *have.shape() {
                return Err(Error::shape(
                    "params",
                    format!("expected {name} {shape:?}, got {have_name} {:?}", have.shape()),
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.config.spatial_multiple();
        if height % m != 0 || width % m != 0 {
            return Err(Error::shape(
                "forward",
                format!("input {height}x{width} must be divisible by {m}"),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the `[N, H, W]` softmax node.
    ///
    /// Parameters are recorded as named leaves so `g.backward` can reach them.
    pub fn record(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        image: &ImageTensor,
        ann: &EncodedAnnotations,
    ) -> Result<NodeId> {
        let (h, w) = (image.height(), image.width());
        if image.channels() != IMAGE_CHANNELS {
            return Err(Error::shape("forward", format!("image has {} channels", image.channels())));
        }
        if (ann.height(), ann.width()) != (h, w) || ann.classes() != self.config.num_classes {
            return Err(Error::shape(
                "forward",
                format!(
                    "annotations {}x{}x{} for image {h}x{w} and {} classes",
                    ann.height(),
                    ann.width(),
                    ann.classes(),
                    self.config.num_classes
                ),
            ));
        }
        self.check_input(h, w)?;

        let p = |g: &mut Graph, name: &str| -> Result<NodeId> { Ok(g.param(name, params.require(name)?.clone())) };

        let img = g.constant(image.to_tensor());
        let enc = g.constant(ann.to_tensor());
        let mut x = g.concat_channels(&[img, enc])?;

        let mut skips = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            let wt = p(g, &format!("enc{i}.weight"))?;
            let b = p(g, &format!("enc{i}.bias"))?;
            let c = g.conv2d(x, wt)?;
            let c = g.bias_add(c, b)?;
            let e = g.relu(c)?;
            skips.push(e);
            x = g.maxpool2(e)?;
        }
        for j in (0..self.config.depth).rev() {
            let wt = p(g, &format!("dec{j}.weight"))?;
            let b = p(g, &format!("dec{j}.bias"))?;
            let u = g.upsample2(x)?;
            let c = g.conv2d(u, wt)?;
            let c = g.bias_add(c, b)?;
            let d = g.relu(c)?;
            x = g.add(d, skips[j])?;
        }
        let wt = p(g, "head.weight")?;
        let b = p(g, "head.bias")?;
        let logits = g.conv2d(x, wt)?;
        let logits = g.bias_add(logits, b)?;
        g.softmax_channels(logits)
    }

    pub fn forward(&self, params: &ParamSet, image: &ImageTensor, ann: &EncodedAnnotations) -> Result<ProbMap> {
        let mut g = Graph::new();
        let out = self.record(&mut g, params, image, ann)?;
        ProbMap::from_tensor(g.value(out))
    }
}

pub fn snapshot(params: &ParamSet) -> ParamSet {
    params.clone()
}

/// Overwrites `params` with `snapshot`; both must have identical layouts.
pub fn restore(params: &mut ParamSet, snapshot: &ParamSet) -> Result<()> {
    if !params.congruent(snapshot) {
        return Err(Error::shape("restore", "snapshot layout differs from parameters"));
    }
    *params = snapshot.clone();
    Ok(())
}

fn tensor_file(name: &str) -> String {
    format!("{name}.tnsr")
}

pub fn save_model(params: &ParamSet, config: &MiniLinkConfig, dir: &Path) -> Result<()> {
    let model = MiniLink::new(*config)?;
    model.check_params(params)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "{MANIFEST_HEADER} num_classes={} depth={} base_channels={} kernel_size={} seed={}\n",
        config.num_classes, config.depth, config.base_channels, config.kernel_size, config.seed
    );
    for (name, tensor) in params.iter() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(manifest, "{name} {} {}", tensor.rank(), dims.join(" ")).unwrap();
        tensor_io::write(&dir.join(tensor_file(name)), tensor)?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn parse_config_line(line: &str) -> Result<MiniLinkConfig> {
    let rest = line
        .strip_prefix(MANIFEST_HEADER)
        .ok_or_else(|| Error::Format(format!("manifest must start with {MANIFEST_HEADER:?}")))?;
    let mut cfg = MiniLinkConfig::default();
    let mut seen = 0;
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config field {field:?}")))?;
        let bad = || Error::Format(format!("bad value in {field:?}"));
        match key {
            "num_classes" => cfg.num_classes = value.parse().map_err(|_| bad())?,
            "depth" => cfg.depth = value.parse().map_err(|_| bad())?,
            "base_channels" => cfg.base_channels = value.parse().map_err(|_| bad())?,
            "kernel_size" => cfg.kernel_size = value.parse().map_err(|_| bad())?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Format(format!("unknown config field {key:?}"))),
        }
        seen += 1;
    }
    if seen != 5 {
        return Err(Error::Format("manifest header must list all five config fields".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_model(dir: &Path) -> Result<(ParamSet, MiniLinkConfig)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let config = parse_config_line(lines.next().unwrap_or_default())?;
    let mut params = ParamSet::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap();
        let nums: Vec<usize> = parts
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad manifest line {line:?}"))))
            .collect::<Result<_>>()?;
        let (&rank, dims) = nums
            .split_first()
            .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
        if dims.len() != rank {
            return Err(Error::Format(format!("{name}: rank {rank} but {} dims", dims.len())));
        }
        let tensor = tensor_io::read(&dir.join(tensor_file(name)))?;
        if tensor.shape() != dims {
            return Err(Error::Format(format!(
                "{name}: manifest says {dims:?}, file holds {:?}",
                tensor.shape()
            )));
        }
        params.insert(name, tensor);
    }
    MiniLink::new(config)?
        .check_params(&params)
        .map_err(|e| Error::Format(format!("model does not match its config: {e}")))?;
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{encode_clicks, zero_encoding, Click};
    use proptest::prelude::*;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new_inclusive(0.0, 1.0);
        ImageTensor::from_planar(h, w, 3, (0..3 * h * w).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    fn net(depth: usize, seed: u64) -> MiniLink {
        MiniLink::new(MiniLinkConfig {
            depth,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let m = net(2, 11);
        let a = m.init_params();
        assert!(a.bit_eq(&m.init_params()));
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_weights_are_centered_and_bounded() {
        let m = MiniLink::new(MiniLinkConfig {
            base_channels: 16,
            depth: 3,
            ..Default::default()
        })
        .unwrap();
        let params = m.init_params();
        // Pool all weights scaled to [-1, 1] by their tensor's bound.
        let mut scaled = Vec::new();
        for (name, t) in params.iter().filter(|(n, _)| n.ends_with(".weight")) {
            let s = t.shape();
            let a = (1.0 / (s[1] * s[2] * s[3]) as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= a), "{name}");
            scaled.extend(t.data().iter().map(|v| v / a));
        }
        let n = scaled.len() as f64;
        assert!(n >= 1e4);
        let mean = scaled.iter().sum::<f64>() / n;
        assert!(mean.abs() <= 3.0 / (12.0 * n).sqrt(), "mean {mean}");
    }

    #[test]
    fn forward_shape_and_normalisation() {
        let m = net(2, 1);
        let p = m.init_params();
        let out = m.forward(&p, &image(16, 8, 3), &zero_encoding(16, 8, 2)).unwrap();
        assert_eq!((out.height(), out.width(), out.classes()), (16, 8, 2));
    }

    #[test]
    fn forward_rejects_indivisible_input() {
        let m = net(2, 1);
        let p = m.init_params();
        assert!(m.forward(&p, &image(10, 8, 3), &zero_encoding(10, 8, 2)).is_err());
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let m = net(1, 1);
        let p = m.init_params();
        assert!(m.forward(&p, &image(8, 8, 3), &zero_encoding(8, 8, 3)).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_empty_clicks_are_neutral() {
        let m = net(2, 5);
        let p = m.init_params();
        let img = image(16, 16, 9);
        let a = m.forward(&p, &img, &zero_encoding(16, 16, 2)).unwrap();
        let b = m.forward(&p, &img, &encode_clicks(&[], 16, 16, 2, 25.0).unwrap()).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn skip_connections_carry_encoder_features() {
        let m = net(2, 5);
        let mut p = m.init_params();
        for v in p.get_mut("dec0.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        let ann = zero_encoding(16, 16, 2);
        let a = m.forward(&p, &image(16, 16, 1), &ann).unwrap();
        let b = m.forward(&p, &image(16, 16, 2), &ann).unwrap();
        assert!(a.l1_distance(&b) > 0.0);
    }

    #[test]
    fn annotation_channels_are_consumed() {
        let m = net(2, 5);
        let p = m.init_params();
        let img = image(16, 16, 1);
        let a = m.forward(&p, &img, &zero_encoding(16, 16, 2)).unwrap();
        let click = Click::new(4, 4, 1, 0);
        let b = m.forward(&p, &img, &encode_clicks(&[click], 16, 16, 2, 5.0).unwrap()).unwrap();
        assert!(a.l1_distance(&b) > 0.0);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let m = net(2, 5);
        let mut p = m.init_params();
        let img = image(8, 8, 4);
        let ann = zero_encoding(8, 8, 2);
        let before = m.forward(&p, &img, &ann).unwrap();
        let snap = snapshot(&p);
        assert!(snapshot(&snap).bit_eq(&snap));
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += 0.01;
            }
        }
        restore(&mut p, &snap).unwrap();
        assert!(m.forward(&p, &img, &ann).unwrap().bit_eq(&before));

        let other = net(3, 5).init_params();
        assert!(restore(&mut p, &other).is_err());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = net(2, 8);
        let p = m.init_params();
        save_model(&p, m.config(), dir.path()).unwrap();
        let (q, cfg) = load_model(dir.path()).unwrap();
        assert!(q.bit_eq(&p));
        assert_eq!(cfg, *m.config());

        let file = dir.path().join("enc0.weight.tnsr");
        let mut bytes = fs::read(&file).unwrap();
        bytes[0] = b'Z';
        fs::write(&file, &bytes).unwrap();
        assert!(load_model(dir.path()).is_err());
    }

    #[test]
    fn manifest_listing_missing_tensor_fails() {
        let dir = tempfile::tempdir().unwrap();
        let m = net(1, 8);
        save_model(&m.init_params(), m.config(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("head.bias.tnsr")).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn manifest_shape_disagreement_fails() {
        let dir = tempfile::tempdir().unwrap();
        let m = net(1, 8);
        save_model(&m.init_params(), m.config(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("head.bias 1 2", "head.bias 1 3");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn outputs_are_normalised(seed in any::<u64>(), depth in 1usize..=3, clicks in 0usize..4) {
            let m = net(depth, seed);
            let p = m.init_params();
            let img = image(16, 16, seed ^ 0x55);
            let cl: Vec<Click> = (0..clicks)
                .map(|k| Click::new((seed as usize + 5 * k) % 16, (k * 7) % 16, k % 2, k as u64))
                .collect();
            let ann = encode_clicks(&cl, 16, 16, 2, 6.0).unwrap();
            let out = m.forward(&p, &img, &ann).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    let s = out.get(r, c, 0) + out.get(r, c, 1);
                    prop_assert!((s - 1.0).abs() <= 1e-9);
                    prop_assert!(out.get(r, c, 0) > 0.0 && out.get(r, c, 0) < 1.0);
                }
            }
        }
    }
}
