use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segsteer_core::adapt::{loss_eq1, record_loss, L1Mode};
use segsteer_core::annotation::{
    build_sparse_target, encode_clicks, sample_random_clicks, zero_encoding, EncodedAnnotations, SparseTarget, DESK_RADIUS,
};
use segsteer_core::raster::{ImageTensor, LabelMap, ProbMap};
use segsteer_core::segnet::{MiniLink, MiniLinkConfig};
use segsteer_core::synthgen::{gen_scene, DomainSpec};
use segsteer_core::tensor::{Graph, GradCheck, NodeId, ParamSet};
use segsteer_core::Result;

const EPS: f64 = 1e-5;

struct Fixture {
    model: MiniLink,
    theta: ParamSet,
    image: ImageTensor,
    enc: EncodedAnnotations,
    target: SparseTarget,
    p0: ProbMap,
}

/// A 16x16 crop with six clicks. Hidden biases are raised so the relu units
/// sit well inside their linear piece; p0 comes from perturbed weights.
fn fixture(seed: u64) -> Fixture {
    let model = MiniLink::new(MiniLinkConfig { seed, ..Default::default() }).unwrap();
    let full = gen_scene(100 + seed, &DomainSpec::a(), 64, 64).unwrap();
    let image = full.image.crop(16, 16, 16, 16).unwrap();
    let labels = full.labels.crop(16, 16, 16, 16).unwrap();
    let mut theta = model.init_params();
    for (name, t) in theta.iter_mut() {
        if name.ends_with(".bias") && !name.starts_with("head") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut other = theta.clone();
    for (_, t) in other.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    let p0 = model.forward(&other, &image, &zero_encoding(16, 16, 2)).unwrap();
    let clicks = sample_random_clicks(&labels, 6, seed).unwrap();
    Fixture {
        enc: encode_clicks(&clicks, 16, 16, 2, DESK_RADIUS).unwrap(),
        target: build_sparse_target(&clicks, 16, 16).unwrap(),
        model,
        theta,
        image,
        p0,
    }
}

impl Fixture {
    fn loss(&self, p: &ParamSet) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let f = self.model.record(&mut g, p, &self.image, &self.enc)?;
        let ce_scale = 1.0 / self.target.labeled_count() as f64;
        let reg_scale = 1.0 / (16 * 16 * 2) as f64;
        let nodes = record_loss(&mut g, f, &self.target, &self.p0, 1.0, ce_scale, reg_scale)?;
        Ok((g, nodes.total))
    }
}

#[test]
fn network_and_loss_gradients_match_finite_differences() {
    let start = Instant::now();
    for seed in 0..5u64 {
        let fx = fixture(seed);
        let err = GradCheck::new(EPS).sampled(64, seed).run(&fx.theta, |p| fx.loss(p)).unwrap();
        assert!(err <= 1e-6, "seed {seed}: max relative error {err:e}");
    }
    assert!(start.elapsed().as_secs() < 30, "took {:?}", start.elapsed());
}

/// Every coordinate agrees to 1e-6 relative, or to within what a central
/// difference can resolve: one ulp of the loss spread over the 2ε step.
#[test]
fn every_coordinate_agrees_up_to_difference_resolution() {
    for seed in [0u64, 3] {
        let fx = fixture(seed);
        let (g, l) = fx.loss(&fx.theta).unwrap();
        let value = g.value(l).item();
        let analytic = g.backward(l, &fx.theta).unwrap();
        let resolution = 4.0 * f64::EPSILON * value.abs() / (2.0 * EPS);
        let mut probe = fx.theta.clone();
        for (name, t) in fx.theta.iter() {
            for i in 0..t.numel() {
                let orig = t.data()[i];
                probe.get_mut(name).unwrap().data_mut()[i] = orig + EPS;
                let plus = fx.loss(&probe).map(|(g, l)| g.value(l).item()).unwrap();
                probe.get_mut(name).unwrap().data_mut()[i] = orig - EPS;
                let minus = fx.loss(&probe).map(|(g, l)| g.value(l).item()).unwrap();
                probe.get_mut(name).unwrap().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * EPS);
                let a = analytic.get(name).unwrap().data()[i];
                let tol = 1e-6 * (a.abs() + numeric.abs()) + resolution;
                assert!((a - numeric).abs() <= tol, "seed {seed} {name}[{i}]: {a:e} vs {numeric:e}");
            }
        }
    }
}

#[test]
fn recorded_loss_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (h, w, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(2..4));
        let rand_map = |rng: &mut ChaCha8Rng| {
            let mut data: Vec<f64> = (0..h * w * n).map(|_| rng.gen_range(0.05..1.0)).collect();
            for q in 0..h * w {
                let s: f64 = (0..n).map(|k| data[k * h * w + q]).sum();
                (0..n).for_each(|k| data[k * h * w + q] /= s);
            }
            ProbMap::from_planar(h, w, n, data).unwrap()
        };
        let (f, p0) = (rand_map(&mut rng), rand_map(&mut rng));
        let gt = LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..n as u8)).collect()).unwrap();
        let k = rng.gen_range(0..=h * w);
        let clicks = sample_random_clicks(&gt, k, rng.gen()).unwrap();
        let target = build_sparse_target(&clicks, h, w).unwrap();
        let lambda = rng.gen_range(0.0..3.0);
        for mode in [L1Mode::Mean, L1Mode::Sum] {
            let direct = loss_eq1(&f, &target, &p0, lambda, mode).unwrap();
            let mut g = Graph::new();
            let fnode = g.constant(f.to_tensor());
            let ce_scale = if k > 0 { 1.0 / target.labeled_count() as f64 } else { 0.0 };
            let reg_scale = match mode {
                L1Mode::Mean => 1.0 / (h * w * n) as f64,
                L1Mode::Sum => 1.0,
            };
            let nodes = record_loss(&mut g, fnode, &target, &p0, lambda, ce_scale, reg_scale).unwrap();
            let total = g.value(nodes.total).item();
            assert!((total - direct.total).abs() <= 1e-12 * direct.total.abs().max(1.0));
            assert!((direct.total - (direct.ce + lambda * direct.reg)).abs() <= 1e-12);
        }
    }
}
