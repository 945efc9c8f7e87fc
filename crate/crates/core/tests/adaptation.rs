use std::sync::OnceLock;

use segsteer_core::adapt::{
    disca_adapt, initial_prediction, pretrain, AdaptConfig, Pretrained, PretrainConfig, Session, SessionOptions,
};
use segsteer_core::annotation::{sample_random_clicks, Click};
use segsteer_core::metrics::miou;
use segsteer_core::raster::{LabelMap, LabeledImage};
use segsteer_core::segnet::{load_model, save_model, MiniLink, MiniLinkConfig};
use segsteer_core::simulator::{connected_components, error_mask, place_click, run_session, Protocol, SimConfig, SimMode};
use segsteer_core::synthgen::{gen_scene, scene_seed, DomainSpec};

fn scenes(dataset_seed: u64, n: usize, domain: &DomainSpec) -> Vec<LabeledImage> {
    (0..n)
        .map(|i| gen_scene(scene_seed(dataset_seed, i), domain, 64, 64).unwrap().into_labeled())
        .collect()
}

struct Trained {
    model: MiniLink,
    pre: Pretrained,
    fixtures: Vec<LabeledImage>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let model = MiniLink::new(MiniLinkConfig::default()).unwrap();
        let train = scenes(1, 40, &DomainSpec::a());
        let fixtures = scenes(2, 20, &DomainSpec::a());
        let pre = pretrain(&model, &train, &fixtures[..5], &PretrainConfig::default()).unwrap();
        Trained { model, pre, fixtures }
    })
}

fn session(t: &Trained, sample: &LabeledImage) -> Session {
    Session::new(t.model.clone(), t.pre.params.clone(), sample.image.clone(), SessionOptions::default()).unwrap()
}

#[test]
fn adapting_without_clicks_is_an_exact_no_op() {
    for seed in 0..10 {
        let model = MiniLink::new(MiniLinkConfig { seed, ..Default::default() }).unwrap();
        let theta0 = model.init_params();
        let scene = gen_scene(seed, &DomainSpec::a(), 32, 32).unwrap();
        let mut s = Session::new(model, theta0.clone(), scene.image, SessionOptions::default()).unwrap();
        let trace = disca_adapt(&mut s, &AdaptConfig::default()).unwrap();
        assert!(s.theta().bit_eq(&theta0), "seed {seed}");
        assert!(trace.iter().all(|l| l.total == 0.0));
        assert!(s.disir_infer().unwrap().bit_eq(s.p0()));
    }
}

#[test]
fn pretraining_reduces_train_and_val_loss() {
    let log = &trained().pre.log;
    assert_eq!(log.len(), PretrainConfig::default().epochs);
    let (first, last) = (&log[0], log.last().unwrap());
    assert!(last.train_loss < first.train_loss, "{first:?} -> {last:?}");
    assert!(last.val_loss.unwrap() < first.val_loss.unwrap(), "{first:?} -> {last:?}");
}

#[test]
fn anchoring_keeps_the_prediction_closer_to_p0() {
    let t = trained();
    let mut cfg = AdaptConfig::default();
    for (i, sample) in t.fixtures.iter().enumerate() {
        let clicks = sample_random_clicks(&sample.labels, 5, i as u64).unwrap();
        let mut drift = [0.0; 2];
        for (slot, lambda) in [(0, 1.0), (1, 0.0)] {
            cfg.lambda = lambda;
            let mut s = session(t, sample);
            for c in &clicks {
                s.push_click(*c).unwrap();
            }
            s.adapt(&cfg).unwrap();
            let f_after = initial_prediction(&t.model, s.theta(), &sample.image).unwrap();
            drift[slot] = f_after.l1_distance(s.p0());
        }
        assert!(drift[0] <= drift[1], "fixture {i}: lambda=1 {} vs lambda=0 {}", drift[0], drift[1]);
    }
}

/// The annotation oracle's first click: inside the largest wrong region.
fn oracle_click(s: &Session, gt: &LabelMap) -> Click {
    let mut mask = error_mask(&s.disir_infer().unwrap().argmax(), gt).unwrap();
    for c in s.clicks() {
        mask.clear(c.row, c.col);
    }
    let largest = connected_components(&mask).into_iter().next().expect("prediction is not perfect");
    place_click(&largest, gt, &mask, s.clicks().len() as u64)
}

#[test]
fn one_click_adaptation_does_not_increase_the_loss() {
    let t = trained();
    for (i, sample) in t.fixtures.iter().enumerate() {
        let mut s = session(t, sample);
        let c = oracle_click(&s, &sample.labels);
        s.push_click(c).unwrap();
        let trace = s.adapt(&AdaptConfig::default()).unwrap();
        assert_eq!(trace.len(), AdaptConfig::default().steps + 1);
        assert!(trace.last().unwrap().total <= trace[0].total, "fixture {i}: {trace:?}");
    }
}

#[test]
fn adaptation_raises_the_clicked_class_probability() {
    let t = trained();
    for (i, sample) in t.fixtures.iter().enumerate() {
        let mut s = session(t, sample);
        for _ in 0..3 {
            let c = oracle_click(&s, &sample.labels);
            s.push_click(c).unwrap();
        }
        let mean_target = |s: &Session| {
            let f = initial_prediction(&t.model, s.theta(), &sample.image).unwrap();
            s.clicks().iter().map(|c| f.get(c.row, c.col, c.class_id)).sum::<f64>() / s.clicks().len() as f64
        };
        let before = mean_target(&s);
        s.adapt(&AdaptConfig::default()).unwrap();
        assert!(mean_target(&s) >= before, "fixture {i}");
    }
}

#[test]
fn a_correct_click_raises_its_class_probability() {
    let t = trained();
    let (mut improved, mut cases) = (0, 0);
    'outer: for round in 0..5 {
        for (i, sample) in t.fixtures.iter().enumerate() {
            let s = session(t, sample);
            let before = s.disir_infer().unwrap();
            let pred = before.argmax();
            let wrong: Vec<(usize, usize)> = (0..64 * 64)
                .map(|q| (q / 64, q % 64))
                .filter(|&(r, c)| pred.get(r, c) != sample.labels.get(r, c))
                .collect();
            if wrong.is_empty() {
                continue;
            }
            let (r, c) = wrong[(round * 7919 + i * 104729) % wrong.len()];
            let k = sample.labels.get(r, c) as usize;
            let mut s = s;
            s.push_click(Click::new(r, c, k, 0)).unwrap();
            let after = s.disir_infer().unwrap();
            cases += 1;
            if after.get(r, c, k) > before.get(r, c, k) {
                improved += 1;
            }
            if cases == 100 {
                break 'outer;
            }
        }
    }
    assert!(cases >= 90, "only {cases} cases had a wrong pixel");
    assert!(improved * 10 >= cases * 9, "{improved}/{cases}");
}

#[test]
fn disca_sessions_end_at_least_as_good_as_they_start() {
    let t = trained();
    let cfg = SimConfig::new(SimMode::Disca);
    let mut ok = 0;
    for sample in &t.fixtures {
        let rep = run_session(&t.model, &t.pre.params, &sample.image, &sample.labels, &cfg).unwrap();
        assert!(rep.records.len() == cfg.num_clicks || rep.saturated);
        ok += usize::from(rep.final_miou() >= rep.initial_miou);
    }
    assert!(ok >= 18, "{ok}/20");
}

#[test]
fn disir_sessions_never_touch_the_parameters() {
    let t = trained();
    let cfg = SimConfig::new(SimMode::Disir);
    for sample in &t.fixtures[..5] {
        let rep = run_session(&t.model, &t.pre.params, &sample.image, &sample.labels, &cfg).unwrap();
        let clicks: Vec<Click> = rep.records.iter().map(|r| r.click).collect();
        let mut s = session(t, sample);
        for (i, c) in clicks.iter().enumerate() {
            s.push_click(*c).unwrap();
            let m = miou(&s.disir_infer().unwrap().argmax(), &sample.labels, 2).unwrap();
            assert_eq!(m, rep.records[i].miou);
            assert!(rep.records[i].loss_trace.is_empty());
        }
    }
}

#[test]
fn batch_protocol_adapts_once() {
    let t = trained();
    let mut cfg = SimConfig::new(SimMode::Disca);
    cfg.protocol = Protocol::Batch;
    cfg.num_clicks = 4;
    let sample = &t.fixtures[0];
    let rep = run_session(&t.model, &t.pre.params, &sample.image, &sample.labels, &cfg).unwrap();
    let adapted: Vec<bool> = rep.records.iter().map(|r| !r.loss_trace.is_empty()).collect();
    assert_eq!(adapted.iter().filter(|&&a| a).count(), 1);
    assert!(*adapted.last().unwrap());
}

#[test]
fn domain_b_scores_below_held_out_domain_a() {
    let t = trained();
    let mean = |set: &[LabeledImage]| {
        set.iter()
            .map(|s| miou(&initial_prediction(&t.model, &t.pre.params, &s.image).unwrap().argmax(), &s.labels, 2).unwrap())
            .sum::<f64>()
            / set.len() as f64
    };
    let b = scenes(3, 20, &DomainSpec::b());
    assert!(mean(&b) < mean(&t.fixtures));
}

#[test]
fn saved_models_reload_bit_exactly() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    save_model(&t.pre.params, t.model.config(), dir.path()).unwrap();
    let (params, config) = load_model(dir.path()).unwrap();
    assert_eq!(&config, t.model.config());
    assert!(params.bit_eq(&t.pre.params));
    let img = &t.fixtures[0].image;
    let a = initial_prediction(&t.model, &params, img).unwrap();
    let b = initial_prediction(&t.model, &t.pre.params, img).unwrap();
    assert!(a.bit_eq(&b));
}
