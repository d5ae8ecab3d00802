use std::sync::OnceLock;

use nalgebra::DMatrix;
use pqo::collect::{collect_training_data, CollectionPolicy};
use pqo::eval::regression_frequency;
use pqo::learn::model::{loss_and_grad, Example};
use pqo::learn::nn::{Adam, Network, NetworkShape};
use pqo::learn::{train_model, Features, ModelArtifact, ModelConfig, PlanChoice};
use pqo::rce::{workload_candidate_generation, RceParams};
use pqo::simdb::{Scenario, ScenarioKind, ScenarioParams};
use pqo::{split_indices, ExecutionDataset, LatencyTable, PlanFingerprint, Provenance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny_net(rng: &mut impl Rng) -> Network {
    let shape = NetworkShape {
        dense_inputs: rng.random_range(1..4),
        embeddings: vec![(rng.random_range(2..6), rng.random_range(1..4))],
        hidden_units: rng.random_range(3..7),
        hidden_layers: rng.random_range(1..4),
        residual: rng.random_bool(0.5),
        rff_dim: rng.random_range(4..10),
        length_scale: rng.random_range(0.5..2.0),
        heads: rng.random_range(1..4),
    };
    let mut net = Network::new(shape, rng);
    // trained output weights; zeros would hide every upstream gradient
    for b in &mut net.beta {
        *b = rng.sample(StandardNormal);
    }
    for l in &mut net.layers {
        for b in &mut l.b {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    net
}

fn random_examples(net: &Network, n: usize, rng: &mut impl Rng) -> Vec<Example> {
    let heads = net.shape.heads;
    (0..n)
        .map(|_| Example {
            features: Features {
                dense: (0..net.shape.dense_inputs).map(|_| rng.sample(StandardNormal)).collect(),
                tokens: net.shape.embeddings.iter().map(|&(rows, _)| rng.random_range(0..rows)).collect(),
            },
            labels: (0..heads).map(|_| rng.random_bool(0.5)).collect(),
            weights: (0..heads).map(|_| rng.random_range(0.5..5.0)).collect(),
        })
        .collect()
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-6;
    for case in 0..20 {
        let mut net = tiny_net(&mut rng);
        let examples = random_examples(&net, 5, &mut rng);
        let refs: Vec<&Example> = examples.iter().collect();
        let (_, grads) = loss_and_grad(&net, &refs);
        let mut worst: f64 = 0.0;
        for (g, analytic) in grads.iter().enumerate() {
            for i in 0..analytic.len() {
                let orig = net.params_mut()[g][i];
                net.params_mut()[g][i] = orig + h;
                let up = loss_and_grad(&net, &refs).0;
                net.params_mut()[g][i] = orig - h;
                let down = loss_and_grad(&net, &refs).0;
                net.params_mut()[g][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[i];
                let scale = a.abs().max(numeric.abs());
                if scale < 1e-7 {
                    continue;
                }
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
        assert!(worst <= 1e-4, "case {case}: max relative error {worst:e}");
    }
}

fn top_singular_value(n_out: usize, n_in: usize, w: &[f64]) -> f64 {
    DMatrix::from_row_slice(n_out, n_in, w).singular_values().max()
}

#[test]
fn spectral_bound_holds_after_every_step() {
    let bound = 0.95;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = NetworkShape {
        dense_inputs: 4,
        embeddings: vec![(6, 3)],
        hidden_units: 16,
        hidden_layers: 3,
        residual: true,
        rff_dim: 32,
        length_scale: 1.0,
        heads: 2,
    };
    let mut net = Network::new(shape, &mut rng);
    net.constrain(bound, 200);
    let examples = random_examples(&net, 32, &mut rng);
    let refs: Vec<&Example> = examples.iter().collect();
    let mut adam = Adam::new(ModelConfig::default().learning_rate, &net.zero_grads());
    for step in 0..2000 {
        let (_, g) = loss_and_grad(&net, &refs[(step % 4) * 8..(step % 4 + 1) * 8]);
        adam.step(net.params_mut(), &g);
        let estimates = net.constrain(bound, 1);
        for (l, est) in net.layers.iter().zip(estimates) {
            assert!(est <= bound * 1.01, "step {step}: estimate {est}");
            let sigma = top_singular_value(l.n_out, l.n_in, &l.w);
            assert!(sigma <= bound * 1.01, "step {step}: true spectral norm {sigma}");
        }
    }
}

struct Fixture {
    ds: ExecutionDataset,
    heads: Vec<PlanFingerprint>,
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Collected parameter-sensitive dataset with its plan cover and split.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let s = Scenario::build(&ScenarioParams::of(ScenarioKind::ParameterSensitive), 0).unwrap();
        let db = s.simdb().unwrap();
        let w = s.workload(150, 1).unwrap();
        let cands = workload_candidate_generation(&w, &db, &RceParams::default()).unwrap();
        let policy = CollectionPolicy { bootstrap_instances: 40, tail_reorder: false, ..CollectionPolicy::default() };
        let c = collect_training_data(&w, &cands.plans(), &db, &policy, Provenance::default()).unwrap();
        let (train, test) = split_indices(w.len(), 0.8, 0).unwrap();
        Fixture { ds: c.dataset, heads: c.cover.plans, train, test }
    })
}

fn config(epochs: usize) -> ModelConfig {
    ModelConfig { epochs, ..ModelConfig::default() }
}

fn trained() -> &'static (ModelArtifact, pqo::learn::TrainReport) {
    static M: OnceLock<(ModelArtifact, pqo::learn::TrainReport)> = OnceLock::new();
    M.get_or_init(|| {
        let f = fixture();
        train_model(&f.ds, &f.heads, &f.train, &config(300), 1, None).unwrap()
    })
}

#[test]
fn training_loss_falls_below_half() {
    let (_, report) = trained();
    let first = report.losses[0];
    let last = *report.losses.last().unwrap();
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    assert!(report.max_spectral_norm <= ModelConfig::default().spectral_bound * 1.01);
}

#[test]
fn duplicated_rows_give_the_same_weights_in_full_batch() {
    let f = fixture();
    let cfg = ModelConfig { epochs: 30, batch_size: 1000, ..ModelConfig::default() };
    let (a, _) = train_model(&f.ds, &f.heads, &f.train, &cfg, 3, None).unwrap();
    let doubled: Vec<usize> = f.train.iter().chain(&f.train).copied().collect();
    let (b, _) = train_model(&f.ds, &f.heads, &doubled, &cfg, 3, None).unwrap();
    assert_eq!(a.featurizer, b.featurizer);
    let flat = |m: &ModelArtifact| -> Vec<f64> {
        let mut n = m.network.clone();
        n.params_mut().into_iter().flat_map(|p| p.to_vec()).collect()
    };
    let (wa, wb) = (flat(&a), flat(&b));
    assert_eq!(wa.len(), wb.len());
    let worst = wa.iter().zip(&wb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "max weight difference {worst:e}");
}

fn choices(model: &ModelArtifact, idx: &[usize], threshold: f64) -> Vec<PlanChoice> {
    let ds = &fixture().ds;
    idx.iter().map(|&i| model.predict_with_threshold(&ds.instances[i], threshold).unwrap()).collect()
}

#[test]
fn thresholds_bound_fallback() {
    let (model, _) = trained();
    let f = fixture();
    let table = LatencyTable::from_dataset(&f.ds).unwrap();
    assert!(choices(model, &f.test, 1.0).iter().all(PlanChoice::fallback));
    assert!(choices(model, &f.test, 0.0).iter().all(|c| !c.fallback()));
    let sweep = [0.0, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0];
    let mut prev_regressions = f64::INFINITY;
    let mut prev_kept: Option<Vec<bool>> = None;
    for t in sweep {
        let c = choices(model, &f.test, t);
        let kept: Vec<bool> = c.iter().map(|c| !c.fallback()).collect();
        if let Some(p) = &prev_kept {
            assert!(kept.iter().zip(p).all(|(now, before)| !now || *before), "threshold {t}");
        }
        let r = regression_frequency(&table, &c, &f.test, 0.1).unwrap();
        assert!(r <= prev_regressions);
        prev_regressions = r;
        prev_kept = Some(kept);
    }
}

#[test]
fn permuting_heads_permutes_scores() {
    let (model, _) = trained();
    let k = model.num_heads();
    let r = model.network.shape.rff_dim;
    let perm: Vec<usize> = (0..k).rev().collect();
    let mut p = model.clone();
    p.heads = perm.iter().map(|&j| model.heads[j].clone()).collect();
    p.precision = perm.iter().map(|&j| model.precision[j].clone()).collect();
    p.network.beta = perm.iter().flat_map(|&j| model.network.beta[j * r..(j + 1) * r].to_vec()).collect();
    let mut buf = Vec::new();
    p.to_writer(&mut buf).unwrap();
    let p = ModelArtifact::from_reader(buf.as_slice()).unwrap();
    for &i in &fixture().test {
        let q = &fixture().ds.instances[i];
        let a = model.scores(q).unwrap();
        let b = p.scores(q).unwrap();
        for (slot, &j) in perm.iter().enumerate() {
            assert_eq!(b[slot], a[j]);
        }
    }
}

fn mean_features(model: &ModelArtifact) -> Features {
    let f = fixture();
    let all: Vec<Features> = f.train.iter().map(|&i| model.featurizer.transform(&f.ds.instances[i]).unwrap()).collect();
    let d = all[0].dense.len();
    let dense = (0..d).map(|j| all.iter().map(|x| x.dense[j]).sum::<f64>() / all.len() as f64).collect();
    Features { dense, tokens: all[0].tokens.clone() }
}

#[test]
fn variance_grows_along_rays_from_training_points() {
    let (model, _) = trained();
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &i in f.train.iter().take(10) {
        let origin = model.featurizer.transform(&f.ds.instances[i]).unwrap();
        let d = origin.dense.len();
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        let at = |t: f64| {
            let x = Features { dense: origin.dense.iter().zip(&dir).map(|(c, u)| c + t * u).collect(), tokens: origin.tokens.clone() };
            model.scores_of(&x).iter().map(|s| s.variance).fold(0.0, f64::max)
        };
        // far out the variance saturates near the prior and wobbles
        let start = at(0.0);
        let far: Vec<f64> = [10.0, 20.0, 50.0].iter().map(|&t| at(t)).collect();
        assert!(far.iter().all(|&v| v > start), "instance {i}: {start} then {far:?}");
    }
}

#[test]
fn far_inputs_are_less_confident() {
    let (model, _) = trained();
    let f = fixture();
    let center = mean_features(model);
    let best = |x: &Features| model.scores_of(x).iter().map(|s| s.confidence).fold(0.0, f64::max);
    let inside: Vec<f64> =
        f.test.iter().map(|&i| best(&model.featurizer.transform(&f.ds.instances[i]).unwrap())).collect();
    let mut far = Vec::new();
    for j in 0..center.dense.len() {
        for sign in [-1.0, 1.0] {
            let mut x = center.clone();
            x.dense[j] += sign * 5.0;
            far.push(best(&x));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&far) < mean(&inside), "far {} vs inside {}", mean(&far), mean(&inside));
}
