//! Protocol contracts: aggregation rules, capability scheduling, local
//! update oracles, baseline equivalences, and run determinism.

use fedhm::data::{partition_iid, synth_blobs, Dataset, SynthShape};
use fedhm::modelspec::{build_mlp, build_tiny_cnn, width_slim};
use fedhm::nn::model::{materialize, Layer, Model};
use fedhm::nn::sgd::SgdHyper;
use fedhm::protocol::{
    aggregate, aggregation_weights, fedavg_round, heterofl_aggregate, local_update,
    resolve_capabilities, sample_participants, server_execute, slice_model, CapabilitySchedule,
    Method, RunPlan, ScheduleMode, SeedPack,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_model(weight: f64) -> Model {
    // 1x1 dense classifier over a 1-d input: one weight, one bias
    let spec = build_mlp(1, &[], 1);
    let mut model = materialize(&spec, 0).unwrap();
    for layer in model.visit_layers_mut() {
        if let Layer::Dense { w, b } = layer {
            w.data_mut()[0] = weight;
            if let Some(b) = b {
                b.data_mut()[0] = weight;
            }
        }
    }
    model
}

fn scalar_of(model: &Model) -> f64 {
    for layer in model.visit_layers() {
        if let Layer::Dense { w, .. } = layer {
            return w.data()[0];
        }
    }
    unreachable!()
}

fn plain_hyper(lr: f64, momentum: f64, wd: f64, fd: f64) -> SgdHyper {
    SgdHyper {
        lr,
        momentum,
        weight_decay: wd,
        frobenius_decay: fd,
    }
}

#[test]
fn single_participant_aggregation_is_identity() {
    let m = scalar_model(0.37);
    let out = aggregate(&[&m], &[0.5], 5.0).unwrap();
    assert_eq!(out, m);
}

#[test]
fn uniform_temperature_gives_plain_mean() {
    let a = scalar_model(1.0);
    let b = scalar_model(3.0);
    let out = aggregate(&[&a, &b], &[0.5, 0.25], f64::INFINITY).unwrap();
    assert_eq!(scalar_of(&out), 2.0);
}

#[test]
fn hand_computed_softmax_case() {
    // gamma = (1.0, 0.5), tau = 5: alpha = softmax(0.2, 0.1)
    let w = aggregation_weights(&[1.0, 0.5], 5.0).unwrap();
    assert!((w[0] - 0.52498).abs() <= 1e-4, "alpha_1 = {}", w[0]);
    assert!((w[1] - 0.47502).abs() <= 1e-4, "alpha_2 = {}", w[1]);

    let a = scalar_model(1.0);
    let b = scalar_model(3.0);
    let out = aggregate(&[&a, &b], &[1.0, 0.5], 5.0).unwrap();
    assert!((scalar_of(&out) - 1.95005).abs() <= 1e-4);
}

#[test]
fn weights_sum_to_one_and_favor_higher_gamma() {
    for tau in [0.3, 1.0, 5.0, 100.0] {
        let gammas = [1.0, 0.5, 0.25, 0.125, 0.083];
        let w = aggregation_weights(&gammas, tau).unwrap();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "tau {tau}: sum {sum}");
        assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        for pair in w.windows(2) {
            assert!(pair[0] > pair[1], "higher gamma must win at tau {tau}");
        }
    }
}

#[test]
fn fedavg_identity_and_weighted_mean() {
    let a = scalar_model(0.5);
    let out = fedavg_round(&[&a, &a, &a], &[7, 7, 7]).unwrap();
    assert_eq!(out, a);

    let zero = scalar_model(0.0);
    let four = scalar_model(4.0);
    let out = fedavg_round(&[&zero, &four], &[1, 3]).unwrap();
    assert_eq!(scalar_of(&out), 3.0);
}

#[test]
fn fedavg_single_step_equals_centralized_mean_gradient_step() {
    // full participation, one full-batch step each, equal shard sizes,
    // no momentum: the averaged model equals one centralized step
    let data = synth_blobs(3, 8, SynthShape::Vector { dim: 5 }, 0.4, 77).unwrap();
    let spec = build_mlp(5, &[], 3);
    let init = materialize(&spec, 3).unwrap();
    let partition = partition_iid(data.len(), 4, 5).unwrap();
    let hyper = plain_hyper(0.1, 0.0, 0.0, 0.0);

    let mut client_models = Vec::new();
    for idx in &partition.clients {
        let mut m = init.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        local_update(&mut m, &data, idx, 1, data.len(), hyper, &mut rng).unwrap();
        client_models.push(m);
    }
    let refs: Vec<&Model> = client_models.iter().collect();
    let sizes: Vec<usize> = partition.clients.iter().map(Vec::len).collect();
    let federated = fedavg_round(&refs, &sizes).unwrap();

    // centralized: one full-batch step on all data
    let mut central = init.clone();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    local_update(&mut central, &data, &all, 1, data.len(), hyper, &mut rng).unwrap();

    for ((name, a), (_, b)) in federated
        .named_tensors()
        .iter()
        .zip(central.named_tensors().iter())
    {
        let diff = a.max_abs_diff(b);
        assert!(diff <= 1e-10, "{name}: |Δ| = {diff:.3e}");
    }
}

#[test]
fn heterofl_coverage_rule_on_nested_widths() {
    // widths (1.0, 0.5) on the tiny cnn: leading channels averaged over
    // both clients, trailing channels taken from the full client alone
    let spec = build_tiny_cnn(1, 2);
    let half_spec = width_slim(&spec, 0.5).unwrap();

    let base = materialize(&spec, 10).unwrap();
    let full_client = materialize(&spec, 11).unwrap();
    let half_client = slice_model(&materialize(&spec, 12).unwrap(), &half_spec).unwrap();

    let out = heterofl_aggregate(&base, &[&full_client, &half_client]).unwrap();

    // brute-force per-coordinate oracle on the stem conv (1 -> 8 channels;
    // the half model has 4)
    let get_stem = |m: &Model| -> fedhm::tensor::Tensor {
        for layer in m.visit_layers() {
            if let Layer::Conv { w, .. } = layer {
                return w.clone();
            }
        }
        unreachable!()
    };
    let w_out = get_stem(&out);
    let w_full = get_stem(&full_client);
    let w_half = get_stem(&half_client);
    for o in 0..8 {
        for ky in 0..3 {
            for kx in 0..3 {
                let got = w_out.at4(o, 0, ky, kx);
                let want = if o < 4 {
                    (w_full.at4(o, 0, ky, kx) + w_half.at4(o, 0, ky, kx)) / 2.0
                } else {
                    w_full.at4(o, 0, ky, kx)
                };
                assert!((got - want).abs() <= 1e-12, "stem[{o},{ky},{kx}]");
            }
        }
    }
}

#[test]
fn heterofl_matches_brute_force_oracle_everywhere() {
    let spec = build_tiny_cnn(2, 3);
    let widths = [1.0, 0.6, 0.3];
    let base = materialize(&spec, 20).unwrap();
    let clients: Vec<Model> = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let slim_spec = width_slim(&spec, w).unwrap();
            slice_model(&materialize(&spec, 30 + i as u64).unwrap(), &slim_spec).unwrap()
        })
        .collect();
    let refs: Vec<&Model> = clients.iter().collect();
    let out = heterofl_aggregate(&base, &refs).unwrap();

    // oracle: for every coordinate of every tensor, average the clients
    // whose tensor contains that coordinate (by leading-index containment)
    let base_tensors = base.named_tensors();
    let out_tensors = out.named_tensors();
    for (ti, (name, base_t)) in base_tensors.iter().enumerate() {
        let out_t = &out_tensors[ti].1;
        let shape = base_t.shape();
        for flat in 0..base_t.len() {
            // unflatten the coordinate
            let mut coord = vec![0usize; shape.len()];
            let mut rem = flat;
            for d in (0..shape.len()).rev() {
                coord[d] = rem % shape[d];
                rem /= shape[d];
            }
            let mut sum = 0.0;
            let mut count = 0u32;
            for client in &clients {
                let ct = &client.named_tensors()[ti].1.clone();
                let cshape = ct.shape();
                if coord.iter().zip(cshape.iter()).all(|(c, s)| c < s) {
                    let mut cflat = 0usize;
                    for d in 0..cshape.len() {
                        cflat = cflat * cshape[d] + coord[d];
                    }
                    sum += ct.data()[cflat];
                    count += 1;
                }
            }
            let want = if count > 0 {
                sum / count as f64
            } else {
                base_t.data()[flat]
            };
            let got = out_t.data()[flat];
            assert!(
                (got - want).abs() <= 1e-12,
                "{name}[{coord:?}]: {got} vs oracle {want}"
            );
        }
    }
}

#[test]
fn heterofl_all_full_width_is_plain_mean() {
    let spec = build_tiny_cnn(1, 2);
    let base = materialize(&spec, 1).unwrap();
    let a = materialize(&spec, 2).unwrap();
    let b = materialize(&spec, 3).unwrap();
    let out = heterofl_aggregate(&base, &[&a, &b]).unwrap();
    let mean = fedavg_round(&[&a, &b], &[1, 1]).unwrap();
    for ((name, x), (_, y)) in out.named_tensors().iter().zip(mean.named_tensors().iter()) {
        assert!(x.max_abs_diff(y) <= 1e-12, "{name}");
    }
}

#[test]
fn capability_resolution_fixed_and_dynamic() {
    let fixed = CapabilitySchedule::fixed_round_robin(10, 4);
    let r1 = resolve_capabilities(&fixed, 1, 99, 10);
    let r50 = resolve_capabilities(&fixed, 50, 99, 10);
    assert_eq!(r1, r50);
    assert_eq!(r1[0], 1);
    assert_eq!(r1[4], 1);
    assert_eq!(r1[7], 4);

    let dynamic = CapabilitySchedule::dynamic(10, 4);
    let mut counts = [0usize; 4];
    let mut draws = 0usize;
    for round in 1..=250 {
        let caps = resolve_capabilities(&dynamic, round, 42, 10);
        for &c in &caps {
            counts[c - 1] += 1;
            draws += 1;
        }
    }
    assert!(draws >= 2000);
    for (i, &c) in counts.iter().enumerate() {
        let freq = c as f64 / draws as f64;
        assert!(
            (freq - 0.25).abs() <= 0.05,
            "level {} frequency {freq}",
            i + 1
        );
    }
    // same seed, same sequence
    let a = resolve_capabilities(&dynamic, 7, 42, 10);
    let b = resolve_capabilities(&dynamic, 7, 42, 10);
    assert_eq!(a, b);
    assert_ne!(
        resolve_capabilities(&dynamic, 7, 42, 10),
        resolve_capabilities(&dynamic, 8, 42, 10)
    );
}

#[test]
fn participant_sampling_is_deterministic_and_bounded() {
    for round in 1..=20 {
        let p = sample_participants(20, 0.5, 7, round);
        assert_eq!(p.len(), 10);
        assert!(p.windows(2).all(|w| w[0] < w[1]), "sorted without repeats");
        assert!(p.iter().all(|&i| i < 20));
        assert_eq!(p, sample_participants(20, 0.5, 7, round));
    }
    assert_eq!(sample_participants(5, 0.01, 7, 1).len(), 1);
}

#[test]
fn local_update_with_zero_lr_keeps_parameters() {
    let data = synth_blobs(2, 6, SynthShape::Vector { dim: 4 }, 0.3, 5).unwrap();
    let spec = build_mlp(4, &[6], 2);
    let mut model = materialize(&spec, 8).unwrap();
    let before = model.clone();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    local_update(
        &mut model,
        &data,
        &idx,
        2,
        4,
        plain_hyper(0.0, 0.0, 0.0, 0.0),
        &mut rng,
    )
    .unwrap();
    // trainable parameters unchanged (batch-norm-free model, so everything)
    assert_eq!(model, before);
}

#[test]
fn local_update_single_batch_matches_hand_computed_step() {
    // linear softmax model, one batch, no momentum: p' = p - lr (g + wd p)
    let n = 6usize;
    let d = 3usize;
    let data = synth_blobs(2, n / 2, SynthShape::Vector { dim: d }, 0.2, 9).unwrap();
    let spec = build_mlp(d, &[], 2);
    let init = materialize(&spec, 4).unwrap();
    let (lr, wd) = (0.05, 0.01);

    let mut model = init.clone();
    let idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    local_update(
        &mut model,
        &data,
        &idx,
        1,
        n,
        plain_hyper(lr, 0.0, wd, 0.0),
        &mut rng,
    )
    .unwrap();

    // hand gradient: dW = x^T (softmax - onehot) / n, db = column sums
    let (w0, b0) = match init.visit_layers()[0] {
        Layer::Dense { w, b } => (w.clone(), b.clone().unwrap()),
        _ => unreachable!(),
    };
    let mut dw = vec![0.0; d * 2];
    let mut db = vec![0.0; 2];
    for i in 0..n {
        let (x, labels) = data.gather(&[i]);
        let mut logits = [0.0f64; 2];
        for j in 0..2 {
            let mut acc = b0.data()[j];
            for k in 0..d {
                acc += x.data()[k] * w0.at2(k, j);
            }
            logits[j] = acc;
        }
        let denom = logits[0].exp() + logits[1].exp();
        for j in 0..2 {
            let p = logits[j].exp() / denom;
            let onehot = if j == labels[0] { 1.0 } else { 0.0 };
            let g = (p - onehot) / n as f64;
            db[j] += g;
            for k in 0..d {
                dw[k * 2 + j] += x.data()[k] * g;
            }
        }
    }
    let (w1, b1) = match model.visit_layers()[0] {
        Layer::Dense { w, b } => (w.clone(), b.clone().unwrap()),
        _ => unreachable!(),
    };
    for k in 0..d {
        for j in 0..2 {
            let want = w0.at2(k, j) - lr * (dw[k * 2 + j] + wd * w0.at2(k, j));
            let got = w1.at2(k, j);
            assert!((got - want).abs() <= 1e-10, "W[{k},{j}]: {got} vs {want}");
        }
    }
    for j in 0..2 {
        let want = b0.data()[j] - lr * db[j];
        assert!((b1.data()[j] - want).abs() <= 1e-10);
    }
}

#[test]
fn training_loss_trends_down_on_separable_task() {
    let data = synth_blobs(3, 20, SynthShape::Vector { dim: 6 }, 0.0, 21).unwrap();
    let spec = build_mlp(6, &[8], 3);
    let mut model = materialize(&spec, 5).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let stats = local_update(
        &mut model,
        &data,
        &idx,
        20,
        16,
        plain_hyper(0.1, 0.9, 1e-4, 1e-4),
        &mut rng,
    )
    .unwrap();
    let losses = &stats.epoch_losses;
    let violations = losses
        .windows(2)
        .filter(|w| w[1] > w[0] + 1e-12)
        .count();
    assert!(
        violations * 10 <= losses.len(),
        "too many loss increases: {violations}/{} ({losses:?})",
        losses.len()
    );
    assert!(losses.last().unwrap() < losses.first().unwrap());
}

#[test]
fn empty_client_shard_is_an_error() {
    let data = synth_blobs(2, 3, SynthShape::Vector { dim: 2 }, 0.1, 1).unwrap();
    let spec = build_mlp(2, &[], 2);
    let mut model = materialize(&spec, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(local_update(
        &mut model,
        &data,
        &[],
        1,
        4,
        plain_hyper(0.1, 0.0, 0.0, 0.0),
        &mut rng
    )
    .is_err());
}

// ---------------------------------------------------------------------------
// Whole-run behavior
// ---------------------------------------------------------------------------

struct Fixture {
    spec: fedhm::modelspec::ModelSpec,
    train: Dataset,
    test: Dataset,
    partition: fedhm::data::Partition,
}

fn tiny_fixture(clients: usize) -> Fixture {
    let train = synth_blobs(
        2,
        8,
        SynthShape::Image {
            channels: 1,
            height: 6,
            width: 6,
        },
        0.2,
        50,
    )
    .unwrap();
    let test = synth_blobs(
        2,
        4,
        SynthShape::Image {
            channels: 1,
            height: 6,
            width: 6,
        },
        0.2,
        50,
    )
    .unwrap();
    let partition = partition_iid(train.len(), clients, 4).unwrap();
    Fixture {
        spec: build_tiny_cnn(1, 2),
        train,
        test,
        partition,
    }
}

fn base_plan<'a>(f: &'a Fixture, method: Method, ratios: Vec<f64>, rounds: usize) -> RunPlan<'a> {
    let levels = ratios.len();
    RunPlan {
        spec: &f.spec,
        train: &f.train,
        test: &f.test,
        partition: &f.partition,
        method,
        ratios,
        rho: 1,
        schedule: CapabilitySchedule::fixed_round_robin(f.partition.num_clients(), levels),
        tau: f64::INFINITY,
        rounds,
        epochs: 1,
        batch: 8,
        sample_fraction: 0.5,
        hyper: plain_hyper(0.05, 0.9, 1e-4, 1e-4),
        seeds: SeedPack {
            init: 11,
            sampling: 12,
            data: 13,
        },
        threads: 0,
    }
}

#[test]
fn zero_rounds_returns_the_initial_model() {
    let f = tiny_fixture(4);
    let plan = base_plan(&f, Method::FedHm, vec![1.0], 0);
    let out = server_execute(&plan).unwrap();
    let init = materialize(&f.spec, 11).unwrap();
    assert_eq!(out.model, init);
    assert!(out.records.is_empty());
}

#[test]
fn degenerate_fedhm_is_bit_identical_to_fedavg() {
    let f = tiny_fixture(4);
    let fedhm_out = server_execute(&base_plan(&f, Method::FedHm, vec![1.0], 3)).unwrap();
    let fedavg_out = server_execute(&base_plan(&f, Method::FedAvg, vec![1.0], 3)).unwrap();

    for ((name, a), (_, b)) in fedhm_out
        .model
        .named_tensors()
        .iter()
        .zip(fedavg_out.model.named_tensors().iter())
    {
        assert_eq!(a.data(), b.data(), "{name} differs between methods");
    }
    assert_eq!(fedhm_out.records, fedavg_out.records);
}

#[test]
fn runs_are_deterministic_regardless_of_parallelism() {
    let f = tiny_fixture(6);
    let serial = server_execute(&base_plan(&f, Method::FedHm, vec![1.0, 0.5], 3)).unwrap();
    let mut plan = base_plan(&f, Method::FedHm, vec![1.0, 0.5], 3);
    plan.threads = 4;
    let parallel = server_execute(&plan).unwrap();
    assert_eq!(serial.records, parallel.records);
    for ((name, a), (_, b)) in serial
        .model
        .named_tensors()
        .iter()
        .zip(parallel.model.named_tensors().iter())
    {
        assert_eq!(a.data(), b.data(), "{name} differs under parallelism");
    }
}

#[test]
fn aggregation_interface_accepts_models_and_metadata_only() {
    // the server-side surface takes recovered models, ratios, sizes; no
    // dataset type appears anywhere in these calls
    let a = scalar_model(1.0);
    let b = scalar_model(2.0);
    let _ = aggregate(&[&a, &b], &[1.0, 0.5], 5.0).unwrap();
    let _ = fedavg_round(&[&a, &b], &[10, 20]).unwrap();
    let base = scalar_model(0.0);
    let _ = heterofl_aggregate(&base, &[&a, &b]).unwrap();
}
