//! The federated protocol engine.
//!
//! One round: resolve client capability levels, sample participants,
//! factorize the global model once per distinct rank ratio, run local
//! updates (possibly in parallel), recover every result to full rank, and
//! aggregate with temperature-weighted averaging. FedAvg and the
//! width-slimming / channel-aggregation baselines share the same loop.
//!
//! Client raw data is reachable only inside [`local_update`]; the
//! aggregation functions accept recovered models and metadata, nothing else.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::factorize::{count_macs, count_params};
use crate::metrics::{evaluate_top1, RoundRecord};
use crate::modelspec::{HybridPlan, ModelSpec};
use crate::nn::model::{factorize_model, materialize, recover_model, Layer, Model};
use crate::nn::sgd::{SgdHyper, SgdState};
use crate::nn::softmax_cross_entropy;
use crate::tensor::Tensor;

/// A client's identity and its capability level (1-based index into the
/// configured ratio list).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClientProfile {
    pub id: usize,
    pub level: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleMode {
    Fixed,
    Dynamic,
}

/// Capability assignment over rounds: a fixed map, or a fresh uniform draw
/// per client per round.
#[derive(Clone, Debug, PartialEq)]
pub struct CapabilitySchedule {
    pub mode: ScheduleMode,
    pub levels: usize,
    pub fixed_assignment: Vec<usize>,
}

impl CapabilitySchedule {
    /// Fixed schedule assigning levels round-robin by client id.
    pub fn fixed_round_robin(clients: usize, levels: usize) -> Self {
        CapabilitySchedule {
            mode: ScheduleMode::Fixed,
            levels,
            fixed_assignment: (0..clients).map(|i| (i % levels) + 1).collect(),
        }
    }

    pub fn fixed_with_assignment(assignment: Vec<usize>, levels: usize) -> Result<Self> {
        if assignment.iter().any(|&l| l == 0 || l > levels) {
            return Err(Error::InvalidArgument(format!(
                "capability levels must lie in 1..={levels}"
            )));
        }
        Ok(CapabilitySchedule {
            mode: ScheduleMode::Fixed,
            levels,
            fixed_assignment: assignment,
        })
    }

    pub fn dynamic(clients: usize, levels: usize) -> Self {
        CapabilitySchedule {
            mode: ScheduleMode::Dynamic,
            levels,
            fixed_assignment: (0..clients).map(|i| (i % levels) + 1).collect(),
        }
    }
}

// stream tags for sub-seed derivation
const STREAM_PARTICIPANTS: u64 = 0x70_61_72_74; // "part"
const STREAM_CAPABILITIES: u64 = 0x63_61_70_73; // "caps"
const STREAM_LOCAL: u64 = 0x6c_6f_63_6c; // "locl"

/// Splitmix64-based sub-seed derivation; deterministic and stable.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base;
    for &t in tags {
        state ^= t.wrapping_mul(0x9e3779b97f4a7c15);
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        state = z ^ (z >> 31);
    }
    state
}

/// Level per client for one round: the fixed map, or a per-round uniform
/// draw deterministic in (seed, round).
pub fn resolve_capabilities(
    schedule: &CapabilitySchedule,
    round: usize,
    sampling_seed: u64,
    clients: usize,
) -> Vec<usize> {
    match schedule.mode {
        ScheduleMode::Fixed => schedule.fixed_assignment.clone(),
        ScheduleMode::Dynamic => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                sampling_seed,
                &[STREAM_CAPABILITIES, round as u64],
            ));
            (0..clients)
                .map(|_| rng.gen_range(1..=schedule.levels))
                .collect()
        }
    }
}

/// Samples `max(1, round(fraction * clients))` participant ids without
/// replacement, returned sorted by id.
pub fn sample_participants(
    clients: usize,
    fraction: f64,
    sampling_seed: u64,
    round: usize,
) -> Vec<usize> {
    let k = ((fraction * clients as f64).round() as usize)
        .max(1)
        .min(clients);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        sampling_seed,
        &[STREAM_PARTICIPANTS, round as u64],
    ));
    let mut ids: Vec<usize> = (0..clients).collect();
    ids.shuffle(&mut rng);
    let mut chosen: Vec<usize> = ids.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

/// Softmax aggregation weights `α_p = exp(γ_p/τ) / Σ exp(γ_q/τ)`;
/// `τ = ∞` gives exactly uniform weights.
pub fn aggregation_weights(gammas: &[f64], tau: f64) -> Result<Vec<f64>> {
    if gammas.is_empty() {
        return Err(Error::InvalidArgument("no participants to weight".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if tau.is_infinite() {
        let w = 1.0 / gammas.len() as f64;
        return Ok(vec![w; gammas.len()]);
    }
    let max = gammas.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = gammas.iter().map(|&g| ((g - max) / tau).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / denom).collect())
}

/// Temperature-weighted aggregation of recovered full-rank models:
/// `w ← Σ_p α_p w_p` with `α = softmax(γ/τ)`, applied parameter-wise to
/// every tensor including biases and batch-norm statistics.
pub fn aggregate(models: &[&Model], gammas: &[f64], tau: f64) -> Result<Model> {
    if models.len() != gammas.len() {
        return Err(Error::InvalidArgument(
            "one rank ratio per participant model".into(),
        ));
    }
    let weights = aggregation_weights(gammas, tau)?;
    Model::weighted_combine(models, &weights)
}

/// FedAvg: data-size-weighted average of homogeneous models
/// (plain mean when sizes are equal).
pub fn fedavg_round(models: &[&Model], sizes: &[usize]) -> Result<Model> {
    if models.is_empty() || models.len() != sizes.len() {
        return Err(Error::InvalidArgument(
            "one data size per participant model".into(),
        ));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("total data size is zero".into()));
    }
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / total as f64).collect();
    Model::weighted_combine(models, &weights)
}

// ---------------------------------------------------------------------------
// Channel slicing and aggregation (width-slimming baseline)
// ---------------------------------------------------------------------------

fn layer_pairs<'a>(a: &'a Model, b: &'a Model) -> Result<Vec<(&'a Layer, &'a Layer)>> {
    let la = a.visit_layers();
    let lb = b.visit_layers();
    if la.len() != lb.len() {
        return Err(Error::dimension("models have different layer counts"));
    }
    Ok(la.into_iter().zip(lb).collect())
}

/// Extracts the leading-channel slice of `full` shaped like `slim_spec`.
/// The slim spec must be a nested subnetwork (e.g. from `width_slim`).
pub fn slice_model(full: &Model, slim_spec: &ModelSpec) -> Result<Model> {
    // materialize the slim structure cheaply, then overwrite every tensor
    let mut slim = materialize(slim_spec, 0)?;
    {
        let full_layers = full.visit_layers();
        let slim_layers = slim.visit_layers_mut();
        if full_layers.len() != slim_layers.len() {
            return Err(Error::dimension("slim spec does not mirror the full model"));
        }
        for (f, s) in full_layers.into_iter().zip(slim_layers) {
            slice_layer(f, s)?;
        }
    }
    Ok(slim)
}

fn slice_layer(full: &Layer, slim: &mut Layer) -> Result<()> {
    match (full, slim) {
        (Layer::Conv { w: fw, .. }, Layer::Conv { w: sw, .. }) => {
            let (n_s, m_s, kh, kw) = (sw.shape()[0], sw.shape()[1], sw.shape()[2], sw.shape()[3]);
            let (n_f, m_f) = (fw.shape()[0], fw.shape()[1]);
            if n_s > n_f || m_s > m_f || fw.shape()[2] != kh || fw.shape()[3] != kw {
                return Err(Error::dimension("slim conv is not nested in full conv"));
            }
            for o in 0..n_s {
                for i in 0..m_s {
                    for y in 0..kh {
                        for x in 0..kw {
                            let idx = sw.idx4(o, i, y, x);
                            sw.data_mut()[idx] = fw.at4(o, i, y, x);
                        }
                    }
                }
            }
            Ok(())
        }
        (Layer::Dense { w: fw, b: fb }, Layer::Dense { w: sw, b: sb }) => {
            let (m_s, n_s) = (sw.shape()[0], sw.shape()[1]);
            if m_s > fw.shape()[0] || n_s > fw.shape()[1] {
                return Err(Error::dimension("slim dense is not nested in full dense"));
            }
            for i in 0..m_s {
                for j in 0..n_s {
                    let idx = sw.idx2(i, j);
                    sw.data_mut()[idx] = fw.at2(i, j);
                }
            }
            if let (Some(fb), Some(sb)) = (fb, sb) {
                for j in 0..sb.len() {
                    sb.data_mut()[j] = fb.data()[j];
                }
            }
            Ok(())
        }
        (
            Layer::BatchNorm {
                gamma: fg,
                beta: fbt,
                running_mean: fm,
                running_var: fv,
            },
            Layer::BatchNorm {
                gamma: sg,
                beta: sbt,
                running_mean: sm,
                running_var: sv,
            },
        ) => {
            let ch = sg.len();
            if ch > fg.len() {
                return Err(Error::dimension("slim batchnorm is not nested"));
            }
            for c in 0..ch {
                sg.data_mut()[c] = fg.data()[c];
                sbt.data_mut()[c] = fbt.data()[c];
                sm.data_mut()[c] = fm.data()[c];
                sv.data_mut()[c] = fv.data()[c];
            }
            Ok(())
        }
        (Layer::Relu, Layer::Relu)
        | (Layer::GlobalAvgPool, Layer::GlobalAvgPool)
        | (Layer::Flatten, Layer::Flatten) => Ok(()),
        _ => Err(Error::dimension(
            "channel slicing requires matching full-rank layer kinds",
        )),
    }
}

/// HeteroFL-style channel aggregation: every coordinate of the full model
/// becomes the mean over the clients whose slim model contains it;
/// uncovered coordinates keep the previous global value.
pub fn heterofl_aggregate(previous: &Model, clients: &[&Model]) -> Result<Model> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no client models".into()));
    }
    let mut out = previous.clone();
    // accumulate sums and coverage counts per full-model tensor
    let layer_count = previous.visit_layers().len();
    let mut sums: Vec<Vec<Vec<f64>>> = Vec::with_capacity(layer_count);
    let mut counts: Vec<Vec<Vec<u32>>> = Vec::with_capacity(layer_count);
    for layer in previous.visit_layers() {
        let shapes = layer_tensor_shapes(layer);
        sums.push(
            shapes
                .iter()
                .map(|s| vec![0.0; s.iter().product()])
                .collect(),
        );
        counts.push(
            shapes
                .iter()
                .map(|s| vec![0u32; s.iter().product()])
                .collect(),
        );
    }

    for client in clients {
        let pairs = layer_pairs(previous, client)?;
        for (li, (full_layer, client_layer)) in pairs.into_iter().enumerate() {
            accumulate_layer(full_layer, client_layer, &mut sums[li], &mut counts[li])?;
        }
    }

    // write means where covered
    let out_layers = out.visit_layers_mut();
    for (li, layer) in out_layers.into_iter().enumerate() {
        let tensors = layer_tensors_mut(layer);
        for (ti, t) in tensors.into_iter().enumerate() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let c = counts[li][ti][i];
                if c > 0 {
                    *v = sums[li][ti][i] / c as f64;
                }
            }
        }
    }
    Ok(out)
}

fn layer_tensor_shapes(layer: &Layer) -> Vec<Vec<usize>> {
    match layer {
        Layer::Dense { w, b } => {
            let mut v = vec![w.shape().to_vec()];
            if let Some(b) = b {
                v.push(b.shape().to_vec());
            }
            v
        }
        Layer::Conv { w, .. } => vec![w.shape().to_vec()],
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        } => vec![
            gamma.shape().to_vec(),
            beta.shape().to_vec(),
            running_mean.shape().to_vec(),
            running_var.shape().to_vec(),
        ],
        Layer::FactorizedDense { u, v, b, .. } => {
            let mut out = vec![u.shape().to_vec(), v.shape().to_vec()];
            if let Some(b) = b {
                out.push(b.shape().to_vec());
            }
            out
        }
        Layer::FactorizedConv { u, v, .. } => vec![u.shape().to_vec(), v.shape().to_vec()],
        Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => vec![],
    }
}

fn layer_tensors_mut(layer: &mut Layer) -> Vec<&mut Tensor> {
    match layer {
        Layer::Dense { w, b } => {
            let mut v: Vec<&mut Tensor> = vec![w];
            if let Some(b) = b {
                v.push(b);
            }
            v
        }
        Layer::Conv { w, .. } => vec![w],
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        } => vec![gamma, beta, running_mean, running_var],
        Layer::FactorizedDense { u, v, b, .. } => {
            let mut out: Vec<&mut Tensor> = vec![u, v];
            if let Some(b) = b {
                out.push(b);
            }
            out
        }
        Layer::FactorizedConv { u, v, .. } => vec![u, v],
        Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => vec![],
    }
}

fn accumulate_layer(
    full: &Layer,
    client: &Layer,
    sums: &mut [Vec<f64>],
    counts: &mut [Vec<u32>],
) -> Result<()> {
    match (full, client) {
        (Layer::Conv { w: fw, .. }, Layer::Conv { w: cw, .. }) => {
            let (n_c, m_c, kh, kw) = (cw.shape()[0], cw.shape()[1], cw.shape()[2], cw.shape()[3]);
            if n_c > fw.shape()[0] || m_c > fw.shape()[1] {
                return Err(Error::dimension("client conv is not nested"));
            }
            let m_f = fw.shape()[1];
            for o in 0..n_c {
                for i in 0..m_c {
                    for y in 0..kh {
                        for x in 0..kw {
                            let fidx = ((o * m_f + i) * kh + y) * kw + x;
                            sums[0][fidx] += cw.at4(o, i, y, x);
                            counts[0][fidx] += 1;
                        }
                    }
                }
            }
            Ok(())
        }
        (Layer::Dense { w: fw, b: fb }, Layer::Dense { w: cw, b: cb }) => {
            let (m_c, n_c) = (cw.shape()[0], cw.shape()[1]);
            if m_c > fw.shape()[0] || n_c > fw.shape()[1] {
                return Err(Error::dimension("client dense is not nested"));
            }
            let n_f = fw.shape()[1];
            for i in 0..m_c {
                for j in 0..n_c {
                    let fidx = i * n_f + j;
                    sums[0][fidx] += cw.at2(i, j);
                    counts[0][fidx] += 1;
                }
            }
            if let (Some(_), Some(cb)) = (fb, cb) {
                for j in 0..cb.len() {
                    sums[1][j] += cb.data()[j];
                    counts[1][j] += 1;
                }
            }
            Ok(())
        }
        (
            Layer::BatchNorm { .. },
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
        ) => {
            for (ti, t) in [gamma, beta, running_mean, running_var]
                .into_iter()
                .enumerate()
            {
                for c in 0..t.len() {
                    sums[ti][c] += t.data()[c];
                    counts[ti][c] += 1;
                }
            }
            Ok(())
        }
        (Layer::Relu, Layer::Relu)
        | (Layer::GlobalAvgPool, Layer::GlobalAvgPool)
        | (Layer::Flatten, Layer::Flatten) => Ok(()),
        _ => Err(Error::dimension(
            "channel aggregation requires matching full-rank layer kinds",
        )),
    }
}

// ---------------------------------------------------------------------------
// Local update
// ---------------------------------------------------------------------------

/// Per-client training counters; parameters travel separately as the
/// updated model.
#[derive(Clone, Debug, Default)]
pub struct LocalStats {
    pub samples_processed: u64,
    pub macs: u64,
    pub epoch_losses: Vec<f64>,
}

/// `E` epochs of mini-batch SGD on the client's shard. Frobenius decay
/// applies to factorized weights and weight decay to the rest, per the
/// optimizer's hyper-parameters. Only the updated parameters and counters
/// leave this function.
pub fn local_update(
    model: &mut Model,
    data: &Dataset,
    indices: &[usize],
    epochs: usize,
    batch: usize,
    hyper: SgdHyper,
    rng: &mut ChaCha8Rng,
) -> Result<LocalStats> {
    if indices.is_empty() {
        return Err(Error::Data("client dataset is empty".into()));
    }
    if epochs < 1 {
        return Err(Error::InvalidArgument("need at least one epoch".into()));
    }
    if batch < 1 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let hw = input_hw(data);
    let macs_per_sample = count_macs(&model.spec, hw)?;
    let mut sgd = SgdState::new(model, hyper)?;
    let mut stats = LocalStats::default();

    let mut order: Vec<usize> = indices.to_vec();
    for _epoch in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let (x, labels) = data.gather(chunk);
            let (logits, cache) = model.forward_train(&x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            let grads = model.backward(&cache, &dlogits)?;
            sgd.step(model, &grads)?;
            epoch_loss += loss;
            batches += 1;
            stats.samples_processed += chunk.len() as u64;
            stats.macs += chunk.len() as u64 * macs_per_sample;
        }
        stats.epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(stats)
}

fn input_hw(data: &Dataset) -> (usize, usize) {
    if data.features.ndim() == 4 {
        (data.features.shape()[2], data.features.shape()[3])
    } else {
        (1, 1)
    }
}

// ---------------------------------------------------------------------------
// Server loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    FedHm,
    FedAvg,
    WidthSlimFedAvg,
    HeteroFlChannel,
}

#[derive(Clone, Copy, Debug)]
pub struct SeedPack {
    pub init: u64,
    pub sampling: u64,
    pub data: u64,
}

/// Everything `server_execute` needs for one experiment.
pub struct RunPlan<'a> {
    pub spec: &'a ModelSpec,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub partition: &'a Partition,
    pub method: Method,
    /// Rank ratios (FedHM) or width ratios (baselines), one per level.
    pub ratios: Vec<f64>,
    pub rho: usize,
    pub schedule: CapabilitySchedule,
    pub tau: f64,
    pub rounds: usize,
    pub epochs: usize,
    pub batch: usize,
    pub sample_fraction: f64,
    pub hyper: SgdHyper,
    pub seeds: SeedPack,
    /// Client-parallelism cap; 0 or 1 runs serially.
    pub threads: usize,
}

/// Final model plus the full metrics stream and a per-level summary.
pub struct RunOutput {
    pub model: Model,
    pub records: Vec<RoundRecord>,
    /// Final test accuracy of the recovered global model.
    pub global_accuracy: f64,
    /// Final per-level test accuracy, indexed by level - 1.
    pub level_accuracy: Vec<f64>,
}

struct ClientOutcome {
    id: usize,
    level: usize,
    model: Model,
    num_samples: usize,
    stats: LocalStats,
}

/// Runs the configured method for `rounds` communication rounds and returns
/// the final global model with its metrics stream. With `rounds = 0` the
/// initial model comes back untouched.
pub fn server_execute(plan: &RunPlan) -> Result<RunOutput> {
    validate_plan(plan)?;
    let clients = plan.partition.num_clients();
    let levels = plan.ratios.len();

    let mut global = materialize(plan.spec, plan.seeds.init)?;
    let mut records = Vec::new();
    let mut cum_macs_per_level = vec![0u64; levels];

    // width-slimming baselines precompute per-level specs once
    let slim_specs: Vec<ModelSpec> = match plan.method {
        Method::HeteroFlChannel => plan
            .ratios
            .iter()
            .map(|&w| crate::modelspec::width_slim(plan.spec, w))
            .collect::<Result<_>>()?,
        Method::WidthSlimFedAvg => {
            let slim = crate::modelspec::width_slim(plan.spec, plan.ratios[0])?;
            global = materialize(&slim, plan.seeds.init)?;
            vec![slim]
        }
        _ => Vec::new(),
    };

    let pool = make_pool(plan.threads)?;

    for round in 1..=plan.rounds {
        let caps = resolve_capabilities(&plan.schedule, round, plan.seeds.sampling, clients);
        let participants =
            sample_participants(clients, plan.sample_fraction, plan.seeds.sampling, round);

        // one dispatch model per distinct level present this round
        let mut dispatch: BTreeMap<usize, Model> = BTreeMap::new();
        for &p in &participants {
            let level = caps[p];
            if !dispatch.contains_key(&level) {
                dispatch.insert(level, dispatch_model(plan, &global, &slim_specs, level)?);
            }
        }

        let jobs: Vec<(usize, usize)> = participants.iter().map(|&p| (p, caps[p])).collect();
        let run_client = |&(id, level): &(usize, usize)| -> Result<ClientOutcome> {
            let mut model = dispatch
                .get(&level)
                .expect("dispatch model prepared")
                .clone();
            let indices = &plan.partition.clients[id];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                plan.seeds.data,
                &[STREAM_LOCAL, round as u64, id as u64],
            ));
            let stats = local_update(
                &mut model,
                plan.train,
                indices,
                plan.epochs,
                plan.batch,
                plan.hyper,
                &mut rng,
            )
            .map_err(|e| Error::State(format!("client {id} failed in round {round}: {e}")))?;
            Ok(ClientOutcome {
                id,
                level,
                model,
                num_samples: indices.len(),
                stats,
            })
        };

        let mut outcomes: Vec<ClientOutcome> = match &pool {
            Some(pool) => {
                pool.install(|| jobs.par_iter().map(run_client).collect::<Result<_>>())?
            }
            None => jobs.iter().map(run_client).collect::<Result<_>>()?,
        };
        // aggregation consumes results sorted by client id
        outcomes.sort_by_key(|o| o.id);

        global = combine_round(plan, &global, &outcomes)?;
        if !global.all_finite() {
            return Err(Error::NonFinite(format!(
                "global model after round {round}"
            )));
        }

        // per-level metrics on the new global
        let mut byte_rows = vec![(0u64, 0u64); levels];
        let mut macs_rows = vec![0u64; levels];
        for o in &outcomes {
            let bytes = 4 * count_params(&o.model.spec) as u64;
            byte_rows[o.level - 1].0 += bytes;
            byte_rows[o.level - 1].1 += bytes;
            macs_rows[o.level - 1] += o.stats.macs;
        }
        for level in 1..=levels {
            cum_macs_per_level[level - 1] += macs_rows[level - 1];
            let eval_model = dispatch_model(plan, &global, &slim_specs, level)?;
            let acc = evaluate_top1(&eval_model, plan.test)?;
            let params = count_params(&eval_model.spec) as u64;
            records.push(RoundRecord::new(
                round,
                level,
                params,
                acc,
                byte_rows[level - 1].0,
                byte_rows[level - 1].1,
                cum_macs_per_level[level - 1],
                macs_rows[level - 1] as f64 / 1e9,
            ));
        }
    }

    let global_accuracy = evaluate_top1(&global, plan.test)?;
    let mut level_accuracy = Vec::with_capacity(levels);
    for level in 1..=levels {
        let eval_model = dispatch_model(plan, &global, &slim_specs, level)?;
        level_accuracy.push(evaluate_top1(&eval_model, plan.test)?);
    }

    Ok(RunOutput {
        model: global,
        records,
        global_accuracy,
        level_accuracy,
    })
}

fn validate_plan(plan: &RunPlan) -> Result<()> {
    plan.spec.validate()?;
    plan.hyper.validate()?;
    if plan.ratios.is_empty() {
        return Err(Error::InvalidArgument("need at least one ratio level".into()));
    }
    for &r in &plan.ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ratios must lie in (0, 1], got {r}"
            )));
        }
    }
    if plan.method == Method::WidthSlimFedAvg && plan.ratios.len() != 1 {
        return Err(Error::InvalidArgument(
            "widthslim-fedavg takes exactly one width ratio".into(),
        ));
    }
    if plan.schedule.levels != plan.ratios.len() {
        return Err(Error::InvalidArgument(
            "schedule levels must match the ratio list".into(),
        ));
    }
    if plan.schedule.fixed_assignment.len() != plan.partition.num_clients() {
        return Err(Error::InvalidArgument(
            "schedule assignment must cover every client".into(),
        ));
    }
    if !(plan.sample_fraction > 0.0 && plan.sample_fraction <= 1.0) {
        return Err(Error::InvalidArgument(
            "sample fraction must lie in (0, 1]".into(),
        ));
    }
    if !(plan.tau > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if plan.method == Method::FedHm && plan.rho > plan.spec.factorizable_count() {
        return Err(Error::InvalidArgument(format!(
            "rho {} exceeds factorizable layer count {}",
            plan.rho,
            plan.spec.factorizable_count()
        )));
    }
    Ok(())
}

fn make_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::State(format!("thread pool: {e}")))
}

/// The model a client at `level` trains (and the model evaluated for that
/// level): the full global for rank ratio 1, a fresh hybrid factorization
/// for lower rank ratios, or a channel slice for the width baselines.
fn dispatch_model(
    plan: &RunPlan,
    global: &Model,
    slim_specs: &[ModelSpec],
    level: usize,
) -> Result<Model> {
    let ratio = plan.ratios[level - 1];
    match plan.method {
        Method::FedAvg | Method::WidthSlimFedAvg => Ok(global.clone()),
        Method::FedHm => {
            if ratio >= 1.0 {
                Ok(global.clone())
            } else {
                factorize_model(global, &HybridPlan::new(plan.rho, ratio))
            }
        }
        Method::HeteroFlChannel => slice_model(global, &slim_specs[level - 1]),
    }
}

fn combine_round(plan: &RunPlan, global: &Model, outcomes: &[ClientOutcome]) -> Result<Model> {
    match plan.method {
        Method::FedAvg | Method::WidthSlimFedAvg => {
            let models: Vec<&Model> = outcomes.iter().map(|o| &o.model).collect();
            let sizes: Vec<usize> = outcomes.iter().map(|o| o.num_samples).collect();
            fedavg_round(&models, &sizes)
        }
        Method::FedHm => {
            let recovered: Vec<Model> = outcomes
                .iter()
                .map(|o| recover_model(&o.model))
                .collect::<Result<_>>()?;
            let refs: Vec<&Model> = recovered.iter().collect();
            let gammas: Vec<f64> = outcomes.iter().map(|o| plan.ratios[o.level - 1]).collect();
            aggregate(&refs, &gammas, plan.tau)
        }
        Method::HeteroFlChannel => {
            let refs: Vec<&Model> = outcomes.iter().map(|o| &o.model).collect();
            heterofl_aggregate(global, &refs)
        }
    }
}
