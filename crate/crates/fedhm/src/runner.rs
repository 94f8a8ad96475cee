//! Experiment runner: wires a parsed config into datasets, a partition, and
//! a protocol plan; executes it; and writes the metrics file, final global
//! weights, and resolved-config snapshot into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::data::{
    load_csv, load_idx, normalize_pair, partition_dirichlet, partition_iid, synth_blobs, Dataset,
    Partition, SynthShape,
};
use crate::error::{Error, Result};
use crate::factorize::{count_macs, count_params};
use crate::metrics::{comm_bytes, emit, EmitFormat};
use crate::modelspec::{
    build_mlp, build_resnet18_cifar, build_resnet34_cifar, build_tiny_cnn, make_hybrid,
    width_slim, HybridPlan, InputSpec, ModelSpec,
};
use crate::protocol::{
    derive_seed, server_execute, CapabilitySchedule, Method, RunOutput, RunPlan, ScheduleMode,
    SeedPack,
};
use crate::weights::save_model;

/// Environment variable capping client parallelism (0 = serial).
pub const THREADS_ENV: &str = "FEDHM_THREADS";

const STREAM_SYNTH: u64 = 0x73_79_6e_74; // "synt"
const STREAM_PARTITION: u64 = 0x73_70_6c_74; // "splt"

/// Command-line overrides applied on top of a parsed config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed_init: Option<u64>,
    pub seed_sample: Option<u64>,
    pub seed_data: Option<u64>,
    pub format: Option<EmitFormat>,
    /// Client parallelism; `None` reads FEDHM_THREADS (default serial).
    pub threads: Option<usize>,
}

/// Paths and results of a completed run.
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub weights_path: PathBuf,
    pub config_path: PathBuf,
    pub output: RunOutput,
}

fn apply_overrides(cfg: &ExperimentConfig, opts: &RunOptions) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    if let Some(dir) = &opts.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    if let Some(s) = opts.seed_init {
        cfg.seeds.init = s;
    }
    if let Some(s) = opts.seed_sample {
        cfg.seeds.sampling = s;
    }
    if let Some(s) = opts.seed_data {
        cfg.seeds.data = s;
    }
    cfg
}

/// Builds the base (full-rank) model spec from the config.
pub fn build_spec(cfg: &ExperimentConfig) -> Result<ModelSpec> {
    if let Some(path) = &cfg.model.file {
        let text = fs::read_to_string(path)?;
        let spec: ModelSpec =
            toml::from_str(&text).map_err(|e| Error::config("model.file", e.to_string()))?;
        spec.validate()?;
        return Ok(spec);
    }
    let classes = cfg.model.classes.unwrap_or(cfg.dataset.classes);
    let name = cfg.model.name.as_deref().unwrap_or("tiny-cnn");
    let spec = match name {
        "tiny-cnn" => {
            let in_ch = cfg
                .dataset
                .image
                .map(|dims| dims[0])
                .unwrap_or(cfg.model.in_channels);
            build_tiny_cnn(in_ch, classes)
        }
        "resnet18" => build_resnet18_cifar(classes),
        "resnet34" => build_resnet34_cifar(classes),
        "mlp" => {
            let in_dim = cfg.dataset.features.ok_or_else(|| {
                Error::config("dataset.features", "mlp models need vector features")
            })?;
            build_mlp(in_dim, &cfg.model.hidden, classes)
        }
        other => return Err(Error::config("model.name", format!("unknown model `{other}`"))),
    };
    spec.validate()?;
    Ok(spec)
}

/// Builds (train, test) datasets from the config.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset.kind.as_str() {
        "synthetic" => {
            let shape = match (cfg.dataset.image, cfg.dataset.features) {
                (Some([c, h, w]), _) => SynthShape::Image {
                    channels: c,
                    height: h,
                    width: w,
                },
                (None, Some(d)) => SynthShape::Vector { dim: d },
                (None, None) => {
                    return Err(Error::config(
                        "dataset.image",
                        "synthetic data needs image dims or a feature count",
                    ))
                }
            };
            // one draw with shared class anchors, then a per-class split
            let total_per_class = cfg.dataset.per_class + cfg.dataset.test_per_class;
            let all = synth_blobs(
                cfg.dataset.classes,
                total_per_class,
                shape,
                cfg.dataset.noise,
                derive_seed(cfg.seeds.data, &[STREAM_SYNTH]),
            )?;
            let mut train_idx = Vec::new();
            let mut test_idx = Vec::new();
            let mut seen = vec![0usize; cfg.dataset.classes];
            for (i, &label) in all.labels.iter().enumerate() {
                if seen[label] < cfg.dataset.per_class {
                    train_idx.push(i);
                } else {
                    test_idx.push(i);
                }
                seen[label] += 1;
            }
            Ok((all.subset(&train_idx), all.subset(&test_idx)))
        }
        "idx" => {
            let mut train = load_idx(
                cfg.dataset.train_images.as_ref().unwrap(),
                cfg.dataset.train_labels.as_ref().unwrap(),
            )?;
            let mut test = load_idx(
                cfg.dataset.test_images.as_ref().unwrap(),
                cfg.dataset.test_labels.as_ref().unwrap(),
            )?;
            if cfg.dataset.normalize {
                normalize_pair(&mut train, &mut test)?;
            }
            align_classes(&mut train, &mut test);
            Ok((train, test))
        }
        "csv" => {
            let mut train = load_csv(cfg.dataset.train.as_ref().unwrap())?;
            let mut test = load_csv(cfg.dataset.test.as_ref().unwrap())?;
            if cfg.dataset.normalize {
                normalize_pair(&mut train, &mut test)?;
            }
            align_classes(&mut train, &mut test);
            Ok((train, test))
        }
        other => Err(Error::config(
            "dataset.kind",
            format!("unknown dataset kind `{other}`"),
        )),
    }
}

fn align_classes(train: &mut Dataset, test: &mut Dataset) {
    let classes = train.classes.max(test.classes);
    train.classes = classes;
    test.classes = classes;
}

pub fn build_partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<Partition> {
    let seed = derive_seed(cfg.seeds.data, &[STREAM_PARTITION]);
    match cfg.partition.scheme.as_str() {
        "iid" => partition_iid(train.len(), cfg.federation.clients, seed),
        "dirichlet" => partition_dirichlet(
            &train.labels,
            cfg.federation.clients,
            cfg.partition.alpha,
            seed,
        ),
        other => Err(Error::config(
            "partition.scheme",
            format!("unknown scheme `{other}`"),
        )),
    }
}

fn build_schedule(cfg: &ExperimentConfig) -> Result<CapabilitySchedule> {
    let levels = cfg.compression.rank_ratios.len();
    let clients = cfg.federation.clients;
    match cfg.schedule_mode()? {
        ScheduleMode::Dynamic => Ok(CapabilitySchedule::dynamic(clients, levels)),
        ScheduleMode::Fixed => match &cfg.compression.assignment {
            Some(map) => CapabilitySchedule::fixed_with_assignment(map.clone(), levels),
            None => Ok(CapabilitySchedule::fixed_round_robin(clients, levels)),
        },
    }
}

fn resolve_rho(cfg: &ExperimentConfig, spec: &ModelSpec) -> usize {
    if let Some(rho) = cfg.compression.rho {
        return rho;
    }
    if let Some(stages) = &cfg.compression.factorize_stages {
        if let Some(&first) = stages.iter().min() {
            return spec.rho_for_stage(first);
        }
    }
    // default: keep the stem full, factorize the rest
    1
}

fn resolve_threads(opts: &RunOptions) -> usize {
    if let Some(t) = opts.threads {
        return t;
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.parse().unwrap_or(0),
        Err(_) => 0,
    }
}

/// Runs the configured experiment and writes metrics, final weights, and the
/// resolved-config snapshot. Returns the artifacts; the process exit code is
/// 0 exactly when this returns `Ok`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunArtifacts> {
    let cfg = apply_overrides(cfg, opts);
    let spec = build_spec(&cfg)?;
    let (train, test) = build_datasets(&cfg)?;
    let partition = build_partition(&cfg, &train)?;
    let schedule = build_schedule(&cfg)?;
    let method = cfg.method_kind()?;
    let threads = resolve_threads(opts);

    let plan = RunPlan {
        spec: &spec,
        train: &train,
        test: &test,
        partition: &partition,
        method,
        ratios: cfg.compression.rank_ratios.clone(),
        rho: resolve_rho(&cfg, &spec),
        schedule,
        tau: cfg.temperature(),
        rounds: cfg.federation.rounds,
        epochs: cfg.federation.local_epochs,
        batch: cfg.federation.batch_size,
        sample_fraction: cfg.federation.sample_fraction,
        hyper: crate::nn::sgd::SgdHyper {
            lr: cfg.optim.lr,
            momentum: cfg.optim.momentum,
            weight_decay: cfg.optim.weight_decay,
            frobenius_decay: cfg.frobenius_decay(),
        },
        seeds: SeedPack {
            init: cfg.seeds.init,
            sampling: cfg.seeds.sampling,
            data: cfg.seeds.data,
        },
        threads,
    };

    let started = Instant::now();
    let output = server_execute(&plan)?;
    let elapsed = started.elapsed().as_secs_f64();

    let out_dir = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("fedhm-out"));
    fs::create_dir_all(&out_dir)?;

    let format = opts.format.unwrap_or(EmitFormat::Csv);
    let metrics_path = out_dir.join(match format {
        EmitFormat::Csv => "metrics.csv",
        EmitFormat::JsonLines => "metrics.jsonl",
    });
    emit(&output.records, &metrics_path, format)?;

    let weights_path = out_dir.join("final_weights.bin");
    save_model(&weights_path, &output.model)?;

    let config_path = out_dir.join("resolved.toml");
    fs::write(&config_path, cfg.echo_toml())?;

    println!(
        "run finished: {} rounds in {:.1}s wall clock, global top-1 {:.4}",
        cfg.federation.rounds, elapsed, output.global_accuracy
    );
    for (i, acc) in output.level_accuracy.iter().enumerate() {
        println!(
            "  level {} (ratio {}): top-1 {:.4}",
            i + 1,
            cfg.compression.rank_ratios[i],
            acc
        );
    }

    Ok(RunArtifacts {
        out_dir,
        metrics_path,
        weights_path,
        config_path,
        output,
    })
}

/// Accounting report without any training: per-level parameter counts, MACs,
/// per-round communication bytes, and compression ratios against the full
/// model.
pub fn describe(cfg: &ExperimentConfig) -> Result<String> {
    let spec = build_spec(cfg)?;
    let method = cfg.method_kind()?;
    let input_hw = match (cfg.dataset.image, spec.input) {
        (Some([_, h, w]), _) => (h, w),
        (None, InputSpec::Image { .. }) => (32, 32),
        (None, InputSpec::Vector { .. }) => (1, 1),
    };

    let full_params = count_params(&spec);
    let full_macs = count_macs(&spec, input_hw)?;
    let full_bytes = comm_bytes(&spec);

    let mut report = String::new();
    report.push_str(&format!("model: {}\n", spec.name));
    report.push_str(&format!(
        "full model: {} params, {} MACs/sample, {} bytes/round/client\n",
        full_params, full_macs, full_bytes
    ));

    let rho = resolve_rho(cfg, &spec);
    for (i, &ratio) in cfg.compression.rank_ratios.iter().enumerate() {
        let level_spec = level_spec(cfg, &spec, method, ratio, rho)?;
        let params = count_params(&level_spec);
        let macs = count_macs(&level_spec, input_hw)?;
        let bytes = comm_bytes(&level_spec);
        report.push_str(&format!(
            "level {} (ratio {}): {} params, {} MACs/sample, {} bytes/round/client, compression {:.4}\n",
            i + 1,
            ratio,
            params,
            macs,
            bytes,
            params as f64 / full_params as f64
        ));
    }
    Ok(report)
}

fn level_spec(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    method: Method,
    ratio: f64,
    rho: usize,
) -> Result<ModelSpec> {
    match method {
        Method::FedAvg => Ok(spec.clone()),
        Method::FedHm => {
            if ratio >= 1.0 {
                Ok(spec.clone())
            } else {
                let plan = HybridPlan {
                    rho,
                    gamma: ratio,
                    include_stem: cfg.compression.include_stem,
                    include_classifier: cfg.compression.include_classifier,
                };
                make_hybrid(spec, &plan)
            }
        }
        Method::WidthSlimFedAvg | Method::HeteroFlChannel => width_slim(spec, ratio),
    }
}

/// Runs `describe` against a config file path (CLI entry).
pub fn describe_path(path: &Path) -> Result<String> {
    let cfg = ExperimentConfig::parse_file(path)?;
    describe(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn describe_reports_resnet18_exactly() {
        let cfg = ExperimentConfig::parse_str(
            r#"
[model]
name = "resnet18"
classes = 10

[dataset]
kind = "synthetic"
image = [3, 32, 32]
classes = 10
"#,
        )
        .unwrap();
        let report = describe(&cfg).unwrap();
        assert!(report.contains("11173962 params"), "report:\n{report}");
    }

    #[test]
    fn describe_sizes_decrease_along_gamma_grid() {
        let cfg = ExperimentConfig::parse_str(
            r#"
[model]
name = "resnet18"
classes = 10

[dataset]
kind = "synthetic"
image = [3, 32, 32]
classes = 10

[compression]
rank_ratios = [0.5, 0.25, 0.125, 0.083]
factorize_stages = [2]
"#,
        )
        .unwrap();
        let spec = build_spec(&cfg).unwrap();
        let rho = resolve_rho(&cfg, &spec);
        let mut prev = usize::MAX;
        for &g in &cfg.compression.rank_ratios {
            let s = level_spec(&cfg, &spec, Method::FedHm, g, rho).unwrap();
            let p = count_params(&s);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn synthetic_split_shares_anchors_and_is_deterministic() {
        let cfg = ExperimentConfig::parse_str(
            r#"
[model]
name = "tiny-cnn"

[dataset]
kind = "synthetic"
image = [1, 6, 6]
classes = 3
per_class = 4
test_per_class = 2
noise = 0.0
"#,
        )
        .unwrap();
        let (train, test) = build_datasets(&cfg).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 6);
        // noise 0: every test sample equals some train sample of its class
        let row = 36usize;
        for i in 0..test.len() {
            let t = &test.features.data()[i * row..(i + 1) * row];
            let found = (0..train.len()).any(|j| {
                train.labels[j] == test.labels[i]
                    && &train.features.data()[j * row..(j + 1) * row] == t
            });
            assert!(found, "test sample {i} has no train twin");
        }
        let (train2, _) = build_datasets(&cfg).unwrap();
        assert_eq!(train.features.data(), train2.features.data());
    }
}
