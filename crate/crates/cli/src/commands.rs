use std::path::{Path, PathBuf};

use condensery::bilevel::{run_condense, MetricsRow};
use condensery::coreset::{
    pixel_features, select_forgetting, select_herding, select_kcenter, select_random, tap_features, CoresetMethod,
};
use condensery::data::{export_projection_csv, load_synthetic, sample_per_class, save_synthetic, FeatureRows};
use condensery::eval::{derive_seed, evaluate_protocol, record_training_trace, summary_table, train_network, EvalProtocol};
use condensery::gradcheck::run_suite;
use condensery::models::embed;
use condensery::tensor::fault;
use condensery::{NormStats, SyntheticSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{Data, EmbeddingKind, RunConfig};
use crate::exit::{self, CliError};
use crate::run_dir::RunDir;

fn run_path(cfg: &RunConfig, out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.output_dir.join(command))
}

fn dataset_summary(cfg: &RunConfig, data: &Data) -> serde_json::Value {
    json!({
        "kind": cfg.dataset.kind,
        "train_samples": data.train.len(),
        "test_samples": data.test.len(),
        "classes": data.train.num_classes,
        "image_shape": data.train.image_shape(),
        "pad": data.pad,
    })
}

fn load_container(path: &Path) -> Result<(SyntheticSet, Option<NormStats>), CliError> {
    load_synthetic(path).map_err(|e| CliError::container(format!("{}: {e}", path.display())))
}

fn check_shape(synth: &SyntheticSet, data: &Data) -> Result<(), CliError> {
    if synth.image_shape() != data.train.image_shape() || synth.num_classes != data.train.num_classes {
        return Err(CliError::config(format!(
            "synthetic set has {} classes of {:?} images, dataset has {} of {:?}",
            synth.num_classes,
            synth.image_shape(),
            data.train.num_classes,
            data.train.image_shape()
        )));
    }
    Ok(())
}

pub fn condense(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let data = cfg.load_data(None)?;
    let arch = cfg.architecture(data.train.image_shape(), data.train.num_classes);
    arch.validate().map_err(CliError::config)?;
    let mut run = RunDir::create(&run_path(cfg, out, "condense"), "condense")?;
    run.write("config.toml", cfg.to_toml())?;
    let mut metrics = csv::Writer::from_path(run.output("metrics.csv")).map_err(CliError::runtime)?;
    let every = (cfg.condense.max_outer_iters / 20).max(1);
    let mut observer = |row: &MetricsRow| {
        if row.iter.is_multiple_of(every) {
            eprintln!(
                "iter {:>5}  l_f {:.4e}  l_d {:.4}  query acc {:.3}  lr {}",
                row.iter, row.l_f, row.l_d, row.query_acc, row.lr
            );
        }
        metrics
            .serialize(row)
            .map_err(|e| condensery::Error::Io(std::io::Error::other(e)))
    };
    let outcome = run_condense(&data.train, &arch, &cfg.condense, &mut observer).map_err(CliError::runtime)?;
    metrics.flush()?;
    save_synthetic(&outcome.synthetic, Some(&data.stats), run.output("synthetic.cnd")).map_err(CliError::runtime)?;
    run.record("seed", json!(cfg.seed));
    run.record("arch", json!(arch.label()));
    run.record("dataset", dataset_summary(cfg, &data));
    run.record("stats", serde_json::to_value(&outcome.stats).expect("stats serialize"));
    run.record("synthetic_checksum", json!(format!("{:016x}", outcome.synthetic.checksum())));
    run.commit()
}

pub fn eval(cfg: &RunConfig, synthetic: &Path, protocol: Option<&str>, label: &str, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let (synth, stats) = load_container(synthetic)?;
    let data = cfg.load_data(stats.as_ref())?;
    check_shape(&synth, &data)?;
    let mut eval_cfg = cfg.eval.clone();
    if let Some(p) = protocol {
        eval_cfg.protocol = p.to_string();
    }
    let protocol = eval_cfg.protocol()?;
    let shape = data.train.image_shape();
    let k = data.train.num_classes;
    let mut archs = vec![cfg.architecture(shape, k)];
    for name in &cfg.eval.cross_archs {
        archs.push(cfg.named_architecture(name, shape, k)?);
    }
    for a in &archs {
        a.validate().map_err(CliError::config)?;
    }
    let mut run = RunDir::create(&run_path(cfg, out, "eval"), "eval")?;
    run.write("config.toml", cfg.to_toml())?;
    let train_set = synth.to_dataset();
    let mut reports = Vec::new();
    for (i, arch) in archs.iter().enumerate() {
        let report = evaluate_protocol(label, &train_set, arch, &protocol, &data.test, cfg.seed).map_err(CliError::runtime)?;
        let name = if i == 0 { "eval.csv".to_string() } else { format!("eval-{}.csv", arch.label()) };
        report.write_csv(run.output(&name)).map_err(CliError::runtime)?;
        reports.push(report);
    }
    let table = summary_table(&reports);
    print!("{table}");
    run.write("summary.txt", &table)?;
    run.record("seed", json!(cfg.seed));
    run.record("synthetic", json!(synthetic.display().to_string()));
    run.record("synthetic_checksum", json!(format!("{:016x}", synth.checksum())));
    run.record("dataset", dataset_summary(cfg, &data));
    run.record("reports", serde_json::to_value(&reports).expect("reports serialize"));
    run.commit()
}

fn trace_protocol(cfg: &RunConfig) -> Result<EvalProtocol, CliError> {
    Ok(EvalProtocol {
        experiments: 1,
        nets_per_experiment: 1,
        epochs: cfg.coreset.trace_epochs,
        ..cfg.eval.protocol()?
    })
}

pub fn coreset(cfg: &RunConfig, method: Option<&str>, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let method: CoresetMethod = method.unwrap_or(&cfg.coreset.method).parse().map_err(CliError::config)?;
    let data = cfg.load_data(None)?;
    let ipc = cfg.condense.ipc;
    let arch = cfg.architecture(data.train.image_shape(), data.train.num_classes);
    arch.validate().map_err(CliError::config)?;
    let mut run = RunDir::create(&run_path(cfg, out, &format!("coreset-{method}")), "coreset")?;
    run.write("config.toml", cfg.to_toml())?;
    let train = &data.train;
    let selection = match method {
        CoresetMethod::Random => select_random(train, ipc, cfg.seed),
        CoresetMethod::Herding | CoresetMethod::KCenter => {
            let features = match cfg.coreset.embedding {
                EmbeddingKind::Pixels => pixel_features(train),
                EmbeddingKind::Features => {
                    let params = train_network(train, &arch, &trace_protocol(cfg)?, cfg.seed, |_, _| Ok(()))
                        .map_err(CliError::runtime)?;
                    tap_features(&params, train)
                }
            }
            .map_err(CliError::runtime)?;
            if method == CoresetMethod::Herding {
                select_herding(train, ipc, &features)
            } else {
                select_kcenter(train, ipc, &features)
            }
        }
        CoresetMethod::Forgetting => {
            let (_, trace) = record_training_trace(train, &arch, &trace_protocol(cfg)?, cfg.seed).map_err(CliError::runtime)?;
            select_forgetting(train, ipc, &trace)
        }
    }
    .map_err(|e| match e {
        condensery::Error::Input(_) => CliError::config(e),
        other => CliError::runtime(other),
    })?;
    selection.validate(train).map_err(CliError::runtime)?;
    selection.write_csv(run.output("selection.csv")).map_err(CliError::runtime)?;
    let set = selection.materialize(train).map_err(CliError::runtime)?;
    save_synthetic(&set, Some(&data.stats), run.output("synthetic.cnd")).map_err(CliError::runtime)?;
    run.record("seed", json!(cfg.seed));
    run.record("method", json!(method.name()));
    run.record("ipc", json!(ipc));
    run.record("dataset", dataset_summary(cfg, &data));
    run.record("synthetic_checksum", json!(format!("{:016x}", set.checksum())));
    run.commit()
}

pub fn export_projection(cfg: &RunConfig, synthetic: &Path, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let (synth, stats) = load_container(synthetic)?;
    let data = cfg.load_data(stats.as_ref())?;
    check_shape(&synth, &data)?;
    let arch = cfg.architecture(data.train.image_shape(), data.train.num_classes);
    arch.validate().map_err(CliError::config)?;
    let protocol = cfg.eval.protocol()?;
    let mut run = RunDir::create(&run_path(cfg, out, "projection"), "export-proj")?;
    run.write("config.toml", cfg.to_toml())?;
    // features of a network trained on the synthetic set, as in evaluation
    let params = train_network(&synth.to_dataset(), &arch, &protocol, derive_seed(cfg.seed, 0), |_, _| Ok(()))
        .map_err(CliError::runtime)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (rows, labels) = sample_per_class(&data.train.class_indices(), cfg.eval.projection_per_class, &mut rng);
    let real_images = data.train.images.gather_rows(&rows).map_err(CliError::runtime)?;
    let last = |images| -> Result<condensery::Tensor, CliError> {
        let mut pyr = embed(&params, images).map_err(CliError::runtime)?;
        Ok(pyr.taps.pop().expect("at least one tap"))
    };
    let real_feats = last(&real_images)?;
    let synth_feats = last(&synth.images)?;
    let written = export_projection_csv(
        FeatureRows {
            features: &real_feats,
            labels: &labels,
        },
        FeatureRows {
            features: &synth_feats,
            labels: synth.labels(),
        },
        run.output("projection.csv"),
    )
    .map_err(CliError::runtime)?;
    run.record("seed", json!(cfg.seed));
    run.record("rows", json!(written));
    run.commit()
}

pub fn gradcheck(seed: u64, inject: Option<&str>) -> Result<(), CliError> {
    if let Some(f) = inject {
        fault::inject(f.parse().map_err(CliError::config)?);
    }
    let report = run_suite(seed).map_err(CliError::runtime)?;
    println!("{:<24} {:>6}  {:>12}  {:>12}  status", "check", "coords", "max rel err", "max abs err");
    for c in &report.checks {
        println!(
            "{:<24} {:>6}  {:>12.3e}  {:>12.3e}  {}",
            c.name,
            c.coords_checked,
            c.max_rel_err,
            c.max_abs_err,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("worst relative error {:.3e} in {:.2}s", report.worst_rel_err(), report.seconds);
    let failures: Vec<String> = report
        .failures()
        .map(|c| {
            let m = c.mismatch.as_ref().expect("failed checks carry a mismatch");
            format!(
                "{}: input {} at {:?}: analytic {:.6e} vs numeric {:.6e}",
                c.name, m.input, m.coord, m.analytic, m.numeric
            )
        })
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(exit::FAILURE, format!("gradient check failed\n{}", failures.join("\n"))))
    }
}
