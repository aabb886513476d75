//! Command-line pipeline driver: `train`, `verify`, `metrics`, `embed`,
//! `plot`. Exit codes: 0 success, 1 verification/assertion failure, 2 input
//! error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use efflens::dataset::{load_mnist, Dataset};
use efflens::effweight::{batch_effective_weights, residuals};
use efflens::embedding::{tsne, TsneConfig};
use efflens::linalg::Scalar;
use efflens::metrics::{snapshot_metrics, trend_report, FlatSample, SnapshotMetrics};
use efflens::network::forward;
use efflens::parallel::configure_threads;
use efflens::plot::{parse_embedding_csv, render_scatter};
use efflens::runio::{
    list_snapshots, load_checkpoint, load_manifest, load_snapshot, sha256_file, snapshot_dir,
    write_embedding_csv, write_embedding_meta, write_events_csv, write_manifest,
    write_metrics_csv, AppConfig, DiskSink, EmbeddingMeta, RunManifest, VERSION,
};
use efflens::training::{accuracy, resolve_tracked, train, SnapshotRecord};

const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Parser)]
#[command(name = "efflens", version = VERSION, about = "Effective-weight training dynamics for bias-free ReLU MLPs")]
struct Cli {
    /// Worker threads (0 = all cores). 1 forces the fully deterministic
    /// single-threaded mode.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Numeric precision for model computation.
    #[arg(long, global = true, default_value = "f32", value_parser = ["f32", "f64"])]
    precision: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference model, writing snapshots and checkpoints.
    Train {
        /// JSON config file; missing fields take defaults, unknown keys are
        /// rejected.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding the four MNIST IDX files.
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Recompute a snapshot's effective weights from its checkpoint and
    /// check the linearization identity and the stored payload.
    Verify {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        snapshot: usize,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
    },
    /// Cluster statistics per snapshot plus the hypothesis trend report.
    Metrics {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// t-SNE projection of one snapshot's effective weights.
    Embed {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        snapshot: usize,
        /// Output directory (default: <run_dir>/embeddings/<snapshot>).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Render an embedding CSV as an SVG scatter plot.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "effective weight embedding")]
        title: String,
    },
}

/// Error carrying its process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn input_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::input(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads(cli.threads);
    let result = match cli.command {
        Command::Train {
            ref config,
            ref data_dir,
            ref out_dir,
        } => cmd_train(&cli, config.as_deref(), data_dir, out_dir),
        Command::Verify {
            ref run_dir,
            snapshot,
            ref data_dir,
        } => cmd_verify(&cli, run_dir, snapshot, data_dir),
        Command::Metrics { ref run_dir } => cmd_metrics(run_dir),
        Command::Embed {
            ref run_dir,
            snapshot,
            ref out_dir,
            seed,
            perplexity,
            iterations,
        } => cmd_embed(run_dir, snapshot, out_dir.as_deref(), seed, perplexity, iterations),
        Command::Plot {
            ref input,
            ref out,
            ref title,
        } => cmd_plot(input, out, title),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<AppConfig> {
    match path {
        None => Ok(AppConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::input(format!("config {}: {e}", p.display())))?;
            AppConfig::from_json(&text)
                .map_err(|e| CliError::input(format!("config {}: {e}", p.display())))
        }
    }
}

fn load_data(data_dir: &Path) -> CliResult<(Dataset, Dataset)> {
    for name in IDX_FILES {
        if !data_dir.join(name).is_file() {
            return Err(CliError::input(format!(
                "missing IDX file {}",
                data_dir.join(name).display()
            )));
        }
    }
    load_mnist(data_dir).map_err(input_err)
}

fn data_checksums(data_dir: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut sums = BTreeMap::new();
    for name in IDX_FILES {
        sums.insert(
            name.to_string(),
            sha256_file(&data_dir.join(name)).map_err(input_err)?,
        );
    }
    Ok(sums)
}

fn cmd_train(cli: &Cli, config: Option<&Path>, data_dir: &Path, out_dir: &Path) -> CliResult<()> {
    let app_config = load_config(config)?;
    app_config.train.validate().map_err(input_err)?;
    let (train_ds, test_ds) = load_data(data_dir)?;
    let subset = efflens::dataset::draw_tracked_subset(&test_ds, app_config.train.subset_seed)
        .map_err(input_err)?;

    fs::create_dir_all(out_dir).map_err(input_err)?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_vec_pretty(&app_config).expect("config serializes"),
    )
    .map_err(input_err)?;

    let mut sink = DiskSink::new(out_dir).map_err(input_err)?;
    let run = |sink: &mut DiskSink| -> CliResult<(Vec<efflens::training::TrainEvent>, f64)> {
        match cli.precision.as_str() {
            "f64" => {
                let out = train::<f64>(&app_config.train, &train_ds, &test_ds, &subset, sink)
                    .map_err(|e| CliError::check(e.to_string()))?;
                efflens::runio::save_checkpoint(&out_dir.join("checkpoints/final.bin"), &out.model)
                    .map_err(input_err)?;
                let acc = accuracy(&out.model, &test_ds).map_err(input_err)?;
                Ok((out.events, acc))
            }
            _ => {
                let out = train::<f32>(&app_config.train, &train_ds, &test_ds, &subset, sink)
                    .map_err(|e| CliError::check(e.to_string()))?;
                efflens::runio::save_checkpoint(&out_dir.join("checkpoints/final.bin"), &out.model)
                    .map_err(input_err)?;
                let acc = accuracy(&out.model, &test_ds).map_err(input_err)?;
                Ok((out.events, acc))
            }
        }
    };
    let (events, acc) = match run(&mut sink) {
        Ok(v) => v,
        Err(e) => {
            // leave a marker so partial runs are recognizable
            let _ = fs::write(out_dir.join("PARTIAL"), e.message.as_bytes());
            return Err(e);
        }
    };

    write_events_csv(&out_dir.join("events.csv"), &events).map_err(input_err)?;
    let manifest = RunManifest {
        version: VERSION.to_string(),
        config: app_config,
        precision: match cli.precision.as_str() {
            "f64" => efflens::linalg::Precision::F64,
            _ => efflens::linalg::Precision::F32,
        },
        dataset_checksums: data_checksums(data_dir)?,
        snapshots: sink.index.clone(),
    };
    write_manifest(out_dir, &manifest).map_err(input_err)?;
    println!(
        "run complete: {} snapshots, test accuracy {:.4}",
        manifest.snapshots.len(),
        acc
    );
    Ok(())
}

struct VerifyOutcome {
    max_identity_rel: f64,
    max_payload_rel: f64,
    worst_payload_sample: usize,
}

fn verify_snapshot<S: Scalar>(
    run_dir: &Path,
    record: &SnapshotRecord,
    test_ds: &Dataset,
    snapshot: usize,
) -> CliResult<VerifyOutcome> {
    let ckpt_path = run_dir.join("checkpoints").join(format!("{snapshot}.bin"));
    let model = load_checkpoint::<S>(&ckpt_path).map_err(input_err)?;
    let subset = efflens::dataset::TrackedSubset {
        sample_refs: record.sample_refs.clone(),
        seed: 0,
    };
    let tracked = resolve_tracked::<S>(test_ds, &subset);
    let effs = batch_effective_weights(&model, &tracked).map_err(input_err)?;

    let (d_out, d_in) = record.matrix_shape;
    let mut max_identity_rel: f64 = 0.0;
    let mut max_payload_rel: f64 = 0.0;
    let mut worst_payload_sample = 0;
    for (i, eff) in effs.iter().enumerate() {
        let fwd = forward(&model, &tracked[i].0).map_err(input_err)?;
        let report = residuals(&eff.matrix, &tracked[i].0, &fwd.backbone_output);
        max_identity_rel = max_identity_rel.max(report.max_rel);

        let stored = &record.payload[i * d_out * d_in..(i + 1) * d_out * d_in];
        let scale = stored
            .iter()
            .map(|v| (*v as f64).abs())
            .fold(0.0, f64::max)
            .max(1e-12);
        let diff = eff
            .matrix
            .data()
            .iter()
            .zip(stored)
            .map(|(&a, &b)| (a.as_f64() - b as f64).abs())
            .fold(0.0, f64::max)
            / scale;
        if diff > max_payload_rel {
            max_payload_rel = diff;
            worst_payload_sample = record.sample_refs[i];
        }
    }
    Ok(VerifyOutcome {
        max_identity_rel,
        max_payload_rel,
        worst_payload_sample,
    })
}

fn cmd_verify(cli: &Cli, run_dir: &Path, snapshot: usize, data_dir: &Path) -> CliResult<()> {
    let dir = snapshot_dir(run_dir, snapshot).map_err(input_err)?;
    let record = load_snapshot(&dir).map_err(input_err)?;
    let (_, test_ds) = load_data(data_dir)?;
    if let Ok(manifest) = load_manifest(run_dir) {
        let sums = data_checksums(data_dir)?;
        if sums != manifest.dataset_checksums {
            return Err(CliError::input(
                "dataset checksums do not match the run manifest",
            ));
        }
    }
    let (identity_tol, outcome) = match cli.precision.as_str() {
        "f64" => (
            1e-10,
            verify_snapshot::<f64>(run_dir, &record, &test_ds, snapshot)?,
        ),
        _ => (
            1e-4,
            verify_snapshot::<f32>(run_dir, &record, &test_ds, snapshot)?,
        ),
    };
    let payload_tol = 1e-4;
    println!(
        "snapshot {snapshot}: max identity residual {:.3e} (tolerance {identity_tol:.1e}), \
         max payload residual {:.3e} (tolerance {payload_tol:.1e})",
        outcome.max_identity_rel, outcome.max_payload_rel
    );
    if outcome.max_identity_rel > identity_tol {
        return Err(CliError::check(format!(
            "linearization identity residual {:.3e} exceeds {identity_tol:.1e}",
            outcome.max_identity_rel
        )));
    }
    if outcome.max_payload_rel > payload_tol {
        return Err(CliError::check(format!(
            "stored payload mismatch {:.3e} at sample_ref {} exceeds {payload_tol:.1e}",
            outcome.max_payload_rel, outcome.worst_payload_sample
        )));
    }
    Ok(())
}

fn record_to_flats(record: &SnapshotRecord) -> Vec<FlatSample> {
    let (d_out, d_in) = record.matrix_shape;
    let stride = d_out * d_in;
    record
        .sample_refs
        .iter()
        .enumerate()
        .map(|(i, &sample_ref)| FlatSample {
            values: record.payload[i * stride..(i + 1) * stride]
                .iter()
                .map(|&v| v as f64)
                .collect(),
            sample_ref,
            label: record.labels[i],
        })
        .collect()
}

fn cmd_metrics(run_dir: &Path) -> CliResult<()> {
    let ids = list_snapshots(run_dir).map_err(input_err)?;
    if ids.len() < 2 {
        return Err(CliError::input(format!(
            "need at least 2 snapshots, found {}",
            ids.len()
        )));
    }
    let mut rows: Vec<(usize, usize, SnapshotMetrics)> = Vec::new();
    let mut series = Vec::new();
    for id in &ids {
        let record = load_snapshot(&snapshot_dir(run_dir, *id).map_err(input_err)?)
            .map_err(input_err)?;
        let flats = record_to_flats(&record);
        let m = snapshot_metrics(*id, &flats).map_err(|e| CliError::check(e.to_string()))?;
        println!(
            "snapshot {id} (epoch {}, iteration {}): separation_ratio {:.4}, silhouette {:.4}, \
             mean cohesion {:.4}, dead paths {}",
            record.epoch,
            record.iteration,
            m.separation_ratio,
            m.silhouette,
            m.per_class_cohesion.iter().sum::<f64>() / 10.0,
            m.dead_path_count
        );
        rows.push((record.epoch, record.iteration, m.clone()));
        series.push(m);
    }
    write_metrics_csv(&run_dir.join("metrics.csv"), &rows).map_err(input_err)?;
    let report = trend_report(&series).map_err(|e| CliError::check(e.to_string()))?;
    for c in 0..10 {
        println!(
            "H1 class {c}: cohesion {:.4} -> {:.4} (delta {:+.4}) {}",
            report.cohesion[c].first,
            report.cohesion[c].last,
            report.cohesion[c].delta,
            if report.h1_per_class[c] { "holds" } else { "fails" }
        );
    }
    println!(
        "H1 (intra-class convergence): holds for {}/10 classes",
        report.h1_classes_holding
    );
    println!(
        "H2 (inter-class divergence): separation_ratio {:.4} -> {:.4}, silhouette {:.4} -> {:.4}: {}",
        report.separation_ratio.first,
        report.separation_ratio.last,
        report.silhouette.first,
        report.silhouette.last,
        if report.h2_holds { "holds" } else { "fails" }
    );
    Ok(())
}

fn cmd_embed(
    run_dir: &Path,
    snapshot: usize,
    out_dir: Option<&Path>,
    seed: Option<u64>,
    perplexity: Option<f64>,
    iterations: Option<usize>,
) -> CliResult<()> {
    let dir = snapshot_dir(run_dir, snapshot).map_err(input_err)?;
    let record = load_snapshot(&dir).map_err(input_err)?;
    let mut cfg: TsneConfig = load_manifest(run_dir)
        .map(|m| m.config.tsne)
        .unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = perplexity {
        cfg.perplexity = p;
    }
    if let Some(n) = iterations {
        cfg.n_iterations = n;
    }
    cfg.validate(record.sample_refs.len()).map_err(input_err)?;

    let flats = record_to_flats(&record);
    let vectors: Vec<Vec<f64>> = flats.iter().map(|f| f.values.clone()).collect();
    let labels: Vec<u8> = flats.iter().map(|f| f.label).collect();
    let embedding = tsne(&vectors, &labels, &cfg).map_err(|e| CliError::check(e.to_string()))?;

    let out = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("embeddings").join(snapshot.to_string()));
    fs::create_dir_all(&out).map_err(input_err)?;
    write_embedding_csv(&out.join("embedding.csv"), &embedding, &record.sample_refs)
        .map_err(input_err)?;
    write_embedding_meta(
        &out.join("embedding.meta.json"),
        &EmbeddingMeta {
            tsne: cfg,
            snapshot_id: snapshot,
            final_kl: *embedding.kl_trace.last().unwrap_or(&f64::NAN),
        },
    )
    .map_err(input_err)?;
    println!(
        "embedded snapshot {snapshot}: {} points, final KL {:.4}",
        embedding.points.len(),
        embedding.kl_trace.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

fn cmd_plot(input: &Path, out: &Path, title: &str) -> CliResult<()> {
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::input(format!("{}: {e}", input.display())))?;
    let points = parse_embedding_csv(&text).map_err(input_err)?;
    let plot_points: Vec<efflens::plot::PlotPoint> = points;
    let svg = render_scatter(&plot_points, title).map_err(input_err)?;
    fs::write(out, svg).map_err(input_err)?;
    println!("wrote {}", out.display());
    Ok(())
}
