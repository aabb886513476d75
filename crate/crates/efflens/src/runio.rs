//! Run-directory persistence.
//!
//! Layout produced by `efflens train`:
//!
//! ```text
//! run/
//!   config.json          full AppConfig (training + t-SNE, all seeds)
//!   manifest.json        RunManifest: config, dataset checksums, snapshot index
//!   events.csv           epoch,iteration,loss,kind
//!   checkpoints/<k>.bin  model at snapshot k (and final.bin)
//!   snapshots/<k>/snapshot.json   ids, shape, sample_refs, labels
//!   snapshots/<k>/payload.f32     little-endian f32, sample-major, row-major
//! ```
//!
//! Checkpoint binary format: a little-endian u32 header length, a JSON
//! header `{dims, seed, precision}`, then the parameters as little-endian
//! IEEE-754 f32 — matrices row-major, backbone layers in order, head last
//! (weight then bias).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{Embedding2D, TsneConfig};
use crate::linalg::{Precision, Scalar};
use crate::metrics::SnapshotMetrics;
use crate::network::{flatten_params, init_model, MlpModel};
use crate::training::{EventKind, SnapshotRecord, SnapshotSink, TrainConfig, TrainEvent};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum RunIoError {
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("snapshot {0} not found")]
    MissingSnapshot(usize),
}

impl RunIoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        Self::Malformed {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// Complete run configuration: training plus embedding defaults. Unknown
/// keys are rejected so typos fail loudly.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub tsne: TsneConfig,
}

impl AppConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotIndexEntry {
    pub snapshot_id: usize,
    pub epoch: usize,
    pub iteration: usize,
    pub path: String,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: AppConfig,
    pub precision: Precision,
    /// SHA-256 of each input IDX file, keyed by file name.
    pub dataset_checksums: std::collections::BTreeMap<String, String>,
    pub snapshots: Vec<SnapshotIndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dims: Vec<usize>,
    seed: u64,
    precision: Precision,
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &MlpModel<S>) -> Result<(), RunIoError> {
    let header = serde_json::to_vec(&CheckpointHeader {
        dims: model.dims.clone(),
        seed: model.seed,
        precision: S::PRECISION,
    })
    .expect("header serializes");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in flatten_params(model) {
        bytes.extend_from_slice(&p.as_f32().to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| RunIoError::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<MlpModel<S>, RunIoError> {
    let bytes = fs::read(path).map_err(|e| RunIoError::io(path, e))?;
    if bytes.len() < 4 {
        return Err(RunIoError::malformed(path, "missing header length"));
    }
    let header_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + header_len {
        return Err(RunIoError::malformed(path, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[4..4 + header_len])
        .map_err(|e| RunIoError::malformed(path, format!("bad header json: {e}")))?;
    let mut model: MlpModel<S> = init_model(&header.dims, header.seed)
        .map_err(|e| RunIoError::malformed(path, format!("bad dims: {e}")))?;
    let n_params = flatten_params(&model).len();
    let payload = &bytes[4 + header_len..];
    if payload.len() != n_params * 4 {
        return Err(RunIoError::malformed(
            path,
            format!(
                "expected {} parameter bytes, found {}",
                n_params * 4,
                payload.len()
            ),
        ));
    }
    let params: Vec<S> = payload
        .chunks_exact(4)
        .map(|c| S::from_f32(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    crate::network::unflatten_params(&mut model, &params);
    Ok(model)
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    snapshot_id: usize,
    epoch: usize,
    iteration: usize,
    matrix_shape: (usize, usize),
    sample_refs: Vec<usize>,
    labels: Vec<u8>,
}

pub fn save_snapshot(dir: &Path, record: &SnapshotRecord) -> Result<(), RunIoError> {
    fs::create_dir_all(dir).map_err(|e| RunIoError::io(dir, e))?;
    let header = SnapshotHeader {
        snapshot_id: record.snapshot_id,
        epoch: record.epoch,
        iteration: record.iteration,
        matrix_shape: record.matrix_shape,
        sample_refs: record.sample_refs.clone(),
        labels: record.labels.clone(),
    };
    let json_path = dir.join("snapshot.json");
    fs::write(
        &json_path,
        serde_json::to_vec_pretty(&header).expect("header serializes"),
    )
    .map_err(|e| RunIoError::io(&json_path, e))?;
    let payload_path = dir.join("payload.f32");
    let file = fs::File::create(&payload_path).map_err(|e| RunIoError::io(&payload_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for v in &record.payload {
        writer
            .write_all(&v.to_le_bytes())
            .map_err(|e| RunIoError::io(&payload_path, e))?;
    }
    writer.flush().map_err(|e| RunIoError::io(&payload_path, e))
}

pub fn load_snapshot(dir: &Path) -> Result<SnapshotRecord, RunIoError> {
    let json_path = dir.join("snapshot.json");
    let text = fs::read_to_string(&json_path).map_err(|e| RunIoError::io(&json_path, e))?;
    let header: SnapshotHeader = serde_json::from_str(&text)
        .map_err(|e| RunIoError::malformed(&json_path, e.to_string()))?;
    let payload_path = dir.join("payload.f32");
    let file = fs::File::open(&payload_path).map_err(|e| RunIoError::io(&payload_path, e))?;
    let mut bytes = Vec::new();
    std::io::BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| RunIoError::io(&payload_path, e))?;
    let expected =
        header.sample_refs.len() * header.matrix_shape.0 * header.matrix_shape.1 * 4;
    if bytes.len() != expected {
        return Err(RunIoError::malformed(
            &payload_path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let payload: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(SnapshotRecord {
        snapshot_id: header.snapshot_id,
        epoch: header.epoch,
        iteration: header.iteration,
        matrix_shape: header.matrix_shape,
        sample_refs: header.sample_refs,
        labels: header.labels,
        payload,
    })
}

/// Snapshot sink backed by a run directory: writes `snapshots/<k>/` and
/// `checkpoints/<k>.bin` for each pause and collects the manifest index.
pub struct DiskSink {
    run_dir: PathBuf,
    pub index: Vec<SnapshotIndexEntry>,
    pub error: Option<RunIoError>,
}

impl DiskSink {
    pub fn new(run_dir: &Path) -> Result<Self, RunIoError> {
        fs::create_dir_all(run_dir.join("snapshots"))
            .map_err(|e| RunIoError::io(run_dir, e))?;
        fs::create_dir_all(run_dir.join("checkpoints"))
            .map_err(|e| RunIoError::io(run_dir, e))?;
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
            index: Vec::new(),
            error: None,
        })
    }
}

impl<S: Scalar> SnapshotSink<S> for DiskSink {
    fn emit(&mut self, record: &SnapshotRecord, model: &MlpModel<S>) -> std::io::Result<()> {
        let dir = self
            .run_dir
            .join("snapshots")
            .join(record.snapshot_id.to_string());
        let result = save_snapshot(&dir, record).and_then(|()| {
            save_checkpoint(
                &self
                    .run_dir
                    .join("checkpoints")
                    .join(format!("{}.bin", record.snapshot_id)),
                model,
            )
        });
        if let Err(e) = result {
            let msg = e.to_string();
            self.error = Some(e);
            return Err(std::io::Error::other(msg));
        }
        self.index.push(SnapshotIndexEntry {
            snapshot_id: record.snapshot_id,
            epoch: record.epoch,
            iteration: record.iteration,
            path: format!("snapshots/{}", record.snapshot_id),
            payload_bytes: record.payload.len() as u64 * 4,
        });
        Ok(())
    }
}

pub fn write_events_csv(path: &Path, events: &[TrainEvent]) -> Result<(), RunIoError> {
    let mut out = String::from("epoch,iteration,loss,kind\n");
    for e in events {
        let kind = match e.kind {
            EventKind::Snapshot => "snapshot",
            EventKind::EpochEnd => "epoch_end",
            EventKind::Final => "final",
        };
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            e.epoch, e.iteration, e.train_loss, kind
        ));
    }
    fs::write(path, out).map_err(|e| RunIoError::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String, RunIoError> {
    let bytes = fs::read(path).map_err(|e| RunIoError::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn write_manifest(run_dir: &Path, manifest: &RunManifest) -> Result<(), RunIoError> {
    let path = run_dir.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_vec_pretty(manifest).expect("manifest serializes"),
    )
    .map_err(|e| RunIoError::io(&path, e))
}

pub fn load_manifest(run_dir: &Path) -> Result<RunManifest, RunIoError> {
    let path = run_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| RunIoError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| RunIoError::malformed(&path, e.to_string()))
}

/// Look up a snapshot directory, failing with `MissingSnapshot` when absent.
pub fn snapshot_dir(run_dir: &Path, snapshot_id: usize) -> Result<PathBuf, RunIoError> {
    let dir = run_dir.join("snapshots").join(snapshot_id.to_string());
    if dir.join("snapshot.json").is_file() {
        Ok(dir)
    } else {
        Err(RunIoError::MissingSnapshot(snapshot_id))
    }
}

/// Ids of all snapshots present in a run directory, sorted.
pub fn list_snapshots(run_dir: &Path) -> Result<Vec<usize>, RunIoError> {
    let dir = run_dir.join("snapshots");
    let entries = fs::read_dir(&dir).map_err(|e| RunIoError::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| RunIoError::io(&dir, e))?;
        if let Ok(id) = entry.file_name().to_string_lossy().parse::<usize>() {
            if entry.path().join("snapshot.json").is_file() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

pub fn write_metrics_csv(
    path: &Path,
    rows: &[(usize, usize, SnapshotMetrics)],
) -> Result<(), RunIoError> {
    let mut out = String::from("snapshot_id,epoch,iteration");
    for c in 0..10 {
        out.push_str(&format!(",cohesion_{c}"));
    }
    out.push_str(",inter_class_similarity,separation_ratio,silhouette,dead_path_count\n");
    for (epoch, iteration, m) in rows {
        out.push_str(&format!("{},{},{}", m.snapshot_id, epoch, iteration));
        for c in 0..10 {
            out.push_str(&format!(",{:.9}", m.per_class_cohesion[c]));
        }
        out.push_str(&format!(
            ",{:.9},{:.9},{:.9},{}\n",
            m.inter_class_similarity, m.separation_ratio, m.silhouette, m.dead_path_count
        ));
    }
    fs::write(path, out).map_err(|e| RunIoError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub tsne: TsneConfig,
    pub snapshot_id: usize,
    pub final_kl: f64,
}

pub fn write_embedding_csv(
    path: &Path,
    embedding: &Embedding2D,
    sample_refs: &[usize],
) -> Result<(), RunIoError> {
    let mut out = String::from("sample_ref,label,x,y\n");
    for (i, p) in embedding.points.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            sample_refs[i], embedding.labels[i], p[0], p[1]
        ));
    }
    fs::write(path, out).map_err(|e| RunIoError::io(path, e))
}

pub fn write_embedding_meta(path: &Path, meta: &EmbeddingMeta) -> Result<(), RunIoError> {
    fs::write(
        path,
        serde_json::to_vec_pretty(meta).expect("meta serializes"),
    )
    .map_err(|e| RunIoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model: MlpModel<f32> = init_model(&[8, 6, 4], 13).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let loaded: MlpModel<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);
        // f64 promotion keeps the exact f32 values
        let promoted: MlpModel<f64> = load_checkpoint(&path).unwrap();
        for (a, b) in model.backbone[0].data().iter().zip(promoted.backbone[0].data()) {
            assert_eq!(*a as f64, *b);
        }
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model: MlpModel<f32> = init_model(&[8, 6, 4], 13).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(RunIoError::Malformed { .. })
        ));
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let record = SnapshotRecord {
            snapshot_id: 3,
            epoch: 2,
            iteration: 469,
            matrix_shape: (2, 3),
            sample_refs: vec![5, 9],
            labels: vec![1, 7],
            payload: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -1.0, -2.0, -3.0, 0.5, 0.25, 0.125],
        };
        let snap_dir = dir.path().join("snapshots").join("3");
        save_snapshot(&snap_dir, &record).unwrap();
        let loaded = load_snapshot(&snap_dir).unwrap();
        assert_eq!(loaded.snapshot_id, 3);
        assert_eq!(loaded.matrix_shape, (2, 3));
        assert_eq!(loaded.payload, record.payload);
        assert_eq!(loaded.sample_refs, record.sample_refs);

        assert_eq!(list_snapshots(dir.path()).unwrap(), vec![3]);
        assert!(matches!(
            snapshot_dir(dir.path(), 99),
            Err(RunIoError::MissingSnapshot(99))
        ));
    }

    #[test]
    fn app_config_rejects_unknown_keys() {
        assert!(AppConfig::from_json("{\"train\":{},\"tsne\":{}}").is_ok());
        assert!(AppConfig::from_json("{\"train\":{\"epochs\":3}}").is_ok());
        assert!(AppConfig::from_json("{\"trian\":{}}").is_err());
        assert!(AppConfig::from_json("{\"train\":{\"epochz\":3}}").is_err());
        assert!(AppConfig::from_json("{\"tsne\":{\"perplexity\":10.0,\"bogus\":1}}").is_err());
    }

    #[test]
    fn embedding_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embedding.csv");
        let emb = Embedding2D {
            points: vec![[1.0, 2.0], [3.0, -4.0]],
            labels: vec![0, 9],
            kl_trace: vec![1.0],
        };
        write_embedding_csv(&path, &emb, &[10, 20]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "sample_ref,label,x,y\n10,0,1.000000,2.000000\n20,9,3.000000,-4.000000\n"
        );
        let parsed = crate::plot::parse_embedding_csv(&text).unwrap();
        assert_eq!(parsed.len(), 2);
    }
}
