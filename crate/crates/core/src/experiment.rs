//! End-to-end orchestration: one TOML config document drives ingest,
//! encode, train, evaluate, sweep, and analyze, all writing into a shared
//! output directory. Reruns with identical config and seed overwrite every
//! artifact with identical bytes (wall-clock logging excepted).
//!
//! Artifact layout under `out`:
//!   catalog.json  sequences.json  split.json  popularity.json  stats.json
//!   embeddings.bin  log.jsonl  checkpoint.bin  eval.json
//!   geometry.json  kde.json  sweep.csv  sweep_runs/<gamma>/

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::analysis::{geometry_report, project_2d_kde_export, GeometryReport, KdeExport,
    DEFAULT_PAIR_BUDGET};
use crate::backbone::{BackboneConfig, BackboneKind};
use crate::data::{
    build_sequences, compute_popularity, dataset_stats, leave_one_out_split, load_interactions_jsonl,
    load_items_jsonl, load_movielens, DatasetSplit, DatasetStats, ItemCatalog, PopularityTable,
    UserSequence,
};
use crate::encoder::{encode_corpus, read_cache, write_cache, EmbeddingCache, EncoderKind,
    TextEncoderSpec};
use crate::error::{Result, UnitError};
use crate::eval::{evaluate_leave_one_out, EvalConfig, EvalReport};
use crate::synth::{generate, SynthConfig};
use crate::train::{
    fit, load_checkpoint, save_checkpoint, write_log_jsonl, TrainConfig, TrainData,
    TrainLogRecord, TrainState,
};
use crate::uniformity::UniformityConfig;

pub const SWEEP_DEFAULT_GAMMAS: [f64; 7] = [0.005, 0.01, 0.03, 0.05, 0.1, 0.5, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Jsonl,
    Movielens,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// jsonl: interactions file; movielens: ratings file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interactions: Option<PathBuf>,
    /// jsonl: item-text file; movielens: movies file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub items: Option<PathBuf>,
    pub min_seq_len: usize,
    pub popularity_floor: f64,
    pub synth: SynthConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DatasetSource::Synthetic,
            interactions: None,
            items: None,
            min_seq_len: 3,
            popularity_floor: 0.01,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderChoice {
    Hash,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: EncoderChoice,
    pub dim: usize,
    pub hash_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { kind: EncoderChoice::Hash, dim: 768, hash_seed: 0, cache_path: None }
    }
}

impl EncoderSection {
    pub fn spec(&self) -> Result<TextEncoderSpec> {
        match self.kind {
            EncoderChoice::Hash => Ok(TextEncoderSpec::hash(self.dim, self.hash_seed)),
            EncoderChoice::Cache => {
                let path = self.cache_path.clone().ok_or_else(|| {
                    UnitError::Config(
                        "encoder.kind = \"cache\" requires encoder.cache_path".into(),
                    )
                })?;
                Ok(TextEncoderSpec {
                    kind: EncoderKind::ExternalCache,
                    output_dim: self.dim,
                    hash_seed: self.hash_seed,
                    cache_path: Some(path),
                })
            }
        }
    }
}

/// Backbone hyperparameters plus the projection stack. Field-for-field
/// duplication of [`BackboneConfig`] keeps unknown-key rejection intact
/// (serde cannot flatten under deny_unknown_fields).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: BackboneKind,
    pub d: usize,
    pub max_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub mask_rate: f64,
    /// Projection MLP widths, input-side first; the last entry must equal d.
    pub layer_dims: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        ModelSection {
            kind: b.kind,
            d: b.d,
            max_len: b.max_len,
            n_blocks: b.n_blocks,
            n_heads: b.n_heads,
            dropout: b.dropout,
            mask_rate: b.mask_rate,
            layer_dims: vec![256, b.d],
        }
    }
}

impl ModelSection {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            kind: self.kind,
            d: self.d,
            max_len: self.max_len,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            dropout: self.dropout,
            mask_rate: self.mask_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub uniformity: UniformityConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out: PathBuf::from("unit-run"),
            dataset: DatasetSection::default(),
            encoder: EncoderSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            uniformity: UniformityConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| UnitError::Config(format!("config parse failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UnitError::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| UnitError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.source {
            DatasetSource::Synthetic => self.dataset.synth.validate()?,
            DatasetSource::Jsonl | DatasetSource::Movielens => {
                if self.dataset.interactions.is_none() || self.dataset.items.is_none() {
                    return Err(UnitError::Config(
                        "dataset.interactions and dataset.items are required unless \
                         dataset.source = \"synthetic\""
                            .into(),
                    ));
                }
            }
        }
        if self.dataset.min_seq_len < 2 {
            return Err(UnitError::Config("dataset.min_seq_len must be >= 2".into()));
        }
        if !(self.dataset.popularity_floor > 0.0) {
            return Err(UnitError::Config("dataset.popularity_floor must be > 0".into()));
        }
        if self.encoder.dim < 8 {
            return Err(UnitError::Config(format!(
                "encoder.dim must be >= 8, got {}",
                self.encoder.dim
            )));
        }
        self.model.backbone().validate()?;
        if self.model.layer_dims.last() != Some(&self.model.d) {
            return Err(UnitError::Config(format!(
                "model.layer_dims must end at model.d: {:?} vs d={}",
                self.model.layer_dims, self.model.d
            )));
        }
        self.train.validate()?;
        self.uniformity.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec(value)
        .map_err(|e| UnitError::Data(format!("{}: serialization failed: {e}", path.display())))?;
    std::fs::write(path, bytes).map_err(|e| UnitError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| UnitError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| UnitError::format(path, format!("invalid JSON artifact: {e}")))
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(UnitError::Config(format!(
            "missing {}; run `{produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct IngestArtifacts {
    pub catalog: ItemCatalog,
    pub sequences: Vec<UserSequence>,
    pub split: DatasetSplit,
    pub popularity: PopularityTable,
    pub stats: DatasetStats,
}

/// Resolve the configured source to interactions + texts, build the split,
/// and write the five ingest artifacts.
pub fn run_ingest(cfg: &ExperimentConfig) -> Result<IngestArtifacts> {
    let (interactions, texts) = match cfg.dataset.source {
        DatasetSource::Synthetic => generate(&cfg.dataset.synth)?,
        DatasetSource::Jsonl => {
            let i = cfg.dataset.interactions.as_ref().expect("validated");
            let m = cfg.dataset.items.as_ref().expect("validated");
            (load_interactions_jsonl(i)?, load_items_jsonl(m)?)
        }
        DatasetSource::Movielens => {
            let r = cfg.dataset.interactions.as_ref().expect("validated");
            let m = cfg.dataset.items.as_ref().expect("validated");
            load_movielens(r, m)?
        }
    };
    let (catalog, sequences) = build_sequences(&interactions, &texts, cfg.dataset.min_seq_len)?;
    let split = leave_one_out_split(&sequences)?;
    let trains = split.users.iter().map(|u| u.train.as_slice());
    let popularity = compute_popularity(trains, catalog.len(), cfg.dataset.popularity_floor)?;
    let stats = dataset_stats(&sequences, &catalog)?;

    std::fs::create_dir_all(&cfg.out).map_err(|e| UnitError::io(&cfg.out, e))?;
    write_json(&catalog, &cfg.out.join("catalog.json"))?;
    write_json(&sequences, &cfg.out.join("sequences.json"))?;
    write_json(&split, &cfg.out.join("split.json"))?;
    write_json(&popularity, &cfg.out.join("popularity.json"))?;
    write_json(&stats, &cfg.out.join("stats.json"))?;
    Ok(IngestArtifacts { catalog, sequences, split, popularity, stats })
}

/// Encode the ingested catalog into the frozen embedding cache.
pub fn run_encode(cfg: &ExperimentConfig) -> Result<EmbeddingCache> {
    let catalog_path = cfg.out.join("catalog.json");
    require(&catalog_path, "ingest")?;
    let catalog: ItemCatalog = read_json(&catalog_path)?;
    let cache = encode_corpus(&catalog, &cfg.encoder.spec()?)?;
    write_cache(&cache, &cfg.out.join("embeddings.bin"))?;
    Ok(cache)
}

pub fn load_train_data(cfg: &ExperimentConfig) -> Result<TrainData> {
    let split_path = cfg.out.join("split.json");
    let pop_path = cfg.out.join("popularity.json");
    let emb_path = cfg.out.join("embeddings.bin");
    require(&split_path, "ingest")?;
    require(&pop_path, "ingest")?;
    require(&emb_path, "encode")?;
    let data = TrainData {
        split: read_json(&split_path)?,
        popularity: read_json(&pop_path)?,
        cache: read_cache(&emb_path)?,
    };
    data.validate()?;
    Ok(data)
}

/// Train from scratch (or resume from `checkpoint.bin` when `resume`), then
/// write `log.jsonl` and the final checkpoint.
pub fn run_train(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<TrainLogRecord>> {
    let data = load_train_data(cfg)?;
    let ckpt_path = cfg.out.join("checkpoint.bin");
    let mut state = if resume {
        require(&ckpt_path, "train")?;
        load_checkpoint(&ckpt_path)?
    } else {
        TrainState::new(
            cfg.train.seed,
            data.cache.dim,
            &cfg.model.layer_dims,
            cfg.model.backbone(),
        )?
    };
    let records = fit(&mut state, &data, &cfg.train, &cfg.uniformity, |_| Ok(()))?;
    write_log_jsonl(&records, &cfg.out.join("log.jsonl"))?;
    save_checkpoint(&state, &ckpt_path)?;
    Ok(records)
}

/// Evaluate the saved checkpoint and write `eval.json`.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let data = load_train_data(cfg)?;
    let ckpt_path = cfg.out.join("checkpoint.bin");
    require(&ckpt_path, "train")?;
    let state = load_checkpoint(&ckpt_path)?;
    let report = evaluate_leave_one_out(&state, &data, &cfg.eval, cfg.train.seed)?;
    write_json(&report, &cfg.out.join("eval.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
    pub uniformity_metric: Option<f64>,
    pub status: String,
}

/// One full training run per γ, same seed and data, artifacts under
/// `sweep_runs/g<γ>/`. A failed run records its error and the sweep moves on.
pub fn run_sweep(cfg: &ExperimentConfig, gammas: &[f64]) -> Result<Vec<SweepRow>> {
    if gammas.is_empty() {
        return Err(UnitError::Usage("sweep needs at least one gamma".into()));
    }
    let data = load_train_data(cfg)?;
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let run_dir = cfg.out.join("sweep_runs").join(format!("g{gamma}"));
        let row = match sweep_one(cfg, &data, gamma, &run_dir) {
            Ok((hr, ndcg, metric)) => SweepRow {
                gamma,
                hr: Some(hr),
                ndcg: Some(ndcg),
                uniformity_metric: Some(metric),
                status: "ok".into(),
            },
            Err(e) => SweepRow {
                gamma,
                hr: None,
                ndcg: None,
                uniformity_metric: None,
                status: format!("error: {}", e.to_string().replace(',', ";")),
            },
        };
        rows.push(row);
    }
    write_sweep_csv(&rows, &cfg.out.join("sweep.csv"))?;
    Ok(rows)
}

fn sweep_one(
    cfg: &ExperimentConfig,
    data: &TrainData,
    gamma: f64,
    run_dir: &Path,
) -> Result<(f64, f64, f64)> {
    if gamma < 0.0 {
        return Err(UnitError::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| UnitError::io(run_dir, e))?;
    let uc = UniformityConfig { gamma, ..cfg.uniformity.clone() };
    let mut state = TrainState::new(
        cfg.train.seed,
        data.cache.dim,
        &cfg.model.layer_dims,
        cfg.model.backbone(),
    )?;
    let records = fit(&mut state, data, &cfg.train, &uc, |_| Ok(()))?;
    write_log_jsonl(&records, &run_dir.join("log.jsonl"))?;
    save_checkpoint(&state, &run_dir.join("checkpoint.bin"))?;
    let last = records.last().expect("epochs >= 1");
    Ok((last.hr_at_20, last.ndcg_at_20, last.uniformity_metric))
}

fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut text = String::from("gamma,hr,ndcg,uniformity_metric,status\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.gamma,
            cell(r.hr),
            cell(r.ndcg),
            cell(r.uniformity_metric),
            r.status
        ));
    }
    std::fs::write(path, text).map_err(|e| UnitError::io(path, e))
}

/// Geometry diagnostics over the checkpoint's item table: `geometry.json`
/// plus the KDE export `kde.json`.
pub fn run_analyze(
    cfg: &ExperimentConfig,
    pop_fraction: f64,
    kde_grid: usize,
    kde_bandwidth: f64,
) -> Result<(GeometryReport, KdeExport)> {
    let ckpt_path = cfg.out.join("checkpoint.bin");
    let seq_path = cfg.out.join("sequences.json");
    let pop_path = cfg.out.join("popularity.json");
    require(&ckpt_path, "train")?;
    require(&seq_path, "ingest")?;
    require(&pop_path, "ingest")?;
    let emb_path = cfg.out.join("embeddings.bin");
    require(&emb_path, "encode")?;

    let state = load_checkpoint(&ckpt_path)?;
    let cache = read_cache(&emb_path)?;
    let sequences: Vec<UserSequence> = read_json(&seq_path)?;
    let popularity: PopularityTable = read_json(&pop_path)?;
    let table = state.materialize_all(&cache)?;

    let seq_indices: Vec<Vec<usize>> = sequences.into_iter().map(|s| s.items).collect();
    let report = geometry_report(
        &table.view(),
        &seq_indices,
        &popularity.counts,
        pop_fraction,
        DEFAULT_PAIR_BUDGET,
        cfg.train.seed,
    )?;
    write_json(&report, &cfg.out.join("geometry.json"))?;
    let kde =
        project_2d_kde_export(&table.view(), kde_grid, kde_bandwidth, &cfg.out.join("kde.json"))?;
    Ok((report, kde))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_cfg(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.out = out.to_path_buf();
        cfg.dataset.synth = SynthConfig { users: 30, items: 24, topics: 4, ..Default::default() };
        cfg.encoder.dim = 32;
        cfg.model = ModelSection {
            d: 8,
            max_len: 8,
            n_blocks: 1,
            n_heads: 2,
            layer_dims: vec![16, 8],
            ..Default::default()
        };
        cfg.train = TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 0.01,
            seed: 5,
            log_wall_time: false,
            ..Default::default()
        };
        cfg.uniformity.measure_sample = 24;
        cfg
    }

    #[test]
    fn toml_round_trip_and_unknown_key_rejection() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);

        let err = ExperimentConfig::from_toml_str("[train]\nlearning_rte = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rte"));
        assert!(ExperimentConfig::from_toml_str("[naughty]\nx = 1\n").is_err());

        // Defaults parse from an empty document.
        let empty = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(empty, ExperimentConfig::default());
    }

    #[test]
    fn validation_catches_cross_field_breaks() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.layer_dims = vec![256, 32];
        assert!(cfg.validate().unwrap_err().to_string().contains("model.d"));

        let mut cfg = ExperimentConfig::default();
        cfg.dataset.source = DatasetSource::Jsonl;
        assert!(cfg.validate().unwrap_err().to_string().contains("dataset.interactions"));

        let mut cfg = ExperimentConfig::default();
        cfg.encoder.dim = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pipeline_end_to_end_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_cfg(dir.path());

        let artifacts = run_ingest(&cfg).unwrap();
        assert_eq!(artifacts.catalog.len(), 24);
        assert_eq!(artifacts.split.users.len(), 30);
        for name in ["catalog.json", "sequences.json", "split.json", "popularity.json", "stats.json"]
        {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }

        let cache = run_encode(&cfg).unwrap();
        assert_eq!(cache.n_items(), 24);
        assert_eq!(cache.dim, 32);

        let records = run_train(&cfg, false).unwrap();
        assert_eq!(records.len(), 2);
        let report = run_evaluate(&cfg).unwrap();
        assert!(report.hr >= 0.0 && report.hr <= 1.0);

        let (geom, kde) = run_analyze(&cfg, 0.4, 16, 0.1).unwrap();
        assert!(geom.ratio > 0.0);
        assert_eq!(kde.grid.len(), 16);

        // Second identical run: every artifact byte-identical.
        let read_all = || -> Vec<(String, Vec<u8>)> {
            let mut names: Vec<String> = std::fs::read_dir(dir.path())
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .filter(|n| !n.starts_with("sweep"))
                .collect();
            names.sort();
            names
                .iter()
                .filter(|n| dir.path().join(n.as_str()).is_file())
                .map(|n| (n.clone(), std::fs::read(dir.path().join(n.as_str())).unwrap()))
                .collect()
        };
        let first = read_all();
        run_ingest(&cfg).unwrap();
        run_encode(&cfg).unwrap();
        run_train(&cfg, false).unwrap();
        run_evaluate(&cfg).unwrap();
        run_analyze(&cfg, 0.4, 16, 0.1).unwrap();
        let second = read_all();
        assert_eq!(first.len(), second.len());
        for ((na, a), (nb, b)) in first.iter().zip(&second) {
            assert_eq!(na, nb);
            assert_eq!(a, b, "{na} changed bytes between identical runs");
        }
    }

    #[test]
    fn resume_continues_from_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_cfg(dir.path());
        run_ingest(&cfg).unwrap();
        run_encode(&cfg).unwrap();

        cfg.train.epochs = 1;
        run_train(&cfg, false).unwrap();
        cfg.train.epochs = 2;
        let resumed = run_train(&cfg, true).unwrap();
        assert_eq!(resumed.len(), 1);
        assert_eq!(resumed[0].epoch, 2);

        let unbroken_dir = tempfile::tempdir().unwrap();
        let mut cfg2 = desk_cfg(unbroken_dir.path());
        cfg2.train.epochs = 2;
        run_ingest(&cfg2).unwrap();
        run_encode(&cfg2).unwrap();
        let full = run_train(&cfg2, false).unwrap();
        assert_eq!(&full[1], &resumed[0]);
        let a = std::fs::read(dir.path().join("checkpoint.bin")).unwrap();
        let b = std::fs::read(unbroken_dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(a, b, "resumed checkpoint differs from unbroken run");
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_cfg(dir.path());
        cfg.train.epochs = 1;
        run_ingest(&cfg).unwrap();
        run_encode(&cfg).unwrap();

        let rows = run_sweep(&cfg, &[0.0, -1.0, 0.03]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].status, "ok");
        assert!(rows[1].status.starts_with("error:"));
        assert!(rows[1].hr.is_none());
        assert_eq!(rows[2].status, "ok");

        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "gamma,hr,ndcg,uniformity_metric,status");
        assert!(lines[2].starts_with("-1,,,,error:"));
        assert!(dir.path().join("sweep_runs/g0/log.jsonl").exists());
        assert!(dir.path().join("sweep_runs/g0.03/checkpoint.bin").exists());
    }

    #[test]
    fn missing_artifacts_name_the_producing_step() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_cfg(dir.path());
        let err = run_train(&cfg, false).unwrap_err().to_string();
        assert!(err.contains("ingest"), "{err}");
        run_ingest(&cfg).unwrap();
        let err = run_train(&cfg, false).unwrap_err().to_string();
        assert!(err.contains("encode"), "{err}");
        let err = run_evaluate(&cfg).unwrap_err();
        assert!(err.is_usage());
    }
}
