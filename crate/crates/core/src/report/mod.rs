//! End-to-end analyses from a run configuration: alignment (RQ1),
//! intra-similarity (RQ2), importance deltas (RQ3) and concept removal (RQ4),
//! written as CSV tables plus appendix-style summaries and optional figures.

pub mod appendix;
mod backend;
mod config;
pub mod figures;
pub mod toy_project;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{self, CatalogError, ConceptCatalog, ConceptSpec, ImageSet, SetKey, Source};
use crate::cav::{self, Cav, CavError, EmbeddingTable, Pooling};
use crate::extract::{ActivationSet, AttributionMap, ExtractError, GradientSet, ToyCnn};
use crate::importance::{self, ImportanceError, Method, SetScore};
use crate::stats::{self, BootstrapSpec, MeanStd, StatsError};

pub use appendix::{build_appendix_table, format_value, AppendixCell, AppendixTable};
pub use backend::{key_slug, Backend, LiveBackend, StoreBackend};
pub use config::{
    AdapterConfig, BackendKind, ClipConfig, EditorConfig, GenerationConfig, IgSection, IntraConfig,
    ModelConfig, ProviderConfig, RunConfig, REFERENCE_MODELS,
};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Cav(#[from] CavError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Gen(#[from] crate::genclient::GenError),
    #[error("writing {path}: {message}")]
    Output { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Seed for one analysis cell, derived from the run seed and the cell key.
pub fn cell_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

// ---- table rows ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub concept: String,
    pub class: String,
    pub provider: String,
    pub model: String,
    pub layer: String,
    pub pooling: Pooling,
    pub replicate: usize,
    pub seed: u64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummaryRow {
    pub concept: String,
    pub class: String,
    pub provider: String,
    pub model: String,
    pub layer: String,
    pub pooling: Pooling,
    pub replicates: usize,
    pub seed: u64,
    pub rho_mean: f64,
    pub rho_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAlignmentRow {
    pub concept: String,
    pub provider: String,
    pub clip_alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub concept: String,
    pub source: String,
    pub model: String,
    pub layer: String,
    pub pooling: Pooling,
    pub u: usize,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipIntraRow {
    pub concept: String,
    pub source: String,
    pub clip_intra_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub concept: String,
    pub class: String,
    pub model: String,
    pub layer: String,
    pub method: Method,
    pub cav_source: String,
    pub inputs: importance::Inputs,
    /// Empty for CAVs built from the full set.
    pub replicate: Option<usize>,
    pub seed: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageRow {
    pub concept: String,
    pub model: String,
    pub layer: String,
    pub method: Method,
    pub cav_source: String,
    pub image: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub concept: String,
    pub class: String,
    pub model: String,
    pub layer: String,
    pub method: Method,
    pub provider: String,
    pub s_real: f64,
    pub s_gen: f64,
    pub s_gen_std: f64,
    pub delta: f64,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRow {
    pub concept: String,
    pub class: String,
    pub model: String,
    pub layer: String,
    pub method: Method,
    pub cav_source: String,
    pub s: f64,
    pub s_rm: f64,
    pub delta_rm: f64,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRow {
    pub concept: String,
    pub class: String,
    pub model: String,
    pub p_original: f64,
    pub p_removed: f64,
    pub delta_p: f64,
}

/// One statistical test, summary or fit. Failed tests keep their row with
/// `error` filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub analysis: String,
    pub method: String,
    pub group: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub detail: String,
    pub error: String,
}

impl StatRow {
    fn test(
        analysis: &str,
        method: &str,
        group: &str,
        r: Result<stats::TestResult, StatsError>,
    ) -> Self {
        match r {
            Ok(t) => Self {
                analysis: analysis.into(),
                method: method.into(),
                group: group.into(),
                statistic: t.statistic,
                p_value: t.p_value,
                n1: t.n1,
                n2: t.n2,
                detail: t.method,
                error: String::new(),
            },
            Err(e) => Self::failed(analysis, method, group, &e.to_string()),
        }
    }

    fn failed(analysis: &str, method: &str, group: &str, error: &str) -> Self {
        Self {
            analysis: analysis.into(),
            method: method.into(),
            group: group.into(),
            statistic: f64::NAN,
            p_value: f64::NAN,
            n1: 0,
            n2: 0,
            detail: String::new(),
            error: error.into(),
        }
    }

    fn summary(analysis: &str, method: &str, group: &str, values: &[f64]) -> Self {
        match MeanStd::of(values) {
            Some(ms) => Self {
                analysis: analysis.into(),
                method: method.into(),
                group: group.into(),
                statistic: ms.mean,
                p_value: f64::NAN,
                n1: ms.count,
                n2: 0,
                detail: format!("mean={} std={}", ms.mean, ms.std),
                error: String::new(),
            },
            None => Self::failed(analysis, method, group, "no values"),
        }
    }
}

/// Grouped mean, std and count over analysis cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub method: String,
    pub x: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRow {
    pub method: String,
    pub l: f64,
    pub k: f64,
    pub x0: f64,
    pub rmse: f64,
    pub n: usize,
    pub converged: bool,
    pub degenerate: bool,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub stage: String,
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rq1Output {
    pub alignment: Vec<AlignmentRow>,
    pub summary: Vec<AlignmentSummaryRow>,
    pub by_provider: Vec<GroupRow>,
    pub clip: Vec<ClipAlignmentRow>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rq2Output {
    pub curves: Vec<CurveRow>,
    pub by_source: Vec<GroupRow>,
    pub clip_intra: Vec<ClipIntraRow>,
    pub clip_by_source: Vec<GroupRow>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rq3Output {
    pub importances: Vec<ImportanceRow>,
    pub per_image: Vec<PerImageRow>,
    pub deltas: Vec<DeltaRow>,
    pub by_provider: Vec<GroupRow>,
    pub stats: Vec<StatRow>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rq4Output {
    pub removal: Vec<RemovalRow>,
    pub probabilities: Vec<ProbabilityRow>,
    pub by_source: Vec<GroupRow>,
    pub stats: Vec<StatRow>,
    pub logistic: Vec<LogisticRow>,
    pub failures: Vec<CellFailure>,
}

// ---- image production --------------------------------------------------------------

/// Generate images for every (provider, concept) pair that passes the filters.
/// Failed jobs are returned, not raised, so one bad provider does not stop the rest.
pub fn generate_images(
    config: &RunConfig,
    catalog: &ConceptCatalog,
    provider: Option<&str>,
    concept: Option<&str>,
    count: Option<usize>,
    resume: bool,
) -> Result<(Vec<ImageSet>, Vec<CellFailure>), ReportError> {
    let options = config.generation.job_options(resume);
    let mut sets = Vec::new();
    let mut failures = Vec::new();
    let providers: Vec<&ProviderConfig> = config
        .providers
        .iter()
        .filter(|p| provider.is_none_or(|id| p.id == id))
        .collect();
    if providers.is_empty() {
        return Err(ReportError::Config(format!(
            "no provider matches `{}`",
            provider.unwrap_or("*")
        )));
    }
    for p in providers {
        let generator = p.generator()?;
        let jobs = catalog
            .concepts
            .iter()
            .filter(|c| concept.is_none_or(|name| c.name == name))
            .map(|c| {
                Ok(crate::genclient::GenerationJob {
                    concept: c.clone(),
                    provider: p.id.clone(),
                    count: count.unwrap_or(config.generation.count),
                    seed: cell_seed(config.seed, &["generate", &p.id, &c.name]),
                    output_dir: catalog
                        .set_directory(&SetKey::concept(&c.name, gen_source(&p.id)))?,
                })
            })
            .collect::<Result<Vec<_>, ReportError>>()?;
        let results = crate::genclient::run_generation_jobs(
            &jobs,
            generator,
            &options,
            config.generation.workers,
        );
        for (job, r) in jobs.iter().zip(results) {
            match r {
                Ok(set) => sets.push(set),
                Err(e) => failures.push(CellFailure {
                    stage: "generate".into(),
                    cell: format!("{}/{}", job.concept.name, job.provider),
                    error: e.to_string(),
                }),
            }
        }
    }
    Ok((sets, failures))
}

/// Remove each concept from the images of its relevant class with the
/// configured editor.
pub fn remove_concepts(
    config: &RunConfig,
    catalog: &ConceptCatalog,
    concept: Option<&str>,
    resume: bool,
) -> Result<(Vec<ImageSet>, Vec<CellFailure>), ReportError> {
    let editor_cfg = config
        .editor
        .as_ref()
        .ok_or_else(|| ReportError::Config("no [editor] configured".into()))?;
    let editor = editor_cfg.editor()?;
    let options = config.generation.job_options(resume);
    let mut sets = Vec::new();
    let mut failures = Vec::new();
    for c in catalog
        .concepts
        .iter()
        .filter(|c| concept.is_none_or(|name| c.name == name))
    {
        let res = (|| -> Result<ImageSet, ReportError> {
            let job = crate::genclient::RemovalJob {
                concept: c.clone(),
                editor: editor_cfg.id.clone(),
                class_images: catalog::load_image_set(catalog, &SetKey::class(&c.relevant_class))?,
                output_dir: catalog.set_directory(&SetKey::removed(&c.relevant_class, &c.name))?,
                seed: cell_seed(config.seed, &["remove", &c.name]),
            };
            Ok(crate::genclient::remove_concept_from_images(
                &job,
                editor.as_ref(),
                &options,
            )?)
        })();
        match res {
            Ok(set) => sets.push(set),
            Err(e) => failures.push(CellFailure {
                stage: "remove".into(),
                cell: c.name.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok((sets, failures))
}

// ---- run context -------------------------------------------------------------------

type ActsMemo = Mutex<HashMap<(String, String, SetKey), Arc<ActivationSet>>>;
type GradMemo = Mutex<HashMap<(String, String, SetKey, usize), Arc<GradientSet>>>;
type IgMemo = Mutex<HashMap<(String, String, SetKey, usize), Arc<Vec<AttributionMap>>>>;

/// A loaded configuration: catalog, model backends and in-memory memos for
/// sets shared between cells (negatives, class images).
pub struct Run {
    pub config: RunConfig,
    pub catalog: ConceptCatalog,
    backends: Vec<(ModelConfig, Box<dyn Backend>)>,
    acts: ActsMemo,
    grads: GradMemo,
    igs: IgMemo,
}

fn csv_err(path: &Path, e: impl ToString) -> ReportError {
    ReportError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Write rows as CSV with a header derived from the row type.
pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| csv_err(path, e))
}

fn group_rows<I>(rows: I) -> Vec<GroupRow>
where
    I: IntoIterator<Item = ((String, String, String), f64)>,
{
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for (k, v) in rows {
        groups.entry(k).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|((group, method, x), vals)| {
            let ms = MeanStd::of(&vals).expect("non-empty");
            GroupRow {
                group,
                method,
                x,
                mean: ms.mean,
                std: ms.std,
                count: ms.count,
            }
        })
        .collect()
}

fn gen_source(provider: &str) -> Source {
    Source::Generated(provider.to_string())
}

impl Run {
    pub fn open(config: RunConfig) -> Result<Self, ReportError> {
        let catalog = catalog::load_catalog(&config.catalog)?;
        let cache_dir = config.output_dir.join("cache").join("activations");
        let mut backends: Vec<(ModelConfig, Box<dyn Backend>)> = Vec::new();
        for m in &config.models {
            let backend: Box<dyn Backend> = match m.backend {
                BackendKind::Toy => {
                    let weights = m.weights.as_ref().expect("validated");
                    let model = ToyCnn::load(weights)?;
                    let fingerprint = model.weights_hash();
                    Box::new(LiveBackend::new(
                        Arc::new(model),
                        fingerprint,
                        Some(cache_dir.clone()),
                    ))
                }
                BackendKind::Store => Box::new(StoreBackend::new(
                    m.id.clone(),
                    m.root.clone().expect("validated"),
                    m.class_count.expect("validated"),
                )),
            };
            if backend.model_id() != m.id {
                return Err(ReportError::Config(format!(
                    "model `{}` reports id `{}`",
                    m.id,
                    backend.model_id()
                )));
            }
            backends.push((m.clone(), backend));
        }
        Ok(Self {
            config,
            catalog,
            backends,
            acts: Mutex::new(HashMap::new()),
            grads: Mutex::new(HashMap::new()),
            igs: Mutex::new(HashMap::new()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        Self::open(RunConfig::load(path)?)
    }

    fn image_set(&self, key: &SetKey) -> Result<ImageSet, ReportError> {
        Ok(catalog::load_image_set(&self.catalog, key)?)
    }

    fn concepts(&self) -> Vec<&ConceptSpec> {
        let mut v: Vec<&ConceptSpec> = self.catalog.concepts.iter().collect();
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }

    /// `(model index, layer)` pairs in configuration order.
    fn model_layers(&self) -> Vec<(usize, String)> {
        self.backends
            .iter()
            .enumerate()
            .flat_map(|(i, (m, _))| m.layers.iter().map(move |l| (i, l.clone())))
            .collect()
    }

    fn activations(
        &self,
        model: usize,
        layer: &str,
        key: &SetKey,
        shared: bool,
    ) -> Result<Arc<ActivationSet>, ReportError> {
        let backend = &self.backends[model].1;
        // A directory pool is the same set for every concept.
        let key = match (&key.subject, &self.catalog.negatives) {
            (catalog::Subject::Negatives(_), catalog::NegativePool::Directory(_)) => SetKey {
                subject: catalog::Subject::Negatives(None),
                source: Source::Real,
            },
            _ => key.clone(),
        };
        let key = &key;
        let memo_key = (
            backend.model_id().to_string(),
            layer.to_string(),
            key.clone(),
        );
        if shared {
            if let Some(a) = self.acts.lock().expect("memo").get(&memo_key) {
                return Ok(a.clone());
            }
        }
        let acts = Arc::new(backend.activations(layer, &self.image_set(key)?)?);
        if shared {
            self.acts
                .lock()
                .expect("memo")
                .insert(memo_key, acts.clone());
        }
        Ok(acts)
    }

    fn gradients(
        &self,
        model: usize,
        acts: &ActivationSet,
        class: usize,
    ) -> Result<Arc<GradientSet>, ReportError> {
        let backend = &self.backends[model].1;
        let key = (
            backend.model_id().to_string(),
            acts.key.layer.clone(),
            acts.key.set.clone(),
            class,
        );
        if let Some(g) = self.grads.lock().expect("memo").get(&key) {
            return Ok(g.clone());
        }
        let g = Arc::new(backend.gradients(acts, class, self.config.ig.target)?);
        self.grads.lock().expect("memo").insert(key, g.clone());
        Ok(g)
    }

    fn attributions(
        &self,
        model: usize,
        acts: &ActivationSet,
        class: usize,
    ) -> Result<Arc<Vec<AttributionMap>>, ReportError> {
        let backend = &self.backends[model].1;
        let key = (
            backend.model_id().to_string(),
            acts.key.layer.clone(),
            acts.key.set.clone(),
            class,
        );
        if let Some(a) = self.igs.lock().expect("memo").get(&key) {
            return Ok(a.clone());
        }
        let a = Arc::new(backend.attributions(acts, class, &self.config.ig_config())?);
        self.igs.lock().expect("memo").insert(key, a.clone());
        Ok(a)
    }

    fn clear_memos(&self) {
        self.acts.lock().expect("memo").clear();
        self.grads.lock().expect("memo").clear();
        self.igs.lock().expect("memo").clear();
    }

    fn class_index(&self, model: usize, class: &str) -> Result<usize, ReportError> {
        Ok(self
            .catalog
            .class_index(class, self.backends[model].1.class_count())?)
    }

    fn bootstrap_spec(&self, seed: u64) -> BootstrapSpec {
        BootstrapSpec {
            seed: seed ^ self.config.bootstrap.seed,
            ..self.config.bootstrap.clone()
        }
    }

    /// Score one CAV on a class set with the given method.
    fn score(
        &self,
        model: usize,
        acts: &ActivationSet,
        class: usize,
        cav: &Cav,
        method: Method,
    ) -> Result<SetScore, ReportError> {
        match method {
            Method::Tcav => {
                let grads = self.gradients(model, acts, class)?;
                let per_image = grads
                    .tensors
                    .outer_iter()
                    .map(|g| {
                        if cav::pool_map(g, cav.pooling).dot(&cav.vector) > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(SetScore {
                    score: importance::tcav_score(cav, &grads)?,
                    per_image,
                })
            }
            Method::VisualTcav => {
                importance::pooled_weights(cav)?;
                let attrs = self.attributions(model, acts, class)?;
                Ok(importance::visual_tcav_set_score(cav, &attrs, acts)?)
            }
        }
    }

    /// Fingerprint of every input a stage reads: directory listings with file
    /// sizes, generation manifests, and model fingerprints.
    fn input_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut dirs: Vec<PathBuf> = Vec::new();
        for c in &self.catalog.concepts {
            dirs.push(c.real_image_dir.clone());
            for p in &self.config.providers {
                if let Ok(d) = self
                    .catalog
                    .set_directory(&SetKey::concept(&c.name, gen_source(&p.id)))
                {
                    dirs.push(d);
                }
            }
            if let Ok(d) = self
                .catalog
                .set_directory(&SetKey::removed(&c.relevant_class, &c.name))
            {
                dirs.push(d);
            }
        }
        for class in self.catalog.classes.values() {
            dirs.push(class.dir.clone());
        }
        if let catalog::NegativePool::Directory(d) = &self.catalog.negatives {
            dirs.push(d.clone());
        }
        dirs.sort();
        dirs.dedup();
        for d in dirs {
            h.update(d.display().to_string().as_bytes());
            let mut entries: Vec<(String, u64)> = std::fs::read_dir(&d)
                .map(|rd| {
                    rd.filter_map(|e| e.ok())
                        .filter_map(|e| {
                            Some((
                                e.file_name().to_string_lossy().into_owned(),
                                e.metadata().ok()?.len(),
                            ))
                        })
                        .collect()
                })
                .unwrap_or_default();
            entries.sort();
            for (name, len) in entries {
                h.update(name.as_bytes());
                h.update(len.to_le_bytes());
            }
            if let Ok(m) = std::fs::read(d.join(crate::genclient::MANIFEST_FILE)) {
                h.update(m);
            }
        }
        for (_, b) in &self.backends {
            h.update(b.fingerprint().as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn stage_key(&self, stage: &str) -> String {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.input_fingerprint().as_bytes());
        hex::encode(h.finalize())
    }

    /// Load the stage output from the cache or compute and store it.
    fn cached<T, F>(&self, stage: &str, compute: F) -> Result<T, ReportError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, ReportError>,
    {
        let key = self.stage_key(stage);
        let path = self
            .config
            .output_dir
            .join("cache")
            .join("stages")
            .join(format!("{stage}-{}.json", &key[..16]));
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(v) = serde_json::from_slice(&bytes) {
                log::info!("{stage}: reusing cached results {}", path.display());
                return Ok(v);
            }
        }
        let value = compute()?;
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(
            &tmp,
            serde_json::to_vec(&value).map_err(|e| csv_err(&path, e))?,
        )?;
        std::fs::rename(tmp, &path)?;
        Ok(value)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn model_position(&self, model: &str) -> Result<usize, ReportError> {
        self.backends
            .iter()
            .position(|(m, _)| m.id == model)
            .ok_or_else(|| ReportError::Config(format!("unknown model `{model}`")))
    }

    /// Activations of one set at one layer, written as an activation store
    /// under `output_dir/activations`. Returns the store stem.
    pub fn extract(&self, model: &str, layer: &str, key: &SetKey) -> Result<PathBuf, ReportError> {
        let m = self.model_position(model)?;
        if !self.backends[m].0.layers.iter().any(|l| l == layer) {
            return Err(ReportError::Config(format!(
                "model `{model}` has no configured layer `{layer}`"
            )));
        }
        let acts = self.activations(m, layer, key, false)?;
        let set = self.image_set(key)?;
        let prep = match &self.backends[m].0.backend {
            BackendKind::Toy => {
                let weights = self.backends[m].0.weights.as_ref().expect("validated");
                crate::extract::preprocessing_hash(&ToyCnn::load(weights)?, &set.paths)?
            }
            BackendKind::Store => String::from("external"),
        };
        let stem = self
            .out("activations")
            .join(model)
            .join(layer)
            .join(key_slug(key));
        std::fs::create_dir_all(stem.parent().expect("has parent"))?;
        crate::extract::write_activation_store(&stem, &acts, &prep)?;
        Ok(stem)
    }

    /// DoM CAV of a concept source against its negatives, written as JSON
    /// under `output_dir/cavs`.
    pub fn cav(
        &self,
        model: &str,
        layer: &str,
        concept: &str,
        source: &Source,
        pooling: Pooling,
    ) -> Result<(Cav, PathBuf), ReportError> {
        let m = self.model_position(model)?;
        let pos = self.activations(m, layer, &SetKey::concept(concept, source.clone()), false)?;
        let neg = self.activations(m, layer, &SetKey::negatives_for(concept), true)?;
        let v = cav::compute_cav_dom(&pos, &neg, pooling)?;
        let slug: String = format!("{concept}-{source}-{pooling}")
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let path = self
            .out("cavs")
            .join(model)
            .join(layer)
            .join(format!("{slug}.json"));
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        std::fs::write(
            &path,
            serde_json::to_vec_pretty(&v).map_err(|e| csv_err(&path, e))?,
        )?;
        Ok((v, path))
    }

    // ---- RQ1 -----------------------------------------------------------------------

    pub fn run_rq1(&self) -> Result<Rq1Output, ReportError> {
        let out = self.cached("rq1", || self.compute_rq1())?;
        write_table(&self.out("rq1_alignment.csv"), &out.alignment)?;
        write_table(&self.out("rq1_alignment_summary.csv"), &out.summary)?;
        write_table(&self.out("rq1_by_provider.csv"), &out.by_provider)?;
        write_table(&self.out("rq1_clip_alignment.csv"), &out.clip)?;
        write_table(&self.out("rq1_failures.csv"), &out.failures)?;
        Ok(out)
    }

    fn compute_rq1(&self) -> Result<Rq1Output, ReportError> {
        let mut out = Rq1Output::default();
        let concepts = self.concepts();
        for (m, layer) in self.model_layers() {
            let model_id = self.backends[m].0.id.clone();
            #[allow(clippy::type_complexity)]
            let cells: Vec<
                Result<
                    (
                        Vec<AlignmentRow>,
                        Vec<AlignmentSummaryRow>,
                        Vec<CellFailure>,
                    ),
                    CellFailure,
                >,
            > = concepts
                .par_iter()
                .map(|c| {
                    self.rq1_cell(m, &layer, c).map_err(|e| CellFailure {
                        stage: "rq1".into(),
                        cell: format!("{}/{model_id}/{layer}", c.name),
                        error: e.to_string(),
                    })
                })
                .collect();
            for cell in cells {
                match cell {
                    Ok((rows, summary, failures)) => {
                        out.alignment.extend(rows);
                        out.summary.extend(summary);
                        out.failures.extend(failures);
                    }
                    Err(f) => out.failures.push(f),
                }
            }
            self.clear_memos();
        }
        out.by_provider = group_rows(out.summary.iter().map(|r| {
            (
                (r.provider.clone(), r.pooling.to_string(), String::new()),
                r.rho_mean,
            )
        }));
        if let Some(clip) = &self.config.clip {
            let table = EmbeddingTable::from_jsonl(&clip.embeddings)?;
            for c in &concepts {
                for p in &self.config.providers {
                    let res = (|| -> Result<f64, ReportError> {
                        let gen = self.image_set(&SetKey::concept(&c.name, gen_source(&p.id)))?;
                        let real = self.image_set(&SetKey::concept(&c.name, Source::Real))?;
                        Ok(cav::clip_alignment(&gen, &real, &table)?)
                    })();
                    match res {
                        Ok(v) => out.clip.push(ClipAlignmentRow {
                            concept: c.name.clone(),
                            provider: p.id.clone(),
                            clip_alignment: v,
                        }),
                        Err(e) => out.failures.push(CellFailure {
                            stage: "rq1-clip".into(),
                            cell: format!("{}/{}", c.name, p.id),
                            error: e.to_string(),
                        }),
                    }
                }
            }
            out.by_provider.extend(group_rows(out.clip.iter().map(|r| {
                (
                    (r.provider.clone(), "clip".to_string(), String::new()),
                    r.clip_alignment,
                )
            })));
        }
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn rq1_cell(
        &self,
        m: usize,
        layer: &str,
        c: &ConceptSpec,
    ) -> Result<
        (
            Vec<AlignmentRow>,
            Vec<AlignmentSummaryRow>,
            Vec<CellFailure>,
        ),
        ReportError,
    > {
        let model_id = &self.backends[m].0.id;
        let real = self.activations(m, layer, &SetKey::concept(&c.name, Source::Real), false)?;
        let neg = self.activations(m, layer, &SetKey::negatives_for(&c.name), true)?;
        let reals = self
            .config
            .poolings
            .iter()
            .map(|&pooling| cav::compute_cav_dom(&real, &neg, pooling))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rows = Vec::new();
        let mut summary = Vec::new();
        let mut failures = Vec::new();
        for p in &self.config.providers {
            let res = (|| -> Result<(Vec<AlignmentRow>, Vec<AlignmentSummaryRow>), ReportError> {
                let mut rows = Vec::new();
                let mut summary = Vec::new();
                let gen = self.activations(
                    m,
                    layer,
                    &SetKey::concept(&c.name, gen_source(&p.id)),
                    false,
                )?;
                let seed = cell_seed(self.config.seed, &["rq1", &c.name, &p.id, model_id, layer]);
                let indices = stats::bootstrap_indices(gen.len(), &self.bootstrap_spec(seed))?;
                for (&pooling, v_real) in self.config.poolings.iter().zip(&reals) {
                    let mut rhos = Vec::with_capacity(indices.len());
                    for (r, idx) in indices.iter().enumerate() {
                        let v_gen = cav::compute_cav_dom(&gen.select(idx), &neg, pooling)?;
                        let rho = cav::cosine_similarity(&v_gen, v_real)?;
                        rhos.push(rho);
                        rows.push(AlignmentRow {
                            concept: c.name.clone(),
                            class: c.relevant_class.clone(),
                            provider: p.id.clone(),
                            model: model_id.clone(),
                            layer: layer.to_string(),
                            pooling,
                            replicate: r,
                            seed,
                            rho,
                        });
                    }
                    let ms = MeanStd::of(&rhos).expect("replicates >= 1");
                    summary.push(AlignmentSummaryRow {
                        concept: c.name.clone(),
                        class: c.relevant_class.clone(),
                        provider: p.id.clone(),
                        model: model_id.clone(),
                        layer: layer.to_string(),
                        pooling,
                        replicates: ms.count,
                        seed,
                        rho_mean: ms.mean,
                        rho_std: ms.std,
                    });
                }
                Ok((rows, summary))
            })();
            match res {
                Ok((r, s)) => {
                    rows.extend(r);
                    summary.extend(s);
                }
                Err(e) => failures.push(CellFailure {
                    stage: "rq1".into(),
                    cell: format!("{}/{}/{model_id}/{layer}", c.name, p.id),
                    error: e.to_string(),
                }),
            }
        }
        Ok((rows, summary, failures))
    }

    // ---- RQ2 -----------------------------------------------------------------------

    pub fn run_rq2(&self) -> Result<Rq2Output, ReportError> {
        let out = self.cached("rq2", || self.compute_rq2())?;
        write_table(&self.out("rq2_curves.csv"), &out.curves)?;
        write_table(&self.out("rq2_by_source.csv"), &out.by_source)?;
        write_table(&self.out("rq2_clip_intra.csv"), &out.clip_intra)?;
        write_table(&self.out("rq2_clip_by_source.csv"), &out.clip_by_source)?;
        write_table(&self.out("rq2_failures.csv"), &out.failures)?;
        Ok(out)
    }

    fn sources(&self) -> Vec<Source> {
        std::iter::once(Source::Real)
            .chain(self.config.providers.iter().map(|p| gen_source(&p.id)))
            .collect()
    }

    fn compute_rq2(&self) -> Result<Rq2Output, ReportError> {
        let mut out = Rq2Output::default();
        let concepts = self.concepts();
        let sources = self.sources();
        for (m, layer) in self.model_layers() {
            let model_id = self.backends[m].0.id.clone();
            let jobs: Vec<(&ConceptSpec, &Source)> = concepts
                .iter()
                .flat_map(|c| sources.iter().map(move |s| (*c, s)))
                .collect();
            let results: Vec<Result<Vec<CurveRow>, CellFailure>> = jobs
                .par_iter()
                .map(|(c, s)| {
                    self.rq2_cell(m, &layer, c, s).map_err(|e| CellFailure {
                        stage: "rq2".into(),
                        cell: format!("{}/{s}/{model_id}/{layer}", c.name),
                        error: e.to_string(),
                    })
                })
                .collect();
            for r in results {
                match r {
                    Ok(rows) => out.curves.extend(rows),
                    Err(f) => out.failures.push(f),
                }
            }
            self.clear_memos();
        }
        out.by_source = group_rows(out.curves.iter().map(|r| {
            (
                (r.source.clone(), r.pooling.to_string(), r.u.to_string()),
                r.mean,
            )
        }));
        // Numeric order of u within each group.
        out.by_source.sort_by(|a, b| {
            (&a.group, &a.method, a.x.parse::<usize>().unwrap_or(0)).cmp(&(
                &b.group,
                &b.method,
                b.x.parse::<usize>().unwrap_or(0),
            ))
        });
        if let Some(clip) = &self.config.clip {
            let table = EmbeddingTable::from_jsonl(&clip.embeddings)?;
            for c in &concepts {
                for s in &sources {
                    let res = self
                        .image_set(&SetKey::concept(&c.name, s.clone()))
                        .and_then(|set| Ok(cav::clip_intra_similarity(&set, &table)?));
                    match res {
                        Ok(v) => out.clip_intra.push(ClipIntraRow {
                            concept: c.name.clone(),
                            source: s.to_string(),
                            clip_intra_similarity: v,
                        }),
                        Err(e) => out.failures.push(CellFailure {
                            stage: "rq2-clip".into(),
                            cell: format!("{}/{s}", c.name),
                            error: e.to_string(),
                        }),
                    }
                }
            }
            out.clip_by_source = group_rows(out.clip_intra.iter().map(|r| {
                (
                    (r.source.clone(), "clip".to_string(), String::new()),
                    r.clip_intra_similarity,
                )
            }));
        }
        Ok(out)
    }

    fn rq2_cell(
        &self,
        m: usize,
        layer: &str,
        c: &ConceptSpec,
        source: &Source,
    ) -> Result<Vec<CurveRow>, ReportError> {
        let model_id = &self.backends[m].0.id;
        let acts = self.activations(m, layer, &SetKey::concept(&c.name, source.clone()), false)?;
        let neg = self.activations(m, layer, &SetKey::negatives_for(&c.name), true)?;
        let half = acts.len() / 2;
        let sizes: Vec<usize> = if self.config.intra.sizes.is_empty() {
            cav::default_sizes(acts.len())
        } else {
            self.config
                .intra
                .sizes
                .iter()
                .copied()
                .filter(|&u| u >= 1 && u <= half)
                .collect()
        };
        let seed = cell_seed(
            self.config.seed,
            &["rq2", &c.name, &source.to_string(), model_id, layer],
        );
        let mut rows = Vec::new();
        for &pooling in &self.config.poolings {
            let curve = cav::intra_similarity_curve(
                &acts,
                &neg,
                &sizes,
                self.config.intra.repeats,
                seed,
                pooling,
            )?;
            rows.extend(curve.points.into_iter().map(|p| CurveRow {
                concept: c.name.clone(),
                source: source.to_string(),
                model: model_id.clone(),
                layer: layer.to_string(),
                pooling,
                u: p.u,
                mean: p.mean,
                std: p.std,
                repeats: p.repeats,
                seed,
            }));
        }
        Ok(rows)
    }

    // ---- RQ3 -----------------------------------------------------------------------

    pub fn run_rq3(&self) -> Result<Rq3Output, ReportError> {
        let out = self.cached("rq3", || self.compute_rq3())?;
        write_table(&self.out("rq3_importances.csv"), &out.importances)?;
        write_table(&self.out("rq3_importance_per_image.csv"), &out.per_image)?;
        write_table(&self.out("rq3_deltas.csv"), &out.deltas)?;
        write_table(&self.out("rq3_by_provider.csv"), &out.by_provider)?;
        write_table(&self.out("rq3_stats.csv"), &out.stats)?;
        write_table(&self.out("rq3_failures.csv"), &out.failures)?;
        Ok(out)
    }

    /// The CAVs of one cell: the real one and, per provider, one per replicate.
    fn cell_cavs(
        &self,
        m: usize,
        layer: &str,
        c: &ConceptSpec,
        pooling: Pooling,
        stage: &str,
    ) -> Result<(Cav, ProviderCavs), ReportError> {
        let model_id = &self.backends[m].0.id;
        let real = self.activations(m, layer, &SetKey::concept(&c.name, Source::Real), false)?;
        let neg = self.activations(m, layer, &SetKey::negatives_for(&c.name), true)?;
        let v_real = cav::compute_cav_dom(&real, &neg, pooling)?;
        let mut gens = Vec::new();
        for p in &self.config.providers {
            let seed = cell_seed(self.config.seed, &[stage, &c.name, &p.id, model_id, layer]);
            let cavs = (|| {
                let gen = self.activations(
                    m,
                    layer,
                    &SetKey::concept(&c.name, gen_source(&p.id)),
                    false,
                )?;
                stats::bootstrap_indices(gen.len(), &self.bootstrap_spec(seed))?
                    .iter()
                    .enumerate()
                    .map(|(r, idx)| {
                        Ok(cav::compute_cav_dom(&gen.select(idx), &neg, pooling)?
                            .with_subset(format!("bootstrap:{r}"), Some(seed)))
                    })
                    .collect::<Result<Vec<_>, ReportError>>()
            })();
            gens.push((p.id.clone(), seed, cavs));
        }
        Ok((v_real, gens))
    }

    fn compute_rq3(&self) -> Result<Rq3Output, ReportError> {
        let mut out = Rq3Output::default();
        let concepts = self.concepts();
        for (m, layer) in self.model_layers() {
            let model_id = self.backends[m].0.id.clone();
            let jobs: Vec<(&ConceptSpec, Method)> = concepts
                .iter()
                .flat_map(|c| self.config.methods.iter().map(move |&k| (*c, k)))
                .collect();
            let results: Vec<_> = jobs
                .par_iter()
                .map(|(c, method)| {
                    self.rq3_cell(m, &layer, c, *method)
                        .map_err(|e| CellFailure {
                            stage: "rq3".into(),
                            cell: format!("{}/{model_id}/{layer}/{method}", c.name),
                            error: e.to_string(),
                        })
                })
                .collect();
            for r in results {
                match r {
                    Ok((imp, per, deltas, failures)) => {
                        out.importances.extend(imp);
                        out.per_image.extend(per);
                        out.deltas.extend(deltas);
                        out.failures.extend(failures);
                    }
                    Err(f) => out.failures.push(f),
                }
            }
            self.clear_memos();
        }
        out.by_provider = group_rows(out.deltas.iter().map(|r| {
            (
                (r.provider.clone(), r.method.to_string(), String::new()),
                r.delta,
            )
        }));
        for &method in &self.config.methods {
            let real: Vec<f64> = out
                .per_image
                .iter()
                .filter(|r| r.method == method && r.cav_source == "real")
                .map(|r| r.score)
                .collect();
            for p in &self.config.providers {
                let source = gen_source(&p.id).to_string();
                let gen: Vec<f64> = out
                    .per_image
                    .iter()
                    .filter(|r| r.method == method && r.cav_source == source)
                    .map(|r| r.score)
                    .collect();
                out.stats.push(StatRow::test(
                    "rq3-ks-importance",
                    &method.to_string(),
                    &p.id,
                    stats::ks_two_sample(&real, &gen),
                ));
                let deltas: Vec<f64> = out
                    .deltas
                    .iter()
                    .filter(|d| d.method == method && d.provider == p.id)
                    .map(|d| d.delta)
                    .collect();
                out.stats.push(StatRow::summary(
                    "rq3-delta",
                    &method.to_string(),
                    &p.id,
                    &deltas,
                ));
            }
        }
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn rq3_cell(
        &self,
        m: usize,
        layer: &str,
        c: &ConceptSpec,
        method: Method,
    ) -> Result<
        (
            Vec<ImportanceRow>,
            Vec<PerImageRow>,
            Vec<DeltaRow>,
            Vec<CellFailure>,
        ),
        ReportError,
    > {
        let model_id = self.backends[m].0.id.clone();
        let k = self.class_index(m, &c.relevant_class)?;
        let class_acts = self.activations(m, layer, &SetKey::class(&c.relevant_class), true)?;
        let (v_real, gens) = self.cell_cavs(m, layer, c, method.pooling(), "rq3")?;
        let real_seed = cell_seed(
            self.config.seed,
            &["rq3", &c.name, "real", &model_id, layer],
        );

        let row = |source: &str, replicate: Option<usize>, seed: u64, score: f64| ImportanceRow {
            concept: c.name.clone(),
            class: c.relevant_class.clone(),
            model: model_id.clone(),
            layer: layer.to_string(),
            method,
            cav_source: source.to_string(),
            inputs: importance::Inputs::Original,
            replicate,
            seed,
            score,
        };
        let per_image_rows = |source: &str, scores: &[f64]| -> Vec<PerImageRow> {
            class_acts
                .image_order
                .iter()
                .zip(scores)
                .map(|(img, &score)| PerImageRow {
                    concept: c.name.clone(),
                    model: model_id.clone(),
                    layer: layer.to_string(),
                    method,
                    cav_source: source.to_string(),
                    image: img
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    score,
                })
                .collect()
        };

        let s_real = self.score(m, &class_acts, k, &v_real, method)?;
        let mut imps = vec![row("real", None, real_seed, s_real.score)];
        let mut per = per_image_rows("real", &s_real.per_image);
        let mut deltas = Vec::new();
        let mut failures = Vec::new();
        for (provider, seed, cavs) in gens {
            let source = gen_source(&provider).to_string();
            let scored = cavs.and_then(|cavs| {
                cavs.iter()
                    .map(|v| self.score(m, &class_acts, k, v, method))
                    .collect::<Result<Vec<_>, _>>()
            });
            let scored = match scored {
                Ok(s) => s,
                Err(e) => {
                    failures.push(CellFailure {
                        stage: "rq3".into(),
                        cell: format!("{}/{provider}/{model_id}/{layer}/{method}", c.name),
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            let mut scores = Vec::with_capacity(scored.len());
            let mut per_image_sum = vec![0.0; class_acts.len()];
            for (r, s) in scored.iter().enumerate() {
                imps.push(row(&source, Some(r), seed, s.score));
                for (acc, x) in per_image_sum.iter_mut().zip(&s.per_image) {
                    *acc += x;
                }
                scores.push(s.score);
            }
            let per_image_mean: Vec<f64> = per_image_sum
                .iter()
                .map(|v| v / scored.len() as f64)
                .collect();
            per.extend(per_image_rows(&source, &per_image_mean));
            let ms = MeanStd::of(&scores).expect("replicates >= 1");
            deltas.push(DeltaRow {
                concept: c.name.clone(),
                class: c.relevant_class.clone(),
                model: model_id.clone(),
                layer: layer.to_string(),
                method,
                provider,
                s_real: s_real.score,
                s_gen: ms.mean,
                s_gen_std: ms.std,
                delta: (ms.mean - s_real.score).abs(),
                replicates: ms.count,
                seed,
            });
        }
        Ok((imps, per, deltas, failures))
    }

    // ---- RQ4 -----------------------------------------------------------------------

    pub fn run_rq4(&self) -> Result<Rq4Output, ReportError> {
        let out = self.cached("rq4", || self.compute_rq4())?;
        write_table(&self.out("rq4_removal.csv"), &out.removal)?;
        write_table(&self.out("rq4_probabilities.csv"), &out.probabilities)?;
        write_table(&self.out("rq4_by_source.csv"), &out.by_source)?;
        write_table(&self.out("rq4_stats.csv"), &out.stats)?;
        write_table(&self.out("rq4_logistic.csv"), &out.logistic)?;
        write_table(&self.out("rq4_failures.csv"), &out.failures)?;
        Ok(out)
    }

    fn compute_rq4(&self) -> Result<Rq4Output, ReportError> {
        let mut out = Rq4Output::default();
        let concepts = self.concepts();
        for (m, (mc, backend)) in self.backends.iter().enumerate() {
            for c in &concepts {
                let res = (|| -> Result<ProbabilityRow, ReportError> {
                    let k = self.class_index(m, &c.relevant_class)?;
                    let originals = self.image_set(&SetKey::class(&c.relevant_class))?;
                    let removed = self.image_set(&SetKey::removed(&c.relevant_class, &c.name))?;
                    importance::check_aligned(&originals, &removed)?;
                    let po = backend.probabilities(&originals, k)?;
                    let pr = backend.probabilities(&removed, k)?;
                    Ok(ProbabilityRow {
                        concept: c.name.clone(),
                        class: c.relevant_class.clone(),
                        model: mc.id.clone(),
                        p_original: po.mean,
                        p_removed: pr.mean,
                        delta_p: po.mean - pr.mean,
                    })
                })();
                match res {
                    Ok(r) => out.probabilities.push(r),
                    Err(e) => out.failures.push(CellFailure {
                        stage: "rq4-probability".into(),
                        cell: format!("{}/{}", c.name, mc.id),
                        error: e.to_string(),
                    }),
                }
            }
        }
        for (m, layer) in self.model_layers() {
            let model_id = self.backends[m].0.id.clone();
            let jobs: Vec<(&ConceptSpec, Method)> = concepts
                .iter()
                .flat_map(|c| self.config.methods.iter().map(move |&k| (*c, k)))
                .collect();
            let results: Vec<_> = jobs
                .par_iter()
                .map(|(c, method)| {
                    self.rq4_cell(m, &layer, c, *method)
                        .map_err(|e| CellFailure {
                            stage: "rq4".into(),
                            cell: format!("{}/{model_id}/{layer}/{method}", c.name),
                            error: e.to_string(),
                        })
                })
                .collect();
            for r in results {
                match r {
                    Ok((rows, failures)) => {
                        out.removal.extend(rows);
                        out.failures.extend(failures);
                    }
                    Err(f) => out.failures.push(f),
                }
            }
            self.clear_memos();
        }
        out.by_source = group_rows(out.removal.iter().map(|r| {
            (
                (r.cav_source.clone(), r.method.to_string(), String::new()),
                r.delta_rm,
            )
        }));

        let dp: HashMap<(&str, &str), f64> = out
            .probabilities
            .iter()
            .map(|p| ((p.concept.as_str(), p.model.as_str()), p.delta_p))
            .collect();
        for &method in &self.config.methods {
            let name = method.to_string();
            let real: Vec<&RemovalRow> = out
                .removal
                .iter()
                .filter(|r| r.method == method && r.cav_source == "real")
                .collect();
            let real_delta: Vec<f64> = real.iter().map(|r| r.delta_rm).collect();
            for p in &self.config.providers {
                let source = gen_source(&p.id).to_string();
                let gen: Vec<f64> = out
                    .removal
                    .iter()
                    .filter(|r| r.method == method && r.cav_source == source)
                    .map(|r| r.delta_rm)
                    .collect();
                out.stats.push(StatRow::test(
                    "rq4-ks-removal",
                    &name,
                    &p.id,
                    stats::ks_two_sample(&real_delta, &gen),
                ));
            }
            let (xs, ys): (Vec<f64>, Vec<f64>) = real
                .iter()
                .filter_map(|r| {
                    dp.get(&(r.concept.as_str(), r.model.as_str()))
                        .map(|&d| (r.delta_rm, d))
                })
                .unzip();
            out.stats.push(StatRow::test(
                "rq4-spearman",
                &name,
                "real",
                stats::spearman(&xs, &ys),
            ));
            out.logistic
                .push(match stats::fit_logistic(&xs, &ys, Default::default()) {
                    Ok(f) => LogisticRow {
                        method: name.clone(),
                        l: f.params.l,
                        k: f.params.k,
                        x0: f.params.x0,
                        rmse: f.rmse,
                        n: xs.len(),
                        converged: f.converged,
                        degenerate: f.degenerate,
                        error: String::new(),
                    },
                    Err(e) => LogisticRow {
                        method: name.clone(),
                        l: f64::NAN,
                        k: f64::NAN,
                        x0: f64::NAN,
                        rmse: f64::NAN,
                        n: xs.len(),
                        converged: false,
                        degenerate: false,
                        error: e.to_string(),
                    },
                });
        }
        Ok(out)
    }

    fn rq4_cell(
        &self,
        m: usize,
        layer: &str,
        c: &ConceptSpec,
        method: Method,
    ) -> Result<(Vec<RemovalRow>, Vec<CellFailure>), ReportError> {
        let model_id = self.backends[m].0.id.clone();
        let k = self.class_index(m, &c.relevant_class)?;
        let class_acts = self.activations(m, layer, &SetKey::class(&c.relevant_class), true)?;
        let removed_acts = self.activations(
            m,
            layer,
            &SetKey::removed(&c.relevant_class, &c.name),
            false,
        )?;
        let (v_real, gens) = self.cell_cavs(m, layer, c, method.pooling(), "rq3")?;
        let real_seed = cell_seed(
            self.config.seed,
            &["rq3", &c.name, "real", &model_id, layer],
        );
        let row = |source: String, s: f64, s_rm: f64, replicates: usize, seed: u64| RemovalRow {
            concept: c.name.clone(),
            class: c.relevant_class.clone(),
            model: model_id.clone(),
            layer: layer.to_string(),
            method,
            cav_source: source,
            s,
            s_rm,
            delta_rm: s - s_rm,
            replicates,
            seed,
        };
        let s = self.score(m, &class_acts, k, &v_real, method)?.score;
        let s_rm = self.score(m, &removed_acts, k, &v_real, method)?.score;
        let mut rows = vec![row("real".into(), s, s_rm, 1, real_seed)];
        let mut failures = Vec::new();
        for (provider, seed, cavs) in gens {
            let res = cavs.and_then(|cavs| {
                let mut orig = Vec::new();
                let mut rm = Vec::new();
                for v in &cavs {
                    orig.push(self.score(m, &class_acts, k, v, method)?.score);
                    rm.push(self.score(m, &removed_acts, k, v, method)?.score);
                }
                let n = cavs.len() as f64;
                Ok(row(
                    gen_source(&provider).to_string(),
                    orig.iter().sum::<f64>() / n,
                    rm.iter().sum::<f64>() / n,
                    cavs.len(),
                    seed,
                ))
            });
            match res {
                Ok(r) => rows.push(r),
                Err(e) => failures.push(CellFailure {
                    stage: "rq4".into(),
                    cell: format!("{}/{provider}/{model_id}/{layer}/{method}", c.name),
                    error: e.to_string(),
                }),
            }
        }
        Ok((rows, failures))
    }

    // ---- appendix & full report -------------------------------------------------------

    fn row_labels(&self, with_real: bool) -> Vec<String> {
        let mut rows = Vec::new();
        if with_real {
            rows.push("Real".to_string());
        }
        rows.extend(self.config.providers.iter().map(|p| p.label().to_string()));
        rows
    }

    fn label_of(&self, provider: &str) -> String {
        self.config
            .providers
            .iter()
            .find(|p| p.id == provider)
            .map(|p| p.label().to_string())
            .unwrap_or_else(|| provider.into())
    }

    /// The four appendix tables: cosine similarity per concept for gap and
    /// flatten CAVs, and importance per concept for each method.
    pub fn appendix_tables(
        &self,
        rq1: &Rq1Output,
        rq3: &Rq3Output,
    ) -> Vec<(String, AppendixTable)> {
        let mut tables = Vec::new();
        let agg = "Results are averaged across models and layers.";
        for (pooling, method_name, file) in [
            (Pooling::Gap, "Visual-TCAV", "appendix_cosine_visual_tcav"),
            (Pooling::Flatten, "TCAV", "appendix_cosine_tcav"),
        ] {
            let cells: Vec<AppendixCell> = rq1
                .summary
                .iter()
                .filter(|r| r.pooling == pooling)
                .map(|r| AppendixCell {
                    concept: r.concept.clone(),
                    class: r.class.clone(),
                    row: self.label_of(&r.provider),
                    value: r.rho_mean,
                })
                .collect();
            if !cells.is_empty() {
                let caption = format!(
                    "Average cosine similarities between real and generated concepts whose CAVs are computed using {method_name}. {agg}"
                );
                tables.push((
                    file.to_string(),
                    build_appendix_table(&cells, &self.row_labels(false), &caption),
                ));
            }
        }
        for (method, method_name, file) in [
            (
                Method::VisualTcav,
                "Visual-TCAV",
                "appendix_importance_visual_tcav",
            ),
            (Method::Tcav, "TCAV", "appendix_importance_tcav"),
        ] {
            let mut cells: Vec<AppendixCell> = Vec::new();
            for d in rq3.deltas.iter().filter(|d| d.method == method) {
                cells.push(AppendixCell {
                    concept: d.concept.clone(),
                    class: d.class.clone(),
                    row: self.label_of(&d.provider),
                    value: d.s_gen,
                });
            }
            for r in rq3
                .importances
                .iter()
                .filter(|r| r.method == method && r.cav_source == "real")
            {
                cells.push(AppendixCell {
                    concept: r.concept.clone(),
                    class: r.class.clone(),
                    row: "Real".into(),
                    value: r.score,
                });
            }
            if !cells.is_empty() {
                let caption = format!(
                    "Average importance scores for each concept computed with {method_name}. {agg}"
                );
                tables.push((
                    file.to_string(),
                    build_appendix_table(&cells, &self.row_labels(true), &caption),
                ));
            }
        }
        tables
    }

    pub fn emit_appendix_tables(
        &self,
        rq1: &Rq1Output,
        rq3: &Rq3Output,
    ) -> Result<Vec<PathBuf>, ReportError> {
        let mut written = Vec::new();
        for (name, table) in self.appendix_tables(rq1, rq3) {
            for (ext, text) in [("tex", table.to_latex()), ("md", table.to_markdown())] {
                let path = self.out(&format!("{name}.{ext}"));
                std::fs::create_dir_all(&self.config.output_dir)?;
                std::fs::write(&path, text)?;
                written.push(path);
            }
        }
        Ok(written)
    }

    /// Every stage, the appendix tables, optional figures and a run manifest.
    pub fn run_report(&self, figures: bool) -> Result<RunSummary, ReportError> {
        let rq1 = self.run_rq1()?;
        let rq2 = self.run_rq2()?;
        let rq3 = self.run_rq3()?;
        let rq4 = self.run_rq4()?;
        self.emit_appendix_tables(&rq1, &rq3)?;
        if figures || self.config.figures {
            figures::write_figures(
                &self.config.output_dir.join("figures"),
                &rq1,
                &rq2,
                &rq3,
                &rq4,
            )?;
        }
        let failures: Vec<CellFailure> =
            [rq1.failures, rq2.failures, rq3.failures, rq4.failures].concat();
        self.write_manifest(&["rq1", "rq2", "rq3", "rq4"], &failures)?;
        Ok(RunSummary { failures })
    }

    pub fn write_manifest(
        &self,
        stages: &[&str],
        failures: &[CellFailure],
    ) -> Result<(), ReportError> {
        let manifest = serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": hex::encode(Sha256::digest(serde_json::to_vec(&self.config).expect("serializes"))),
            "input_fingerprint": self.input_fingerprint(),
            "stages": stages.iter().map(|s| (s.to_string(), self.stage_key(s))).collect::<BTreeMap<_, _>>(),
            "failures": failures.len(),
        });
        std::fs::create_dir_all(&self.config.output_dir)?;
        let path = self.out("run_manifest.json");
        std::fs::write(
            &path,
            serde_json::to_vec_pretty(&manifest).map_err(|e| csv_err(&path, e))?,
        )?;
        Ok(())
    }
}

/// Per provider: id, bootstrap seed and the replicate CAVs (or why they failed).
type ProviderCavs = Vec<(String, u64, Result<Vec<Cav>, ReportError>)>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub failures: Vec<CellFailure>,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_seeds_depend_on_every_part() {
        let a = cell_seed(1, &["rq1", "striped", "flux"]);
        assert_eq!(a, cell_seed(1, &["rq1", "striped", "flux"]));
        assert_ne!(a, cell_seed(2, &["rq1", "striped", "flux"]));
        assert_ne!(a, cell_seed(1, &["rq1", "stripedflux", ""]));
    }

    #[test]
    fn stat_rows_keep_failures() {
        let row = StatRow::test(
            "x",
            "tcav",
            "real",
            stats::spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
        );
        assert!(row.statistic.is_nan());
        assert!(!row.error.is_empty());
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ProbabilityRow {
            concept: "striped".into(),
            class: "zebra".into(),
            model: "toy-cnn".into(),
            p_original: 0.9,
            p_removed: 0.4,
            delta_p: 0.5,
        }];
        let path = dir.path().join("p.csv");
        write_table(&path, &rows).unwrap();
        assert_eq!(read_table::<ProbabilityRow>(&path).unwrap(), rows);
    }
}
