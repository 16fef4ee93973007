//! Prompt templates and the generation / removal jobs that drive
//! text-to-image and image-to-image providers.

mod manifest;
mod providers;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{ConceptSpec, ConceptType, ImageSet, SetKey, Source, Subject};

pub use manifest::{read_manifest, Manifest, ManifestRecord, MANIFEST_FILE};
pub use providers::{
    BlurEditor, CommandEditor, CommandGenerator, FlakyGenerator, HttpEditor, HttpGenerator,
    IdentityEditor, ImageEditor, ImageGenerator, MockGenerator, ProviderError, RateLimited,
};

pub const PLACEHOLDER: &str = "[CONCEPT]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    GenObject,
    GenTexture,
    Removal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub body: &'static str,
}

pub const GEN_OBJECT: PromptTemplate = PromptTemplate {
    kind: PromptKind::GenObject,
    body: "A realistic photo of a [CONCEPT] shown clearly in action and in its natural setting. The image should focus on the object's shape, material, and details, captured with natural lighting and minimal background distractions. Photographed from different angles or in natural settings, but always with the object clearly visible and realistically rendered.",
};

pub const GEN_TEXTURE: PromptTemplate = PromptTemplate {
    kind: PromptKind::GenTexture,
    body: "A realistic close-up of the concept [CONCEPT] as the main subject, shown in high detail and natural lighting. The concept should fill the frame or dominate the image, with clear texture and form. Multiple perspectives and realistic, rich, colorful surfaces are encouraged.",
};

pub const REMOVAL: PromptTemplate = PromptTemplate {
    kind: PromptKind::Removal,
    body: "Completely remove the concept of [CONCEPT] from the image, keeping it as visually similar as possible without [CONCEPT] being present at all.",
};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("empty concept")]
    EmptyConcept,
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("job uses provider `{job}` but `{given}` was supplied")]
    ProviderMismatch { job: String, given: String },
    #[error("{completed} of {total} images completed before failure: {source}")]
    Partial {
        completed: usize,
        total: usize,
        source: ProviderError,
    },
    #[error("output directory {0} already has a manifest; resume or choose another directory")]
    OutputExists(PathBuf),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PromptTemplate {
    pub fn for_type(concept_type: ConceptType) -> Self {
        match concept_type {
            ConceptType::Object => GEN_OBJECT,
            ConceptType::Texture => GEN_TEXTURE,
        }
    }

    /// Substitute the trimmed concept name for every placeholder.
    pub fn render(&self, concept: &str) -> Result<String, GenError> {
        let name = concept.trim();
        if name.is_empty() {
            return Err(GenError::EmptyConcept);
        }
        Ok(self.body.replace(PLACEHOLDER, name))
    }
}

pub fn render_generation_prompt(concept: &ConceptSpec) -> Result<String, GenError> {
    PromptTemplate::for_type(concept.concept_type).render(&concept.name)
}

pub fn render_removal_prompt(concept: &ConceptSpec) -> Result<String, GenError> {
    REMOVAL.render(&concept.name)
}

/// Per-image seed derived from the job seed and the image index.
pub fn derive_seed(job_seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(job_seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Bounded retries with exponential backoff. Permanent errors are not retried.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: usize) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
            factor: 1.0,
        }
    }

    pub fn run<T>(
        &self,
        mut call: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < self.attempts.max(1) => {
                    log::warn!("attempt {attempt} failed: {e}; retrying in {delay:?}");
                    thread::sleep(delay);
                    delay = delay.mul_f64(self.factor);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationJob {
    pub concept: ConceptSpec,
    pub provider: String,
    pub count: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovalJob {
    pub concept: ConceptSpec,
    pub editor: String,
    pub class_images: ImageSet,
    pub output_dir: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobOptions {
    pub retry: RetryPolicy,
    /// Continue from an existing manifest instead of refusing to overwrite it.
    pub resume: bool,
    /// Images requested per provider call.
    pub batch_size: usize,
}

impl Default for JobOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            resume: false,
            batch_size: 4,
        }
    }
}

pub fn generated_filename(index: usize) -> String {
    format!("gen_{:04}.png", index + 1)
}

fn open_manifest(dir: &Path, resume: bool) -> Result<Manifest, GenError> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest::open(dir)?;
    if !resume && !manifest.records().is_empty() {
        return Err(GenError::OutputExists(dir.to_path_buf()));
    }
    Ok(manifest)
}

/// Generate `job.count` images named `gen_0001.png`, ... and record each in
/// the manifest. With `resume`, images already recorded are kept.
pub fn generate_concept_images(
    job: &GenerationJob,
    provider: &dyn ImageGenerator,
    options: &JobOptions,
) -> Result<ImageSet, GenError> {
    if job.count == 0 {
        return Err(GenError::InvalidJob("count must be at least 1".into()));
    }
    if job.provider != provider.id() {
        return Err(GenError::ProviderMismatch {
            job: job.provider.clone(),
            given: provider.id().to_string(),
        });
    }
    let prompt = render_generation_prompt(&job.concept)?;
    let mut manifest = open_manifest(&job.output_dir, options.resume)?;
    let done = manifest.completed_files(&job.output_dir);

    let pending: Vec<usize> = (0..job.count)
        .filter(|&i| !done.contains(&generated_filename(i)))
        .collect();
    let mut completed = job.count - pending.len();
    for batch in pending.chunks(options.batch_size.max(1)) {
        let seeds: Vec<u64> = batch.iter().map(|&i| derive_seed(job.seed, i)).collect();
        let images = match options.retry.run(|| provider.generate(&prompt, &seeds)) {
            Ok(images) if images.len() == batch.len() => images,
            Ok(images) => {
                let source = ProviderError::Permanent(format!(
                    "asked for {} images, got {}",
                    batch.len(),
                    images.len()
                ));
                return Err(GenError::Partial {
                    completed,
                    total: job.count,
                    source,
                });
            }
            Err(source) => {
                return Err(GenError::Partial {
                    completed,
                    total: job.count,
                    source,
                })
            }
        };
        for ((&i, seed), bytes) in batch.iter().zip(seeds).zip(images) {
            let filename = generated_filename(i);
            write_atomic(&job.output_dir.join(&filename), &bytes)?;
            manifest.append(ManifestRecord {
                filename,
                prompt: prompt.clone(),
                provider: provider.id().to_string(),
                seed,
                source_image: None,
            })?;
            completed += 1;
        }
    }
    let paths = (0..job.count)
        .map(|i| job.output_dir.join(generated_filename(i)))
        .collect();
    Ok(ImageSet {
        key: SetKey::concept(
            &job.concept.name,
            Source::Generated(provider.id().to_string()),
        ),
        paths,
        seed: Some(job.seed),
    })
}

/// Edit every class image to remove the concept. Outputs keep the input
/// file names, so they pair with the originals by position and by stem.
pub fn remove_concept_from_images(
    job: &RemovalJob,
    editor: &dyn ImageEditor,
    options: &JobOptions,
) -> Result<ImageSet, GenError> {
    if job.class_images.is_empty() {
        return Err(GenError::InvalidJob("no class images to edit".into()));
    }
    if job.editor != editor.id() {
        return Err(GenError::ProviderMismatch {
            job: job.editor.clone(),
            given: editor.id().to_string(),
        });
    }
    let class = &job.concept.relevant_class;
    if job.class_images.key.subject != Subject::Class(class.clone())
        || job.class_images.key.source != Source::Real
    {
        return Err(GenError::InvalidJob(format!(
            "image set {} is not the real set of class `{class}`",
            job.class_images.key
        )));
    }
    let prompt = render_removal_prompt(&job.concept)?;
    let mut manifest = open_manifest(&job.output_dir, options.resume)?;
    let done = manifest.completed_files(&job.output_dir);

    let total = job.class_images.len();
    let mut outputs = Vec::with_capacity(total);
    let mut completed = done.len();
    for (i, source) in job.class_images.paths.iter().enumerate() {
        let filename = source
            .file_name()
            .ok_or_else(|| GenError::InvalidJob(format!("{} has no file name", source.display())))?
            .to_string_lossy()
            .into_owned();
        let out = job.output_dir.join(&filename);
        outputs.push(out.clone());
        if done.contains(&filename) {
            continue;
        }
        let input = std::fs::read(source)?;
        let seed = derive_seed(job.seed, i);
        let bytes = options
            .retry
            .run(|| editor.edit(&prompt, &input, seed))
            .map_err(|source| GenError::Partial {
                completed,
                total,
                source,
            })?;
        write_atomic(&out, &bytes)?;
        manifest.append(ManifestRecord {
            filename,
            prompt: prompt.clone(),
            provider: editor.id().to_string(),
            seed,
            source_image: Some(source.display().to_string()),
        })?;
        completed += 1;
    }
    Ok(ImageSet {
        key: SetKey::removed(class, &job.concept.name),
        paths: outputs,
        seed: Some(job.seed),
    })
}

/// Run independent generation jobs on at most `workers` threads. Results
/// come back in job order.
pub fn run_generation_jobs(
    jobs: &[GenerationJob],
    provider: Arc<dyn ImageGenerator>,
    options: &JobOptions,
    workers: usize,
) -> Vec<Result<ImageSet, GenError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|job| generate_concept_images(job, provider.as_ref(), options))
            .collect()
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("part");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}
