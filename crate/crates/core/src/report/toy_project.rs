//! A complete, self-contained project on the procedural corpus: real and
//! mock-generated concept sets, concept-removed class images, a trained toy
//! CNN and a run configuration pointing at all of it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::{self, ConceptCatalog, SetKey, Source};
use crate::extract::toy::{TrainConfig, TrainReport};
use crate::extract::{load_inputs, ToyCnn};
use crate::genclient::{
    self, BlurEditor, GenerationJob, JobOptions, MockGenerator, RemovalJob, RetryPolicy,
};
use crate::procedural::{write_toy_corpus, ToyCorpusSpec};

use super::ReportError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyProvider {
    pub id: String,
    pub label: String,
    /// Passed to [`MockGenerator`]; lower values give more uniform sets.
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyProjectSpec {
    pub corpus: ToyCorpusSpec,
    pub providers: Vec<ToyProvider>,
    pub generated_per_concept: usize,
    /// Strength of the blur editor used as the removal model.
    pub removal_strength: f64,
    pub model_seed: u64,
    pub train_seed: u64,
    pub max_epochs: usize,
    pub ig_steps: usize,
    pub bootstrap_replicates: usize,
    pub intra_repeats: usize,
    pub seed: u64,
}

impl Default for ToyProjectSpec {
    fn default() -> Self {
        Self {
            corpus: ToyCorpusSpec::default(),
            providers: vec![
                ToyProvider {
                    id: "mock-a".into(),
                    label: "Mock A".into(),
                    diversity: 1.0,
                },
                ToyProvider {
                    id: "mock-b".into(),
                    label: "Mock B".into(),
                    diversity: 0.3,
                },
            ],
            generated_per_concept: 64,
            removal_strength: 1.0,
            model_seed: 1,
            train_seed: 0,
            max_epochs: TrainConfig::default().max_epochs,
            ig_steps: 16,
            bootstrap_replicates: 5,
            intra_repeats: 20,
            seed: 0,
        }
    }
}

impl ToyProjectSpec {
    /// A small variant for tests: fewer images, fewer IG steps.
    pub fn small() -> Self {
        Self {
            corpus: ToyCorpusSpec {
                class_images: 24,
                concept_images: 24,
                negative_images: 24,
                seed: 7,
            },
            generated_per_concept: 24,
            ig_steps: 8,
            intra_repeats: 5,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyProject {
    pub root: PathBuf,
    pub catalog: PathBuf,
    pub weights: PathBuf,
    pub config: PathBuf,
    pub train: TrainReport,
}

/// Train the toy CNN on the class images of a catalog.
pub fn train_toy_model(
    catalog: &ConceptCatalog,
    model_seed: u64,
    config: &TrainConfig,
) -> Result<(ToyCnn, TrainReport), ReportError> {
    let classes: Vec<String> = catalog.classes.keys().cloned().collect();
    let mut model = ToyCnn::new(classes.clone(), model_seed);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for name in &classes {
        let set = catalog::load_image_set(catalog, &SetKey::class(name))?;
        let k = catalog.class_index(name, classes.len())?;
        inputs.extend(load_inputs(&model, &set.paths)?);
        labels.extend(std::iter::repeat_n(k, set.len()));
    }
    let report = model.train(&inputs, &labels, config)?;
    Ok((model, report))
}

/// Populate `root` with the toy project and return its locations. The run
/// configuration is written to `root/run.toml` with results in `root/results`.
pub fn write_toy_project(root: &Path, spec: &ToyProjectSpec) -> Result<ToyProject, ReportError> {
    let catalog_path = write_toy_corpus(&root.join("data"), &spec.corpus)?;
    let catalog = catalog::load_catalog(&catalog_path)?;
    let options = JobOptions {
        retry: RetryPolicy::immediate(1),
        resume: false,
        batch_size: 8,
    };

    for (p, provider) in spec.providers.iter().enumerate() {
        let generator = MockGenerator::new(provider.id.clone(), provider.diversity);
        for concept in &catalog.concepts {
            let job = GenerationJob {
                concept: concept.clone(),
                provider: provider.id.clone(),
                count: spec.generated_per_concept,
                seed: super::cell_seed(spec.seed, &["generate", &provider.id, &concept.name])
                    ^ p as u64,
                output_dir: catalog.set_directory(&SetKey::concept(
                    &concept.name,
                    Source::Generated(provider.id.clone()),
                ))?,
            };
            genclient::generate_concept_images(&job, &generator, &options)?;
        }
    }

    let editor = BlurEditor::new("blur", spec.removal_strength);
    for concept in &catalog.concepts {
        let job = RemovalJob {
            concept: concept.clone(),
            editor: "blur".into(),
            class_images: catalog::load_image_set(
                &catalog,
                &SetKey::class(&concept.relevant_class),
            )?,
            output_dir: catalog
                .set_directory(&SetKey::removed(&concept.relevant_class, &concept.name))?,
            seed: super::cell_seed(spec.seed, &["remove", &concept.name]),
        };
        genclient::remove_concept_from_images(&job, &editor, &options)?;
    }

    let train_cfg = TrainConfig {
        max_epochs: spec.max_epochs,
        seed: spec.train_seed,
        ..TrainConfig::default()
    };
    let (model, train) = train_toy_model(&catalog, spec.model_seed, &train_cfg)?;
    let weights = root.join("toy-cnn.json");
    model.save(&weights)?;

    let mut toml = format!(
        "catalog = \"data/catalog.toml\"\noutput_dir = \"results\"\nseed = {}\n\n",
        spec.seed
    );
    for p in &spec.providers {
        toml += &format!(
            "[[providers]]\nid = \"{}\"\nlabel = \"{}\"\n\n",
            p.id, p.label
        );
    }
    toml += "[[models]]\nid = \"toy-cnn\"\nbackend = \"toy\"\nweights = \"toy-cnn.json\"\nlayers = [\"conv1\", \"conv2\"]\n\n";
    toml += &format!(
        "[bootstrap]\nreplicates = {}\nsampling_ratio = 1.0\nwith_replacement = true\nseed = {}\n\n",
        spec.bootstrap_replicates, spec.seed
    );
    toml += &format!(
        "[intra]\nrepeats = {}\n\n[ig]\nsteps = {}\ntarget = \"logit\"\n",
        spec.intra_repeats, spec.ig_steps
    );
    let config = root.join("run.toml");
    std::fs::write(&config, toml)?;

    Ok(ToyProject {
        root: root.to_path_buf(),
        catalog: catalog_path,
        weights,
        config,
        train,
    })
}
