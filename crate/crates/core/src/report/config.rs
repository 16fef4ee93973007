//! TOML run configuration.
//!
//! ```toml
//! catalog = "catalog.toml"
//! output_dir = "results"
//! seed = 0
//! methods = ["visual-tcav", "tcav"]
//! poolings = ["gap", "flatten"]
//!
//! [[providers]]
//! id = "flux"
//! label = "Flux"
//! min_interval_ms = 0
//! adapter = { kind = "http", endpoint = "https://...", api_key_env = "FLUX_API_KEY" }
//! # or { kind = "command", program = "gen.sh", args = ["{prompt}", "{seeds}", "{out_dir}"] }
//! # or { kind = "mock", diversity = 1.0 }
//!
//! [editor]
//! id = "gpt-image"
//! adapter = { kind = "http", endpoint = "https://...", api_key_env = "OPENAI_API_KEY" }
//! # or "command", "identity", "blur" (strength)
//!
//! [generation]
//! count = 200
//! batch_size = 4
//! workers = 4
//! attempts = 3
//!
//! [[models]]
//! id = "toy-cnn"
//! backend = "toy"          # or "store"
//! weights = "toy-cnn.json" # toy backend
//! layers = ["conv1", "conv2"]
//!
//! [bootstrap]
//! replicates = 5
//! sampling_ratio = 1.0
//! with_replacement = true
//! seed = 0
//!
//! [intra]
//! sizes = []   # empty: powers of two up to N/2, plus N/2
//! repeats = 20
//!
//! [ig]
//! steps = 50
//! target = "logit"
//!
//! [clip]
//! embeddings = "clip.jsonl"
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use std::sync::Arc;
use std::time::Duration;

use crate::cav::{Pooling, DEFAULT_REPEATS};
use crate::extract::TargetScalar;
use crate::genclient::{
    BlurEditor, CommandEditor, CommandGenerator, HttpEditor, HttpGenerator, IdentityEditor,
    ImageEditor, ImageGenerator, JobOptions, MockGenerator, RateLimited, RetryPolicy,
};
use crate::importance::Method;
use crate::stats::BootstrapSpec;

use super::ReportError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub id: String,
    /// Row label in appendix tables; defaults to `id`.
    #[serde(default)]
    pub label: Option<String>,
    /// Needed only for generation; analyses read the images on disk.
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub min_interval_ms: u64,
}

impl ProviderConfig {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.id)
    }

    pub fn generator(&self) -> Result<Arc<dyn ImageGenerator>, ReportError> {
        let id = self.id.clone();
        let inner: Arc<dyn ImageGenerator> = match &self.adapter {
            None => {
                return Err(ReportError::Config(format!(
                    "provider `{id}` has no adapter"
                )))
            }
            Some(AdapterConfig::Mock { diversity }) => Arc::new(MockGenerator::new(id, *diversity)),
            Some(AdapterConfig::Http {
                endpoint,
                api_key_env,
                timeout_secs,
            }) => Arc::new(HttpGenerator::new(
                id,
                endpoint.clone(),
                api_key_env.clone(),
                Duration::from_secs(*timeout_secs),
            )),
            Some(AdapterConfig::Command { program, args }) => {
                Arc::new(CommandGenerator::new(id, program.clone(), args.clone()))
            }
            Some(other) => {
                return Err(ReportError::Config(format!(
                    "`{}` cannot generate images",
                    other.kind()
                )))
            }
        };
        Ok(if self.min_interval_ms > 0 {
            Arc::new(RateLimited::new(
                inner,
                Duration::from_millis(self.min_interval_ms),
            ))
        } else {
            inner
        })
    }
}

/// How to reach an image generation or editing service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterConfig {
    Mock {
        #[serde(default = "default_diversity")]
        diversity: f64,
    },
    Identity,
    Blur {
        #[serde(default = "default_strength")]
        strength: f64,
    },
    Http {
        endpoint: String,
        api_key_env: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
    Command {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl AdapterConfig {
    fn kind(&self) -> &'static str {
        match self {
            AdapterConfig::Mock { .. } => "mock",
            AdapterConfig::Identity => "identity",
            AdapterConfig::Blur { .. } => "blur",
            AdapterConfig::Http { .. } => "http",
            AdapterConfig::Command { .. } => "command",
        }
    }
}

fn default_diversity() -> f64 {
    1.0
}

fn default_strength() -> f64 {
    1.0
}

fn default_timeout() -> u64 {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditorConfig {
    pub id: String,
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub min_interval_ms: u64,
}

impl EditorConfig {
    pub fn editor(&self) -> Result<Arc<dyn ImageEditor>, ReportError> {
        let id = self.id.clone();
        let inner: Arc<dyn ImageEditor> = match &self.adapter {
            AdapterConfig::Identity => Arc::new(IdentityEditor::new(id)),
            AdapterConfig::Blur { strength } => Arc::new(BlurEditor::new(id, *strength)),
            AdapterConfig::Http {
                endpoint,
                api_key_env,
                timeout_secs,
            } => Arc::new(HttpEditor::new(
                id,
                endpoint.clone(),
                api_key_env.clone(),
                Duration::from_secs(*timeout_secs),
            )),
            AdapterConfig::Command { program, args } => {
                Arc::new(CommandEditor::new(id, program.clone(), args.clone()))
            }
            AdapterConfig::Mock { .. } => {
                return Err(ReportError::Config("`mock` cannot edit images".into()))
            }
        };
        Ok(if self.min_interval_ms > 0 {
            Arc::new(RateLimited::new(
                inner,
                Duration::from_millis(self.min_interval_ms),
            ))
        } else {
            inner
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_attempts")]
    pub attempts: usize,
}

fn default_count() -> usize {
    200
}

fn default_batch() -> usize {
    4
}

fn default_workers() -> usize {
    4
}

fn default_attempts() -> usize {
    3
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            count: 200,
            batch_size: 4,
            workers: 4,
            attempts: 3,
        }
    }
}

impl GenerationConfig {
    pub fn job_options(&self, resume: bool) -> JobOptions {
        JobOptions {
            retry: RetryPolicy {
                attempts: self.attempts.max(1),
                ..RetryPolicy::default()
            },
            resume,
            batch_size: self.batch_size.max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// The bundled toy CNN, loaded from `weights`.
    Toy,
    /// Tensors exported by an external framework under `root`.
    Store,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    pub backend: BackendKind,
    pub layers: Vec<String>,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub class_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntraConfig {
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_repeats() -> usize {
    DEFAULT_REPEATS
}

impl Default for IntraConfig {
    fn default() -> Self {
        Self {
            sizes: Vec::new(),
            repeats: DEFAULT_REPEATS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IgSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub target: TargetScalar,
}

fn default_steps() -> usize {
    50
}

impl Default for IgSection {
    fn default() -> Self {
        Self {
            steps: 50,
            target: TargetScalar::Logit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub embeddings: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub catalog: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub providers: Vec<ProviderConfig>,
    pub models: Vec<ModelConfig>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_poolings")]
    pub poolings: Vec<Pooling>,
    #[serde(default)]
    pub bootstrap: BootstrapSpec,
    #[serde(default)]
    pub intra: IntraConfig,
    #[serde(default)]
    pub ig: IgSection,
    #[serde(default)]
    pub clip: Option<ClipConfig>,
    #[serde(default)]
    pub figures: bool,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub editor: Option<EditorConfig>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::VisualTcav, Method::Tcav]
}

fn default_poolings() -> Vec<Pooling> {
    vec![Pooling::Gap, Pooling::Flatten]
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ReportError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| ReportError::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ReportError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.catalog);
        fix(&mut self.output_dir);
        for m in &mut self.models {
            if let Some(w) = &mut m.weights {
                fix(w);
            }
            if let Some(r) = &mut m.root {
                fix(r);
            }
        }
        if let Some(c) = &mut self.clip {
            fix(&mut c.embeddings);
        }
        let fix_adapter = |a: &mut AdapterConfig| {
            if let AdapterConfig::Command { program, .. } = a {
                if program.components().count() > 1 && program.is_relative() {
                    *program = base.join(&*program);
                }
            }
        };
        for p in &mut self.providers {
            if let Some(a) = &mut p.adapter {
                fix_adapter(a);
            }
        }
        if let Some(e) = &mut self.editor {
            fix_adapter(&mut e.adapter);
        }
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let err = |m: String| Err(ReportError::Config(m));
        if self.models.is_empty() {
            return err("no models configured".into());
        }
        for m in &self.models {
            if m.layers.is_empty() {
                return err(format!("model `{}` has no layers", m.id));
            }
            match m.backend {
                BackendKind::Toy if m.weights.is_none() => {
                    return err(format!("model `{}` needs `weights`", m.id))
                }
                BackendKind::Store if m.root.is_none() || m.class_count.is_none() => {
                    return err(format!("model `{}` needs `root` and `class_count`", m.id))
                }
                _ => {}
            }
        }
        let mut ids: Vec<&str> = self.providers.iter().map(|p| p.id.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return err("duplicate provider id".into());
        }
        if self.generation.count == 0 {
            return err("generation.count must be >= 1".into());
        }
        if self.ig.steps == 0 {
            return err("ig.steps must be >= 1".into());
        }
        if self.intra.repeats == 0 {
            return err("intra.repeats must be >= 1".into());
        }
        self.bootstrap
            .validate()
            .map_err(|e| ReportError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn ig_config(&self) -> crate::extract::IgConfig {
        crate::extract::IgConfig {
            steps: self.ig.steps,
            target: self.ig.target,
            ..Default::default()
        }
    }
}

/// Models and layers used for the full-scale study, with the input size each
/// model expects. External exports should follow these names.
pub const REFERENCE_MODELS: [(&str, [&str; 2], (usize, usize)); 4] = [
    ("vgg16", ["block5_conv2", "block5_conv3"], (224, 224)),
    (
        "resnet50v2",
        ["conv5_block2_out", "conv5_block3_out"],
        (224, 224),
    ),
    ("inceptionv3", ["mixed9", "mixed10"], (299, 299)),
    ("convnext", ["add_34", "add_35"], (224, 224)),
];

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        catalog = "cat.toml"
        output_dir = "out"
        [[providers]]
        id = "flux"
        label = "Flux"
        [[models]]
        id = "toy-cnn"
        backend = "toy"
        weights = "w.json"
        layers = ["conv1"]
    "#;

    #[test]
    fn defaults_and_resolution() {
        let cfg = RunConfig::from_toml(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.catalog, PathBuf::from("/base/cat.toml"));
        assert_eq!(
            cfg.models[0].weights.as_deref(),
            Some(Path::new("/base/w.json"))
        );
        assert_eq!(cfg.bootstrap, BootstrapSpec::default());
        assert_eq!(cfg.intra.repeats, 20);
        assert_eq!(cfg.ig.steps, 50);
        assert_eq!(cfg.methods, vec![Method::VisualTcav, Method::Tcav]);
        assert_eq!(cfg.providers[0].label(), "Flux");
        assert_eq!(cfg.generation.count, 200);
        assert!(cfg.providers[0].generator().is_err());
    }

    #[test]
    fn adapters_parse() {
        let text = format!(
            "{MINIMAL}\n[editor]\nid = \"blur\"\nadapter = {{ kind = \"blur\", strength = 0.5 }}\n"
        )
        .replace(
            "label = \"Flux\"",
            "label = \"Flux\"\nadapter = { kind = \"mock\" }",
        );
        let cfg = RunConfig::from_toml(&text, Path::new(".")).unwrap();
        assert_eq!(
            cfg.providers[0].adapter,
            Some(AdapterConfig::Mock { diversity: 1.0 })
        );
        assert_eq!(cfg.providers[0].generator().unwrap().id(), "flux");
        assert_eq!(cfg.editor.as_ref().unwrap().editor().unwrap().id(), "blur");
    }

    #[test]
    fn rejects_bad_configs() {
        let no_weights = MINIMAL.replace("weights = \"w.json\"", "");
        assert!(matches!(
            RunConfig::from_toml(&no_weights, Path::new(".")),
            Err(ReportError::Config(_))
        ));
        let unknown = format!("{MINIMAL}\nbogus = 1\n");
        assert!(RunConfig::from_toml(&unknown, Path::new(".")).is_err());
    }
}
