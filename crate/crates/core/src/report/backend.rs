//! Where a run gets activations, gradients, attributions and probabilities:
//! a live [`ModelAdapter`] or tensors exported by an external framework.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array4;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::catalog::ImageSet;
use crate::extract::{
    self, read_activation_store, write_activation_store, ActivationKey, ActivationSet,
    AttributionMap, ClassProbabilities, ExtractError, GradientSet, IgConfig, ModelAdapter,
    TargetScalar,
};
use crate::importance::{attributions_for_activations, ImportanceError};

use super::ReportError;

pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;
    /// Changes whenever the model's outputs could change.
    fn fingerprint(&self) -> String;
    fn class_count(&self) -> usize;
    fn activations(&self, layer: &str, set: &ImageSet) -> Result<ActivationSet, ReportError>;
    fn gradients(
        &self,
        acts: &ActivationSet,
        class: usize,
        target: TargetScalar,
    ) -> Result<GradientSet, ReportError>;
    fn attributions(
        &self,
        acts: &ActivationSet,
        class: usize,
        ig: &IgConfig,
    ) -> Result<Vec<AttributionMap>, ReportError>;
    fn probabilities(
        &self,
        set: &ImageSet,
        class: usize,
    ) -> Result<ClassProbabilities, ReportError>;
}

/// File-name-safe rendering of a set key.
pub fn key_slug(key: &crate::catalog::SetKey) -> String {
    key.to_string()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn check_order(expected: &[PathBuf], found: &[PathBuf], what: &str) -> Result<(), ReportError> {
    let names = |ps: &[PathBuf]| {
        ps.iter()
            .map(|p| p.file_name().map(|n| n.to_os_string()))
            .collect::<Vec<_>>()
    };
    if names(expected) != names(found) {
        return Err(ReportError::Extract(ExtractError::Misaligned(format!(
            "{what}: stored image order does not match the image set"
        ))));
    }
    Ok(())
}

// ---- live --------------------------------------------------------------------

/// Runs the adapter, caching activation tensors under `cache_dir`.
pub struct LiveBackend {
    adapter: Arc<dyn ModelAdapter>,
    fingerprint: String,
    cache_dir: Option<PathBuf>,
}

impl LiveBackend {
    pub fn new(
        adapter: Arc<dyn ModelAdapter>,
        fingerprint: String,
        cache_dir: Option<PathBuf>,
    ) -> Self {
        Self {
            adapter,
            fingerprint,
            cache_dir,
        }
    }

    pub fn adapter(&self) -> &dyn ModelAdapter {
        self.adapter.as_ref()
    }
}

impl Backend for LiveBackend {
    fn model_id(&self) -> &str {
        self.adapter.model_id()
    }
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
    fn class_count(&self) -> usize {
        self.adapter.class_count()
    }

    fn activations(&self, layer: &str, set: &ImageSet) -> Result<ActivationSet, ReportError> {
        let Some(cache) = &self.cache_dir else {
            return Ok(extract::extract_activations(
                self.adapter.as_ref(),
                layer,
                set,
                32,
            )?);
        };
        let prep = extract::preprocessing_hash(self.adapter.as_ref(), &set.paths)?;
        let mut h = Sha256::new();
        h.update(self.fingerprint.as_bytes());
        h.update(prep.as_bytes());
        h.update(layer.as_bytes());
        let tag = hex::encode(h.finalize());
        let stem = cache.join(self.model_id()).join(layer).join(format!(
            "{}-{}",
            key_slug(&set.key),
            &tag[..16]
        ));
        if let Ok((acts, manifest)) = read_activation_store(&stem) {
            if manifest.preprocessing_hash == prep
                && acts.key.set == set.key
                && acts.image_order == set.paths
            {
                return Ok(acts);
            }
        }
        let acts = extract::extract_activations(self.adapter.as_ref(), layer, set, 32)?;
        write_activation_store(&stem, &acts, &prep)?;
        Ok(acts)
    }

    fn gradients(
        &self,
        acts: &ActivationSet,
        class: usize,
        target: TargetScalar,
    ) -> Result<GradientSet, ReportError> {
        Ok(extract::gradients_for_activations(
            self.adapter.as_ref(),
            acts,
            class,
            target,
        )?)
    }

    fn attributions(
        &self,
        acts: &ActivationSet,
        class: usize,
        ig: &IgConfig,
    ) -> Result<Vec<AttributionMap>, ReportError> {
        attributions_for_activations(self.adapter.as_ref(), acts, class, ig).map_err(|e| match e {
            ImportanceError::Extract(x) => ReportError::Extract(x),
            other => ReportError::Importance(other),
        })
    }

    fn probabilities(
        &self,
        set: &ImageSet,
        class: usize,
    ) -> Result<ClassProbabilities, ReportError> {
        Ok(extract::class_probability(
            self.adapter.as_ref(),
            set,
            class,
        )?)
    }
}

// ---- precomputed ---------------------------------------------------------------

/// Tensors exported by an external framework, laid out under `root`:
///
/// - `<layer>/<set>`: activations, in the activation-store format;
/// - `<layer>/<set>@grad-<class>`: class-logit gradients, same format;
/// - `<layer>/<set>@ig-<class>`: integrated-gradient attributions, same format;
/// - `probabilities/<set>.json`: `{"image_order": [...], "probabilities": [[p_0, ..], ..]}`.
///
/// `<set>` is [`key_slug`] of the set key.
pub struct StoreBackend {
    model_id: String,
    root: PathBuf,
    class_count: usize,
}

#[derive(Deserialize)]
struct ProbabilityFile {
    image_order: Vec<PathBuf>,
    probabilities: Vec<Vec<f64>>,
}

impl StoreBackend {
    pub fn new(model_id: impl Into<String>, root: impl Into<PathBuf>, class_count: usize) -> Self {
        Self {
            model_id: model_id.into(),
            root: root.into(),
            class_count,
        }
    }

    fn tensor(
        &self,
        stem: &Path,
        key: &ActivationKey,
        order: &[PathBuf],
        what: &str,
    ) -> Result<Array4<f64>, ReportError> {
        let (stored, _) = read_activation_store(stem)?;
        if stored.key.layer != key.layer {
            return Err(ReportError::Extract(ExtractError::Misaligned(format!(
                "{what}: layer {}",
                stored.key.layer
            ))));
        }
        check_order(order, &stored.image_order, what)?;
        Ok(stored.tensors)
    }

    fn stem(&self, layer: &str, key: &crate::catalog::SetKey, suffix: &str) -> PathBuf {
        self.root
            .join(layer)
            .join(format!("{}{suffix}", key_slug(key)))
    }
}

impl Backend for StoreBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model_id.as_bytes());
        h.update(self.root.display().to_string().as_bytes());
        hex::encode(h.finalize())
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn activations(&self, layer: &str, set: &ImageSet) -> Result<ActivationSet, ReportError> {
        let key = ActivationKey {
            set: set.key.clone(),
            model_id: self.model_id.clone(),
            layer: layer.to_string(),
        };
        let tensors = self.tensor(
            &self.stem(layer, &set.key, ""),
            &key,
            &set.paths,
            "activations",
        )?;
        Ok(ActivationSet {
            key,
            tensors,
            image_order: set.paths.clone(),
        })
    }

    fn gradients(
        &self,
        acts: &ActivationSet,
        class: usize,
        target: TargetScalar,
    ) -> Result<GradientSet, ReportError> {
        if target != TargetScalar::Logit {
            return Err(ReportError::Config(
                "stored gradients are class-logit gradients".into(),
            ));
        }
        let stem = self.stem(&acts.key.layer, &acts.key.set, &format!("@grad-{class}"));
        let tensors = self.tensor(&stem, &acts.key, &acts.image_order, "gradients")?;
        if tensors.shape() != acts.tensors.shape() {
            return Err(ReportError::Extract(ExtractError::Shape(
                "gradients do not match activations".into(),
            )));
        }
        Ok(GradientSet {
            key: acts.key.clone(),
            class_id: class,
            target,
            tensors,
        })
    }

    fn attributions(
        &self,
        acts: &ActivationSet,
        class: usize,
        _ig: &IgConfig,
    ) -> Result<Vec<AttributionMap>, ReportError> {
        let stem = self.stem(&acts.key.layer, &acts.key.set, &format!("@ig-{class}"));
        let tensors = self.tensor(&stem, &acts.key, &acts.image_order, "attributions")?;
        if tensors.shape() != acts.tensors.shape() {
            return Err(ReportError::Extract(ExtractError::Shape(
                "attributions do not match activations".into(),
            )));
        }
        Ok(tensors
            .outer_iter()
            .map(|a| AttributionMap {
                attributions: a.to_owned(),
                target_delta: f64::NAN,
                completeness_residual: f64::NAN,
            })
            .collect())
    }

    fn probabilities(
        &self,
        set: &ImageSet,
        class: usize,
    ) -> Result<ClassProbabilities, ReportError> {
        if class >= self.class_count {
            return Err(ExtractError::InvalidClass {
                class,
                class_count: self.class_count,
            }
            .into());
        }
        let path = self
            .root
            .join("probabilities")
            .join(format!("{}.json", key_slug(&set.key)));
        let bytes = std::fs::read(&path).map_err(ExtractError::from)?;
        let file: ProbabilityFile =
            serde_json::from_slice(&bytes).map_err(|e| ExtractError::Store {
                path: path.clone(),
                message: e.to_string(),
            })?;
        check_order(&set.paths, &file.image_order, "probabilities")?;
        let values = file
            .probabilities
            .iter()
            .map(|row| {
                row.get(class).copied().ok_or_else(|| ExtractError::Store {
                    path: path.clone(),
                    message: format!("row has {} classes", row.len()),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if values.is_empty() {
            return Err(ExtractError::Empty.into());
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(ClassProbabilities {
            class_id: class,
            values,
            mean,
        })
    }
}
