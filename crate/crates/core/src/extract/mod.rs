//! Classifier adapters: layer activations, class probabilities, class-score
//! gradients at a layer and integrated gradients in activation space.

mod store;
pub mod toy;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use ndarray::{Array1, Array3, Array4, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{ImageSet, SetKey};

pub use store::{read_activation_store, read_manifest, write_activation_store, StoreManifest};
pub use toy::ToyCnn;

/// One image's activations at a layer, laid out `(h, w, C)`.
pub type FeatureMap = Array3<f64>;

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("model `{model}` has no layer `{layer}`")]
    UnknownLayer { model: String, layer: String },
    #[error("class {class} out of range for {class_count} classes")]
    InvalidClass { class: usize, class_count: usize },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("integrated gradients need at least one step")]
    InvalidSteps,
    #[error("baseline shape {got:?} does not match activation shape {expected:?}")]
    BaselineShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image sets are not aligned: {0}")]
    Misaligned(String),
    #[error("no images")]
    Empty,
    #[error("activation store {path}: {message}")]
    Store { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// `(h, w, C)` for the adapter's fixed input size.
    pub shape: (usize, usize, usize),
}

/// Scalar whose gradient is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetScalar {
    /// Pre-softmax class score.
    #[default]
    Logit,
    Softmax,
}

/// A classifier split at named cut points.
///
/// Implementors provide the forward pass to a layer, the head from that
/// layer to logits, and the vector-Jacobian product of the head.
pub trait ModelAdapter: Send + Sync {
    fn model_id(&self) -> &str;
    fn layers(&self) -> &[LayerSpec];
    /// `(H, W)` in pixels.
    fn input_size(&self) -> (usize, usize);
    fn class_count(&self) -> usize;

    /// Forward an input tensor `(H, W, 3)` to a layer.
    fn layer_activations(
        &self,
        input: &Array3<f64>,
        layer: &str,
    ) -> Result<FeatureMap, ExtractError>;
    /// Run the rest of the network from a layer's activations.
    fn logits_from_layer(&self, layer: &str, act: &FeatureMap)
        -> Result<Array1<f64>, ExtractError>;
    /// `upstream^T · d(logits)/d(act)`, shaped like `act`.
    fn backward_from_layer(
        &self,
        layer: &str,
        act: &FeatureMap,
        upstream: ArrayView1<f64>,
    ) -> Result<FeatureMap, ExtractError>;

    fn logits(&self, input: &Array3<f64>) -> Result<Array1<f64>, ExtractError>;

    /// Identifier of the preprocessing recipe, recorded in activation stores.
    fn preprocessing_id(&self) -> String {
        let (h, w) = self.input_size();
        format!("resize-triangle-{h}x{w}/rgb/scale-1-255")
    }

    /// Resize to the input size and scale RGB to [0, 1].
    fn preprocess(&self, img: &DynamicImage) -> Array3<f64> {
        let (h, w) = self.input_size();
        let rgb = if img.width() as usize == w && img.height() as usize == h {
            img.to_rgb8()
        } else {
            img.resize_exact(w as u32, h as u32, FilterType::Triangle)
                .to_rgb8()
        };
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        })
    }

    fn layer(&self, name: &str) -> Result<&LayerSpec, ExtractError> {
        self.layers()
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| ExtractError::UnknownLayer {
                model: self.model_id().to_string(),
                layer: name.to_string(),
            })
    }

    fn check_class(&self, class: usize) -> Result<(), ExtractError> {
        if class < self.class_count() {
            Ok(())
        } else {
            Err(ExtractError::InvalidClass {
                class,
                class_count: self.class_count(),
            })
        }
    }
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Upstream vector for the chosen target given the logits at the point.
fn target_upstream(logits: &Array1<f64>, class: usize, target: TargetScalar) -> Array1<f64> {
    match target {
        TargetScalar::Logit => {
            let mut up = Array1::zeros(logits.len());
            up[class] = 1.0;
            up
        }
        TargetScalar::Softmax => {
            // d p_k / d z_j = p_k (delta_kj - p_j)
            let p = softmax(logits.view());
            let pk = p[class];
            let mut up = p.mapv(|pj| -pk * pj);
            up[class] += pk;
            up
        }
    }
}

fn target_value(logits: &Array1<f64>, class: usize, target: TargetScalar) -> f64 {
    match target {
        TargetScalar::Logit => logits[class],
        TargetScalar::Softmax => softmax(logits.view())[class],
    }
}

/// Key of an activation tensor: which images, which model, which layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivationKey {
    pub set: SetKey,
    pub model_id: String,
    pub layer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSet {
    pub key: ActivationKey,
    /// `N × h × w × C`.
    pub tensors: Array4<f64>,
    pub image_order: Vec<PathBuf>,
}

impl ActivationSet {
    pub fn len(&self) -> usize {
        self.tensors.len_of(Axis(0))
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// `(h, w, C)`.
    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let s = self.tensors.shape();
        (s[1], s[2], s[3])
    }
    pub fn map(&self, i: usize) -> FeatureMap {
        self.tensors.index_axis(Axis(0), i).to_owned()
    }
    /// A new set made of the rows at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> ActivationSet {
        ActivationSet {
            key: self.key.clone(),
            tensors: self.tensors.select(Axis(0), indices),
            image_order: indices
                .iter()
                .map(|&i| self.image_order[i].clone())
                .collect(),
        }
    }
    /// Build from per-image maps; all maps must share a shape.
    pub fn from_maps(
        key: ActivationKey,
        maps: &[FeatureMap],
        image_order: Vec<PathBuf>,
    ) -> Result<Self, ExtractError> {
        let tensors = stack_maps(maps)?;
        if image_order.len() != maps.len() {
            return Err(ExtractError::Shape(format!(
                "{} maps but {} image paths",
                maps.len(),
                image_order.len()
            )));
        }
        Ok(Self {
            key,
            tensors,
            image_order,
        })
    }
}

pub(crate) fn stack_maps(maps: &[FeatureMap]) -> Result<Array4<f64>, ExtractError> {
    let first = maps.first().ok_or(ExtractError::Empty)?;
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    if maps.iter().any(|m| m.shape() != first.shape()) {
        return Err(ExtractError::Shape("feature maps differ in shape".into()));
    }
    ndarray::stack(Axis(0), &views).map_err(|e| ExtractError::Shape(e.to_string()))
}

/// Per-image gradients of the class target with respect to a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub key: ActivationKey,
    pub class_id: usize,
    pub target: TargetScalar,
    pub tensors: Array4<f64>,
}

impl GradientSet {
    pub fn len(&self) -> usize {
        self.tensors.len_of(Axis(0))
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-image class probabilities and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub class_id: usize,
    pub values: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub enum Baseline {
    /// All-zero activation tensor.
    #[default]
    Zero,
    /// The activation itself; attributions vanish.
    Input,
    Custom(FeatureMap),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    pub steps: usize,
    pub baseline: Baseline,
    pub target: TargetScalar,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            baseline: Baseline::Zero,
            target: TargetScalar::Logit,
        }
    }
}

/// Integrated-gradient attributions at a layer for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// `(h, w, C)`.
    pub attributions: FeatureMap,
    /// `target(a) - target(a0)`.
    pub target_delta: f64,
    /// `|sum(attributions) - target_delta|`.
    pub completeness_residual: f64,
}

// ---- image loading -------------------------------------------------------

pub fn load_image(path: &Path) -> Result<DynamicImage, ExtractError> {
    image::ImageReader::open(path)
        .map_err(|e| ExtractError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| ExtractError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .decode()
        .map_err(|e| ExtractError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Decode and preprocess every path, in order.
pub fn load_inputs(
    adapter: &dyn ModelAdapter,
    paths: &[PathBuf],
) -> Result<Vec<Array3<f64>>, ExtractError> {
    paths
        .par_iter()
        .map(|p| Ok(adapter.preprocess(&load_image(p)?)))
        .collect()
}

/// Hash of the model, preprocessing recipe and image bytes. Used as a cache key.
pub fn preprocessing_hash(
    adapter: &dyn ModelAdapter,
    paths: &[PathBuf],
) -> Result<String, ExtractError> {
    let mut h = Sha256::new();
    h.update(adapter.model_id().as_bytes());
    h.update(adapter.preprocessing_id().as_bytes());
    for p in paths {
        h.update(std::fs::read(p)?);
    }
    Ok(hex::encode(h.finalize()))
}

// ---- operations ----------------------------------------------------------

/// Activations for preprocessed inputs, in order.
pub fn activations_for_inputs(
    adapter: &dyn ModelAdapter,
    layer: &str,
    inputs: &[Array3<f64>],
) -> Result<Vec<FeatureMap>, ExtractError> {
    adapter.layer(layer)?;
    inputs
        .par_iter()
        .map(|x| adapter.layer_activations(x, layer))
        .collect()
}

/// Layer activations for an image set, processed `batch` images at a time.
pub fn extract_activations(
    adapter: &dyn ModelAdapter,
    layer: &str,
    images: &ImageSet,
    batch: usize,
) -> Result<ActivationSet, ExtractError> {
    adapter.layer(layer)?;
    if images.is_empty() {
        return Err(ExtractError::Empty);
    }
    let mut maps = Vec::with_capacity(images.len());
    for chunk in images.paths.chunks(batch.max(1)) {
        let inputs = load_inputs(adapter, chunk)?;
        maps.extend(activations_for_inputs(adapter, layer, &inputs)?);
    }
    let key = ActivationKey {
        set: images.key.clone(),
        model_id: adapter.model_id().to_string(),
        layer: layer.to_string(),
    };
    ActivationSet::from_maps(key, &maps, images.paths.clone())
}

pub fn probabilities_for_inputs(
    adapter: &dyn ModelAdapter,
    inputs: &[Array3<f64>],
    class: usize,
) -> Result<ClassProbabilities, ExtractError> {
    adapter.check_class(class)?;
    if inputs.is_empty() {
        return Err(ExtractError::Empty);
    }
    let values: Vec<f64> = inputs
        .par_iter()
        .map(|x| Ok(softmax(adapter.logits(x)?.view())[class]))
        .collect::<Result<_, ExtractError>>()?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(ClassProbabilities {
        class_id: class,
        values,
        mean,
    })
}

/// Softmax probability of `class` per image, plus the set mean.
pub fn class_probability(
    adapter: &dyn ModelAdapter,
    images: &ImageSet,
    class: usize,
) -> Result<ClassProbabilities, ExtractError> {
    adapter.check_class(class)?;
    probabilities_for_inputs(adapter, &load_inputs(adapter, &images.paths)?, class)
}

/// Gradient of the class target with respect to one activation map.
pub fn target_gradient(
    adapter: &dyn ModelAdapter,
    layer: &str,
    act: &FeatureMap,
    class: usize,
    target: TargetScalar,
) -> Result<(f64, FeatureMap), ExtractError> {
    adapter.check_class(class)?;
    let logits = adapter.logits_from_layer(layer, act)?;
    let up = target_upstream(&logits, class, target);
    let grad = adapter.backward_from_layer(layer, act, up.view())?;
    Ok((target_value(&logits, class, target), grad))
}

pub fn gradients_for_activations(
    adapter: &dyn ModelAdapter,
    acts: &ActivationSet,
    class: usize,
    target: TargetScalar,
) -> Result<GradientSet, ExtractError> {
    adapter.check_class(class)?;
    let maps: Vec<FeatureMap> = (0..acts.len())
        .into_par_iter()
        .map(|i| {
            target_gradient(adapter, &acts.key.layer, &acts.map(i), class, target).map(|(_, g)| g)
        })
        .collect::<Result<_, _>>()?;
    Ok(GradientSet {
        key: acts.key.clone(),
        class_id: class,
        target,
        tensors: stack_maps(&maps)?,
    })
}

/// Per-image gradient of the class target with respect to `layer`.
pub fn class_gradients_at_layer(
    adapter: &dyn ModelAdapter,
    layer: &str,
    images: &ImageSet,
    class: usize,
    target: TargetScalar,
) -> Result<GradientSet, ExtractError> {
    adapter.check_class(class)?;
    let acts = extract_activations(adapter, layer, images, 32)?;
    gradients_for_activations(adapter, &acts, class, target)
}

/// Integrated gradients in activation space:
/// `(a - a0) ⊙ mean_{i=1..m} grad(a0 + (i/m)(a - a0))`.
pub fn integrated_gradients(
    adapter: &dyn ModelAdapter,
    layer: &str,
    act: &FeatureMap,
    class: usize,
    config: &IgConfig,
) -> Result<AttributionMap, ExtractError> {
    if config.steps == 0 {
        return Err(ExtractError::InvalidSteps);
    }
    adapter.check_class(class)?;
    let baseline = match &config.baseline {
        Baseline::Zero => FeatureMap::zeros(act.raw_dim()),
        Baseline::Input => act.clone(),
        Baseline::Custom(b) => {
            if b.shape() != act.shape() {
                return Err(ExtractError::BaselineShape {
                    expected: act.shape().to_vec(),
                    got: b.shape().to_vec(),
                });
            }
            b.clone()
        }
    };
    let diff = act - &baseline;
    let m = config.steps;
    let grads: Vec<FeatureMap> = (1..=m)
        .into_par_iter()
        .map(|i| {
            let point = &baseline + &(&diff * (i as f64 / m as f64));
            target_gradient(adapter, layer, &point, class, config.target).map(|(_, g)| g)
        })
        .collect::<Result<_, _>>()?;
    let mut mean_grad = FeatureMap::zeros(act.raw_dim());
    for g in &grads {
        mean_grad += g;
    }
    mean_grad /= m as f64;
    let attributions = &diff * &mean_grad;

    let upper = target_value(
        &adapter.logits_from_layer(layer, act)?,
        class,
        config.target,
    );
    let lower = target_value(
        &adapter.logits_from_layer(layer, &baseline)?,
        class,
        config.target,
    );
    let target_delta = upper - lower;
    let completeness_residual = (attributions.sum() - target_delta).abs();
    Ok(AttributionMap {
        attributions,
        target_delta,
        completeness_residual,
    })
}

/// Integrated gradients for one image file.
pub fn integrated_gradients_at_layer(
    adapter: &dyn ModelAdapter,
    layer: &str,
    image: &Path,
    class: usize,
    config: &IgConfig,
) -> Result<AttributionMap, ExtractError> {
    let input = adapter.preprocess(&load_image(image)?);
    let act = adapter.layer_activations(&input, layer)?;
    integrated_gradients(adapter, layer, &act, class, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(array![1.0, 2.0, 3.0, -1000.0].view());
        assert!((p.sum() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_upstream_matches_jacobian_row() {
        let z = array![0.3, -0.2, 1.1];
        let up = target_upstream(&z, 2, TargetScalar::Softmax);
        let h = 1e-6;
        for j in 0..3 {
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let fd = (softmax(zp.view())[2] - softmax(zm.view())[2]) / (2.0 * h);
            assert!((fd - up[j]).abs() < 1e-9);
        }
    }
}
