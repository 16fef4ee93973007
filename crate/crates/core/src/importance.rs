//! Concept importance (TCAV sign score and Visual-TCAV attribution score)
//! and the delta metrics built on it.

use std::fmt;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::ImageSet;
use crate::cav::{Cav, Pooling};
use crate::extract::{
    self, ActivationSet, AttributionMap, ExtractError, FeatureMap, GradientSet, IgConfig,
    ModelAdapter,
};

#[derive(Debug, thiserror::Error)]
pub enum ImportanceError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no images to score")]
    Empty,
    #[error("zero-norm CAV for `{0}`")]
    ZeroNorm(String),
    #[error("CAV for `{0}` has no positive component; pooled weights are undefined")]
    NoPositiveWeight(String),
    #[error("{0} requires a gap-pooled CAV")]
    NeedsGap(&'static str),
    #[error("record keys differ: {0}")]
    KeyMismatch(String),
    #[error("image sets are not aligned: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Extract(#[from] ExtractError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tcav,
    VisualTcav,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Tcav => "tcav",
            Method::VisualTcav => "visual-tcav",
        })
    }
}

impl Method {
    /// The pooling each method consumes.
    pub fn pooling(self) -> Pooling {
        match self {
            Method::Tcav => Pooling::Flatten,
            Method::VisualTcav => Pooling::Gap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inputs {
    Original,
    Removed,
}

impl fmt::Display for Inputs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Inputs::Original => "original",
            Inputs::Removed => "removed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub concept: String,
    pub class: String,
    pub model_id: String,
    pub layer: String,
    /// `real` or `gen:<provider>`.
    pub cav_source: String,
    pub inputs: Inputs,
    pub method: Method,
    pub score: f64,
    pub replicate: Option<usize>,
}

/// Per-image `(h, w)` map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMap {
    pub values: Array2<f64>,
}

fn unit(cav: &Cav) -> Result<Array1<f64>, ImportanceError> {
    let n = cav.norm();
    if n > 0.0 && n.is_finite() {
        Ok(&cav.vector / n)
    } else {
        Err(ImportanceError::ZeroNorm(cav.provenance.concept.clone()))
    }
}

/// Fraction of images whose pooled gradient has a strictly positive dot
/// product with the CAV.
pub fn tcav_score(cav: &Cav, grads: &GradientSet) -> Result<f64, ImportanceError> {
    if grads.is_empty() {
        return Err(ImportanceError::Empty);
    }
    let positive = grads
        .tensors
        .outer_iter()
        .map(|g| {
            let pooled = crate::cav::pool_map(g, cav.pooling);
            if pooled.len() != cav.vector.len() {
                return Err(ImportanceError::Dimension(format!(
                    "gradient pools to {} values, CAV has {}",
                    pooled.len(),
                    cav.vector.len()
                )));
            }
            Ok(pooled.dot(&cav.vector) > 0.0)
        })
        .collect::<Result<Vec<bool>, _>>()?
        .into_iter()
        .filter(|&p| p)
        .count();
    Ok(positive as f64 / grads.len() as f64)
}

/// `relu(a_hw · cav/|cav|)`, divided by its maximum when that is positive.
pub fn concept_map(cav: &Cav, act: &FeatureMap) -> Result<ConceptMap, ImportanceError> {
    if cav.pooling != Pooling::Gap {
        return Err(ImportanceError::NeedsGap("concept_map"));
    }
    let (h, w, c) = act.dim();
    if c != cav.vector.len() {
        return Err(ImportanceError::Dimension(format!(
            "activation has {c} channels, CAV has {}",
            cav.vector.len()
        )));
    }
    let dir = unit(cav)?;
    let raw = act
        .to_shape((h * w, c))
        .expect("reshape")
        .dot(&dir)
        .mapv(|v| v.max(0.0));
    let max = raw.iter().copied().fold(0.0, f64::max);
    let values = if max > 0.0 {
        raw / max
    } else {
        raw.mapv(|_| 0.0)
    };
    Ok(ConceptMap {
        values: values.into_shape_with_order((h, w)).expect("reshape"),
    })
}

/// Convex channel weights `relu(cav) / sum(relu(cav))`.
pub fn pooled_weights(cav: &Cav) -> Result<Array1<f64>, ImportanceError> {
    let pos = cav.vector.mapv(|v| v.max(0.0));
    let total = pos.sum();
    if total > 0.0 && total.is_finite() {
        Ok(pos / total)
    } else {
        Err(ImportanceError::NoPositiveWeight(
            cav.provenance.concept.clone(),
        ))
    }
}

/// Per-image Visual-TCAV score. Attributions are divided by their total
/// positive mass, combined across channels with the pooled weights, masked by
/// the concept map and summed over locations.
pub fn visual_tcav_attribution(
    cav: &Cav,
    ig: &AttributionMap,
    act: &FeatureMap,
) -> Result<f64, ImportanceError> {
    if ig.attributions.shape() != act.shape() {
        return Err(ImportanceError::Dimension(format!(
            "attributions {:?} vs activations {:?}",
            ig.attributions.shape(),
            act.shape()
        )));
    }
    let weights = pooled_weights(cav)?;
    let map = concept_map(cav, act)?;
    let positive_mass: f64 = ig.attributions.iter().filter(|&&v| v > 0.0).sum();
    if positive_mass <= 0.0 {
        return Ok(0.0);
    }
    let (h, w, c) = act.dim();
    let spatial = ig
        .attributions
        .to_shape((h * w, c))
        .expect("reshape")
        .dot(&weights)
        / positive_mass;
    Ok(spatial
        .iter()
        .zip(map.values.iter())
        .map(|(s, m)| s * m)
        .sum())
}

/// Set-level score and the per-image values behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    pub score: f64,
    pub per_image: Vec<f64>,
}

/// Score precomputed activations of the class images.
pub fn score_activations(
    adapter: &dyn ModelAdapter,
    acts: &ActivationSet,
    cav: &Cav,
    class: usize,
    method: Method,
    config: &IgConfig,
) -> Result<SetScore, ImportanceError> {
    if acts.is_empty() {
        return Err(ImportanceError::Empty);
    }
    if acts.key.layer != cav.provenance.layer || acts.key.model_id != cav.provenance.model_id {
        return Err(ImportanceError::KeyMismatch(format!(
            "CAV from {}@{} applied to {}@{}",
            cav.provenance.model_id, cav.provenance.layer, acts.key.model_id, acts.key.layer
        )));
    }
    match method {
        Method::Tcav => {
            let grads = extract::gradients_for_activations(adapter, acts, class, config.target)?;
            let per_image: Vec<f64> = grads
                .tensors
                .outer_iter()
                .map(|g| {
                    if crate::cav::pool_map(g, cav.pooling).dot(&cav.vector) > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Ok(SetScore {
                score: tcav_score(cav, &grads)?,
                per_image,
            })
        }
        Method::VisualTcav => {
            pooled_weights(cav)?;
            let attributions = attributions_for_activations(adapter, acts, class, config)?;
            visual_tcav_set_score(cav, &attributions, acts)
        }
    }
}

/// Integrated gradients for every image of a set. They do not depend on the
/// CAV, so callers scoring many CAVs on one set can compute them once.
pub fn attributions_for_activations(
    adapter: &dyn ModelAdapter,
    acts: &ActivationSet,
    class: usize,
    config: &IgConfig,
) -> Result<Vec<AttributionMap>, ImportanceError> {
    (0..acts.len())
        .into_par_iter()
        .map(|i| {
            Ok(extract::integrated_gradients(
                adapter,
                &acts.key.layer,
                &acts.map(i),
                class,
                config,
            )?)
        })
        .collect()
}

/// Mean of per-image Visual-TCAV scores, clamped to `[0, 1]`.
pub fn visual_tcav_set_score(
    cav: &Cav,
    attributions: &[AttributionMap],
    acts: &ActivationSet,
) -> Result<SetScore, ImportanceError> {
    if acts.is_empty() {
        return Err(ImportanceError::Empty);
    }
    if attributions.len() != acts.len() {
        return Err(ImportanceError::Dimension(format!(
            "{} attribution maps for {} images",
            attributions.len(),
            acts.len()
        )));
    }
    let per_image: Vec<f64> = attributions
        .iter()
        .enumerate()
        .map(|(i, ig)| visual_tcav_attribution(cav, ig, &acts.map(i)))
        .collect::<Result<_, _>>()?;
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(SetScore {
        score: mean.clamp(0.0, 1.0),
        per_image,
    })
}

/// Extract the class images at the CAV's layer and score them.
pub fn concept_importance(
    cav: &Cav,
    class_images: &ImageSet,
    adapter: &dyn ModelAdapter,
    class_name: &str,
    class: usize,
    method: Method,
    config: &IgConfig,
) -> Result<ImportanceRecord, ImportanceError> {
    if class_images.is_empty() {
        return Err(ImportanceError::Empty);
    }
    let acts = extract::extract_activations(adapter, &cav.provenance.layer, class_images, 32)?;
    let scored = score_activations(adapter, &acts, cav, class, method, config)?;
    let inputs = match class_images.key.source {
        crate::catalog::Source::Removed(_) => Inputs::Removed,
        _ => Inputs::Original,
    };
    Ok(ImportanceRecord {
        concept: cav.provenance.concept.clone(),
        class: class_name.to_string(),
        model_id: adapter.model_id().to_string(),
        layer: cav.provenance.layer.clone(),
        cav_source: cav.provenance.source.clone(),
        inputs,
        method,
        score: scored.score,
        replicate: None,
    })
}

fn same_cell(a: &ImportanceRecord, b: &ImportanceRecord) -> Result<(), ImportanceError> {
    let fields = [
        ("concept", &a.concept, &b.concept),
        ("class", &a.class, &b.class),
        ("model", &a.model_id, &b.model_id),
        ("layer", &a.layer, &b.layer),
    ];
    for (name, x, y) in fields {
        if x != y {
            return Err(ImportanceError::KeyMismatch(format!("{name}: {x} vs {y}")));
        }
    }
    if a.method != b.method {
        return Err(ImportanceError::KeyMismatch(format!(
            "method: {} vs {}",
            a.method, b.method
        )));
    }
    Ok(())
}

/// `|s_gen - s_real|` for records of the same cell and input state.
pub fn importance_delta(
    s_gen: &ImportanceRecord,
    s_real: &ImportanceRecord,
) -> Result<f64, ImportanceError> {
    same_cell(s_gen, s_real)?;
    if s_gen.inputs != s_real.inputs {
        return Err(ImportanceError::KeyMismatch(format!(
            "inputs: {} vs {}",
            s_gen.inputs, s_real.inputs
        )));
    }
    Ok((s_gen.score - s_real.score).abs())
}

/// Signed `s - s_rm` for records that differ only in their input state.
pub fn removal_delta(
    s: &ImportanceRecord,
    s_rm: &ImportanceRecord,
) -> Result<f64, ImportanceError> {
    same_cell(s, s_rm)?;
    if s.cav_source != s_rm.cav_source || s.replicate != s_rm.replicate {
        return Err(ImportanceError::KeyMismatch(format!(
            "cav source {}#{:?} vs {}#{:?}",
            s.cav_source, s.replicate, s_rm.cav_source, s_rm.replicate
        )));
    }
    if s.inputs == s_rm.inputs {
        return Err(ImportanceError::KeyMismatch(
            "both records have the same input state".into(),
        ));
    }
    Ok(s.score - s_rm.score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityDrop {
    pub original_mean: f64,
    pub removed_mean: f64,
    /// `original_mean - removed_mean`; negative when editing raises the probability.
    pub delta: f64,
}

/// Removed images must pair one-to-one, by file stem, with the originals.
pub fn check_aligned(originals: &ImageSet, removed: &ImageSet) -> Result<(), ImportanceError> {
    if originals.len() != removed.len() {
        return Err(ImportanceError::Misaligned(format!(
            "{} originals vs {} removed",
            originals.len(),
            removed.len()
        )));
    }
    for (o, r) in originals.paths.iter().zip(&removed.paths) {
        if o.file_stem() != r.file_stem() {
            return Err(ImportanceError::Misaligned(format!(
                "{} paired with {}",
                o.display(),
                r.display()
            )));
        }
    }
    Ok(())
}

pub fn probability_drop(
    adapter: &dyn ModelAdapter,
    class: usize,
    originals: &ImageSet,
    removed: &ImageSet,
) -> Result<ProbabilityDrop, ImportanceError> {
    check_aligned(originals, removed)?;
    let o = extract::class_probability(adapter, originals, class)?;
    let r = extract::class_probability(adapter, removed, class)?;
    Ok(ProbabilityDrop {
        original_mean: o.mean,
        removed_mean: r.mean,
        delta: o.mean - r.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::SetKey;
    use crate::cav::CavProvenance;
    use crate::extract::{ActivationKey, TargetScalar};
    use ndarray::{array, Array3, Array4};

    fn cav(v: Array1<f64>, pooling: Pooling) -> Cav {
        Cav {
            vector: v,
            pooling,
            provenance: CavProvenance {
                concept: "striped".into(),
                source: "real".into(),
                model_id: "m".into(),
                layer: "l".into(),
                subset: "all".into(),
                seed: None,
            },
        }
    }

    fn grads(rows: &[[f64; 2]]) -> GradientSet {
        GradientSet {
            key: ActivationKey {
                set: SetKey::class("zebra"),
                model_id: "m".into(),
                layer: "l".into(),
            },
            class_id: 0,
            target: TargetScalar::Logit,
            tensors: Array4::from_shape_fn((rows.len(), 1, 1, 2), |(i, _, _, c)| rows[i][c]),
        }
    }

    #[test]
    fn tcav_sign_fractions() {
        let v = cav(array![1.0, 0.0], Pooling::Gap);
        assert_eq!(
            tcav_score(&v, &grads(&[[1.0, 0.0], [2.0, 5.0]])).unwrap(),
            1.0
        );
        assert_eq!(
            tcav_score(
                &v,
                &grads(&[[1.0, 0.0], [2.0, 5.0], [-1.0, 0.0], [0.0, 3.0]])
            )
            .unwrap(),
            0.5
        );
        assert!(matches!(
            tcav_score(&v, &grads(&[])),
            Err(ImportanceError::Empty)
        ));
        assert!(tcav_score(&cav(array![1.0], Pooling::Gap), &grads(&[[1.0, 0.0]])).is_err());
    }

    #[test]
    fn concept_map_examples() {
        let v = cav(array![1.0, 2.0], Pooling::Gap);
        let uniform = Array3::from_shape_fn((2, 3, 2), |(_, _, c)| v.vector[c]);
        assert!(concept_map(&v, &uniform)
            .unwrap()
            .values
            .iter()
            .all(|&x| (x - 1.0).abs() < 1e-15));

        let orth = Array3::from_shape_fn((2, 2, 2), |(_, _, c)| [2.0, -1.0][c]);
        assert!(concept_map(&v, &orth)
            .unwrap()
            .values
            .iter()
            .all(|&x| x == 0.0));

        let mut peaked = uniform.clone();
        peaked[[1, 2, 0]] *= 2.0;
        peaked[[1, 2, 1]] *= 2.0;
        let m = concept_map(&v, &peaked).unwrap().values;
        assert_eq!(m[[1, 2]], 1.0);
        assert!(m
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 5)
            .all(|(_, &x)| (x - 0.5).abs() < 1e-15));
    }

    fn ig(attr: Array3<f64>) -> AttributionMap {
        AttributionMap {
            attributions: attr,
            target_delta: 0.0,
            completeness_residual: 0.0,
        }
    }

    #[test]
    fn visual_tcav_examples() {
        let v = cav(array![1.0], Pooling::Gap);
        let act = Array3::from_elem((2, 2, 1), 1.0);
        assert_eq!(
            visual_tcav_attribution(&v, &ig(Array3::zeros((2, 2, 1))), &act).unwrap(),
            0.0
        );
        let attr = Array3::from_shape_vec((2, 2, 1), vec![0.3, 0.1, 0.2, 0.4]).unwrap();
        assert!((visual_tcav_attribution(&v, &ig(attr), &act).unwrap() - 1.0).abs() < 1e-15);

        let neg = cav(array![-1.0, 0.0], Pooling::Gap);
        assert!(matches!(
            visual_tcav_attribution(&neg, &ig(Array3::zeros((1, 1, 2))), &Array3::zeros((1, 1, 2))),
            Err(ImportanceError::NoPositiveWeight(c)) if c == "striped"
        ));
    }

    #[test]
    fn visual_tcav_mask_limits_capture() {
        // Activation responds at one of two locations; attribution is split evenly.
        let v = cav(array![1.0], Pooling::Gap);
        let act = Array3::from_shape_vec((1, 2, 1), vec![1.0, 0.0]).unwrap();
        let attr = Array3::from_shape_vec((1, 2, 1), vec![0.5, 0.5]).unwrap();
        assert!((visual_tcav_attribution(&v, &ig(attr), &act).unwrap() - 0.5).abs() < 1e-15);
    }

    fn record(score: f64, inputs: Inputs) -> ImportanceRecord {
        ImportanceRecord {
            concept: "striped".into(),
            class: "zebra".into(),
            model_id: "m".into(),
            layer: "l".into(),
            cav_source: "real".into(),
            inputs,
            method: Method::Tcav,
            score,
            replicate: None,
        }
    }

    #[test]
    fn deltas() {
        let a = record(0.7, Inputs::Original);
        assert_eq!(
            importance_delta(&a, &record(0.7, Inputs::Original)).unwrap(),
            0.0
        );
        let d = importance_delta(
            &record(0.2, Inputs::Original),
            &record(0.5, Inputs::Original),
        )
        .unwrap();
        assert!((d - 0.3).abs() < 1e-15);
        let mut other = record(0.5, Inputs::Original);
        other.layer = "x".into();
        assert!(importance_delta(&a, &other).is_err());

        let rm = record(0.4, Inputs::Removed);
        let fwd = removal_delta(&a, &rm).unwrap();
        assert_eq!(fwd, -removal_delta(&rm, &a).unwrap());
        assert!(removal_delta(&a, &a).is_err());
    }

    #[test]
    fn misaligned_sets_rejected() {
        let o = ImageSet {
            key: SetKey::class("zebra"),
            paths: vec!["a/x.png".into(), "a/y.png".into()],
            seed: None,
        };
        let r = ImageSet {
            key: SetKey::removed("zebra", "striped"),
            paths: vec!["b/y.png".into(), "b/x.png".into()],
            seed: None,
        };
        assert!(matches!(
            check_aligned(&o, &r),
            Err(ImportanceError::Misaligned(_))
        ));
        let mut ok = r.clone();
        ok.paths.reverse();
        check_aligned(&o, &ok).unwrap();
    }
}
