//! Concept activation vectors by difference of means, their cosine
//! alignment, intra-similarity curves, and the CLIP-embedding analogues.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView3, Axis};
use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{ImageSet, Subject};
use crate::extract::ActivationSet;
use crate::stats::MeanStd;

#[derive(Debug, thiserror::Error)]
pub enum CavError {
    #[error("activation sets disagree: {0}")]
    Mismatch(String),
    #[error("empty activation set `{0}`")]
    Empty(String),
    #[error("zero-norm CAV for `{0}`: concept and negative means coincide")]
    ZeroNorm(String),
    #[error("subset size {u} exceeds half of the set size {n}")]
    SubsetTooLarge { u: usize, n: usize },
    #[error("invalid curve request: {0}")]
    InvalidCurve(String),
    #[error("embedder failed on {path}: {message}")]
    Embedder { path: PathBuf, message: String },
    #[error("need at least {needed} images, got {got}")]
    TooFewImages { needed: usize, got: usize },
}

/// How a `(h, w, C)` map becomes a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Global average pooling over `(h, w)` to a C-vector.
    Gap,
    /// Row-major flattening to an `h·w·C` vector.
    Flatten,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Gap => "gap",
            Pooling::Flatten => "flatten",
        })
    }
}

pub fn pool_map(map: ArrayView3<f64>, pooling: Pooling) -> Array1<f64> {
    match pooling {
        Pooling::Gap => {
            let (h, w, c) = map.dim();
            map.to_shape((h * w, c))
                .expect("reshape")
                .mean_axis(Axis(0))
                .expect("non-empty map")
        }
        Pooling::Flatten => map.iter().copied().collect(),
    }
}

/// `N × D` matrix of pooled rows.
pub fn pooled_rows(set: &ActivationSet, pooling: Pooling) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = set
        .tensors
        .outer_iter()
        .map(|m| pool_map(m, pooling))
        .collect();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.outer_iter_mut().zip(rows) {
        dst.assign(&src);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CavProvenance {
    pub concept: String,
    pub source: String,
    pub model_id: String,
    pub layer: String,
    /// `all`, `bootstrap:<r>`, `subset:<u>:<rep>:<half>`, ...
    pub subset: String,
    pub seed: Option<u64>,
}

/// Unnormalized concept direction. The norm is positive by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub vector: Array1<f64>,
    pub pooling: Pooling,
    pub provenance: CavProvenance,
}

impl Cav {
    pub fn norm(&self) -> f64 {
        self.vector.dot(&self.vector).sqrt()
    }
    pub fn unit(&self) -> Array1<f64> {
        &self.vector / self.norm()
    }
    pub fn with_subset(mut self, subset: impl Into<String>, seed: Option<u64>) -> Self {
        self.provenance.subset = subset.into();
        self.provenance.seed = seed;
        self
    }
    /// Direction with the same provenance but a different vector.
    pub fn replaced(&self, vector: Array1<f64>) -> Result<Self, CavError> {
        check_norm(&vector, &self.provenance.concept)?;
        Ok(Self {
            vector,
            pooling: self.pooling,
            provenance: self.provenance.clone(),
        })
    }
}

fn check_norm(v: &Array1<f64>, concept: &str) -> Result<(), CavError> {
    let n = v.dot(v);
    if n > 0.0 && n.is_finite() {
        Ok(())
    } else {
        Err(CavError::ZeroNorm(concept.to_string()))
    }
}

fn subject_name(set: &ActivationSet) -> String {
    match &set.key.set.subject {
        Subject::Concept(c) | Subject::Class(c) => c.clone(),
        Subject::Negatives(_) => "negatives".into(),
    }
}

fn check_compatible(a: &ActivationSet, b: &ActivationSet) -> Result<(), CavError> {
    if a.key.model_id != b.key.model_id || a.key.layer != b.key.layer {
        return Err(CavError::Mismatch(format!(
            "{}@{} vs {}@{}",
            a.key.model_id, a.key.layer, b.key.model_id, b.key.layer
        )));
    }
    if a.spatial_shape() != b.spatial_shape() {
        return Err(CavError::Mismatch(format!(
            "shape {:?} vs {:?}",
            a.spatial_shape(),
            b.spatial_shape()
        )));
    }
    for s in [a, b] {
        if s.is_empty() {
            return Err(CavError::Empty(s.key.set.to_string()));
        }
    }
    Ok(())
}

fn mean_row(rows: &Array2<f64>, indices: Option<&[usize]>) -> Array1<f64> {
    match indices {
        None => rows.mean_axis(Axis(0)).expect("non-empty"),
        Some(idx) => {
            let mut acc = Array1::zeros(rows.ncols());
            for &i in idx {
                acc += &rows.row(i);
            }
            acc / idx.len() as f64
        }
    }
}

/// Difference of means: `mean(pooled pos) - mean(pooled neg)`.
pub fn compute_cav_dom(
    pos: &ActivationSet,
    neg: &ActivationSet,
    pooling: Pooling,
) -> Result<Cav, CavError> {
    check_compatible(pos, neg)?;
    let vector =
        mean_row(&pooled_rows(pos, pooling), None) - mean_row(&pooled_rows(neg, pooling), None);
    let concept = subject_name(pos);
    check_norm(&vector, &concept)?;
    Ok(Cav {
        vector,
        pooling,
        provenance: CavProvenance {
            concept,
            source: pos.key.set.source.to_string(),
            model_id: pos.key.model_id.clone(),
            layer: pos.key.layer.clone(),
            subset: "all".into(),
            seed: None,
        },
    })
}

fn cosine_raw(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &Cav, b: &Cav) -> Result<f64, CavError> {
    if a.pooling != b.pooling {
        return Err(CavError::Mismatch(format!(
            "pooling {} vs {}",
            a.pooling, b.pooling
        )));
    }
    if a.vector.len() != b.vector.len() {
        return Err(CavError::Mismatch(format!(
            "dimension {} vs {}",
            a.vector.len(),
            b.vector.len()
        )));
    }
    if a.provenance.model_id != b.provenance.model_id || a.provenance.layer != b.provenance.layer {
        return Err(CavError::Mismatch(
            "CAVs come from different model layers".into(),
        ));
    }
    check_norm(&a.vector, &a.provenance.concept)?;
    check_norm(&b.vector, &b.provenance.concept)?;
    Ok(cosine_raw(&a.vector, &b.vector))
}

/// Cosine between the generated-set CAV and the real-set CAV, both against `neg`.
pub fn representation_alignment(
    gen: &ActivationSet,
    real: &ActivationSet,
    neg: &ActivationSet,
    pooling: Pooling,
) -> Result<f64, CavError> {
    let v_gen = compute_cav_dom(gen, neg, pooling)?;
    let v_real = compute_cav_dom(real, neg, pooling)?;
    cosine_similarity(&v_gen, &v_real)
}

// ---- intra-similarity --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub u: usize,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraSimilarityCurve {
    pub points: Vec<CurvePoint>,
    pub source: String,
    pub pooling: Pooling,
    pub seed: u64,
}

/// Two disjoint uniform subsets of size `u`: draw `2u` indices without
/// replacement and split them in half.
pub fn sample_disjoint_pair(
    rng: &mut ChaCha8Rng,
    n: usize,
    u: usize,
) -> Result<(Vec<usize>, Vec<usize>), CavError> {
    if u == 0 || 2 * u > n {
        return Err(CavError::SubsetTooLarge { u, n });
    }
    let mut draw = index::sample(rng, n, 2 * u).into_vec();
    let second = draw.split_off(u);
    Ok((draw, second))
}

/// Powers of two up to `floor(n/2)`, plus `floor(n/2)` itself.
pub fn default_sizes(n: usize) -> Vec<usize> {
    let half = n / 2;
    let mut sizes: Vec<usize> = std::iter::successors(Some(2usize), |u| u.checked_mul(2))
        .take_while(|&u| u <= half)
        .collect();
    if half >= 1 && sizes.last() != Some(&half) {
        sizes.push(half);
    }
    sizes
}

pub const DEFAULT_REPEATS: usize = 20;

pub fn intra_similarity_curve(
    acts: &ActivationSet,
    neg: &ActivationSet,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
    pooling: Pooling,
) -> Result<IntraSimilarityCurve, CavError> {
    intra_similarity_curve_with(acts, neg, sizes, repeats, seed, pooling, |_, _, _| {})
}

/// As [`intra_similarity_curve`], calling `inspect(u, first, second)` on every draw.
///
/// Draws are generated sequentially from one seeded stream, then evaluated
/// in parallel, so results do not depend on thread scheduling.
pub fn intra_similarity_curve_with<F>(
    acts: &ActivationSet,
    neg: &ActivationSet,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
    pooling: Pooling,
    mut inspect: F,
) -> Result<IntraSimilarityCurve, CavError>
where
    F: FnMut(usize, &[usize], &[usize]),
{
    if repeats < 1 {
        return Err(CavError::InvalidCurve("repeats must be >= 1".into()));
    }
    if sizes.is_empty() {
        return Err(CavError::InvalidCurve("no subset sizes".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CavError::InvalidCurve(
            "subset sizes must be strictly increasing".into(),
        ));
    }
    check_compatible(acts, neg)?;
    let n = acts.len();
    if let Some(&u) = sizes.iter().find(|&&u| u == 0 || 2 * u > n) {
        return Err(CavError::SubsetTooLarge { u, n });
    }

    let rows = pooled_rows(acts, pooling);
    let neg_mean = mean_row(&pooled_rows(neg, pooling), None);
    let concept = subject_name(acts);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(sizes.len() * repeats);
    for &u in sizes {
        for _ in 0..repeats {
            let (a, b) = sample_disjoint_pair(&mut rng, n, u)?;
            assert!(a.iter().all(|i| !b.contains(i)), "subset pair overlaps");
            inspect(u, &a, &b);
            draws.push((u, a, b));
        }
    }

    let sims: Vec<f64> = draws
        .par_iter()
        .map(|(_, a, b)| {
            let va = mean_row(&rows, Some(a)) - &neg_mean;
            let vb = mean_row(&rows, Some(b)) - &neg_mean;
            check_norm(&va, &concept)?;
            check_norm(&vb, &concept)?;
            Ok(cosine_raw(&va, &vb))
        })
        .collect::<Result<_, CavError>>()?;

    let points = sizes
        .iter()
        .zip(sims.chunks(repeats))
        .map(|(&u, chunk)| {
            let ms = MeanStd::of(chunk).expect("repeats >= 1");
            CurvePoint {
                u,
                mean: ms.mean,
                std: ms.std,
                repeats,
            }
        })
        .collect();
    Ok(IntraSimilarityCurve {
        points,
        source: acts.key.set.source.to_string(),
        pooling,
        seed,
    })
}

// ---- CLIP-space analogues ----------------------------------------------------

/// Anything that maps an image file to an embedding vector.
pub trait Embedder: Send + Sync {
    fn embed(&self, path: &Path) -> Result<Vec<f64>, CavError>;
}

/// Embeddings precomputed elsewhere, one JSON object per line:
/// `{"path": "...", "embedding": [..]}`.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    by_path: HashMap<PathBuf, Vec<f64>>,
}

#[derive(Deserialize)]
struct EmbeddingLine {
    path: PathBuf,
    embedding: Vec<f64>,
}

impl EmbeddingTable {
    pub fn from_jsonl(path: &Path) -> Result<Self, CavError> {
        let err = |m: String| CavError::Embedder {
            path: path.to_path_buf(),
            message: m,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut by_path = HashMap::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: EmbeddingLine =
                serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            by_path.insert(rec.path, rec.embedding);
        }
        Ok(Self { by_path })
    }

    pub fn insert(&mut self, path: impl Into<PathBuf>, embedding: Vec<f64>) {
        self.by_path.insert(path.into(), embedding);
    }
}

impl Embedder for EmbeddingTable {
    fn embed(&self, path: &Path) -> Result<Vec<f64>, CavError> {
        self.by_path
            .get(path)
            .or_else(|| path.canonicalize().ok().and_then(|c| self.by_path.get(&c)))
            .cloned()
            .ok_or_else(|| CavError::Embedder {
                path: path.to_path_buf(),
                message: "no embedding recorded".into(),
            })
    }
}

fn unit_embeddings(
    images: &ImageSet,
    embedder: &dyn Embedder,
) -> Result<Vec<Array1<f64>>, CavError> {
    images
        .paths
        .par_iter()
        .map(|p| {
            let v = Array1::from(embedder.embed(p)?);
            let n = v.dot(&v).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(CavError::Embedder {
                    path: p.clone(),
                    message: "zero or non-finite embedding".into(),
                });
            }
            Ok(v / n)
        })
        .collect()
}

fn mean_vec(vs: &[Array1<f64>]) -> Array1<f64> {
    let mut acc = Array1::zeros(vs[0].len());
    for v in vs {
        acc += v;
    }
    acc / vs.len() as f64
}

/// Cosine between the mean unit embeddings of two image sets.
pub fn clip_alignment(
    gen: &ImageSet,
    real: &ImageSet,
    embedder: &dyn Embedder,
) -> Result<f64, CavError> {
    if gen.is_empty() || real.is_empty() {
        return Err(CavError::TooFewImages { needed: 1, got: 0 });
    }
    let g = mean_vec(&unit_embeddings(gen, embedder)?);
    let r = mean_vec(&unit_embeddings(real, embedder)?);
    if g.len() != r.len() {
        return Err(CavError::Mismatch(format!(
            "embedding width {} vs {}",
            g.len(),
            r.len()
        )));
    }
    Ok(cosine_raw(&g, &r))
}

/// Mean cosine over all unordered pairs of unit embeddings.
pub fn clip_intra_similarity(images: &ImageSet, embedder: &dyn Embedder) -> Result<f64, CavError> {
    let n = images.len();
    if n < 2 {
        return Err(CavError::TooFewImages { needed: 2, got: n });
    }
    let units = unit_embeddings(images, embedder)?;
    // sum_{i<j} u_i·u_j = (|sum u|^2 - n) / 2 for unit vectors.
    let sum = units
        .iter()
        .skip(1)
        .fold(units[0].clone(), |acc, v| acc + v);
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(((sum.dot(&sum) - n as f64) / 2.0 / pairs).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{SetKey, Source};
    use crate::extract::ActivationKey;
    use ndarray::{array, Array4};

    fn set(name: &str, tensors: Array4<f64>) -> ActivationSet {
        let n = tensors.shape()[0];
        ActivationSet {
            key: ActivationKey {
                set: SetKey::concept(name, Source::Real),
                model_id: "m".into(),
                layer: "l".into(),
            },
            tensors,
            image_order: (0..n)
                .map(|i| PathBuf::from(format!("{name}{i}.png")))
                .collect(),
        }
    }

    fn from_rows(name: &str, rows: &[&[f64]]) -> ActivationSet {
        let c = rows[0].len();
        set(
            name,
            Array4::from_shape_fn((rows.len(), 1, 1, c), |(i, _, _, j)| rows[i][j]),
        )
    }

    fn cav(v: Array1<f64>) -> Cav {
        Cav {
            vector: v,
            pooling: Pooling::Gap,
            provenance: CavProvenance {
                concept: "c".into(),
                source: "real".into(),
                model_id: "m".into(),
                layer: "l".into(),
                subset: "all".into(),
                seed: None,
            },
        }
    }

    #[test]
    fn singleton_means() {
        let v = compute_cav_dom(
            &from_rows("p", &[&[1.0, 2.0]]),
            &from_rows("q", &[&[0.5, -1.0]]),
            Pooling::Gap,
        )
        .unwrap();
        assert_eq!(v.vector, array![0.5, 3.0]);
        assert_eq!(v.provenance.concept, "p");
    }

    #[test]
    fn equal_means_are_zero_norm() {
        let err = compute_cav_dom(
            &from_rows("p", &[&[1.0, 2.0]]),
            &from_rows("q", &[&[1.0, 2.0]]),
            Pooling::Flatten,
        );
        assert!(matches!(err, Err(CavError::ZeroNorm(_))));
    }

    #[test]
    fn gap_averages_locations() {
        let t = Array4::from_shape_fn((1, 2, 2, 1), |(_, y, x, _)| (y * 2 + x) as f64);
        let pooled = pooled_rows(&set("p", t), Pooling::Gap);
        assert_eq!(pooled, array![[1.5]]);
    }

    #[test]
    fn mismatched_layers_rejected() {
        let a = from_rows("p", &[&[1.0]]);
        let mut b = from_rows("q", &[&[0.0]]);
        b.key.layer = "other".into();
        assert!(matches!(
            compute_cav_dom(&a, &b, Pooling::Gap),
            Err(CavError::Mismatch(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let v = cav(array![0.3, -2.0, 1.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            cosine_similarity(&cav(array![1.0, 0.0]), &cav(array![0.0, 1.0])).unwrap(),
            0.0
        );
        let s = cosine_similarity(&cav(array![1.0, 1.0]), &cav(array![1.0, 0.0])).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        let mut flat = cav(array![1.0, 1.0]);
        flat.pooling = Pooling::Flatten;
        assert!(cosine_similarity(&flat, &cav(array![1.0, 1.0])).is_err());
    }

    #[test]
    fn identical_gen_and_real_align_perfectly() {
        let real = from_rows("c", &[&[1.0, 2.0], &[2.0, 0.5], &[0.0, 1.0]]);
        let neg = from_rows("n", &[&[0.0, 0.0], &[0.2, -0.1]]);
        let mut gen = real.clone();
        gen.key.set.source = Source::Generated("mock".into());
        let rho = representation_alignment(&gen, &real, &neg, Pooling::Gap).unwrap();
        assert!((rho - 1.0).abs() < 1e-15);
    }

    #[test]
    fn default_grid() {
        assert_eq!(default_sizes(256), vec![2, 4, 8, 16, 32, 64, 128]);
        assert_eq!(default_sizes(100), vec![2, 4, 8, 16, 32, 50]);
        assert_eq!(default_sizes(3), vec![1]);
    }

    #[test]
    fn identical_activations_give_flat_curve() {
        let rows: Vec<&[f64]> = vec![&[1.0, 1.0]; 10];
        let acts = from_rows("c", &rows);
        let neg = from_rows("n", &[&[0.0, 0.5]]);
        let curve = intra_similarity_curve(&acts, &neg, &[5], 4, 1, Pooling::Gap).unwrap();
        assert!((curve.points[0].mean - 1.0).abs() < 1e-15);
        assert_eq!(curve.points[0].std, 0.0);
    }

    #[test]
    fn curve_rejects_oversized_subsets() {
        let acts = from_rows("c", &[&[1.0], &[2.0], &[3.0]]);
        let neg = from_rows("n", &[&[0.0]]);
        assert!(matches!(
            intra_similarity_curve(&acts, &neg, &[2], 3, 0, Pooling::Gap),
            Err(CavError::SubsetTooLarge { u: 2, n: 3 })
        ));
        assert!(intra_similarity_curve(&acts, &neg, &[1], 0, 0, Pooling::Gap).is_err());
    }

    struct Fixed(HashMap<PathBuf, Vec<f64>>);
    impl Embedder for Fixed {
        fn embed(&self, path: &Path) -> Result<Vec<f64>, CavError> {
            self.0.get(path).cloned().ok_or_else(|| CavError::Embedder {
                path: path.into(),
                message: "missing".into(),
            })
        }
    }

    fn image_set(paths: &[&str]) -> ImageSet {
        ImageSet {
            key: SetKey::concept("c", Source::Real),
            paths: paths.iter().map(PathBuf::from).collect(),
            seed: None,
        }
    }

    #[test]
    fn clip_statistics() {
        let emb = Fixed(HashMap::from([
            ("a".into(), vec![1.0, 0.0]),
            ("b".into(), vec![0.0, 2.0]),
            ("c".into(), vec![3.0, 0.0]),
        ]));
        assert_eq!(
            clip_alignment(&image_set(&["a"]), &image_set(&["b"]), &emb).unwrap(),
            0.0
        );
        assert!(
            (clip_alignment(&image_set(&["a", "b"]), &image_set(&["a", "b"]), &emb).unwrap() - 1.0)
                .abs()
                < 1e-15
        );
        assert!(
            (clip_intra_similarity(&image_set(&["a", "c"]), &emb).unwrap() - 1.0).abs() < 1e-15
        );
        assert_eq!(
            clip_intra_similarity(&image_set(&["a", "b"]), &emb).unwrap(),
            0.0
        );
        assert!(matches!(
            clip_intra_similarity(&image_set(&["a"]), &emb),
            Err(CavError::TooFewImages { .. })
        ));
    }

    #[test]
    fn embedding_table_from_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.jsonl");
        std::fs::write(&p, "{\"path\": \"x.png\", \"embedding\": [1, 2]}\n\n{\"path\": \"y.png\", \"embedding\": [0, 1]}\n").unwrap();
        let t = EmbeddingTable::from_jsonl(&p).unwrap();
        assert_eq!(t.embed(Path::new("x.png")).unwrap(), vec![1.0, 2.0]);
        assert!(t.embed(Path::new("z.png")).is_err());
    }
}
