//! Concept/class corpus description.
//!
//! A catalog is one TOML file:
//!
//! ```toml
//! [layout]                      # optional
//! generated_root = "generated"  # <root>/<provider>/<concept>/
//! removed_root = "removed"      # <root>/<concept>/  (class images of k_c, concept removed)
//!
//! [negatives]
//! dir = "negatives"             # or omit `dir` to draw from the other classes
//! sample_size = 100             # optional, only without `dir`
//! seed = 0
//!
//! [classes.zebra]
//! dir = "classes/zebra"
//! index = 340                   # optional classifier output index
//! count = 50                    # optional, checked against the directory
//!
//! [[concepts]]
//! name = "striped"
//! type = "texture"
//! dataset = "DTD"
//! relevant_class = "zebra"
//! real_dir = "concepts/striped"
//! real_count = 120              # optional, checked against the directory
//! ```
//!
//! Relative paths resolve against the catalog file's directory. Unknown
//! fields are rejected.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "webp"];

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("cannot parse catalog {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid catalog:\n{0}")]
    Invalid(ValidationReport),
    #[error("unknown image set key `{0}`")]
    UnknownKey(String),
    #[error("empty image set `{0}`")]
    EmptyImageSet(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("class `{class}` has no classifier index below {class_count}")]
    ClassIndex { class: String, class_count: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CatalogError + '_ {
    move |source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptType {
    Texture,
    Object,
}

impl fmt::Display for ConceptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConceptType::Texture => "texture",
            ConceptType::Object => "object",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub concept_type: ConceptType,
    pub source_dataset: String,
    pub relevant_class: String,
    pub real_image_dir: PathBuf,
    /// m_c: number of real images.
    pub real_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub dir: PathBuf,
    pub index: Option<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativePool {
    Directory(PathBuf),
    /// Fixed random sample from every class except the concept's relevant class.
    FromClasses {
        sample_size: Option<usize>,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptCatalog {
    pub root: PathBuf,
    pub concepts: Vec<ConceptSpec>,
    pub classes: BTreeMap<String, ClassSpec>,
    pub negatives: NegativePool,
    pub generated_root: PathBuf,
    pub removed_root: PathBuf,
}

// ---- on-disk schema ------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCatalog {
    #[serde(default)]
    layout: Option<RawLayout>,
    negatives: RawNegatives,
    #[serde(default)]
    classes: BTreeMap<String, RawClass>,
    #[serde(default)]
    concepts: Vec<RawConcept>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    generated_root: Option<PathBuf>,
    removed_root: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNegatives {
    dir: Option<PathBuf>,
    sample_size: Option<usize>,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    dir: PathBuf,
    index: Option<usize>,
    count: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConcept {
    name: String,
    #[serde(rename = "type")]
    concept_type: ConceptType,
    dataset: String,
    relevant_class: String,
    real_dir: PathBuf,
    real_count: Option<usize>,
}

// ---- image set keys ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subject {
    Concept(String),
    Class(String),
    /// Negative pool; the concept matters only when negatives are drawn from classes.
    Negatives(Option<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Real,
    Generated(String),
    /// Class images with the named concept removed.
    Removed(String),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Real => f.write_str("real"),
            Source::Generated(p) => write!(f, "gen:{p}"),
            Source::Removed(c) => write!(f, "removed:{c}"),
        }
    }
}

impl FromStr for Source {
    type Err = CatalogError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "real" {
            Ok(Source::Real)
        } else if let Some(p) = s.strip_prefix("gen:").filter(|p| !p.is_empty()) {
            Ok(Source::Generated(p.to_string()))
        } else if let Some(c) = s.strip_prefix("removed:").filter(|c| !c.is_empty()) {
            Ok(Source::Removed(c.to_string()))
        } else {
            Err(CatalogError::UnknownKey(s.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SetKey {
    pub subject: Subject,
    pub source: Source,
}

impl SetKey {
    pub fn concept(name: &str, source: Source) -> Self {
        Self {
            subject: Subject::Concept(name.to_string()),
            source,
        }
    }
    pub fn class(name: &str) -> Self {
        Self {
            subject: Subject::Class(name.to_string()),
            source: Source::Real,
        }
    }
    pub fn removed(class: &str, concept: &str) -> Self {
        Self {
            subject: Subject::Class(class.to_string()),
            source: Source::Removed(concept.to_string()),
        }
    }
    pub fn negatives_for(concept: &str) -> Self {
        Self {
            subject: Subject::Negatives(Some(concept.to_string())),
            source: Source::Real,
        }
    }
}

impl fmt::Display for SetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subject {
            Subject::Concept(c) => write!(f, "concept:{c}/{}", self.source),
            Subject::Class(c) => write!(f, "class:{c}/{}", self.source),
            Subject::Negatives(None) => f.write_str("negatives"),
            Subject::Negatives(Some(c)) => write!(f, "negatives:{c}"),
        }
    }
}

impl FromStr for SetKey {
    type Err = CatalogError;
    /// `concept:<name>/<source>`, `class:<name>[/<source>]`, `negatives[:<concept>]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || CatalogError::UnknownKey(s.to_string());
        if s == "negatives" {
            return Ok(Self {
                subject: Subject::Negatives(None),
                source: Source::Real,
            });
        }
        if let Some(c) = s.strip_prefix("negatives:") {
            return Ok(SetKey::negatives_for(c));
        }
        let (head, source) = match s.split_once('/') {
            Some((h, src)) => (h, src.parse()?),
            None => (s, Source::Real),
        };
        let subject = match head.split_once(':') {
            Some(("concept", n)) if !n.is_empty() => Subject::Concept(n.to_string()),
            Some(("class", n)) if !n.is_empty() => Subject::Class(n.to_string()),
            _ => return Err(unknown()),
        };
        Ok(Self { subject, source })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSet {
    pub key: SetKey,
    pub paths: Vec<PathBuf>,
    pub seed: Option<u64>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }
    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

// ---- validation ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// The offending record, e.g. `concepts[3] (striped)` or `negatives`.
    pub row: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
    fn push(&mut self, row: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            row: row.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  {}: {}", v.row, v.message)?;
        }
        Ok(())
    }
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
        .unwrap_or(false)
}

/// Image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CatalogError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && has_image_extension(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn is_readable_image(p: &Path) -> bool {
    image::ImageReader::open(p)
        .and_then(|r| r.with_guessed_format())
        .map(|r| r.into_dimensions().is_ok())
        .unwrap_or(false)
}

fn count_readable(dir: &Path) -> Result<usize, CatalogError> {
    Ok(list_images(dir)?
        .iter()
        .filter(|p| is_readable_image(p))
        .count())
}

pub fn content_hash(path: &Path) -> Result<[u8; 32], CatalogError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).into())
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Parse a catalog file without checking it against the filesystem.
///
/// Declared counts that are absent are filled from the directory listing
/// when the directory is readable, and left at 0 otherwise (which
/// [`validate_catalog`] then reports).
pub fn parse_catalog(path: &Path) -> Result<ConceptCatalog, CatalogError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: RawCatalog = toml::from_str(&text).map_err(|e| CatalogError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let classes = raw
        .classes
        .into_iter()
        .map(|(name, c)| {
            let dir = resolve(&root, &c.dir);
            let count = c.count.unwrap_or_else(|| count_readable(&dir).unwrap_or(0));
            (
                name.clone(),
                ClassSpec {
                    name,
                    dir,
                    index: c.index,
                    count,
                },
            )
        })
        .collect();

    let concepts = raw
        .concepts
        .into_iter()
        .map(|c| {
            let dir = resolve(&root, &c.real_dir);
            let real_count = c
                .real_count
                .unwrap_or_else(|| count_readable(&dir).unwrap_or(0));
            ConceptSpec {
                name: c.name.trim().to_string(),
                concept_type: c.concept_type,
                source_dataset: c.dataset,
                relevant_class: c.relevant_class,
                real_image_dir: dir,
                real_count,
            }
        })
        .collect();

    let negatives = match raw.negatives.dir {
        Some(d) => {
            if raw.negatives.sample_size.is_some() {
                return Err(CatalogError::Parse {
                    path: path.to_path_buf(),
                    message: "negatives: `sample_size` applies only when `dir` is absent".into(),
                });
            }
            NegativePool::Directory(resolve(&root, &d))
        }
        None => NegativePool::FromClasses {
            sample_size: raw.negatives.sample_size,
            seed: raw.negatives.seed,
        },
    };
    let layout = raw.layout.unwrap_or(RawLayout {
        generated_root: None,
        removed_root: None,
    });
    Ok(ConceptCatalog {
        generated_root: resolve(
            &root,
            &layout.generated_root.unwrap_or_else(|| "generated".into()),
        ),
        removed_root: resolve(
            &root,
            &layout.removed_root.unwrap_or_else(|| "removed".into()),
        ),
        root,
        concepts,
        classes,
        negatives,
    })
}

/// Parse and validate; any violation is an error naming the offending rows.
pub fn load_catalog(path: &Path) -> Result<ConceptCatalog, CatalogError> {
    let catalog = parse_catalog(path)?;
    let report = validate_catalog(&catalog);
    if report.is_empty() {
        Ok(catalog)
    } else {
        Err(CatalogError::Invalid(report))
    }
}

/// Check every invariant; violations are returned as data.
pub fn validate_catalog(catalog: &ConceptCatalog) -> ValidationReport {
    let mut report = ValidationReport::default();
    if catalog.concepts.is_empty() {
        report.push("concepts", "no concepts");
    }

    let mut seen = HashSet::new();
    for (i, c) in catalog.concepts.iter().enumerate() {
        let row = format!("concepts[{i}] ({})", c.name);
        if c.name.is_empty() {
            report.push(&row, "empty concept name");
        }
        if !seen.insert(c.name.as_str()) {
            report.push(&row, "duplicate concept name");
        }
        if !catalog.classes.contains_key(&c.relevant_class) {
            report.push(
                &row,
                format!(
                    "relevant class `{}` is not declared in [classes]",
                    c.relevant_class
                ),
            );
        }
        check_dir(&mut report, &row, &c.real_image_dir, c.real_count);
    }
    for (name, class) in &catalog.classes {
        check_dir(
            &mut report,
            &format!("classes.{name}"),
            &class.dir,
            class.count,
        );
    }

    match &catalog.negatives {
        NegativePool::Directory(dir) => match list_images(dir) {
            Ok(paths) if paths.is_empty() => report.push("negatives", "negative pool is empty"),
            Ok(paths) => check_disjoint(&mut report, catalog, &paths),
            Err(e) => report.push("negatives", e.to_string()),
        },
        NegativePool::FromClasses { sample_size, .. } => {
            if sample_size == &Some(0) {
                report.push("negatives", "sample_size must be positive");
            }
            if catalog.classes.len() < 2 {
                report.push(
                    "negatives",
                    "drawing negatives from classes needs at least two classes",
                );
            }
        }
    }
    report
}

fn check_dir(report: &mut ValidationReport, row: &str, dir: &Path, declared: usize) {
    match count_readable(dir) {
        Ok(0) => report.push(row, format!("empty image set in {}", dir.display())),
        Ok(n) if n != declared => report.push(
            row,
            format!("declares {declared} images, found {n} in {}", dir.display()),
        ),
        Ok(_) => {}
        Err(e) => report.push(row, e.to_string()),
    }
}

fn check_disjoint(report: &mut ValidationReport, catalog: &ConceptCatalog, negatives: &[PathBuf]) {
    let mut owners: HashMap<[u8; 32], &str> = HashMap::new();
    for c in &catalog.concepts {
        let Ok(paths) = list_images(&c.real_image_dir) else {
            continue;
        };
        for p in paths {
            if let Ok(h) = content_hash(&p) {
                owners.entry(h).or_insert(c.name.as_str());
            }
        }
    }
    let mut flagged = HashSet::new();
    for p in negatives {
        match content_hash(p) {
            Ok(h) => {
                if let Some(owner) = owners.get(&h) {
                    if flagged.insert(*owner) {
                        report.push(
                            "negatives",
                            format!(
                                "negative pool overlaps concept `{owner}` (e.g. {})",
                                p.display()
                            ),
                        );
                    }
                }
            }
            Err(e) => report.push("negatives", e.to_string()),
        }
    }
}

impl ConceptCatalog {
    pub fn concept(&self, name: &str) -> Option<&ConceptSpec> {
        self.concepts.iter().find(|c| c.name == name)
    }

    /// Classifier output index for a class, checked against `class_count`.
    /// Classes without an explicit index use their position in sorted order.
    pub fn class_index(&self, class: &str, class_count: usize) -> Result<usize, CatalogError> {
        let idx = match self.classes.get(class) {
            Some(ClassSpec { index: Some(i), .. }) => Some(*i),
            Some(_) => self.classes.keys().position(|k| k == class),
            None => None,
        };
        idx.filter(|&i| i < class_count)
            .ok_or_else(|| CatalogError::ClassIndex {
                class: class.to_string(),
                class_count,
            })
    }

    fn set_dir(&self, key: &SetKey) -> Result<PathBuf, CatalogError> {
        let unknown = || CatalogError::UnknownKey(key.to_string());
        match (&key.subject, &key.source) {
            (Subject::Concept(c), Source::Real) => {
                Ok(self.concept(c).ok_or_else(unknown)?.real_image_dir.clone())
            }
            (Subject::Concept(c), Source::Generated(p)) => {
                self.concept(c).ok_or_else(unknown)?;
                Ok(self.generated_root.join(p).join(c))
            }
            (Subject::Class(k), Source::Real) => {
                Ok(self.classes.get(k).ok_or_else(unknown)?.dir.clone())
            }
            (Subject::Class(k), Source::Removed(c)) => {
                let concept = self.concept(c).ok_or_else(unknown)?;
                if &concept.relevant_class != k {
                    return Err(unknown());
                }
                Ok(self.removed_root.join(c))
            }
            (Subject::Negatives(_), Source::Real) => match &self.negatives {
                NegativePool::Directory(d) => Ok(d.clone()),
                NegativePool::FromClasses { .. } => Err(unknown()),
            },
            _ => Err(unknown()),
        }
    }

    /// Output directory of a set, whether or not it exists yet.
    pub fn set_directory(&self, key: &SetKey) -> Result<PathBuf, CatalogError> {
        self.set_dir(key)
    }
}

/// Resolve a key to its lexicographically ordered image list.
pub fn load_image_set(catalog: &ConceptCatalog, key: &SetKey) -> Result<ImageSet, CatalogError> {
    let paths = match (&key.subject, &catalog.negatives) {
        (Subject::Negatives(concept), NegativePool::FromClasses { sample_size, seed }) => {
            let exclude = match concept {
                Some(c) => Some(
                    catalog
                        .concept(c)
                        .ok_or_else(|| CatalogError::UnknownKey(key.to_string()))?
                        .relevant_class
                        .clone(),
                ),
                None => None,
            };
            let mut pool = Vec::new();
            for (name, class) in &catalog.classes {
                if Some(name) != exclude.as_ref() {
                    pool.extend(list_images(&class.dir)?);
                }
            }
            pool.sort();
            match sample_size {
                Some(n) if *n < pool.len() => {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    let mut idx = index::sample(&mut rng, pool.len(), *n).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| pool[i].clone()).collect()
                }
                _ => pool,
            }
        }
        _ => {
            let dir = catalog.set_dir(key)?;
            list_images(&dir)?
        }
    };
    if paths.is_empty() {
        return Err(CatalogError::EmptyImageSet(key.to_string()));
    }
    Ok(ImageSet {
        key: key.clone(),
        paths,
        seed: None,
    })
}
