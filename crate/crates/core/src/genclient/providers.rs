//! Provider adapters: a deterministic procedural mock, a local command run
//! per batch, and a JSON-over-HTTP gateway.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::procedural::{erase_texture, render_texture, Texture};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("transient provider error: {0}")]
    Transient(String),
    #[error("provider error: {0}")]
    Permanent(String),
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Transient(_))
    }
}

/// Text-to-image provider. Returns one encoded image per seed, in order.
pub trait ImageGenerator: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, prompt: &str, seeds: &[u64]) -> Result<Vec<Vec<u8>>, ProviderError>;
}

/// Image-to-image provider. Returns the encoded edited image.
pub trait ImageEditor: Send + Sync {
    fn id(&self) -> &str;
    fn edit(&self, prompt: &str, image: &[u8], seed: u64) -> Result<Vec<u8>, ProviderError>;
}

impl<T: ImageGenerator + ?Sized> ImageGenerator for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, prompt: &str, seeds: &[u64]) -> Result<Vec<Vec<u8>>, ProviderError> {
        (**self).generate(prompt, seeds)
    }
}

impl<T: ImageEditor + ?Sized> ImageEditor for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn edit(&self, prompt: &str, image: &[u8], seed: u64) -> Result<Vec<u8>, ProviderError> {
        (**self).edit(prompt, image, seed)
    }
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ProviderError> {
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| ProviderError::Permanent(e.to_string()))?;
    Ok(buf)
}

// ---- mock ------------------------------------------------------------------

/// Procedural images keyed by `hash(prompt, seed)`. The texture follows the
/// first texture keyword in the prompt.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    id: String,
    pub diversity: f64,
}

impl MockGenerator {
    pub fn new(id: impl Into<String>, diversity: f64) -> Self {
        Self {
            id: id.into(),
            diversity,
        }
    }
}

fn prompt_seed(prompt: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update(seed.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl ImageGenerator for MockGenerator {
    fn id(&self) -> &str {
        &self.id
    }
    fn generate(&self, prompt: &str, seeds: &[u64]) -> Result<Vec<Vec<u8>>, ProviderError> {
        let texture = Texture::from_text(prompt);
        seeds
            .iter()
            .map(|&s| {
                encode_png(&render_texture(
                    texture,
                    prompt_seed(prompt, s),
                    self.diversity,
                ))
            })
            .collect()
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone)]
pub struct IdentityEditor {
    id: String,
}

impl IdentityEditor {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }
}

impl ImageEditor for IdentityEditor {
    fn id(&self) -> &str {
        &self.id
    }
    fn edit(&self, _prompt: &str, image: &[u8], _seed: u64) -> Result<Vec<u8>, ProviderError> {
        Ok(image.to_vec())
    }
}

/// Blends the image toward a blurred copy, erasing fine texture.
#[derive(Debug, Clone)]
pub struct BlurEditor {
    id: String,
    pub strength: f64,
}

impl BlurEditor {
    pub fn new(id: impl Into<String>, strength: f64) -> Self {
        Self {
            id: id.into(),
            strength,
        }
    }
}

impl ImageEditor for BlurEditor {
    fn id(&self) -> &str {
        &self.id
    }
    fn edit(&self, _prompt: &str, image: &[u8], _seed: u64) -> Result<Vec<u8>, ProviderError> {
        let img = image::load_from_memory(image)
            .map_err(|e| ProviderError::Permanent(e.to_string()))?
            .to_rgb8();
        encode_png(&erase_texture(&img, self.strength))
    }
}

/// Wraps a generator and injects failures: the first `transient_failures`
/// calls fail transiently, and once `fail_after` images have been delivered
/// every later call fails permanently.
pub struct FlakyGenerator {
    inner: Arc<dyn ImageGenerator>,
    fail_after: Option<usize>,
    transient_failures: usize,
    calls: AtomicUsize,
    delivered: AtomicUsize,
}

impl FlakyGenerator {
    pub fn new(
        inner: Arc<dyn ImageGenerator>,
        fail_after: Option<usize>,
        transient_failures: usize,
    ) -> Self {
        Self {
            inner,
            fail_after,
            transient_failures,
            calls: AtomicUsize::new(0),
            delivered: AtomicUsize::new(0),
        }
    }
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ImageGenerator for FlakyGenerator {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn generate(&self, prompt: &str, seeds: &[u64]) -> Result<Vec<Vec<u8>>, ProviderError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if call < self.transient_failures {
            return Err(ProviderError::Transient(format!(
                "injected failure {}",
                call + 1
            )));
        }
        let delivered = self.delivered.load(Ordering::SeqCst);
        if let Some(limit) = self.fail_after {
            if delivered + seeds.len() > limit {
                return Err(ProviderError::Permanent(format!(
                    "injected permanent failure after {delivered} images"
                )));
            }
        }
        let out = self.inner.generate(prompt, seeds)?;
        self.delivered.fetch_add(out.len(), Ordering::SeqCst);
        Ok(out)
    }
}

/// Enforces a minimum interval between calls to the wrapped provider.
pub struct RateLimited<P> {
    inner: P,
    min_interval: Duration,
    next: Mutex<Instant>,
}

impl<P> RateLimited<P> {
    pub fn new(inner: P, min_interval: Duration) -> Self {
        Self {
            inner,
            min_interval,
            next: Mutex::new(Instant::now()),
        }
    }

    fn wait(&self) {
        let mut next = self.next.lock().expect("rate limiter poisoned");
        let now = Instant::now();
        if *next > now {
            std::thread::sleep(*next - now);
        }
        *next = Instant::now().max(*next) + self.min_interval;
    }
}

impl<P: ImageGenerator> ImageGenerator for RateLimited<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn generate(&self, prompt: &str, seeds: &[u64]) -> Result<Vec<Vec<u8>>, ProviderError> {
        self.wait();
        self.inner.generate(prompt, seeds)
    }
}

impl<P: ImageEditor> ImageEditor for RateLimited<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn edit(&self, prompt: &str, image: &[u8], seed: u64) -> Result<Vec<u8>, ProviderError> {
        self.wait();
        self.inner.edit(prompt, image, seed)
    }
}

// ---- local command ---------------------------------------------------------

/// Runs `program args...` once per batch. Arguments may contain `{prompt}`,
/// `{seeds}` (comma separated), `{count}` and `{out_dir}`; the command must
/// leave exactly `count` images in `out_dir`, which are read in file-name order.
#[derive(Debug, Clone)]
pub struct CommandGenerator {
    id: String,
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CommandGenerator {
    pub fn new(id: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            id: id.into(),
            program: program.into(),
            args,
        }
    }
}

fn run_command(
    program: &Path,
    args: &[String],
    subst: &[(&str, String)],
) -> Result<(), ProviderError> {
    let args: Vec<String> = args
        .iter()
        .map(|a| {
            subst
                .iter()
                .fold(a.clone(), |acc, (k, v)| acc.replace(k, v))
        })
        .collect();
    let out = Command::new(program)
        .args(&args)
        .output()
        .map_err(|e| ProviderError::Permanent(format!("cannot run {}: {e}", program.display())))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(ProviderError::Transient(format!(
            "{} exited with {}: {}",
            program.display(),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )))
    }
}

impl ImageGenerator for CommandGenerator {
    fn id(&self) -> &str {
        &self.id
    }
    fn generate(&self, prompt: &str, seeds: &[u64]) -> Result<Vec<Vec<u8>>, ProviderError> {
        let dir = tempfile::tempdir().map_err(|e| ProviderError::Transient(e.to_string()))?;
        let seeds_arg = seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        run_command(
            &self.program,
            &self.args,
            &[
                ("{prompt}", prompt.to_string()),
                ("{seeds}", seeds_arg),
                ("{count}", seeds.len().to_string()),
                ("{out_dir}", dir.path().display().to_string()),
            ],
        )?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir.path())
            .map_err(|e| ProviderError::Transient(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.len() != seeds.len() {
            return Err(ProviderError::Transient(format!(
                "command produced {} images, expected {}",
                files.len(),
                seeds.len()
            )));
        }
        files
            .iter()
            .map(|p| std::fs::read(p).map_err(|e| ProviderError::Transient(e.to_string())))
            .collect()
    }
}

/// Runs `program args...` once per image with `{prompt}`, `{seed}`, `{input}`
/// and `{output}` substituted; the command writes the edited image to `{output}`.
#[derive(Debug, Clone)]
pub struct CommandEditor {
    id: String,
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CommandEditor {
    pub fn new(id: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            id: id.into(),
            program: program.into(),
            args,
        }
    }
}

impl ImageEditor for CommandEditor {
    fn id(&self) -> &str {
        &self.id
    }
    fn edit(&self, prompt: &str, image: &[u8], seed: u64) -> Result<Vec<u8>, ProviderError> {
        let dir = tempfile::tempdir().map_err(|e| ProviderError::Transient(e.to_string()))?;
        let input = dir.path().join("input");
        let output = dir.path().join("output.png");
        std::fs::write(&input, image).map_err(|e| ProviderError::Transient(e.to_string()))?;
        run_command(
            &self.program,
            &self.args,
            &[
                ("{prompt}", prompt.to_string()),
                ("{seed}", seed.to_string()),
                ("{input}", input.display().to_string()),
                ("{output}", output.display().to_string()),
            ],
        )?;
        std::fs::read(&output)
            .map_err(|e| ProviderError::Transient(format!("no output image: {e}")))
    }
}

// ---- HTTP ------------------------------------------------------------------

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    seeds: &'a [u64],
}

#[derive(Deserialize)]
struct GenerateResponse {
    images: Vec<String>,
}

#[derive(Serialize)]
struct EditRequest<'a> {
    prompt: &'a str,
    seed: u64,
    image: String,
}

#[derive(Deserialize)]
struct EditResponse {
    image: String,
}

/// Shared HTTP plumbing: bearer key from an environment variable, JSON in
/// and out, base64 image payloads.
#[derive(Clone)]
struct HttpClient {
    endpoint: String,
    api_key_env: String,
    agent: ureq::Agent,
}

impl HttpClient {
    fn new(endpoint: String, api_key_env: String, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint,
            api_key_env,
            agent,
        }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let key = std::env::var(&self.api_key_env).map_err(|_| {
            ProviderError::Permanent(format!(
                "environment variable {} is not set",
                self.api_key_env
            ))
        })?;
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(body)
            .map_err(|e| match e {
                ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                    ProviderError::Transient(format!("HTTP {code}"))
                }
                ureq::Error::StatusCode(code) => ProviderError::Permanent(format!("HTTP {code}")),
                other => ProviderError::Transient(other.to_string()),
            })?;
        resp.body_mut()
            .read_json()
            .map_err(|e| ProviderError::Permanent(format!("bad response body: {e}")))
    }
}

fn decode_b64(s: &str) -> Result<Vec<u8>, ProviderError> {
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| ProviderError::Permanent(format!("bad image payload: {e}")))
}

/// POSTs `{"prompt", "seeds"}` and expects `{"images": [base64, ...]}`.
#[derive(Clone)]
pub struct HttpGenerator {
    id: String,
    client: HttpClient,
}

impl HttpGenerator {
    pub fn new(
        id: impl Into<String>,
        endpoint: impl Into<String>,
        api_key_env: impl Into<String>,
        timeout: Duration,
    ) -> Self {
        Self {
            id: id.into(),
            client: HttpClient::new(endpoint.into(), api_key_env.into(), timeout),
        }
    }
}

impl ImageGenerator for HttpGenerator {
    fn id(&self) -> &str {
        &self.id
    }
    fn generate(&self, prompt: &str, seeds: &[u64]) -> Result<Vec<Vec<u8>>, ProviderError> {
        let resp: GenerateResponse = self.client.post(&GenerateRequest { prompt, seeds })?;
        resp.images.iter().map(|s| decode_b64(s)).collect()
    }
}

/// POSTs `{"prompt", "seed", "image": base64}` and expects `{"image": base64}`.
#[derive(Clone)]
pub struct HttpEditor {
    id: String,
    client: HttpClient,
}

impl HttpEditor {
    pub fn new(
        id: impl Into<String>,
        endpoint: impl Into<String>,
        api_key_env: impl Into<String>,
        timeout: Duration,
    ) -> Self {
        Self {
            id: id.into(),
            client: HttpClient::new(endpoint.into(), api_key_env.into(), timeout),
        }
    }
}

impl ImageEditor for HttpEditor {
    fn id(&self) -> &str {
        &self.id
    }
    fn edit(&self, prompt: &str, image: &[u8], seed: u64) -> Result<Vec<u8>, ProviderError> {
        let image = base64::engine::general_purpose::STANDARD.encode(image);
        let resp: EditResponse = self.client.post(&EditRequest {
            prompt,
            seed,
            image,
        })?;
        decode_b64(&resp.image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_is_deterministic() {
        let g = MockGenerator::new("mock", 0.3);
        let a = g.generate("striped", &[1, 2]).unwrap();
        assert_eq!(a, g.generate("striped", &[1, 2]).unwrap());
        assert_ne!(a[0], a[1]);
        assert_ne!(a[0], g.generate("dotted", &[1]).unwrap()[0]);
    }

    #[test]
    fn identity_and_blur_editors() {
        let png = MockGenerator::new("mock", 1.0)
            .generate("striped", &[5])
            .unwrap()
            .remove(0);
        assert_eq!(IdentityEditor::new("id").edit("p", &png, 0).unwrap(), png);
        let blurred = BlurEditor::new("blur", 1.0).edit("p", &png, 0).unwrap();
        assert_ne!(blurred, png);
        assert!(image::load_from_memory(&blurred).is_ok());
    }

    #[test]
    fn flaky_generator_counts_deliveries() {
        let f = FlakyGenerator::new(Arc::new(MockGenerator::new("mock", 0.5)), Some(2), 1);
        assert!(f.generate("x", &[1]).unwrap_err().is_transient());
        assert_eq!(f.generate("x", &[1, 2]).unwrap().len(), 2);
        assert!(!f.generate("x", &[3]).unwrap_err().is_transient());
    }

    #[test]
    fn rate_limiter_spaces_calls() {
        let g = RateLimited::new(MockGenerator::new("mock", 0.5), Duration::from_millis(30));
        let t = Instant::now();
        for s in 0..3 {
            g.generate("x", &[s]).unwrap();
        }
        assert!(t.elapsed() >= Duration::from_millis(60));
    }
}
