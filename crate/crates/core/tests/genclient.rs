use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;

use conceptfaith::catalog::{ConceptSpec, ConceptType, ImageSet, SetKey};
use conceptfaith::genclient::{
    self, FlakyGenerator, GenError, GenerationJob, HttpGenerator, IdentityEditor, ImageGenerator,
    JobOptions, MockGenerator, RemovalJob, RetryPolicy,
};

fn striped() -> ConceptSpec {
    ConceptSpec {
        name: "striped".into(),
        concept_type: ConceptType::Texture,
        source_dataset: "toy".into(),
        relevant_class: "zebra".into(),
        real_image_dir: PathBuf::from("real"),
        real_count: 0,
    }
}

fn job(dir: &std::path::Path, provider: &str, count: usize) -> GenerationJob {
    GenerationJob {
        concept: striped(),
        provider: provider.into(),
        count,
        seed: 11,
        output_dir: dir.to_path_buf(),
    }
}

fn fast() -> JobOptions {
    JobOptions {
        retry: RetryPolicy::immediate(3),
        resume: false,
        batch_size: 4,
    }
}

#[test]
fn mock_run_writes_every_image_with_its_manifest_record() {
    let dir = tempfile::tempdir().unwrap();
    let set = genclient::generate_concept_images(
        &job(dir.path(), "mock", 200),
        &MockGenerator::new("mock", 1.0),
        &fast(),
    )
    .unwrap();
    assert_eq!(set.len(), 200);
    assert!(set.paths.iter().all(|p| p.exists()));
    let records = genclient::read_manifest(dir.path()).unwrap();
    assert_eq!(records.len(), 200);
    let prompt = genclient::render_generation_prompt(&striped()).unwrap();
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.filename, genclient::generated_filename(i));
        assert_eq!(r.prompt, prompt);
        assert_eq!(r.provider, "mock");
        assert_eq!(r.seed, genclient::derive_seed(11, i));
    }
}

#[test]
fn zero_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = genclient::generate_concept_images(
        &job(dir.path(), "mock", 0),
        &MockGenerator::new("mock", 1.0),
        &fast(),
    )
    .unwrap_err();
    assert!(matches!(err, GenError::InvalidJob(_)));
}

#[test]
fn same_seed_gives_identical_images() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let g = MockGenerator::new("mock", 1.0);
    let sa = genclient::generate_concept_images(&job(a.path(), "mock", 6), &g, &fast()).unwrap();
    let sb = genclient::generate_concept_images(&job(b.path(), "mock", 6), &g, &fast()).unwrap();
    for (x, y) in sa.paths.iter().zip(&sb.paths) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn failure_midway_reports_partial_progress_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let inner: Arc<dyn ImageGenerator> = Arc::new(MockGenerator::new("mock", 1.0));
    let flaky = FlakyGenerator::new(inner.clone(), Some(3), 0);
    let opts = JobOptions {
        batch_size: 1,
        ..fast()
    };
    let err =
        genclient::generate_concept_images(&job(dir.path(), "mock", 5), &flaky, &opts).unwrap_err();
    match err {
        GenError::Partial {
            completed, total, ..
        } => assert_eq!((completed, total), (3, 5)),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(genclient::read_manifest(dir.path()).unwrap().len(), 3);

    // Without resume the directory is protected.
    let again =
        genclient::generate_concept_images(&job(dir.path(), "mock", 5), &inner, &opts).unwrap_err();
    assert!(matches!(again, GenError::OutputExists(_)));

    let counting = FlakyGenerator::new(inner, None, 0);
    let resumed = JobOptions {
        resume: true,
        ..opts
    };
    let set = genclient::generate_concept_images(&job(dir.path(), "mock", 5), &counting, &resumed)
        .unwrap();
    assert_eq!(set.len(), 5);
    assert_eq!(counting.calls(), 2, "only the missing images are requested");
    assert_eq!(genclient::read_manifest(dir.path()).unwrap().len(), 5);

    // Resumed images are the ones an uninterrupted run would produce.
    let fresh = tempfile::tempdir().unwrap();
    let full = genclient::generate_concept_images(
        &job(fresh.path(), "mock", 5),
        &MockGenerator::new("mock", 1.0),
        &fast(),
    )
    .unwrap();
    for (x, y) in set.paths.iter().zip(&full.paths) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn transient_failures_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let flaky = FlakyGenerator::new(Arc::new(MockGenerator::new("mock", 1.0)), None, 2);
    let set =
        genclient::generate_concept_images(&job(dir.path(), "mock", 4), &flaky, &fast()).unwrap();
    assert_eq!(set.len(), 4);
    assert_eq!(flaky.calls(), 3);
}

#[test]
fn provider_id_must_match_the_job() {
    let dir = tempfile::tempdir().unwrap();
    let err = genclient::generate_concept_images(
        &job(dir.path(), "other", 2),
        &MockGenerator::new("mock", 1.0),
        &fast(),
    )
    .unwrap_err();
    assert!(matches!(err, GenError::ProviderMismatch { .. }));
}

#[test]
fn identity_editor_leaves_images_byte_equal() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = (0..3)
        .map(|i| {
            let p = src.path().join(format!("zebra_{i}.png"));
            image::RgbImage::from_pixel(3, 3, image::Rgb([i, 2 * i, 9]))
                .save(&p)
                .unwrap();
            p
        })
        .collect();
    let job = RemovalJob {
        concept: striped(),
        editor: "identity".into(),
        class_images: ImageSet {
            key: SetKey::class("zebra"),
            paths: paths.clone(),
            seed: None,
        },
        output_dir: out.path().to_path_buf(),
        seed: 3,
    };
    let removed =
        genclient::remove_concept_from_images(&job, &IdentityEditor::new("identity"), &fast())
            .unwrap();
    assert_eq!(removed.key, SetKey::removed("zebra", "striped"));
    for (a, b) in paths.iter().zip(&removed.paths) {
        assert_eq!(a.file_name(), b.file_name());
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    let records = genclient::read_manifest(out.path()).unwrap();
    assert!(records.iter().all(|r| r.source_image.is_some()));
}

/// One-shot JSON server: answers each request by echoing one tiny PNG per seed.
fn serve(
    requests: usize,
) -> (
    String,
    std::thread::JoinHandle<Vec<(String, serde_json::Value)>>,
) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for _ in 0..requests {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut auth, mut length) = (String::new(), 0usize);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line["authorization:".len()..].trim().to_string();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let request: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let n = request["seeds"].as_array().unwrap().len();
            let mut png = Vec::new();
            image::RgbImage::from_pixel(1, 1, image::Rgb([1, 2, 3]))
                .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
                .unwrap();
            let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
            let reply = serde_json::json!({ "images": vec![b64; n] }).to_string();
            let mut stream = stream;
            write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}", reply.len())
                .unwrap();
            seen.push((auth, request));
        }
        seen
    });
    (url, handle)
}

#[test]
fn http_provider_posts_prompt_and_seeds() {
    let (url, server) = serve(2);
    std::env::set_var("CONCEPTFAITH_TEST_KEY", "secret");
    let http = HttpGenerator::new(
        "remote",
        url,
        "CONCEPTFAITH_TEST_KEY",
        Duration::from_secs(10),
    );
    let dir = tempfile::tempdir().unwrap();
    let set = genclient::generate_concept_images(
        &job(dir.path(), "remote", 3),
        &http,
        &JobOptions {
            batch_size: 2,
            ..fast()
        },
    )
    .unwrap();
    assert_eq!(set.len(), 3);
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 2);
    let prompt = genclient::render_generation_prompt(&striped()).unwrap();
    for (auth, req) in &seen {
        assert_eq!(auth, "Bearer secret");
        assert_eq!(req["prompt"], prompt.as_str());
    }
    assert_eq!(seen[0].1["seeds"][0], genclient::derive_seed(11, 0));
    assert_eq!(seen[1].1["seeds"].as_array().unwrap().len(), 1);
}

#[test]
fn http_provider_without_key_fails_permanently() {
    let http = HttpGenerator::new(
        "remote",
        "http://127.0.0.1:9/",
        "CONCEPTFAITH_UNSET_KEY",
        Duration::from_secs(1),
    );
    let err = http.generate("p", &[1]).unwrap_err();
    assert!(!err.is_transient());
}
