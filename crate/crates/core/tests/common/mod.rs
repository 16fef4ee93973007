//! Fixtures shared by integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use conceptfaith::catalog::{self, SetKey, Source};
use conceptfaith::extract::{write_activation_store, ActivationKey, ActivationSet};
use conceptfaith::report::key_slug;

pub const STORE_PROVIDERS: [(&str, &str); 3] = [
    ("flux", "Flux"),
    ("gpt-image", "GPT-Image-1"),
    ("sd35", "SD 3.5"),
];

/// `(class, concept)`; seven concepts so tables need two blocks.
pub const STORE_CONCEPTS: [(&str, &str); 7] = [
    ("beer glass", "bubbly"),
    ("beer glass", "glass"),
    ("church", "brick"),
    ("church", "cross"),
    ("church", "stained glass"),
    ("zebra", "grass"),
    ("zebra", "striped"),
];

pub const STORE_LAYERS: [&str; 2] = ["block5_conv2", "block5_conv3"];

static PIXEL: AtomicU32 = AtomicU32::new(0);

/// Every file gets distinct pixels so no two sets share content.
fn write_pngs(dir: &Path, prefix: &str, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let [a, b, c, _] = PIXEL.fetch_add(1, Ordering::Relaxed).to_le_bytes();
        image::RgbImage::from_pixel(2, 2, image::Rgb([a, b, c]))
            .save(dir.join(format!("{prefix}_{:04}.png", i + 1)))
            .unwrap();
    }
}

fn slug(s: &str) -> String {
    s.replace(' ', "_")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StoreOptions {
    /// Generated sets get exactly the real activations.
    pub mirror_generated: bool,
    /// Removed sets get exactly the class activations and probabilities.
    pub identity_removal: bool,
}

/// An exported full-scale-style project: image folders with placeholder
/// files plus precomputed tensors for a `vgg16` store backend. Returns the
/// run configuration path.
pub fn write_store_fixture(root: &Path, seed: u64) -> PathBuf {
    write_store_fixture_with(root, seed, StoreOptions::default())
}

pub fn write_store_fixture_with(root: &Path, seed: u64, options: StoreOptions) -> PathBuf {
    let generated_count = if options.mirror_generated { 8 } else { 10 };
    let mut saved: HashMap<(String, String), Array4<f64>> = HashMap::new();
    let mut saved_probs: HashMap<String, serde_json::Value> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<&str> = {
        let mut c: Vec<&str> = STORE_CONCEPTS.iter().map(|(c, _)| *c).collect();
        c.dedup();
        c
    };
    let mut toml = String::from("[negatives]\ndir = \"negatives\"\n\n");
    for (k, class) in classes.iter().enumerate() {
        write_pngs(&root.join("classes").join(slug(class)), &slug(class), 6);
        toml += &format!(
            "[classes.\"{class}\"]\ndir = \"classes/{}\"\nindex = {k}\n\n",
            slug(class)
        );
    }
    write_pngs(&root.join("negatives"), "neg", 8);
    for (class, concept) in STORE_CONCEPTS {
        write_pngs(&root.join("real").join(slug(concept)), &slug(concept), 8);
        for (p, _) in STORE_PROVIDERS {
            write_pngs(
                &root.join("generated").join(p).join(concept),
                "gen",
                generated_count,
            );
        }
        write_pngs(&root.join("removed").join(concept), &slug(class), 6);
        toml += &format!(
            "[[concepts]]\nname = \"{concept}\"\ntype = \"texture\"\ndataset = \"fixture\"\nrelevant_class = \"{class}\"\nreal_dir = \"real/{}\"\n\n",
            slug(concept)
        );
    }
    let catalog_path = root.join("catalog.toml");
    std::fs::write(&catalog_path, toml).unwrap();
    let cat = catalog::load_catalog(&catalog_path).unwrap();

    let store = root.join("store");
    let (h, w, c) = (2, 2, 4);
    let mut keys: Vec<SetKey> = vec!["negatives".parse().unwrap()];
    for class in &classes {
        keys.push(SetKey::class(class));
    }
    for (class, concept) in STORE_CONCEPTS {
        keys.push(SetKey::concept(concept, Source::Real));
        for (p, _) in STORE_PROVIDERS {
            keys.push(SetKey::concept(concept, Source::Generated(p.into())));
        }
        keys.push(SetKey::removed(class, concept));
    }
    for key in &keys {
        let set = catalog::load_image_set(&cat, key).unwrap();
        let n = set.len();
        // The tensors this key copies under the fixture options, if any.
        let twin = match (&key.subject, &key.source) {
            (catalog::Subject::Concept(c), Source::Generated(_)) if options.mirror_generated => {
                Some(key_slug(&SetKey::concept(c, Source::Real)))
            }
            (catalog::Subject::Class(c), Source::Removed(_)) if options.identity_removal => {
                Some(key_slug(&SetKey::class(c)))
            }
            _ => None,
        };
        let is_class = matches!(key.subject, catalog::Subject::Class(_));
        for layer in STORE_LAYERS {
            let akey = ActivationKey {
                set: key.clone(),
                model_id: "vgg16".into(),
                layer: layer.into(),
            };
            let mut write = |suffix: &str, offset: f64| {
                let tensors = match &twin {
                    Some(t) => saved[&(format!("{t}{suffix}"), layer.to_string())].clone(),
                    None => Array4::from_shape_fn((n, h, w, c), |_| offset + rng.random::<f64>()),
                };
                saved.insert(
                    (format!("{}{suffix}", key_slug(key)), layer.to_string()),
                    tensors.clone(),
                );
                let stem = store.join(layer).join(format!("{}{suffix}", key_slug(key)));
                let s = ActivationSet {
                    key: akey.clone(),
                    tensors,
                    image_order: set.paths.clone(),
                };
                write_activation_store(&stem, &s, "external").unwrap();
            };
            let offset = if matches!(key.subject, catalog::Subject::Concept(..)) {
                0.3
            } else {
                0.0
            };
            write("", offset);
            if is_class {
                for k in 0..classes.len() {
                    write(&format!("@grad-{k}"), -0.4);
                    write(&format!("@ig-{k}"), -0.2);
                }
            }
        }
        if is_class {
            let probs = match &twin {
                Some(t) => saved_probs[t].clone(),
                None => serde_json::json!((0..n)
                    .map(|_| {
                        let raw: Vec<f64> = (0..classes.len())
                            .map(|_| rng.random::<f64>() + 0.05)
                            .collect();
                        let z: f64 = raw.iter().sum();
                        raw.iter().map(|v| v / z).collect::<Vec<f64>>()
                    })
                    .collect::<Vec<_>>()),
            };
            saved_probs.insert(key_slug(key), probs.clone());
            let body = serde_json::json!({ "image_order": set.paths, "probabilities": probs });
            std::fs::create_dir_all(store.join("probabilities")).unwrap();
            std::fs::write(
                store
                    .join("probabilities")
                    .join(format!("{}.json", key_slug(key))),
                body.to_string(),
            )
            .unwrap();
        }
    }

    let mut run = format!(
        "catalog = \"catalog.toml\"\noutput_dir = \"results\"\nseed = {seed}\n\n[[models]]\nid = \"vgg16\"\nbackend = \"store\"\nroot = \"store\"\nclass_count = {}\nlayers = [\"{}\", \"{}\"]\n\n[intra]\nrepeats = 4\n\n",
        classes.len(),
        STORE_LAYERS[0],
        STORE_LAYERS[1]
    );
    for (id, label) in STORE_PROVIDERS {
        run += &format!("[[providers]]\nid = \"{id}\"\nlabel = \"{label}\"\n\n");
    }
    let path = root.join("run.toml");
    std::fs::write(&path, run).unwrap();
    path
}
