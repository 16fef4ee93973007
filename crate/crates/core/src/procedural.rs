//! Procedural images for the bundled toy task: full-frame striped, dotted
//! and plain textures, class images with a textured blob, and a blur-based
//! texture eraser.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const TOY_SIZE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Striped,
    Dotted,
    Plain,
}

impl fmt::Display for Texture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Texture::Striped => "striped",
            Texture::Dotted => "dotted",
            Texture::Plain => "plain",
        })
    }
}

impl Texture {
    /// First texture keyword found in free text, `Plain` otherwise.
    pub fn from_text(text: &str) -> Texture {
        let t = text.to_lowercase();
        if t.contains("stripe") || t.contains("zebra") {
            Texture::Striped
        } else if t.contains("dot") || t.contains("spot") || t.contains("dalmatian") {
            Texture::Dotted
        } else {
            Texture::Plain
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, center: f64, spread: f64) -> f64 {
    center + spread * (rng.random::<f64>() * 2.0 - 1.0)
}

fn shade(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn gray(v: f64, tint: [f64; 3]) -> Rgb<u8> {
    Rgb([shade(v + tint[0]), shade(v + tint[1]), shade(v + tint[2])])
}

/// Pixel sampler for one texture draw. `diversity` in `[0, 1]` scales how far
/// the parameters may wander from their central values.
fn texture_sampler(
    texture: Texture,
    rng: &mut ChaCha8Rng,
    diversity: f64,
) -> Box<dyn Fn(f64, f64) -> Rgb<u8>> {
    let d = diversity.clamp(0.0, 1.0);
    let tint = [
        jitter(rng, 0.0, 0.08 * d),
        jitter(rng, 0.0, 0.08 * d),
        jitter(rng, 0.0, 0.08 * d),
    ];
    match texture {
        Texture::Striped => {
            let theta = jitter(rng, PI / 4.0, PI / 2.0 * d);
            let period = jitter(rng, 5.0, 2.0 * d);
            let phase = rng.random::<f64>() * 2.0 * PI;
            let dark = jitter(rng, 0.1, 0.08 * d);
            let light = jitter(rng, 0.9, 0.08 * d);
            let (c, s) = (theta.cos(), theta.sin());
            Box::new(move |x, y| {
                let v = (2.0 * PI * (x * c + y * s) / period + phase).sin();
                gray(if v > 0.0 { light } else { dark }, tint)
            })
        }
        Texture::Dotted => {
            let spacing = jitter(rng, 7.0, 1.5 * d);
            let radius = jitter(rng, 1.8, 0.6 * d);
            let (ox, oy) = (rng.random::<f64>() * spacing, rng.random::<f64>() * spacing);
            let dark = jitter(rng, 0.1, 0.08 * d);
            let light = jitter(rng, 0.9, 0.08 * d);
            Box::new(move |x, y| {
                let fx = (x + ox).rem_euclid(spacing) - spacing / 2.0;
                let fy = (y + oy).rem_euclid(spacing) - spacing / 2.0;
                gray(
                    if fx * fx + fy * fy <= radius * radius {
                        dark
                    } else {
                        light
                    },
                    tint,
                )
            })
        }
        Texture::Plain => {
            let base = jitter(rng, 0.5, 0.2 * d.max(0.25));
            let gx = jitter(rng, 0.0, 0.006);
            let gy = jitter(rng, 0.0, 0.006);
            Box::new(move |x, y| gray(base + gx * x + gy * y, tint))
        }
    }
}

/// Full-frame texture image.
pub fn render_texture(texture: Texture, seed: u64, diversity: f64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = texture_sampler(texture, &mut rng, diversity);
    RgbImage::from_fn(TOY_SIZE, TOY_SIZE, |x, y| sample(x as f64, y as f64))
}

/// Class image: a plain background with an elliptical blob carrying `texture`.
pub fn render_class_image(texture: Texture, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = texture_sampler(Texture::Plain, &mut rng, 1.0);
    let blob = texture_sampler(texture, &mut rng, 1.0);
    let size = TOY_SIZE as f64;
    let (cx, cy) = (
        jitter(&mut rng, size / 2.0, 4.0),
        jitter(&mut rng, size / 2.0, 4.0),
    );
    let (rx, ry) = (jitter(&mut rng, 11.0, 3.0), jitter(&mut rng, 11.0, 3.0));
    RgbImage::from_fn(TOY_SIZE, TOY_SIZE, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let r = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
        if r <= 1.0 {
            blob(fx, fy)
        } else {
            background(fx, fy)
        }
    })
}

/// Low-frequency colour noise, used as the negative pool.
pub fn render_negative(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 5]> = (0..3)
        .map(|_| {
            [
                rng.random::<f64>() * 0.6,
                rng.random::<f64>() * 0.6,
                rng.random::<f64>() * 2.0 * PI,
                rng.random::<f64>(),
                rng.random::<f64>() * 0.3,
            ]
        })
        .collect();
    let base = [
        rng.random::<f64>(),
        rng.random::<f64>(),
        rng.random::<f64>(),
    ];
    RgbImage::from_fn(TOY_SIZE, TOY_SIZE, |x, y| {
        let mut px = [0u8; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let v: f64 = waves
                .iter()
                .map(|w| w[4] * (w[0] * x as f64 + w[1] * y as f64 + w[2] + c as f64 * w[3]).sin())
                .sum();
            *p = shade(base[c] * 0.6 + 0.2 + v);
        }
        Rgb(px)
    })
}

/// Blend each pixel toward a Gaussian-blurred copy; `strength` 0 is the identity.
pub fn erase_texture(img: &RgbImage, strength: f64) -> RgbImage {
    let a = strength.clamp(0.0, 1.0);
    if a == 0.0 {
        return img.clone();
    }
    let blurred = image::imageops::blur(img, 2.5);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (p, q) = (img.get_pixel(x, y).0, blurred.get_pixel(x, y).0);
        Rgb([0, 1, 2].map(|c| shade(((1.0 - a) * p[c] as f64 + a * q[c] as f64) / 255.0)))
    })
}

/// Sizes of the bundled toy corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub class_images: usize,
    pub concept_images: usize,
    pub negative_images: usize,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            class_images: 60,
            concept_images: 64,
            negative_images: 64,
            seed: 7,
        }
    }
}

/// Toy classes and the texture that defines each.
pub const TOY_CLASSES: [(&str, Texture); 3] = [
    ("dalmatian", Texture::Dotted),
    ("plain", Texture::Plain),
    ("zebra", Texture::Striped),
];

/// Toy concepts and their relevant class.
pub const TOY_CONCEPTS: [(&str, Texture, &str); 2] = [
    ("dotted", Texture::Dotted, "dalmatian"),
    ("striped", Texture::Striped, "zebra"),
];

fn save_all(
    dir: &Path,
    prefix: &str,
    images: impl Iterator<Item = RgbImage>,
) -> std::io::Result<usize> {
    std::fs::create_dir_all(dir)?;
    let mut n = 0;
    for (i, img) in images.enumerate() {
        img.save(dir.join(format!("{prefix}_{:04}.png", i + 1)))
            .map_err(std::io::Error::other)?;
        n += 1;
    }
    Ok(n)
}

/// Write the toy corpus under `root` and return the path of its catalog file.
pub fn write_toy_corpus(root: &Path, spec: &ToyCorpusSpec) -> std::io::Result<PathBuf> {
    let mut toml = String::from("[negatives]\ndir = \"negatives\"\n\n");
    for (k, (class, texture)) in TOY_CLASSES.iter().enumerate() {
        let base = spec
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add(k as u64 * 100_000);
        let n = save_all(
            &root.join("classes").join(class),
            class,
            (0..spec.class_images).map(|i| render_class_image(*texture, base + i as u64)),
        )?;
        toml +=
            &format!("[classes.{class}]\ndir = \"classes/{class}\"\nindex = {k}\ncount = {n}\n\n");
    }
    for (j, (concept, texture, class)) in TOY_CONCEPTS.iter().enumerate() {
        let base = spec
            .seed
            .wrapping_mul(2_000_003)
            .wrapping_add(j as u64 * 100_000);
        let n = save_all(
            &root.join("concepts").join(concept),
            concept,
            (0..spec.concept_images).map(|i| render_texture(*texture, base + i as u64, 1.0)),
        )?;
        toml += &format!(
            "[[concepts]]\nname = \"{concept}\"\ntype = \"texture\"\ndataset = \"procedural\"\n\
             relevant_class = \"{class}\"\nreal_dir = \"concepts/{concept}\"\nreal_count = {n}\n\n"
        );
    }
    let base = spec.seed.wrapping_mul(3_000_017);
    save_all(
        &root.join("negatives"),
        "neg",
        (0..spec.negative_images).map(|i| render_negative(base + i as u64)),
    )?;
    let path = root.join("catalog.toml");
    std::fs::write(&path, toml)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(
            render_texture(Texture::Striped, 3, 1.0),
            render_texture(Texture::Striped, 3, 1.0)
        );
        assert_ne!(
            render_texture(Texture::Striped, 3, 1.0),
            render_texture(Texture::Striped, 4, 1.0)
        );
        assert_eq!(
            render_class_image(Texture::Dotted, 9),
            render_class_image(Texture::Dotted, 9)
        );
    }

    #[test]
    fn stripes_have_contrast_and_plain_does_not() {
        let spread = |img: &RgbImage| {
            let v: Vec<f64> = img.pixels().map(|p| p.0[0] as f64).collect();
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(spread(&render_texture(Texture::Striped, 1, 1.0)) > 150.0);
        assert!(spread(&render_texture(Texture::Plain, 1, 1.0)) < 80.0);
    }

    #[test]
    fn erasure_reduces_contrast() {
        let img = render_texture(Texture::Striped, 5, 0.0);
        assert_eq!(erase_texture(&img, 0.0), img);
        let var = |img: &RgbImage| {
            let v: Vec<f64> = img.pixels().map(|p| p.0[0] as f64).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        assert!(var(&erase_texture(&img, 1.0)) < 0.2 * var(&img));
    }

    #[test]
    fn keyword_detection() {
        assert_eq!(
            Texture::from_text("A realistic close-up of the concept striped"),
            Texture::Striped
        );
        assert_eq!(Texture::from_text("Spotted fur"), Texture::Dotted);
        assert_eq!(Texture::from_text("a wooden spoon"), Texture::Plain);
    }

    #[test]
    fn corpus_catalog_loads() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec {
            class_images: 3,
            concept_images: 4,
            negative_images: 4,
            seed: 1,
        };
        let path = write_toy_corpus(dir.path(), &spec).unwrap();
        let cat = crate::catalog::load_catalog(&path).unwrap();
        assert_eq!(cat.concepts.len(), 2);
        assert_eq!(cat.class_index("zebra", 3).unwrap(), 2);
        assert_eq!(cat.concept("striped").unwrap().real_count, 4);
    }
}
