//! Small bundled CNN for CPU-only runs.
//!
//! ```text
//! input 32×32×3
//!   conv 3×3 (8)  → ReLU → avgpool 2  = "conv1"  16×16×8
//!   conv 3×3 (16) → ReLU → avgpool 2  = "conv2"   8×8×16
//!   global average pool → dense → logits
//! ```
//!
//! The head after `conv2` is linear in the activations, so gradients there
//! are `W[k, c] / (h·w)` at every location.

use std::path::Path;

use ndarray::{Array1, Array3, ArrayView1};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{softmax, ExtractError, FeatureMap, LayerSpec, ModelAdapter};

pub const INPUT: usize = 32;
const C1: usize = 8;
const C2: usize = 16;
const H1: usize = INPUT / 2;
const H2: usize = H1 / 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Conv3x3 {
    cin: usize,
    cout: usize,
    /// `[cout][ky][kx][cin]`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv3x3 {
    fn random(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / (9 * cin) as f64).sqrt()).unwrap();
        Self {
            cin,
            cout,
            weights: (0..cout * 9 * cin).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; cout],
        }
    }

    /// Same-padded convolution of an `(n, n, cin)` map.
    fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![0.0; n * n * cout];
        for y in 0..n {
            for xx in 0..n {
                let o = &mut out[(y * n + xx) * cout..(y * n + xx + 1) * cout];
                o.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= n as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= n as isize {
                            continue;
                        }
                        let px = &x[(sy as usize * n + sx as usize) * cin..][..cin];
                        for (co, ov) in o.iter_mut().enumerate() {
                            let w = &self.weights[((co * 3 + ky) * 3 + kx) * cin..][..cin];
                            *ov += w.iter().zip(px).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulate parameter gradients; optionally return the input gradient.
    fn backward(
        &self,
        x: &[f64],
        n: usize,
        dout: &[f64],
        grads: &mut Conv3x3,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let (cin, cout) = (self.cin, self.cout);
        let mut dx = want_dx.then(|| vec![0.0; n * n * cin]);
        for y in 0..n {
            for xx in 0..n {
                let d = &dout[(y * n + xx) * cout..][..cout];
                for (co, &dv) in d.iter().enumerate() {
                    grads.bias[co] += dv;
                }
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= n as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= n as isize {
                            continue;
                        }
                        let base = (sy as usize * n + sx as usize) * cin;
                        for (co, &dv) in d.iter().enumerate() {
                            if dv == 0.0 {
                                continue;
                            }
                            let widx = ((co * 3 + ky) * 3 + kx) * cin;
                            for ci in 0..cin {
                                grads.weights[widx + ci] += dv * x[base + ci];
                            }
                            if let Some(dx) = dx.as_mut() {
                                for ci in 0..cin {
                                    dx[base + ci] += dv * self.weights[widx + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn zeros_like(&self) -> Self {
        Self {
            cin: self.cin,
            cout: self.cout,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.cout],
        }
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&z| z.max(0.0)).collect()
}

/// 2×2 average pool of an `(n, n, c)` map.
fn pool(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let m = n / 2;
    let mut out = vec![0.0; m * m * c];
    for y in 0..m {
        for xx in 0..m {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += x[((2 * y + dy) * n + 2 * xx + dx) * c + ch];
                    }
                }
                out[(y * m + xx) * c + ch] = 0.25 * s;
            }
        }
    }
    out
}

/// Adjoint of [`pool`].
fn unpool(d: &[f64], n: usize, c: usize) -> Vec<f64> {
    let m = n / 2;
    let mut out = vec![0.0; n * n * c];
    for y in 0..n {
        for xx in 0..n {
            for ch in 0..c {
                out[(y * n + xx) * c + ch] = 0.25 * d[((y / 2) * m + xx / 2) * c + ch];
            }
        }
    }
    out
}

fn relu_mask(d: &mut [f64], pre: &[f64]) {
    for (g, &z) in d.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCnn {
    classes: Vec<String>,
    conv1: Conv3x3,
    conv2: Conv3x3,
    /// `[class][C2]`
    dense_w: Vec<f64>,
    dense_b: Vec<f64>,
    #[serde(skip, default = "layer_specs")]
    layers: Vec<LayerSpec>,
}

fn layer_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec {
            name: "conv1".into(),
            shape: (H1, H1, C1),
        },
        LayerSpec {
            name: "conv2".into(),
            shape: (H2, H2, C2),
        },
    ]
}

struct Trace {
    z1: Vec<f64>,
    p1: Vec<f64>,
    z2: Vec<f64>,
    gap: Vec<f64>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop once training accuracy reaches this.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 80,
            batch_size: 16,
            learning_rate: 5e-3,
            target_accuracy: 0.97,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

impl ToyCnn {
    pub fn new(classes: Vec<String>, seed: u64) -> Self {
        assert!(classes.len() > 1, "a classifier needs at least two classes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv3x3::random(3, C1, &mut rng);
        let conv2 = Conv3x3::random(C1, C2, &mut rng);
        let normal = Normal::new(0.0, (1.0 / C2 as f64).sqrt()).unwrap();
        let dense_w = (0..classes.len() * C2)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let dense_b = vec![0.0; classes.len()];
        Self {
            classes,
            conv1,
            conv2,
            dense_w,
            dense_b,
            layers: layer_specs(),
        }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Replace the dense head: `weights` is `[class][16]`.
    pub fn set_head(&mut self, weights: Vec<f64>, bias: Vec<f64>) {
        assert_eq!(weights.len(), self.classes.len() * C2);
        assert_eq!(bias.len(), self.classes.len());
        self.dense_w = weights;
        self.dense_b = bias;
    }

    pub fn head_weight(&self, class: usize, channel: usize) -> f64 {
        self.dense_w[class * C2 + channel]
    }

    pub fn save(&self, path: &Path) -> Result<(), ExtractError> {
        let json = serde_json::to_vec(self).map_err(|e| ExtractError::Store {
            path: path.into(),
            message: e.to_string(),
        })?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExtractError> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| ExtractError::Store {
            path: path.into(),
            message: e.to_string(),
        })
    }

    /// SHA-256 of the serialized weights.
    pub fn weights_hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("serializable"),
        ))
    }

    fn check_input(input: &Array3<f64>) -> Result<&[f64], ExtractError> {
        if input.shape() != [INPUT, INPUT, 3] {
            return Err(ExtractError::Shape(format!(
                "toy-cnn expects 32×32×3 input, got {:?}",
                input.shape()
            )));
        }
        input
            .as_slice()
            .ok_or_else(|| ExtractError::Shape("input not contiguous".into()))
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let z1 = self.conv1.forward(x, INPUT);
        let p1 = pool(&relu(&z1), INPUT, C1);
        let z2 = self.conv2.forward(&p1, H1);
        let p2 = pool(&relu(&z2), H1, C2);
        let gap = gap(&p2, H2 * H2, C2);
        let logits = self.head(&gap);
        Trace {
            z1,
            p1,
            z2,
            gap,
            logits,
        }
    }

    fn head(&self, gap: &[f64]) -> Vec<f64> {
        (0..self.classes.len())
            .map(|k| {
                self.dense_b[k]
                    + self.dense_w[k * C2..][..C2]
                        .iter()
                        .zip(gap)
                        .map(|(w, g)| w * g)
                        .sum::<f64>()
            })
            .collect()
    }

    fn forward_from_conv1(&self, p1: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z2 = self.conv2.forward(p1, H1);
        let p2 = pool(&relu(&z2), H1, C2);
        (z2, p2)
    }

    /// d(logits)/d(conv2 output) contracted with `upstream`.
    fn head_backward(&self, upstream: &[f64]) -> Vec<f64> {
        let mut dg = [0.0; C2];
        for (k, &u) in upstream.iter().enumerate() {
            for (c, d) in dg.iter_mut().enumerate() {
                *d += u * self.dense_w[k * C2 + c];
            }
        }
        let area = (H2 * H2) as f64;
        let mut dp2 = vec![0.0; H2 * H2 * C2];
        for cell in dp2.chunks_mut(C2) {
            for (c, v) in cell.iter_mut().enumerate() {
                *v = dg[c] / area;
            }
        }
        dp2
    }

    fn conv2_backward_to_p1(
        &self,
        p1: &[f64],
        z2: &[f64],
        dp2: &[f64],
        grads: Option<&mut ToyCnn>,
    ) -> Vec<f64> {
        let mut dz2 = unpool(dp2, H1, C2);
        relu_mask(&mut dz2, z2);
        let mut scratch;
        let g = match grads {
            Some(g) => &mut g.conv2,
            None => {
                scratch = self.conv2.zeros_like();
                &mut scratch
            }
        };
        self.conv2
            .backward(p1, H1, &dz2, g, true)
            .expect("dx requested")
    }

    /// Cross-entropy gradient for one labelled input; returns the loss.
    fn accumulate_gradient(&self, x: &[f64], label: usize, grads: &mut ToyCnn) -> f64 {
        let t = self.trace(x);
        let p = softmax(ArrayView1::from(&t.logits));
        let loss = -p[label].max(1e-300).ln();
        let mut dlogits: Vec<f64> = p.to_vec();
        dlogits[label] -= 1.0;
        for (k, &d) in dlogits.iter().enumerate() {
            grads.dense_b[k] += d;
            for c in 0..C2 {
                grads.dense_w[k * C2 + c] += d * t.gap[c];
            }
        }
        let dp2 = self.head_backward(&dlogits);
        let dp1 = self.conv2_backward_to_p1(&t.p1, &t.z2, &dp2, Some(grads));
        let mut dz1 = unpool(&dp1, INPUT, C1);
        relu_mask(&mut dz1, &t.z1);
        let conv1 = &self.conv1;
        conv1.backward(x, INPUT, &dz1, &mut grads.conv1, false);
        loss
    }

    fn zeros_like(&self) -> Self {
        Self {
            classes: self.classes.clone(),
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            dense_w: vec![0.0; self.dense_w.len()],
            dense_b: vec![0.0; self.dense_b.len()],
            layers: layer_specs(),
        }
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1.weights,
            &mut self.conv1.bias,
            &mut self.conv2.weights,
            &mut self.conv2.bias,
            &mut self.dense_w,
            &mut self.dense_b,
        ]
    }

    fn add_assign(&mut self, other: &ToyCnn) {
        let mut o = other.clone();
        for (a, b) in self.params_mut().into_iter().zip(o.params_mut()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn predict(&self, input: &Array3<f64>) -> Result<usize, ExtractError> {
        let logits = self.logits(input)?;
        Ok(logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0))
    }

    pub fn accuracy(&self, inputs: &[Array3<f64>], labels: &[usize]) -> Result<f64, ExtractError> {
        let correct = inputs
            .par_iter()
            .zip(labels)
            .map(|(x, &l)| self.predict(x).map(|p| (p == l) as usize))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / inputs.len() as f64)
    }

    /// Minibatch Adam on cross-entropy. Deterministic for a fixed seed.
    pub fn train(
        &mut self,
        inputs: &[Array3<f64>],
        labels: &[usize],
        config: &TrainConfig,
    ) -> Result<TrainReport, ExtractError> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(ExtractError::Shape(format!(
                "{} inputs, {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes.len()) {
            return Err(ExtractError::InvalidClass {
                class: bad,
                class_count: self.classes.len(),
            });
        }
        let xs: Vec<&[f64]> = inputs
            .iter()
            .map(Self::check_input)
            .collect::<Result<_, _>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut m = self.zeros_like();
        let mut v = self.zeros_like();
        let mut step = 0i32;
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut report = TrainReport {
            epochs: 0,
            train_accuracy: 0.0,
            final_loss: f64::NAN,
        };

        for epoch in 1..=config.max_epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size.max(1)) {
                // Per-sample gradients in parallel, summed in a fixed order.
                let parts: Vec<(f64, ToyCnn)> = batch
                    .par_iter()
                    .map(|&i| {
                        let mut g = self.zeros_like();
                        let loss = self.accumulate_gradient(xs[i], labels[i], &mut g);
                        (loss, g)
                    })
                    .collect();
                let mut grad = self.zeros_like();
                for (loss, g) in &parts {
                    epoch_loss += loss;
                    grad.add_assign(g);
                }
                step += 1;
                let scale = 1.0 / batch.len() as f64;
                let lr = config.learning_rate * (1.0 - beta2.powi(step)).sqrt()
                    / (1.0 - beta1.powi(step));
                let mut g_params = grad;
                for ((p, g), (mp, vp)) in self
                    .params_mut()
                    .into_iter()
                    .zip(g_params.params_mut())
                    .zip(m.params_mut().into_iter().zip(v.params_mut()))
                {
                    for i in 0..p.len() {
                        let gi = g[i] * scale;
                        mp[i] = beta1 * mp[i] + (1.0 - beta1) * gi;
                        vp[i] = beta2 * vp[i] + (1.0 - beta2) * gi * gi;
                        p[i] -= lr * mp[i] / (vp[i].sqrt() + eps);
                    }
                }
            }
            let acc = self.accuracy(inputs, labels)?;
            report = TrainReport {
                epochs: epoch,
                train_accuracy: acc,
                final_loss: epoch_loss / xs.len() as f64,
            };
            log::debug!(
                "toy-cnn epoch {epoch}: loss {:.4} acc {:.3}",
                report.final_loss,
                acc
            );
            if acc >= config.target_accuracy {
                break;
            }
        }
        Ok(report)
    }
}

fn gap(x: &[f64], cells: usize, c: usize) -> Vec<f64> {
    let mut g = vec![0.0; c];
    for cell in x.chunks(c) {
        for (a, b) in g.iter_mut().zip(cell) {
            *a += b;
        }
    }
    g.iter_mut().for_each(|v| *v /= cells as f64);
    g
}

fn to_map(v: Vec<f64>, n: usize, c: usize) -> FeatureMap {
    Array3::from_shape_vec((n, n, c), v).expect("shape")
}

fn contiguous<'a>(
    act: &'a FeatureMap,
    expected: (usize, usize, usize),
) -> Result<std::borrow::Cow<'a, [f64]>, ExtractError> {
    if act.dim() != expected {
        return Err(ExtractError::Shape(format!(
            "expected {:?}, got {:?}",
            expected,
            act.dim()
        )));
    }
    Ok(match act.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(act.iter().copied().collect()),
    })
}

impl ModelAdapter for ToyCnn {
    fn model_id(&self) -> &str {
        "toy-cnn"
    }

    fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn input_size(&self) -> (usize, usize) {
        (INPUT, INPUT)
    }

    fn class_count(&self) -> usize {
        self.classes.len()
    }

    fn layer_activations(
        &self,
        input: &Array3<f64>,
        layer: &str,
    ) -> Result<FeatureMap, ExtractError> {
        self.layer(layer)?;
        let x = Self::check_input(input)?;
        let z1 = self.conv1.forward(x, INPUT);
        let p1 = pool(&relu(&z1), INPUT, C1);
        if layer == "conv1" {
            return Ok(to_map(p1, H1, C1));
        }
        let (_, p2) = self.forward_from_conv1(&p1);
        Ok(to_map(p2, H2, C2))
    }

    fn logits_from_layer(
        &self,
        layer: &str,
        act: &FeatureMap,
    ) -> Result<Array1<f64>, ExtractError> {
        let spec = self.layer(layer)?.shape;
        let a = contiguous(act, spec)?;
        let p2 = if layer == "conv1" {
            self.forward_from_conv1(&a).1
        } else {
            a.into_owned()
        };
        Ok(Array1::from(self.head(&gap(&p2, H2 * H2, C2))))
    }

    fn backward_from_layer(
        &self,
        layer: &str,
        act: &FeatureMap,
        upstream: ArrayView1<f64>,
    ) -> Result<FeatureMap, ExtractError> {
        let spec = self.layer(layer)?.shape;
        if upstream.len() != self.classes.len() {
            return Err(ExtractError::Shape(format!(
                "upstream has {} entries for {} classes",
                upstream.len(),
                self.classes.len()
            )));
        }
        let a = contiguous(act, spec)?;
        let up: Vec<f64> = upstream.to_vec();
        let dp2 = self.head_backward(&up);
        if layer == "conv2" {
            return Ok(to_map(dp2, H2, C2));
        }
        let (z2, _) = self.forward_from_conv1(&a);
        Ok(to_map(
            self.conv2_backward_to_p1(&a, &z2, &dp2, None),
            H1,
            C1,
        ))
    }

    fn logits(&self, input: &Array3<f64>) -> Result<Array1<f64>, ExtractError> {
        Ok(Array1::from(self.trace(Self::check_input(input)?).logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        Array3::from_shape_fn((INPUT, INPUT, 3), |_| u.sample(&mut rng))
    }

    fn model() -> ToyCnn {
        ToyCnn::new(vec!["a".into(), "b".into(), "c".into()], 3)
    }

    #[test]
    fn layer_shapes() {
        let m = model();
        let x = random_input(1);
        assert_eq!(m.layer_activations(&x, "conv1").unwrap().dim(), (16, 16, 8));
        assert_eq!(m.layer_activations(&x, "conv2").unwrap().dim(), (8, 8, 16));
        assert!(matches!(
            m.layer_activations(&x, "conv99"),
            Err(ExtractError::UnknownLayer { .. })
        ));
    }

    #[test]
    fn split_forward_agrees_with_full_forward() {
        let m = model();
        let x = random_input(2);
        let full = m.logits(&x).unwrap();
        for layer in ["conv1", "conv2"] {
            let act = m.layer_activations(&x, layer).unwrap();
            let split = m.logits_from_layer(layer, &act).unwrap();
            for (a, b) in full.iter().zip(split.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1_backward_matches_finite_differences() {
        let m = model();
        let act = m.layer_activations(&random_input(4), "conv1").unwrap();
        let up = ndarray::array![0.0, 1.0, 0.0];
        let g = m.backward_from_layer("conv1", &act, up.view()).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0), (5, 7, 3), (15, 15, 7), (8, 2, 1)] {
            let mut ap = act.clone();
            ap[idx] += h;
            let mut am = act.clone();
            am[idx] -= h;
            let fd = (m.logits_from_layer("conv1", &ap).unwrap()[1]
                - m.logits_from_layer("conv1", &am).unwrap()[1])
                / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6, "{idx:?}: fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let m = model();
        let x = random_input(5);
        let xs = x.as_slice().unwrap();
        let mut g = m.zeros_like();
        m.accumulate_gradient(xs, 2, &mut g);
        let loss = |mm: &ToyCnn| {
            let t = mm.trace(xs);
            -softmax(ArrayView1::from(&t.logits))[2].ln()
        };
        let h = 1e-6;
        for (which, i) in [(0usize, 5usize), (2, 17), (4, 3), (5, 1)] {
            let mut p = m.clone();
            p.params_mut()[which][i] += h;
            let mut q = m.clone();
            q.params_mut()[which][i] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            let an = g.clone().params_mut()[which][i];
            assert!(
                (fd - an).abs() < 1e-5 * (1.0 + an.abs()),
                "param {which}[{i}]: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn save_load_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.json");
        m.save(&p).unwrap();
        let back = ToyCnn::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.layers().len(), 2);
        assert_eq!(back.weights_hash(), m.weights_hash());
    }
}
