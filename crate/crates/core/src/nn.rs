//! Minimal dense-layer toolkit (f64, CPU) with Adam and weight persistence.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine layer `y = x W + b` on row-major batches (`x` is rows × in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn he<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("valid std");
        Self {
            w: Array2::from_shape_fn((n_in, n_out), |_| normal.sample(rng)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Array2::zeros((n_in, n_out)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_in(), self.n_out())
    }

    pub fn n_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.w *= s;
        self.b *= s;
    }

    pub fn add_assign(&mut self, other: &Dense) {
        self.w += &other.w;
        self.b += &other.b;
    }
}

pub fn relu(mut x: Array2<f64>) -> Array2<f64> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Gradient through a ReLU whose output was `y`.
pub fn relu_backward(mut dy: Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    dy.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dy
}

/// Column-wise max over rows with the first arg-max row of each column.
pub fn max_pool(x: &Array2<f64>) -> (Array1<f64>, Vec<usize>) {
    let mut best = Array1::from_elem(x.ncols(), f64::NEG_INFINITY);
    let mut arg = vec![0usize; x.ncols()];
    for (i, row) in x.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = i;
            }
        }
    }
    (best, arg)
}

/// Mean softmax cross-entropy over rows and `dL/dlogits`.
pub fn softmax_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exp: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exp.iter().sum();
        loss += z.ln() + m - row[targets[i]];
        for (j, e) in exp.iter().enumerate() {
            grad[[i, j]] = (e / z - if j == targets[i] { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Dense]) -> Self {
        Self {
            cfg,
            t: 0,
            m: params.iter().map(Dense::zeros_like).collect(),
            v: params.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Dense], grads: &[Dense]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            for (((p, &g), m), v) in p.w.iter_mut().zip(&g.w).zip(m.w.iter_mut()).zip(v.w.iter_mut()) {
                update(p, g, m, v);
            }
            for (((p, &g), m), v) in p.b.iter_mut().zip(&g.b).zip(m.b.iter_mut()).zip(v.b.iter_mut()) {
                update(p, g, m, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the raw file, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub model: String,
    pub config: serde_json::Value,
    pub data: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `layers` as little-endian f32 to `<stem>.bin` plus `<stem>.json`.
pub fn save_layers(stem: &Path, model: &str, config: serde_json::Value, layers: &[(&str, &Dense)]) -> Result<()> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, d) in layers {
        for (suffix, shape, values) in [
            ("w", vec![d.n_in(), d.n_out()], d.w.iter().copied().collect::<Vec<_>>()),
            ("b", vec![d.n_out()], d.b.to_vec()),
        ] {
            tensors.push(TensorEntry {
                name: format!("{name}.{suffix}"),
                shape,
                offset,
            });
            offset += values.len();
            for v in values {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let manifest = WeightsManifest {
        model: model.into(),
        config,
        data: bin.file_name().unwrap().to_string_lossy().into_owned(),
        dtype: "float32le".into(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Reads weights written by [`save_layers`]; layers are returned in manifest
/// order together with the stored config.
pub fn load_layers(stem: &Path, model: &str) -> Result<(serde_json::Value, Vec<(String, Dense)>)> {
    let json = stem.with_extension("json");
    let text = std::fs::read_to_string(&json).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(json.clone()),
        _ => Error::io(&json, e),
    })?;
    let manifest: WeightsManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: json.clone(),
        source,
    })?;
    if manifest.model != model {
        return Err(Error::Config(format!(
            "{} holds a {} model, expected {model}",
            json.display(),
            manifest.model
        )));
    }
    let bin = json.with_file_name(&manifest.data);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let bad = |msg: String| Error::Config(format!("{}: {msg}", json.display()));
    let tensor = |e: &TensorEntry| -> Result<Vec<f64>> {
        let n: usize = e.shape.iter().product();
        floats
            .get(e.offset..e.offset + n)
            .map(|s| s.to_vec())
            .ok_or_else(|| bad(format!("tensor {} out of range", e.name)))
    };
    let mut layers = Vec::new();
    for pair in manifest.tensors.chunks(2) {
        let [w, b] = pair else {
            return Err(bad("odd tensor count".into()));
        };
        let name = w.name.strip_suffix(".w").ok_or_else(|| bad(format!("unexpected tensor {}", w.name)))?;
        if w.shape.len() != 2 || b.shape != [w.shape[1]] {
            return Err(bad(format!("bad shapes for {name}")));
        }
        let w_arr = Array2::from_shape_vec((w.shape[0], w.shape[1]), tensor(w)?).map_err(|e| bad(e.to_string()))?;
        layers.push((
            name.to_string(),
            Dense {
                w: w_arr,
                b: Array1::from(tensor(b)?),
            },
        ));
    }
    Ok((manifest.config, layers))
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, tiny)` between two tensors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central finite-difference gradient of `loss` w.r.t. every parameter of
/// `params`, returned layer by layer in the same layout.
pub fn numeric_gradient(params: &mut [Dense], eps: f64, mut loss: impl FnMut(&[Dense]) -> f64) -> Vec<Dense> {
    let mut out: Vec<Dense> = params.iter().map(Dense::zeros_like).collect();
    for l in 0..params.len() {
        for idx in 0..params[l].w.len() {
            let (r, c) = (idx / params[l].n_out(), idx % params[l].n_out());
            let orig = params[l].w[[r, c]];
            params[l].w[[r, c]] = orig + eps;
            let up = loss(params);
            params[l].w[[r, c]] = orig - eps;
            let down = loss(params);
            params[l].w[[r, c]] = orig;
            out[l].w[[r, c]] = (up - down) / (2.0 * eps);
        }
        for j in 0..params[l].b.len() {
            let orig = params[l].b[j];
            params[l].b[j] = orig + eps;
            let up = loss(params);
            params[l].b[j] = orig - eps;
            let down = loss(params);
            params[l].b[j] = orig;
            out[l].b[j] = (up - down) / (2.0 * eps);
        }
    }
    out
}

/// Worst per-tensor relative error between analytic and numeric gradients.
pub fn worst_gradient_error(analytic: &[Dense], numeric: &[Dense]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            [
                relative_error(a.w.as_slice().unwrap(), n.w.as_slice().unwrap()),
                relative_error(a.b.as_slice().unwrap(), n.b.as_slice().unwrap()),
            ]
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_layer_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = vec![Dense::he(3, 6, &mut rng), Dense::he(6, 4, &mut rng)];
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let targets = [0usize, 3, 1, 2, 3];
        let forward = |p: &[Dense]| {
            let h = relu(p[0].forward(&x));
            let logits = p[1].forward(&h);
            (h, softmax_cross_entropy(&logits, &targets))
        };
        let (h, (_, dlogits)) = forward(&params);
        let mut grads: Vec<Dense> = params.iter().map(Dense::zeros_like).collect();
        let (g0, g1) = grads.split_at_mut(1);
        let dh = params[1].backward(&h, &dlogits, &mut g1[0]);
        params[0].backward(&x, &relu_backward(dh, &h), &mut g0[0]);
        let numeric = numeric_gradient(&mut params, 1e-5, |p| forward(p).1 .0);
        assert!(worst_gradient_error(&grads, &numeric) < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Dense {
            w: Array2::from_elem((1, 1), 5.0),
            b: Array1::from(vec![-3.0]),
        }];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &p);
        for _ in 0..500 {
            let g = vec![Dense {
                w: p[0].w.mapv(|v| 2.0 * v),
                b: p[0].b.mapv(|v| 2.0 * v),
            }];
            opt.step(&mut p, &g);
        }
        assert!(p[0].w[[0, 0]].abs() < 1e-2 && p[0].b[0].abs() < 1e-2);
    }

    #[test]
    fn max_pool_first_argmax() {
        let x = Array2::from_shape_vec((3, 2), vec![1.0, 5.0, 3.0, 5.0, 3.0, 0.0]).unwrap();
        let (m, arg) = max_pool(&x);
        assert_eq!(m.to_vec(), vec![3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
    }

    #[test]
    fn weights_round_trip_as_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Dense::he(4, 3, &mut rng);
        let b = Dense::he(3, 2, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        save_layers(&stem, "toy", serde_json::json!({"k": 1}), &[("a", &a), ("b", &b)]).unwrap();
        let (cfg, layers) = load_layers(&stem, "toy").unwrap();
        assert_eq!(cfg["k"], 1);
        assert_eq!(layers[0].0, "a");
        assert_eq!(layers[1].1.w.dim(), (3, 2));
        for (x, y) in layers[0].1.w.iter().zip(a.w.iter()) {
            assert_eq!(*x, *y as f32 as f64);
        }
        assert!(load_layers(&stem, "other").is_err());
        assert!(matches!(load_layers(&dir.path().join("nope"), "toy"), Err(Error::MissingArtifact(_))));
    }
}
