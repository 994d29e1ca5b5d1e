//! Toy point-wise vertebra classifier: a shared per-point MLP, a global
//! max-pooled feature, and a head over `[point feature ‖ global feature]`.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{LabeledPointCloud, PointCloud, LEVELS};
use crate::compounding::fps::farthest_point_indices;
use crate::error::{Error, Result};
use crate::geometry::{bounding_box, Vec3};
use crate::nn::{self, max_pool, relu, relu_backward, softmax_cross_entropy, Adam, AdamConfig, Dense};

const MODEL_TAG: &str = "point-classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierArch {
    /// Widths of the shared per-point MLP; the last is the global feature size.
    pub encoder: [usize; 2],
    pub head_hidden: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            encoder: [64, 128],
            head_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of the dataset held out for checkpoint selection.
    pub val_fraction: f64,
    /// Clouds larger than this are reduced by FPS before training.
    pub max_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 4,
            seed: 0,
            val_fraction: 0.2,
            max_points: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.max_points == 0 {
            return Err(Error::invalid("batch size, learning rate and max points must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("validation fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Centroid-centred, unit-bounding-box-diagonal copy of `points`. The
/// centroid is summed in sorted order so it does not depend on input order.
pub fn normalize_points(points: &[Vec3]) -> (Vec<Vec3>, Vec3, f64) {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    let c = sorted.iter().fold(Vec3::zeros(), |acc, p| acc + p) / sorted.len().max(1) as f64;
    let scale = bounding_box(points)
        .map(|(lo, hi)| (hi - lo).norm())
        .filter(|d| *d > 0.0)
        .unwrap_or(1.0);
    (points.iter().map(|p| (p - c) / scale).collect(), c, scale)
}

fn to_matrix(points: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, j)| points[i][j])
}

struct Cache {
    a1: Array2<f64>,
    a2: Array2<f64>,
    g: Array1<f64>,
    arg: Vec<usize>,
    h: Array2<f64>,
    logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointClassifier {
    pub arch: ClassifierArch,
    /// Encoder 1, encoder 2, head hidden, head output.
    pub layers: Vec<Dense>,
}

impl PointClassifier {
    pub fn new(arch: ClassifierArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [e1, e2] = arch.encoder;
        Self {
            arch,
            layers: vec![
                Dense::he(3, e1, &mut rng),
                Dense::he(e1, e2, &mut rng),
                Dense::he(2 * e2, arch.head_hidden, &mut rng),
                Dense::he(arch.head_hidden, LEVELS as usize, &mut rng),
            ],
        }
    }

    fn forward_with(layers: &[Dense], x: &Array2<f64>) -> Cache {
        let a1 = relu(layers[0].forward(x));
        let a2 = relu(layers[1].forward(&a1));
        let (g, arg) = max_pool(&a2);
        let c = a2.ncols();
        let w = &layers[2].w;
        // the global half of the head input is shared by every point
        let global = g.dot(&w.slice(s![c.., ..])) + &layers[2].b;
        let h = relu(a2.dot(&w.slice(s![..c, ..])) + &global);
        let logits = layers[3].forward(&h);
        Cache { a1, a2, g, arg, h, logits }
    }

    /// Adds `dL/dθ` for one cloud to `grads`.
    fn backward_with(layers: &[Dense], x: &Array2<f64>, cache: &Cache, dlogits: &Array2<f64>, grads: &mut [Dense]) {
        let dh = layers[3].backward(&cache.h, dlogits, &mut grads[3]);
        let dz = relu_backward(dh, &cache.h);
        let c = cache.a2.ncols();
        let sdz = dz.sum_axis(Axis(0));
        {
            let gw = &mut grads[2].w;
            let local = cache.a2.t().dot(&dz);
            let mut top = gw.slice_mut(s![..c, ..]);
            top += &local;
            let outer = cache
                .g
                .view()
                .insert_axis(Axis(1))
                .dot(&sdz.view().insert_axis(Axis(0)));
            let mut bottom = gw.slice_mut(s![c.., ..]);
            bottom += &outer;
            grads[2].b += &sdz;
        }
        let w = &layers[2].w;
        let mut da2 = dz.dot(&w.slice(s![..c, ..]).t());
        let dg = w.slice(s![c.., ..]).dot(&sdz);
        for (j, &i) in cache.arg.iter().enumerate() {
            da2[[i, j]] += dg[j];
        }
        let dz2 = relu_backward(da2, &cache.a2);
        let da1 = layers[1].backward(&cache.a1, &dz2, &mut grads[1]);
        let dz1 = relu_backward(da1, &cache.a1);
        layers[0].backward(x, &dz1, &mut grads[0]);
    }

    /// Logits for already-normalized points.
    pub fn logits(&self, normalized: &[Vec3]) -> Array2<f64> {
        Self::forward_with(&self.layers, &to_matrix(normalized)).logits
    }

    /// Mean cross-entropy of one normalized cloud (targets are 0-based) and
    /// its gradient w.r.t. every layer.
    pub fn loss_and_gradient(&self, normalized: &[Vec3], targets: &[usize]) -> (f64, Vec<Dense>) {
        let x = to_matrix(normalized);
        let cache = Self::forward_with(&self.layers, &x);
        let (loss, dlogits) = softmax_cross_entropy(&cache.logits, targets);
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        Self::backward_with(&self.layers, &x, &cache, &dlogits, &mut grads);
        (loss, grads)
    }

    pub fn loss(layers: &[Dense], normalized: &[Vec3], targets: &[usize]) -> f64 {
        let cache = Self::forward_with(layers, &to_matrix(normalized));
        softmax_cross_entropy(&cache.logits, targets).0
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let names = ["enc1", "enc2", "head1", "head2"];
        let layers: Vec<(&str, &Dense)> = names.iter().copied().zip(&self.layers).collect();
        nn::save_layers(stem, MODEL_TAG, serde_json::to_value(self.arch).unwrap(), &layers)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (cfg, layers) = nn::load_layers(stem, MODEL_TAG)?;
        let arch: ClassifierArch =
            serde_json::from_value(cfg).map_err(|e| Error::Config(format!("classifier config: {e}")))?;
        let model = Self {
            arch,
            layers: layers.into_iter().map(|(_, d)| d).collect(),
        };
        let reference = PointClassifier::new(arch, 0);
        let shapes_ok = model.layers.len() == reference.layers.len()
            && model
                .layers
                .iter()
                .zip(&reference.layers)
                .all(|(a, b)| a.w.dim() == b.w.dim());
        if !shapes_ok {
            return Err(Error::Config(format!("{}: layer shapes do not match", stem.display())));
        }
        Ok(model)
    }
}

/// Argmax labels (1-based); ties go to the lowest level.
pub fn classify_points(model: &PointClassifier, cloud: &PointCloud) -> Result<LabeledPointCloud> {
    let (norm, _, _) = normalize_points(&cloud.points);
    let logits = model.logits(&norm);
    let labels = logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8 + 1
        })
        .collect();
    LabeledPointCloud::new(cloud.points.clone(), labels)
}

/// Normalized training sample: points and 0-based targets.
#[derive(Debug, Clone)]
struct Sample {
    points: Vec<Vec3>,
    targets: Vec<usize>,
}

fn prepare(cloud: &LabeledPointCloud, max_points: usize, seed: u64) -> Result<Sample> {
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.labels[i] != 0).collect();
    if keep.is_empty() {
        return Err(Error::Empty("labeled training cloud"));
    }
    let pts: Vec<Vec3> = keep.iter().map(|&i| cloud.points[i]).collect();
    let chosen: Vec<usize> = if pts.len() > max_points {
        farthest_point_indices(&pts, max_points, seed)?
    } else {
        (0..pts.len()).collect()
    };
    let sub: Vec<Vec3> = chosen.iter().map(|&i| pts[i]).collect();
    let (points, _, _) = normalize_points(&sub);
    let targets = chosen.iter().map(|&i| cloud.labels[keep[i]] as usize - 1).collect();
    Ok(Sample { points, targets })
}

fn accuracy(model: &PointClassifier, s: &Sample) -> f64 {
    let logits = model.logits(&s.points);
    let hits = logits
        .rows()
        .into_iter()
        .zip(&s.targets)
        .filter(|(row, &t)| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == t
        })
        .count();
    hits as f64 / s.targets.len() as f64
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation checkpoint (or last epoch without validation data).
    pub model: PointClassifier,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Mini-batch Adam on per-point cross-entropy. Clouds are split into
/// training and validation parts with the seed; the checkpoint with the
/// lowest validation loss is returned.
pub fn train_point_classifier(
    dataset: &[LabeledPointCloud],
    arch: ClassifierArch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let samples = dataset
        .iter()
        .enumerate()
        .map(|(i, c)| prepare(c, cfg.max_points, cfg.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if samples.len() >= 2 {
        ((samples.len() as f64 * cfg.val_fraction).round() as usize).min(samples.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let mut model = PointClassifier::new(arch, cfg.seed);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        &model.layers,
    );
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let mut grads: Vec<Dense> = model.layers.iter().map(Dense::zeros_like).collect();
            for &i in batch {
                let (loss, g) = model.loss_and_gradient(&samples[i].points, &samples[i].targets);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        detail: format!("classifier loss {loss} on training cloud {i}"),
                    });
                }
                epoch_loss += loss;
                for (acc, g) in grads.iter_mut().zip(&g) {
                    acc.add_assign(g);
                }
            }
            grads.iter_mut().for_each(|g| g.scale(1.0 / batch.len() as f64));
            opt.step(&mut model.layers, &grads);
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let (val_loss, val_accuracy) = if val_idx.is_empty() {
            (None, None)
        } else {
            let l = val_idx
                .iter()
                .map(|&i| PointClassifier::loss(&model.layers, &samples[i].points, &samples[i].targets))
                .sum::<f64>()
                / val_idx.len() as f64;
            let a = val_idx.iter().map(|&i| accuracy(&model, &samples[i])).sum::<f64>() / val_idx.len() as f64;
            (Some(l), Some(a))
        };
        let score = val_loss.unwrap_or(train_loss);
        if !score.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("classifier validation loss {score}"),
            });
        }
        log::debug!("classifier epoch {epoch}: train {train_loss:.5} val {val_loss:?}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if score < best.0 {
            best = (score, model.clone(), epoch);
        }
    }
    let (_, model, best_epoch) = if cfg.epochs == 0 { (0.0, model, 0) } else { best };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Fraction of labeled points of `cloud` the model gets right.
pub fn point_accuracy(model: &PointClassifier, cloud: &LabeledPointCloud) -> Result<f64> {
    let pred = classify_points(model, &cloud.unlabeled())?;
    let mask: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.labels[i] != 0).collect();
    if mask.is_empty() {
        return Err(Error::Empty("labeled points"));
    }
    Ok(mask.iter().filter(|&&i| pred.labels[i] == cloud.labels[i]).count() as f64 / mask.len() as f64)
}
