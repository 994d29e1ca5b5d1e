//! Toy latent completion network. A shared point encoder maps the partial
//! input and the complete shape to diagonal Gaussians; a decoder turns a
//! latent code into a coarse point set that a second MLP refines by
//! per-point displacement.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BackendKind, CompletionPair, CompletionResult, Diagnostics, PartialObservation};
use crate::compounding::fps::resample_to_at_most;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::labeling::{EpochStats, TrainConfig};
use crate::nn::{self, max_pool, relu, relu_backward, Adam, AdamConfig, Dense};
use crate::spatial::KdTree;

const MODEL_TAG: &str = "completion-model";
const LAYER_NAMES: [&str; 8] = ["enc1", "enc2", "mu", "logvar", "dec1", "dec2", "ref1", "ref2"];
const ENC1: usize = 0;
const ENC2: usize = 1;
const MU: usize = 2;
const LOGVAR: usize = 3;
const DEC1: usize = 4;
const DEC2: usize = 5;
const REF1: usize = 6;
const REF2: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionArch {
    pub encoder: [usize; 2],
    pub latent: usize,
    pub decoder_hidden: usize,
    /// Points produced by the coarse decoder (and by the model).
    pub coarse_points: usize,
    pub refiner_hidden: usize,
    /// Inputs larger than this are reduced by FPS.
    pub input_points: usize,
}

impl Default for CompletionArch {
    fn default() -> Self {
        Self {
            encoder: [64, 128],
            latent: 64,
            decoder_hidden: 256,
            coarse_points: 1024,
            refiner_hidden: 64,
            input_points: 512,
        }
    }
}

impl CompletionArch {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.encoder[0],
            self.encoder[1],
            self.latent,
            self.decoder_hidden,
            self.coarse_points,
            self.refiner_hidden,
            self.input_points,
        ];
        if sizes.contains(&0) {
            return Err(Error::invalid("completion layer sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cd: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cd: 1.0, kl: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionModel {
    pub arch: CompletionArch,
    pub weights: LossWeights,
    pub layers: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    arch: CompletionArch,
    weights: LossWeights,
}

/// KL(N(mu_p, e^lv_p) ‖ N(mu_c, e^lv_c)) summed over dimensions.
pub fn gaussian_kl(mu_p: &Array1<f64>, lv_p: &Array1<f64>, mu_c: &Array1<f64>, lv_c: &Array1<f64>) -> f64 {
    let mut kl = 0.0;
    for i in 0..mu_p.len() {
        let d = mu_p[i] - mu_c[i];
        kl += 0.5 * (lv_c[i] - lv_p[i] + (lv_p[i].exp() + d * d) / lv_c[i].exp() - 1.0);
    }
    kl
}

/// Squared-distance Chamfer: mean over `a` of the squared distance to the
/// nearest `b` point plus the same from `b` to `a`. Returns the value and
/// `dCD/da`.
pub fn chamfer_sq_with_grad(a: &[Vec3], b: &[Vec3], b_tree: &KdTree) -> (f64, Vec<Vec3>) {
    let a_tree = KdTree::new(a);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut grad = vec![Vec3::zeros(); a.len()];
    let mut fwd = 0.0;
    for (i, p) in a.iter().enumerate() {
        let (j, d2) = b_tree.nearest(p).expect("non-empty");
        fwd += d2;
        grad[i] += 2.0 * (p - b[j]) / na;
    }
    let mut bwd = 0.0;
    for q in b {
        let (k, d2) = a_tree.nearest(q).expect("non-empty");
        bwd += d2;
        grad[k] += 2.0 * (a[k] - q) / nb;
    }
    (fwd / na + bwd / nb, grad)
}

fn features(target: &[Vec3], context: &[Vec3]) -> Array2<f64> {
    let mut x = Array2::zeros((target.len() + context.len(), 4));
    for (i, (p, flag)) in target
        .iter()
        .map(|p| (p, 1.0))
        .chain(context.iter().map(|p| (p, 0.0)))
        .enumerate()
    {
        x[[i, 0]] = p.x;
        x[[i, 1]] = p.y;
        x[[i, 2]] = p.z;
        x[[i, 3]] = flag;
    }
    x
}

struct EncCache {
    h1: Array2<f64>,
    h2: Array2<f64>,
    g: Array1<f64>,
    arg: Vec<usize>,
    mu: Array1<f64>,
    lv: Array1<f64>,
}

fn encode(layers: &[Dense], x: &Array2<f64>) -> EncCache {
    let h1 = relu(layers[ENC1].forward(x));
    let h2 = relu(layers[ENC2].forward(&h1));
    let (g, arg) = max_pool(&h2);
    let g2 = g.view().insert_axis(Axis(0)).to_owned();
    let mu = layers[MU].forward(&g2).row(0).to_owned();
    let lv = layers[LOGVAR].forward(&g2).row(0).to_owned();
    EncCache { h1, h2, g, arg, mu, lv }
}

fn encode_backward(
    layers: &[Dense],
    x: &Array2<f64>,
    c: &EncCache,
    dmu: &Array1<f64>,
    dlv: &Array1<f64>,
    grads: &mut [Dense],
) {
    let g2 = c.g.view().insert_axis(Axis(0)).to_owned();
    let row = |v: &Array1<f64>| v.view().insert_axis(Axis(0)).to_owned();
    let mut dg = layers[MU].backward(&g2, &row(dmu), &mut grads[MU]);
    dg += &layers[LOGVAR].backward(&g2, &row(dlv), &mut grads[LOGVAR]);
    let mut dh2 = Array2::zeros(c.h2.raw_dim());
    for (j, &i) in c.arg.iter().enumerate() {
        dh2[[i, j]] += dg[[0, j]];
    }
    let dz2 = relu_backward(dh2, &c.h2);
    let dh1 = layers[ENC2].backward(&c.h1, &dz2, &mut grads[ENC2]);
    let dz1 = relu_backward(dh1, &c.h1);
    layers[ENC1].backward(x, &dz1, &mut grads[ENC1]);
}

struct DecCache {
    z: Array2<f64>,
    hd: Array2<f64>,
    coarse: Array2<f64>,
    xr: Array2<f64>,
    hr: Array2<f64>,
    refined: Array2<f64>,
}

fn decode(layers: &[Dense], z: &Array1<f64>) -> DecCache {
    let m = layers[DEC2].n_out() / 3;
    let z = z.view().insert_axis(Axis(0)).to_owned();
    let hd = relu(layers[DEC1].forward(&z));
    let flat = layers[DEC2].forward(&hd);
    let coarse = flat.into_shape_with_order((m, 3)).expect("3 coordinates per point");
    let d = z.ncols();
    let mut xr = Array2::zeros((m, 3 + d));
    xr.slice_mut(s![.., ..3]).assign(&coarse);
    xr.slice_mut(s![.., 3..]).assign(&z.broadcast((m, d)).unwrap());
    let hr = relu(layers[REF1].forward(&xr));
    let refined = &coarse + &layers[REF2].forward(&hr);
    DecCache {
        z,
        hd,
        coarse,
        xr,
        hr,
        refined,
    }
}

/// Returns `dL/dz` given `dL/drefined`.
fn decode_backward(layers: &[Dense], c: &DecCache, drefined: &Array2<f64>, grads: &mut [Dense]) -> Array1<f64> {
    let dhr = layers[REF2].backward(&c.hr, drefined, &mut grads[REF2]);
    let dzr = relu_backward(dhr, &c.hr);
    let dxr = layers[REF1].backward(&c.xr, &dzr, &mut grads[REF1]);
    let dcoarse = drefined + &dxr.slice(s![.., ..3]);
    let mut dz = dxr.slice(s![.., 3..]).sum_axis(Axis(0));
    let dflat = dcoarse.into_shape_with_order((1, c.coarse.len())).expect("contiguous");
    let dhd = layers[DEC2].backward(&c.hd, &dflat, &mut grads[DEC2]);
    let dzd = relu_backward(dhd, &c.hd);
    dz += &layers[DEC1].backward(&c.z, &dzd, &mut grads[DEC1]).row(0);
    dz
}

fn rows_to_points(a: &Array2<f64>) -> Vec<Vec3> {
    a.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

/// One training example in the observation's normalized frame.
#[derive(Debug, Clone)]
pub struct CompletionSample {
    /// Partial input features `(x, y, z, is_target)`.
    pub partial: Array2<f64>,
    /// Complete shape, encoded with `is_target = 1`.
    pub complete_features: Array2<f64>,
    pub complete: Vec<Vec3>,
    complete_tree: KdTree,
}

impl CompletionSample {
    pub fn new(pair: &CompletionPair, input_points: usize, seed: u64) -> Result<Self> {
        let target = pair.obs.normalized_target();
        let context = pair.obs.normalized_context();
        let (target, context) = reduce_input(&target, &context, input_points, seed)?;
        if pair.complete.is_empty() {
            return Err(Error::Empty("complete shape"));
        }
        let complete = resample_to_at_most(&pair.complete, input_points, seed)?;
        Ok(Self {
            partial: features(&target, &context),
            complete_features: features(&complete, &[]),
            complete_tree: KdTree::new(&complete),
            complete,
        })
    }
}

/// FPS over target and context together; keeps the target flag of each point.
fn reduce_input(target: &[Vec3], context: &[Vec3], n: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if target.is_empty() {
        return Err(Error::Empty("partial target"));
    }
    let all: Vec<Vec3> = target.iter().chain(context).copied().collect();
    if all.len() <= n {
        return Ok((target.to_vec(), context.to_vec()));
    }
    let idx = crate::compounding::fps::farthest_point_indices(&all, n, seed)?;
    let mut t = Vec::new();
    let mut c = Vec::new();
    for i in idx {
        if i < target.len() {
            t.push(all[i]);
        } else {
            c.push(all[i]);
        }
    }
    if t.is_empty() {
        t.push(target[0]);
    }
    Ok((t, c))
}

/// Loss terms of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub cd: f64,
    pub kl: f64,
    pub total: f64,
}

impl CompletionModel {
    pub fn new(arch: CompletionArch, weights: LossWeights, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(weights.cd >= 0.0 && weights.kl >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [e1, e2] = arch.encoder;
        let d = arch.latent;
        let mut layers = vec![
            Dense::he(4, e1, &mut rng),
            Dense::he(e1, e2, &mut rng),
            Dense::he(e2, d, &mut rng),
            Dense::he(e2, d, &mut rng),
            Dense::he(d, arch.decoder_hidden, &mut rng),
            Dense::he(arch.decoder_hidden, 3 * arch.coarse_points, &mut rng),
            Dense::he(3 + d, arch.refiner_hidden, &mut rng),
            Dense::he(arch.refiner_hidden, 3, &mut rng),
        ];
        // start near unit variance and small displacements
        layers[LOGVAR].scale(0.1);
        layers[DEC2].scale(0.1);
        layers[REF2].scale(0.1);
        Ok(Self { arch, weights, layers })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// Latent statistics `(mu, logvar)` of a feature matrix.
    pub fn encode(&self, x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
        let c = encode(&self.layers, x);
        (c.mu, c.lv)
    }

    /// Refined output for a latent code.
    pub fn decode(&self, z: &Array1<f64>) -> Vec<Vec3> {
        rows_to_points(&decode(&self.layers, z).refined)
    }

    /// Joint loss with fixed reparameterization noise `eps`.
    pub fn loss_with(layers: &[Dense], weights: &LossWeights, s: &CompletionSample, eps: &Array1<f64>) -> LossParts {
        let p = encode(layers, &s.partial);
        let c = encode(layers, &s.complete_features);
        let z = &p.mu + &(p.lv.mapv(|v| (0.5 * v).exp()) * eps);
        let dec = decode(layers, &z);
        let (cd, _) = chamfer_sq_with_grad(&rows_to_points(&dec.refined), &s.complete, &s.complete_tree);
        let kl = gaussian_kl(&p.mu, &p.lv, &c.mu, &c.lv);
        LossParts {
            cd,
            kl,
            total: weights.cd * cd + weights.kl * kl,
        }
    }

    /// Loss of one sample and its gradient w.r.t. every layer.
    pub fn loss_and_gradient(&self, s: &CompletionSample, eps: &Array1<f64>) -> (LossParts, Vec<Dense>) {
        let layers = &self.layers;
        let w = self.weights;
        let p = encode(layers, &s.partial);
        let c = encode(layers, &s.complete_features);
        let sigma = p.lv.mapv(|v| (0.5 * v).exp());
        let z = &p.mu + &(&sigma * eps);
        let dec = decode(layers, &z);
        let refined = rows_to_points(&dec.refined);
        let (cd, dref) = chamfer_sq_with_grad(&refined, &s.complete, &s.complete_tree);
        let kl = gaussian_kl(&p.mu, &p.lv, &c.mu, &c.lv);

        let mut grads: Vec<Dense> = layers.iter().map(Dense::zeros_like).collect();
        let drefined = Array2::from_shape_fn(dec.refined.raw_dim(), |(i, j)| w.cd * dref[i][j]);
        let dz = decode_backward(layers, &dec, &drefined, &mut grads);

        let inv_c = c.lv.mapv(|v| (-v).exp());
        let dmu_diff = &(&p.mu - &c.mu) * &inv_c;
        let ratio = &p.lv.mapv(f64::exp) * &inv_c;
        let dmu_p = &dz + &(&dmu_diff * w.kl);
        let mut dlv_p = &dz * eps * &sigma * 0.5;
        dlv_p += &(ratio.mapv(|r| 0.5 * (r - 1.0)) * w.kl);
        let dmu_c = &dmu_diff * -w.kl;
        let dd2 = (&p.mu - &c.mu).mapv(|v| v * v) * &inv_c;
        let dlv_c = (&ratio + &dd2).mapv(|q| 0.5 * (1.0 - q) * w.kl);
        encode_backward(layers, &s.partial, &p, &dmu_p, &dlv_p, &mut grads);
        encode_backward(layers, &s.complete_features, &c, &dmu_c, &dlv_c, &mut grads);
        (
            LossParts {
                cd,
                kl,
                total: w.cd * cd + w.kl * kl,
            },
            grads,
        )
    }

    /// Completed points in the normalized frame (latent mean, no sampling).
    pub fn complete_normalized(&self, obs: &PartialObservation) -> Result<Vec<Vec3>> {
        let (t, c) = reduce_input(&obs.normalized_target(), &obs.normalized_context(), self.arch.input_points, 0)?;
        let (mu, _) = self.encode(&features(&t, &c));
        Ok(self.decode(&mu))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let layers: Vec<(&str, &Dense)> = LAYER_NAMES.iter().copied().zip(&self.layers).collect();
        let cfg = serde_json::to_value(StoredConfig {
            arch: self.arch,
            weights: self.weights,
        })
        .expect("config serializes");
        nn::save_layers(stem, MODEL_TAG, cfg, &layers)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (cfg, layers) = nn::load_layers(stem, MODEL_TAG)?;
        let cfg: StoredConfig =
            serde_json::from_value(cfg).map_err(|e| Error::Config(format!("completion config: {e}")))?;
        let reference = Self::new(cfg.arch, cfg.weights, 0)?;
        let model = Self {
            arch: cfg.arch,
            weights: cfg.weights,
            layers: layers.into_iter().map(|(_, d)| d).collect(),
        };
        let shapes_ok = model.layers.len() == reference.layers.len()
            && model.layers.iter().zip(&reference.layers).all(|(a, b)| a.w.dim() == b.w.dim());
        if !shapes_ok {
            return Err(Error::Config(format!("{}: layer shapes do not match", stem.display())));
        }
        Ok(model)
    }
}

pub fn complete_learned(model: &CompletionModel, obs: &PartialObservation) -> Result<CompletionResult> {
    let points: Vec<Vec3> = model
        .complete_normalized(obs)?
        .iter()
        .map(|p| obs.denormalize(p))
        .collect();
    Ok(CompletionResult {
        level: obs.level,
        points,
        backend: BackendKind::Learned,
        diagnostics: Diagnostics {
            partial_points: obs.target.len(),
            context_points: obs.context.len(),
            ..Default::default()
        },
    })
}

#[derive(Debug, Clone)]
pub struct CompletionTraining {
    pub model: CompletionModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

fn noise(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

fn samples(pairs: &[CompletionPair], input_points: usize, seed: u64) -> Result<Vec<CompletionSample>> {
    if pairs.is_empty() {
        return Err(Error::Empty("completion training pairs"));
    }
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| CompletionSample::new(p, input_points, seed.wrapping_add(i as u64)))
        .collect()
}

/// One pass of mini-batch Adam over `order`; returns the mean sample loss.
fn run_epoch(
    model: &mut CompletionModel,
    opt: &mut Adam,
    data: &[CompletionSample],
    order: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let mut grads: Vec<Dense> = model.layers.iter().map(Dense::zeros_like).collect();
        for &i in batch {
            let eps = noise(rng, model.arch.latent);
            let (loss, g) = model.loss_and_gradient(&data[i], &eps);
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!("completion loss {} (cd {}, kl {}) on pair {i}", loss.total, loss.cd, loss.kl),
                });
            }
            total += loss.total;
            for (acc, g) in grads.iter_mut().zip(&g) {
                acc.add_assign(g);
            }
        }
        grads.iter_mut().for_each(|g| g.scale(1.0 / batch.len() as f64));
        opt.step(&mut model.layers, &grads);
    }
    Ok(total / order.len().max(1) as f64)
}

fn eval_loss(model: &CompletionModel, data: &[CompletionSample], idx: &[usize]) -> f64 {
    let zero = Array1::zeros(model.arch.latent);
    idx.iter()
        .map(|&i| CompletionModel::loss_with(&model.layers, &model.weights, &data[i], &zero).total)
        .sum::<f64>()
        / idx.len() as f64
}

/// Trains a fresh model on normalized pairs. Part of the pairs is held out
/// (`cfg.val_fraction`) and the checkpoint with the lowest noise-free
/// validation loss is returned.
pub fn train_completion(
    pairs: &[CompletionPair],
    arch: CompletionArch,
    weights: LossWeights,
    cfg: &TrainConfig,
) -> Result<CompletionTraining> {
    cfg.validate()?;
    let data = samples(pairs, arch.input_points, cfg.seed)?;
    let mut model = CompletionModel::new(arch, weights, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 2 {
        ((data.len() as f64 * cfg.val_fraction).round() as usize).min(data.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        &model.layers,
    );
    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let train_loss = run_epoch(&mut model, &mut opt, &data, &train_idx, cfg.batch_size, &mut rng, epoch)?;
        let val_loss = (!val_idx.is_empty()).then(|| eval_loss(&model, &data, val_idx));
        let score = val_loss.unwrap_or(train_loss);
        if !score.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("completion validation loss {score}"),
            });
        }
        log::debug!("completion epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy: None,
        });
        if score < best.0 {
            best = (score, model.clone(), epoch);
        }
    }
    let (model, best_epoch) = if cfg.epochs == 0 { (model, 0) } else { (best.1, best.2) };
    Ok(CompletionTraining {
        model,
        history,
        best_epoch,
    })
}

/// Continues training `model` on one subject's own pairs for `epochs`
/// epochs with a fresh optimizer. Every pair is used for training and the
/// last state is returned.
pub fn refine_patient_specific(
    model: &CompletionModel,
    pairs: &[CompletionPair],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<CompletionModel> {
    cfg.validate()?;
    let mut model = model.clone();
    if epochs == 0 {
        return Ok(model);
    }
    let data = samples(pairs, model.arch.input_points, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        &model.layers,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let loss = run_epoch(&mut model, &mut opt, &data, &order, cfg.batch_size, &mut rng, epoch)?;
        log::debug!("refinement epoch {epoch}: {loss:.6}");
    }
    Ok(model)
}

/// Mean noise-free loss of `model` over `pairs`.
pub fn mean_loss(model: &CompletionModel, pairs: &[CompletionPair]) -> Result<f64> {
    let data = samples(pairs, model.arch.input_points, 0)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(eval_loss(model, &data, &idx))
}
