//! Class-conditional image generation.
//!
//! Two interchangeable backends: a small conditional GAN (MLP generator and
//! discriminator with learned class embeddings) and a deterministic exemplar
//! bank. The adversarial value function is exposed on its own so it can be
//! checked against hand-computed points.

use crate::dataio::Image;
use crate::util::derive_rng;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("training diverged at step {step}: d_loss={d_loss:.3e}, g_loss={g_loss:.3e}")]
    Diverged { step: usize, d_loss: f64, g_loss: f64 },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("exemplar bank has no images for category {0:?}")]
    EmptyBank(String),
    #[error("need at least one class and one training image per class")]
    EmptyTrainingSet,
}

const PROB_CLAMP: f64 = 1e-7;

/// Monte-Carlo estimate of the two-player value split into the discriminator
/// and (non-saturating) generator objectives.
///
/// `d_loss = -mean log D(x) - mean log(1 - D(G(z)))`
/// `g_loss = -mean log D(G(z))`
///
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; `clamped` counts how many
/// inputs hit the clamp, which callers can surface as a saturation warning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    pub clamped: usize,
}

pub fn gan_value(d_real: &[f64], d_fake: &[f64]) -> GanLosses {
    assert!(!d_real.is_empty() && !d_fake.is_empty());
    let mut clamped = 0usize;
    let mut clamp = |p: f64| -> f64 {
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            clamped += 1;
        }
        p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    };
    let mut real_term = 0.0;
    for &p in d_real {
        real_term -= clamp(p).ln();
    }
    real_term /= d_real.len() as f64;
    let mut fake_term = 0.0;
    let mut g_term = 0.0;
    for &p in d_fake {
        let p = clamp(p);
        fake_term -= (1.0 - p).ln();
        g_term -= p.ln();
    }
    fake_term /= d_fake.len() as f64;
    g_term /= d_fake.len() as f64;
    GanLosses {
        d_loss: real_term + fake_term,
        g_loss: g_term,
        clamped,
    }
}

// ---------------------------------------------------------------------------
// Dense net with Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dense {
    w: Array2<f64>, // out x in
    b: Array1<f64>,
    #[serde(skip)]
    gw: Option<Array2<f64>>,
    #[serde(skip)]
    gb: Option<Array1<f64>>,
    #[serde(skip)]
    adam: Option<(Array2<f64>, Array2<f64>, Array1<f64>, Array1<f64>)>,
}

impl Dense {
    fn new(input: usize, output: usize, rng: &mut ChaCha12Rng) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let w = Array2::from_shape_fn((output, input), |_| rng.random_range(-a..a));
        Dense {
            w,
            b: Array1::zeros(output),
            gw: None,
            gb: None,
            adam: None,
        }
    }
    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
    /// Stores parameter gradients (overwriting) and returns dL/dx.
    fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.gw = Some(dy.t().dot(x));
        self.gb = Some(dy.sum_axis(Axis(0)));
        dy.dot(&self.w)
    }
    fn adam_step(&mut self, lr: f64, t: usize) {
        let (gw, gb) = (self.gw.take().unwrap(), self.gb.take().unwrap());
        if self.adam.is_none() {
            self.adam = Some((
                Array2::zeros(self.w.raw_dim()),
                Array2::zeros(self.w.raw_dim()),
                Array1::zeros(self.b.raw_dim()),
                Array1::zeros(self.b.raw_dim()),
            ));
        }
        let (mw, vw, mb, vb) = self.adam.as_mut().unwrap();
        adam_update(&mut self.w.view_mut(), &gw.view(), &mut mw.view_mut(), &mut vw.view_mut(), lr, t);
        adam_update(
            &mut self.b.view_mut().insert_axis(Axis(0)),
            &gb.view().insert_axis(Axis(0)),
            &mut mb.view_mut().insert_axis(Axis(0)),
            &mut vb.view_mut().insert_axis(Axis(0)),
            lr,
            t,
        );
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(
    p: &mut ndarray::ArrayViewMut2<f64>,
    g: &ndarray::ArrayView2<f64>,
    m: &mut ndarray::ArrayViewMut2<f64>,
    v: &mut ndarray::ArrayViewMut2<f64>,
    lr: f64,
    t: usize,
) {
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
    });
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Mlp {
    layers: Vec<Dense>,
    /// Sigmoid on the final layer's output (pixel nets); logits otherwise.
    sigmoid_out: bool,
}

impl Mlp {
    fn new(dims: &[usize], sigmoid_out: bool, rng: &mut ChaCha12Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Mlp { layers, sigmoid_out }
    }
    /// Returns activations per layer, input first, output last.
    fn forward(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.clone()];
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts.last().unwrap());
            if i + 1 < n {
                y.mapv_inplace(|v| v.max(0.0));
            } else if self.sigmoid_out {
                y.mapv_inplace(sigmoid);
            }
            acts.push(y);
        }
        acts
    }
    /// `d_out` is dL/d(final activation) if `sigmoid_out`, else dL/d(logit).
    fn backward(&mut self, acts: &[Array2<f64>], d_out: &Array2<f64>) -> Array2<f64> {
        let n = self.layers.len();
        let mut grad = if self.sigmoid_out {
            let y = &acts[n];
            d_out * y * (1.0 - y)
        } else {
            d_out.clone()
        };
        for i in (0..n).rev() {
            let mut dx = self.layers[i].backward(&acts[i], &grad);
            if i > 0 {
                // ReLU mask from the post-activation values.
                ndarray::Zip::from(&mut dx).and(&acts[i]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grad = dx;
        }
        grad
    }
    fn adam_step(&mut self, lr: f64, t: usize) {
        for l in &mut self.layers {
            l.adam_step(lr, t);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Conditional GAN
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CganConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub g_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Generator updates per discriminator update; >1 keeps the
    /// discriminator from running away on easy synthetic sets.
    pub g_steps_per_d: usize,
    /// Target for real labels (label smoothing); 1.0 disables it.
    pub real_label: f64,
    /// Gaussian noise added to the discriminator's image inputs (instance
    /// noise); keeps it from memorizing near-degenerate training sets.
    pub instance_noise: f64,
    /// Discriminator learning-rate multiplier relative to `learning_rate`.
    pub d_lr_scale: f64,
    /// Optional hard cap on either loss; non-finite losses and sustained
    /// full saturation always abort regardless of this value.
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for CganConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            latent_dim: 64,
            embed_dim: 16,
            g_hidden: vec![128, 256],
            d_hidden: vec![256, 128],
            learning_rate: 2e-3,
            batch_size: 32,
            steps: 2000,
            g_steps_per_d: 4,
            real_label: 0.9,
            instance_noise: 0.1,
            d_lr_scale: 0.05,
            divergence_threshold: f64::INFINITY,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cgan {
    pub cfg: CganConfig,
    pub class_ids: Vec<String>,
    g: Mlp,
    d: Mlp,
    embed_g: Array2<f64>, // classes x embed_dim, learned
    embed_d: Array2<f64>,
    #[serde(skip)]
    embed_adam: Option<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)>,
    pub loss_history: Vec<GanLosses>,
    pub saturation_warnings: usize,
}

impl Cgan {
    pub fn pixel_dim(&self) -> usize {
        self.cfg.image_size * self.cfg.image_size * 3
    }

    /// Trains from scratch on `(image, class_index)` pairs with alternating
    /// single discriminator/generator Adam steps. Fully determined by
    /// `cfg.seed` and the training set.
    pub fn train(
        cfg: CganConfig,
        class_ids: Vec<String>,
        images: &[(Image, usize)],
    ) -> Result<Self, GeneratorError> {
        if class_ids.is_empty() || images.is_empty() {
            return Err(GeneratorError::EmptyTrainingSet);
        }
        let px = cfg.image_size * cfg.image_size * 3;
        let mut rng = derive_rng(cfg.seed, &["cgan-init"]);
        let k = class_ids.len();
        let mut g_dims = vec![cfg.latent_dim + cfg.embed_dim + k];
        g_dims.extend(&cfg.g_hidden);
        g_dims.push(px);
        let mut d_dims = vec![px + cfg.embed_dim + k];
        d_dims.extend(&cfg.d_hidden);
        d_dims.push(1);
        let g = Mlp::new(&g_dims, true, &mut rng);
        let d = Mlp::new(&d_dims, false, &mut rng);
        let embed_g = Array2::from_shape_fn((k, cfg.embed_dim), |_| rng.random_range(-0.5..0.5));
        let embed_d = Array2::from_shape_fn((k, cfg.embed_dim), |_| rng.random_range(-0.5..0.5));

        // Flatten the training set once; all images must match the size.
        let data: Vec<(Vec<f64>, usize)> = images
            .iter()
            .map(|(img, c)| {
                assert_eq!(img.data.len(), px, "training image size mismatch");
                assert!(*c < k, "class index out of range");
                (img.data.iter().map(|&v| v as f64).collect(), *c)
            })
            .collect();

        let mut gan = Cgan {
            cfg,
            class_ids,
            g,
            d,
            embed_g,
            embed_d,
            embed_adam: None,
            loss_history: Vec::new(),
            saturation_warnings: 0,
        };
        gan.run_training(&data)?;
        Ok(gan)
    }

    fn run_training(&mut self, data: &[(Vec<f64>, usize)]) -> Result<(), GeneratorError> {
        let cfg = self.cfg.clone();
        let b = cfg.batch_size;
        let px = self.pixel_dim();
        let k = self.class_ids.len();
        let mut rng = derive_rng(cfg.seed, &["cgan-train"]);
        self.embed_adam = Some((
            Array2::zeros((k, cfg.embed_dim)),
            Array2::zeros((k, cfg.embed_dim)),
            Array2::zeros((k, cfg.embed_dim)),
            Array2::zeros((k, cfg.embed_dim)),
        ));
        let full_batch_saturation_limit = 50usize;
        let mut saturated_streak = 0usize;
        for step in 1..=cfg.steps {
            // --- minibatch of real images ---
            let idx = rand::seq::index::sample(&mut rng, data.len(), b.min(data.len()));
            let bsz = idx.len();
            let mut real = Array2::zeros((bsz, px));
            let mut classes = Vec::with_capacity(bsz);
            for (row, i) in idx.iter().enumerate() {
                for (j, &v) in data[i].0.iter().enumerate() {
                    real[[row, j]] = v;
                }
                classes.push(data[i].1);
            }
            // --- fake batch, same class labels ---
            let (fake, _g_in, _g_acts) = self.sample_batch(&classes, &mut rng);

            // --- discriminator step ---
            let noisy = |m: &Array2<f64>, rng: &mut ChaCha12Rng| -> Array2<f64> {
                if cfg.instance_noise > 0.0 {
                    m.mapv(|v| {
                        let g: f64 = StandardNormal.sample(rng);
                        v + cfg.instance_noise * g
                    })
                } else {
                    m.clone()
                }
            };
            let d_in_real = self.d_input(&noisy(&real, &mut rng), &classes);
            let d_in_fake = self.d_input(&noisy(&fake, &mut rng), &classes);
            let acts_real = self.d.forward(&d_in_real);
            let acts_fake = self.d.forward(&d_in_fake);
            let logit_real = acts_real.last().unwrap().clone();
            let logit_fake = acts_fake.last().unwrap().clone();
            let p_real: Vec<f64> = logit_real.iter().map(|&z| sigmoid(z)).collect();
            let p_fake: Vec<f64> = logit_fake.iter().map(|&z| sigmoid(z)).collect();
            let losses = gan_value(&p_real, &p_fake);
            self.saturation_warnings += losses.clamped;
            // Every probability clamped means the discriminator's outputs
            // have blown out of (1e-7, 1-1e-7); transient spikes are normal,
            // a long streak means training is dead.
            if losses.clamped == p_real.len() + p_fake.len() {
                saturated_streak += 1;
            } else {
                saturated_streak = 0;
            }
            if !losses.d_loss.is_finite()
                || !losses.g_loss.is_finite()
                || losses.d_loss > cfg.divergence_threshold
                || losses.g_loss > cfg.divergence_threshold
                || saturated_streak > full_batch_saturation_limit
            {
                return Err(GeneratorError::Diverged {
                    step,
                    d_loss: losses.d_loss,
                    g_loss: losses.g_loss,
                });
            }
            self.loss_history.push(losses);
            // dL/dlogit for BCE: sigmoid(z) - target, averaged over the batch.
            let scale = 1.0 / bsz as f64;
            let d_grad_real = logit_real.mapv(|z| (sigmoid(z) - cfg.real_label) * scale);
            let d_grad_fake = logit_fake.mapv(|z| sigmoid(z) * scale);
            let din_grad_real = self.d.backward(&acts_real, &d_grad_real);
            // Merge the two half-batches: run backward on fake after real and
            // sum the stored parameter gradients.
            let saved: Vec<(Array2<f64>, Array1<f64>)> = self
                .d
                .layers
                .iter()
                .map(|l| (l.gw.clone().unwrap(), l.gb.clone().unwrap()))
                .collect();
            let _ = self.d.backward(&acts_fake, &d_grad_fake);
            for (l, (gw, gb)) in self.d.layers.iter_mut().zip(saved) {
                *l.gw.as_mut().unwrap() += &gw;
                *l.gb.as_mut().unwrap() += &gb;
            }
            let d_lr = cfg.learning_rate * cfg.d_lr_scale;
            self.d.adam_step(d_lr, step);
            self.apply_embed_grad_d(&din_grad_real, &classes, px, d_lr, step);

            // --- generator steps (non-saturating), fresh latents each ---
            for gi in 0..cfg.g_steps_per_d.max(1) {
                let (fake_g, _gin, g_acts) = self.sample_batch(&classes, &mut rng);
                let d_in_fake2 = self.d_input(&fake_g, &classes);
                let acts_fake2 = self.d.forward(&d_in_fake2);
                let logit = acts_fake2.last().unwrap();
                let g_grad_logit = logit.mapv(|z| (sigmoid(z) - 1.0) * scale);
                let din_grad = self.d.backward(&acts_fake2, &g_grad_logit);
                // Discriminator params keep their gradients but are not stepped.
                let dpix = din_grad.slice(ndarray::s![.., ..px]).to_owned();
                let gin_grad = self.g.backward(&g_acts, &dpix);
                let g_t = (step - 1) * cfg.g_steps_per_d.max(1) + gi + 1;
                self.g.adam_step(cfg.learning_rate, g_t);
                self.apply_embed_grad_g(&gin_grad, &classes, cfg.latent_dim, cfg.learning_rate, g_t);
            }
        }
        Ok(())
    }

    fn d_input(&self, pixels: &Array2<f64>, classes: &[usize]) -> Array2<f64> {
        let (b, px) = (pixels.nrows(), pixels.ncols());
        let e = self.cfg.embed_dim;
        let k = self.class_ids.len();
        let mut out = Array2::zeros((b, px + e + k));
        for row in 0..b {
            out.slice_mut(ndarray::s![row, ..px]).assign(&pixels.row(row));
            out.slice_mut(ndarray::s![row, px..px + e])
                .assign(&self.embed_d.row(classes[row]));
            // One-hot class code: an unlearned conditioning shortcut so the
            // discriminator can exploit class/image consistency from step one.
            out[[row, px + e + classes[row]]] = 1.0;
        }
        out
    }

    fn g_input(&self, classes: &[usize], rng: &mut ChaCha12Rng) -> Array2<f64> {
        let (z, e) = (self.cfg.latent_dim, self.cfg.embed_dim);
        let k = self.class_ids.len();
        let mut out = Array2::zeros((classes.len(), z + e + k));
        for (row, &c) in classes.iter().enumerate() {
            for j in 0..z {
                out[[row, j]] = StandardNormal.sample(rng);
            }
            out.slice_mut(ndarray::s![row, z..z + e]).assign(&self.embed_g.row(c));
            out[[row, z + e + c]] = 1.0;
        }
        out
    }

    fn sample_batch(
        &self,
        classes: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> (Array2<f64>, Array2<f64>, Vec<Array2<f64>>) {
        let g_in = self.g_input(classes, rng);
        let acts = self.g.forward(&g_in);
        (acts.last().unwrap().clone(), g_in, acts)
    }

    fn apply_embed_grad_g(
        &mut self,
        gin_grad: &Array2<f64>,
        classes: &[usize],
        z: usize,
        lr: f64,
        t: usize,
    ) {
        let k = self.class_ids.len();
        let e = self.cfg.embed_dim;
        let mut grad = Array2::zeros((k, e));
        for (row, &c) in classes.iter().enumerate() {
            let slice = gin_grad.slice(ndarray::s![row, z..z + e]);
            let mut target = grad.row_mut(c);
            target += &slice;
        }
        let (mg, vg, _, _) = self.embed_adam.as_mut().unwrap();
        adam_update(&mut self.embed_g.view_mut(), &grad.view(), &mut mg.view_mut(), &mut vg.view_mut(), lr, t);
    }

    fn apply_embed_grad_d(
        &mut self,
        din_grad: &Array2<f64>,
        classes: &[usize],
        px: usize,
        lr: f64,
        t: usize,
    ) {
        let k = self.class_ids.len();
        let e = self.cfg.embed_dim;
        let mut grad = Array2::zeros((k, e));
        for (row, &c) in classes.iter().enumerate() {
            let slice = din_grad.slice(ndarray::s![row, px..px + e]);
            let mut target = grad.row_mut(c);
            target += &slice;
        }
        let (_, _, md, vd) = self.embed_adam.as_mut().unwrap();
        adam_update(&mut self.embed_d.view_mut(), &grad.view(), &mut md.view_mut(), &mut vd.view_mut(), lr, t);
    }

    pub fn class_index(&self, category_id: &str) -> Result<usize, GeneratorError> {
        self.class_ids
            .iter()
            .position(|c| c == category_id)
            .ok_or_else(|| GeneratorError::UnknownCategory(category_id.to_string()))
    }

    /// Samples one image for a category; the latent draw is derived from
    /// `seed` so the same call reproduces the same image.
    pub fn generate(&self, category_id: &str, seed: u64) -> Result<Image, GeneratorError> {
        let c = self.class_index(category_id)?;
        let mut rng = derive_rng(seed, &["cgan-sample", category_id]);
        let g_in = self.g_input(&[c], &mut rng);
        let out = self.g.forward(&g_in);
        let pixels = out.last().unwrap();
        let s = self.cfg.image_size;
        let data: Vec<f32> = pixels.row(0).iter().map(|&v| v as f32).collect();
        Ok(Image::new(s, s, data))
    }
}

// ---------------------------------------------------------------------------
// Exemplar bank
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarMode {
    /// Pixel-wise mean of the bank: a stable category prototype.
    Mean,
    /// A seeded draw from the bank.
    Random,
}

#[derive(Debug, Clone)]
pub struct ExemplarBank {
    pub mode: ExemplarMode,
    images: BTreeMap<String, Vec<Image>>,
}

impl ExemplarBank {
    pub fn new(mode: ExemplarMode) -> Self {
        ExemplarBank {
            mode,
            images: BTreeMap::new(),
        }
    }
    pub fn insert(&mut self, category_id: &str, images: Vec<Image>) {
        self.images
            .entry(category_id.to_string())
            .or_default()
            .extend(images);
    }
    pub fn categories(&self) -> Vec<&str> {
        self.images.keys().map(|s| s.as_str()).collect()
    }
    pub fn generate(&self, category_id: &str, seed: u64) -> Result<Image, GeneratorError> {
        let bank = self
            .images
            .get(category_id)
            .ok_or_else(|| GeneratorError::UnknownCategory(category_id.to_string()))?;
        if bank.is_empty() {
            return Err(GeneratorError::EmptyBank(category_id.to_string()));
        }
        match self.mode {
            ExemplarMode::Mean => {
                let mut acc = vec![0.0f64; bank[0].data.len()];
                for img in bank {
                    for (a, &v) in acc.iter_mut().zip(&img.data) {
                        *a += v as f64;
                    }
                }
                let n = bank.len() as f64;
                let data: Vec<f32> = acc.iter().map(|a| (a / n) as f32).collect();
                Ok(Image::new(bank[0].height, bank[0].width, data))
            }
            ExemplarMode::Random => {
                let mut rng = derive_rng(seed, &["exemplar-pick", category_id]);
                Ok(bank[rng.random_range(0..bank.len())].clone())
            }
        }
    }
}

/// Backend-agnostic handle used by the pipeline.
pub enum ConditionalGenerator {
    Cgan(Box<Cgan>),
    Exemplar(ExemplarBank),
}

impl ConditionalGenerator {
    pub fn generate(&self, category_id: &str, seed: u64) -> Result<Image, GeneratorError> {
        match self {
            ConditionalGenerator::Cgan(g) => g.generate(category_id, seed),
            ConditionalGenerator::Exemplar(b) => b.generate(category_id, seed),
        }
    }
    pub fn backend_name(&self) -> &'static str {
        match self {
            ConditionalGenerator::Cgan(_) => "cgan",
            ConditionalGenerator::Exemplar(_) => "exemplar",
        }
    }
}



#[cfg(test)]
mod descent_tests {
    use super::*;

    #[test]
    fn one_generator_step_against_frozen_discriminator_descends() {
        // With the discriminator frozen, a small enough gradient step on the
        // generator strictly decreases g_loss for the same latent batch.
        let data: Vec<(Image, usize)> = (0..4)
            .map(|i| (Image::constant(4, 4, 0.2 + 0.1 * i as f32), i % 2))
            .collect();
        let cfg = CganConfig {
            image_size: 4,
            latent_dim: 8,
            embed_dim: 4,
            g_hidden: vec![16],
            d_hidden: vec![16],
            steps: 5,
            batch_size: 4,
            seed: 3,
            ..CganConfig::default()
        };
        let mut gan = Cgan::train(cfg, vec!["a".into(), "b".into()], &data).unwrap();
        let classes = [0usize, 1, 0, 1];
        let px = gan.pixel_dim();
        let mut rng = derive_rng(99, &["descent"]);
        let g_in = gan.g_input(&classes, &mut rng);
        let g_loss = |gan: &Cgan, g_in: &Array2<f64>| -> f64 {
            let fake = gan.g.forward(g_in).last().unwrap().clone();
            let logits = gan.d.forward(&gan.d_input(&fake, &classes));
            let p: Vec<f64> = logits.last().unwrap().iter().map(|&z| sigmoid(z)).collect();
            gan_value(&p, &p).g_loss
        };
        let before = g_loss(&gan, &g_in);
        // Manual plain-SGD step along the analytic gradient.
        let g_acts = gan.g.forward(&g_in);
        let fake = g_acts.last().unwrap().clone();
        let acts_d = gan.d.forward(&gan.d_input(&fake, &classes));
        let logit = acts_d.last().unwrap();
        let grad_logit = logit.mapv(|z| (sigmoid(z) - 1.0) / classes.len() as f64);
        let din = gan.d.backward(&acts_d, &grad_logit);
        let dpix = din.slice(ndarray::s![.., ..px]).to_owned();
        let _ = gan.g.backward(&g_acts, &dpix);
        let eta = 1e-3;
        for l in &mut gan.g.layers {
            let gw = l.gw.take().unwrap();
            let gb = l.gb.take().unwrap();
            l.w.scaled_add(-eta, &gw);
            l.b.scaled_add(-eta, &gb);
        }
        let after = g_loss(&gan, &g_in);
        assert!(after < before, "g_loss did not descend: {before} -> {after}");
    }
}
