//! Style transfer by image-space optimization.
//!
//! The pipeline's wiring is the inverse of the artistic use: content comes
//! from the class-conditionally *generated* image, style from the blurry
//! *reconstruction*, so the output keeps decoded semantics while adopting the
//! measured appearance. Style is the usual Gram statistics over feature
//! channels; optimization is adaptive first-order descent on the pixels with
//! projection onto [0,1].

use crate::dataio::Image;
use crate::featurenet::{FeatureError, FeatureMap, FeatureNet, FeatureStack};
use crate::util::derive_rng;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StyleError {
    #[error("layer {0} out of range for the feature net")]
    LayerOutOfRange(usize),
    #[error("alpha and beta cannot both be zero")]
    ZeroWeights,
    #[error("feature shapes differ at layer {0}")]
    ShapeMismatch(usize),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Content,
    Noise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleTransferConfig {
    pub content_layer: usize,
    pub style_layers: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    /// One weight per entry of `style_layers`; empty means uniform.
    pub style_layer_weights: Vec<f64>,
    pub steps: usize,
    pub step_size: f64,
    pub init_mode: InitMode,
    pub seed: u64,
}

impl Default for StyleTransferConfig {
    fn default() -> Self {
        Self {
            content_layer: 3,
            style_layers: vec![0, 1, 2],
            alpha: 1.0,
            beta: 1e3,
            style_layer_weights: Vec::new(),
            steps: 500,
            step_size: 0.02,
            init_mode: InitMode::Content,
            seed: 0,
        }
    }
}

impl StyleTransferConfig {
    pub fn validate(&self, net: &FeatureNet) -> Result<(), StyleError> {
        let n = net.spec.layers.len();
        if self.content_layer >= n {
            return Err(StyleError::LayerOutOfRange(self.content_layer));
        }
        for &l in &self.style_layers {
            if l >= n {
                return Err(StyleError::LayerOutOfRange(l));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(StyleError::ZeroWeights);
        }
        Ok(())
    }

    pub fn layer_weight(&self, i: usize) -> f64 {
        if self.style_layer_weights.is_empty() {
            1.0 / self.style_layers.len() as f64
        } else {
            self.style_layer_weights[i]
        }
    }
}

#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub layer: usize,
    pub matrix: Array2<f64>,
}

/// `G = F F^T / (C·H·W)` with `F` the `C x (H·W)` matrix of activations.
/// Symmetry is asserted always, positive semidefiniteness in debug builds.
pub fn gram(features: &FeatureMap, layer: usize) -> GramMatrix {
    let (c, h, w) = features.shape();
    let hw = h * w;
    let n = (c * hw) as f64;
    let f = ndarray::ArrayView2::from_shape((c, hw), features.flat()).expect("layout");
    let matrix = f.dot(&f.t()) / n;
    for i in 0..c {
        for j in 0..i {
            debug_assert!((matrix[[i, j]] - matrix[[j, i]]).abs() < 1e-9);
        }
    }
    #[cfg(debug_assertions)]
    {
        // PSD by construction; verify eigenvalues >= -1e-8 via a shifted
        // Cholesky factorization.
        let shifted: Vec<f64> = {
            let mut a = matrix.clone();
            for i in 0..c {
                a[[i, i]] += 1e-8;
            }
            a.iter().cloned().collect()
        };
        debug_assert!(
            crate::util::cholesky_solve(shifted, c, &mut []).is_some(),
            "gram matrix at layer {layer} is not PSD"
        );
    }
    GramMatrix { layer, matrix }
}

/// `1/2 ||F_x - F_c||^2` at the content layer.
pub fn content_loss(
    x: &FeatureStack,
    c: &FeatureStack,
    layer: usize,
) -> Result<f64, StyleError> {
    let (fx, fc) = (
        x.layers.get(layer).ok_or(StyleError::LayerOutOfRange(layer))?,
        c.layers.get(layer).ok_or(StyleError::LayerOutOfRange(layer))?,
    );
    if fx.shape() != fc.shape() {
        return Err(StyleError::ShapeMismatch(layer));
    }
    Ok(0.5
        * fx.flat()
            .iter()
            .zip(fc.flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// `sum_l w_l ||G_x^l - G_s^l||_F^2`; the Gram normalization absorbs layer
/// size so weights compare across layers.
pub fn style_loss(
    x: &FeatureStack,
    s: &FeatureStack,
    cfg: &StyleTransferConfig,
) -> Result<f64, StyleError> {
    let mut total = 0.0;
    for (i, &l) in cfg.style_layers.iter().enumerate() {
        let (fx, fs) = (
            x.layers.get(l).ok_or(StyleError::LayerOutOfRange(l))?,
            s.layers.get(l).ok_or(StyleError::LayerOutOfRange(l))?,
        );
        if fx.shape() != fs.shape() {
            return Err(StyleError::ShapeMismatch(l));
        }
        let gx = gram(fx, l).matrix;
        let gs = gram(fs, l).matrix;
        total += cfg.layer_weight(i) * (&gx - &gs).mapv(|d| d * d).sum();
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub content: f64,
    pub style: f64,
    pub total: f64,
    pub best_total: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,content,style,total,best_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            r.step, r.content, r.style, r.total, r.best_total
        ));
    }
    out
}

/// Cotangents of the total loss with respect to every layer's activations,
/// ready for `FeatureNet::input_gradient`.
fn upstream_cotangents(
    x_feats: &FeatureStack,
    c_feats: &FeatureStack,
    s_feats: &FeatureStack,
    cfg: &StyleTransferConfig,
    n_layers: usize,
) -> Vec<Option<FeatureMap>> {
    let mut upstream: Vec<Option<FeatureMap>> = vec![None; n_layers];
    if cfg.alpha > 0.0 {
        let fx = &x_feats.layers[cfg.content_layer];
        let fc = &c_feats.layers[cfg.content_layer];
        let mut cot = FeatureMap::zeros(fx.channels, fx.height, fx.width);
        for (o, (a, b)) in cot.data.iter_mut().zip(fx.flat().iter().zip(fc.flat())) {
            *o = cfg.alpha * (a - b);
        }
        upstream[cfg.content_layer] = Some(cot);
    }
    if cfg.beta > 0.0 {
        for (i, &l) in cfg.style_layers.iter().enumerate() {
            let fx = &x_feats.layers[l];
            let fs = &s_feats.layers[l];
            let (c, h, w) = fx.shape();
            let hw = h * w;
            let n = (c * hw) as f64;
            let fxm = ndarray::ArrayView2::from_shape((c, hw), fx.flat()).unwrap();
            let d = gram(fx, l).matrix - gram(fs, l).matrix;
            // d/dF of w_l ||G_x - G_s||^2 = (4 w_l / N) (G_x - G_s) F.
            let grad = d.dot(&fxm) * (4.0 * cfg.beta * cfg.layer_weight(i) / n);
            let mut cot = FeatureMap::zeros(c, h, w);
            cot.data.copy_from_slice(grad.as_slice().unwrap());
            match &mut upstream[l] {
                Some(existing) => {
                    for (e, g) in existing.data.iter_mut().zip(&cot.data) {
                        *e += g;
                    }
                }
                None => upstream[l] = Some(cot),
            }
        }
    }
    upstream
}

/// Total-loss pixel gradient at `img`, in the image's (H,W,C) layout.
/// Exposed for the finite-difference acceptance check.
pub fn total_loss_gradient(
    img: &Image,
    content: &Image,
    style: &Image,
    cfg: &StyleTransferConfig,
    net: &FeatureNet,
) -> Result<Vec<f64>, StyleError> {
    let x_feats = net.forward_features(img)?;
    let c_feats = net.forward_features(content)?;
    let s_feats = net.forward_features(style)?;
    let upstream = upstream_cotangents(&x_feats, &c_feats, &s_feats, cfg, net.spec.layers.len());
    Ok(net.input_gradient(img, &upstream)?)
}

pub fn total_loss(
    img: &Image,
    content: &Image,
    style: &Image,
    cfg: &StyleTransferConfig,
    net: &FeatureNet,
) -> Result<(f64, f64, f64), StyleError> {
    let x_feats = net.forward_features(img)?;
    let c_feats = net.forward_features(content)?;
    let s_feats = net.forward_features(style)?;
    let cl = if cfg.alpha > 0.0 {
        content_loss(&x_feats, &c_feats, cfg.content_layer)?
    } else {
        0.0
    };
    let sl = if cfg.beta > 0.0 {
        style_loss(&x_feats, &s_feats, cfg)?
    } else {
        0.0
    };
    Ok((cl, sl, cfg.alpha * cl + cfg.beta * sl))
}

/// Runs the optimization and returns the best-loss iterate plus a trace. The
/// trace's `best_total` column is non-increasing by construction.
pub fn transfer(
    content: &Image,
    style: &Image,
    cfg: &StyleTransferConfig,
    net: &FeatureNet,
) -> Result<(Image, Vec<TraceRow>), StyleError> {
    cfg.validate(net)?;
    assert_eq!(content.height, style.height);
    assert_eq!(content.width, style.width);
    let c_feats = net.forward_features(content)?;
    let s_feats = net.forward_features(style)?;
    let mut img = match cfg.init_mode {
        InitMode::Content => content.clone(),
        InitMode::Noise => {
            let mut rng = derive_rng(cfg.seed, &["style-init"]);
            let data = (0..content.data.len())
                .map(|_| rng.random_range(0.0..1.0f32))
                .collect();
            Image::new(content.height, content.width, data)
        }
    };
    let dim = img.data.len();
    let (mut m, mut v) = (vec![0.0f64; dim], vec![0.0f64; dim]);
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let mut best_img = img.clone();
    let mut best_total = f64::INFINITY;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x_feats = net.forward_features(&img)?;
        let cl = if cfg.alpha > 0.0 {
            content_loss(&x_feats, &c_feats, cfg.content_layer)?
        } else {
            0.0
        };
        let sl = if cfg.beta > 0.0 {
            style_loss(&x_feats, &s_feats, cfg)?
        } else {
            0.0
        };
        let total = cfg.alpha * cl + cfg.beta * sl;
        if !total.is_finite() {
            return Err(StyleError::NonFiniteLoss(step));
        }
        if total < best_total {
            best_total = total;
            best_img = img.clone();
        }
        trace.push(TraceRow {
            step,
            content: cl,
            style: sl,
            total,
            best_total,
        });
        let upstream =
            upstream_cotangents(&x_feats, &c_feats, &s_feats, cfg, net.spec.layers.len());
        let grad = net.input_gradient(&img, &upstream)?;
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
        for i in 0..dim {
            m[i] = B1 * m[i] + (1.0 - B1) * grad[i];
            v[i] = B2 * v[i] + (1.0 - B2) * grad[i] * grad[i];
            let delta = cfg.step_size * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
            img.data[i] = (img.data[i] as f64 - delta).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((best_img, trace))
}
