//! Deterministic small convolutional feature extractor.
//!
//! A fixed seeded-random net (no training) shared by the encoding simulator,
//! the feature decoder, category identification and the style-transfer stage.
//! Forward is a pure function of (seed, image); `input_gradient` is the exact
//! vector-Jacobian product of the forward map, checked against central finite
//! differences in the tests. All math is f64 so those checks are meaningful.

use crate::dataio::Image;
use crate::util::derive_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("degenerate net spec: {0}")]
    DegenerateSpec(String),
    #[error("input resolution {got}x{got} does not match net input {want}x{want}")]
    ResolutionMismatch { got: usize, want: usize },
    #[error("cotangent shape mismatch at layer {layer}: got {got:?}, want {want:?}")]
    CotangentShape {
        layer: usize,
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub weight_seed: u64,
}

impl ConvNetSpec {
    /// 4 conv layers (16, 32, 64, 128 channels), 3x3 stride 1, each followed
    /// by 2x2 average pooling.
    pub fn default_for(input_size: usize, weight_seed: u64) -> Self {
        let layers = [16, 32, 64, 128]
            .iter()
            .map(|&c| LayerSpec {
                out_channels: c,
                kernel: 3,
                stride: 1,
                pool: true,
            })
            .collect();
        Self {
            input_size,
            layers,
            weight_seed,
        }
    }
}

/// Glorot uniform bound: `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// One feature map, channels-major `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<FeatureMap>,
    pub layer_names: Vec<String>,
}

impl FeatureStack {
    pub fn flattened(&self, layer: usize) -> &[f64] {
        self.layers[layer].flat()
    }
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub spec: ConvNetSpec,
    /// Per layer: weights in `[oc][ic][ky][kx]` order, flat.
    weights: Vec<Vec<f64>>,
    in_channels: Vec<usize>,
}

struct ForwardCache {
    /// Input to each conv layer, `(C,H,W)`.
    inputs: Vec<FeatureMap>,
    /// Conv output before the rectifier.
    preact: Vec<FeatureMap>,
}

impl FeatureNet {
    pub fn init_deterministic(spec: ConvNetSpec) -> Result<Self, FeatureError> {
        if spec.layers.len() < 4 {
            return Err(FeatureError::DegenerateSpec(
                "need at least 4 layers for an early/late feature hierarchy".into(),
            ));
        }
        if spec.input_size == 0 {
            return Err(FeatureError::DegenerateSpec("zero input size".into()));
        }
        let mut weights = Vec::new();
        let mut in_channels = Vec::new();
        let mut in_ch = 3usize;
        let mut hw = spec.input_size;
        for (li, layer) in spec.layers.iter().enumerate() {
            if layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0 {
                return Err(FeatureError::DegenerateSpec(format!(
                    "layer {li} has a zero dimension"
                )));
            }
            let k = layer.kernel;
            let fan_in = in_ch * k * k;
            let fan_out = layer.out_channels * k * k;
            let a = glorot_bound(fan_in, fan_out);
            let mut rng = derive_rng(spec.weight_seed, &["featurenet", &li.to_string()]);
            let w: Vec<f64> = (0..layer.out_channels * in_ch * k * k)
                .map(|_| rng.random_range(-a..a))
                .collect();
            weights.push(w);
            in_channels.push(in_ch);
            hw = conv_out(hw, k, layer.stride);
            if layer.pool {
                if hw % 2 != 0 {
                    return Err(FeatureError::DegenerateSpec(format!(
                        "layer {li}: pooling needs an even spatial size, got {hw}"
                    )));
                }
                hw /= 2;
            }
            if hw == 0 {
                return Err(FeatureError::DegenerateSpec(format!(
                    "layer {li} collapses the spatial extent to zero"
                )));
            }
            in_ch = layer.out_channels;
        }
        Ok(Self {
            spec,
            weights,
            in_channels,
        })
    }

    /// `(C, H, W)` of each layer's output, from conv/pool arithmetic alone.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut hw = self.spec.input_size;
        let mut out = Vec::new();
        for layer in &self.spec.layers {
            hw = conv_out(hw, layer.kernel, layer.stride);
            if layer.pool {
                hw /= 2;
            }
            out.push((layer.out_channels, hw, hw));
        }
        out
    }

    pub fn layer_dim(&self, layer: usize) -> usize {
        let (c, h, w) = self.layer_shapes()[layer];
        c * h * w
    }

    pub fn deepest_layer(&self) -> usize {
        self.spec.layers.len() - 1
    }

    fn image_to_map(&self, img: &Image) -> Result<FeatureMap, FeatureError> {
        if img.height != self.spec.input_size || img.width != self.spec.input_size {
            return Err(FeatureError::ResolutionMismatch {
                got: img.height,
                want: self.spec.input_size,
            });
        }
        let mut m = FeatureMap::zeros(3, img.height, img.width);
        for c in 0..3 {
            for y in 0..img.height {
                for x in 0..img.width {
                    let i = m.idx(c, y, x);
                    m.data[i] = img.get(y, x, c) as f64;
                }
            }
        }
        Ok(m)
    }

    pub fn forward_features(&self, img: &Image) -> Result<FeatureStack, FeatureError> {
        Ok(self.forward_cached(img)?.0)
    }

    fn forward_cached(&self, img: &Image) -> Result<(FeatureStack, ForwardCache), FeatureError> {
        let mut cur = self.image_to_map(img)?;
        let mut cache = ForwardCache {
            inputs: Vec::new(),
            preact: Vec::new(),
        };
        let mut layers = Vec::new();
        let mut names = Vec::new();
        for (li, layer) in self.spec.layers.iter().enumerate() {
            cache.inputs.push(cur.clone());
            let conv = conv_forward(&cur, &self.weights[li], self.in_channels[li], layer);
            cache.preact.push(conv.clone());
            let mut act = conv;
            for v in &mut act.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            cur = if layer.pool { avg_pool(&act) } else { act };
            layers.push(cur.clone());
            names.push(format!("conv{li}"));
        }
        Ok((
            FeatureStack {
                layers,
                layer_names: names,
            },
            cache,
        ))
    }

    /// Smallest |pre-activation| over the whole forward pass. Gradient-check
    /// callers resample inputs when this is near a rectifier kink.
    pub fn min_abs_preactivation(&self, img: &Image) -> Result<f64, FeatureError> {
        let (_, cache) = self.forward_cached(img)?;
        Ok(cache
            .preact
            .iter()
            .flat_map(|m| m.data.iter())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs())))
    }

    /// Rectifier activation pattern over all units. The forward map is
    /// piecewise linear; two inputs with equal patterns lie on the same
    /// linear piece, which is what a finite-difference probe needs.
    pub fn preactivation_signs(&self, img: &Image) -> Result<Vec<bool>, FeatureError> {
        let (_, cache) = self.forward_cached(img)?;
        Ok(cache
            .preact
            .iter()
            .flat_map(|m| m.data.iter().map(|&v| v > 0.0))
            .collect())
    }

    /// Exact gradient of `sum_l <upstream[l], features_l(img)>` w.r.t. the
    /// image, returned in the image's `(H, W, C)` layout.
    pub fn input_gradient(
        &self,
        img: &Image,
        upstream: &[Option<FeatureMap>],
    ) -> Result<Vec<f64>, FeatureError> {
        let (_, cache) = self.forward_cached(img)?;
        let shapes = self.layer_shapes();
        assert_eq!(upstream.len(), self.spec.layers.len());
        for (li, cot) in upstream.iter().enumerate() {
            if let Some(m) = cot {
                if m.shape() != shapes[li] {
                    return Err(FeatureError::CotangentShape {
                        layer: li,
                        got: m.shape(),
                        want: shapes[li],
                    });
                }
            }
        }
        let n_layers = self.spec.layers.len();
        let mut grad: Option<FeatureMap> = None;
        for li in (0..n_layers).rev() {
            let layer = &self.spec.layers[li];
            let (c, h, w) = shapes[li];
            // Accumulate the cotangent flowing into this layer's output.
            let mut g_out = match grad.take() {
                Some(g) => g,
                None => FeatureMap::zeros(c, h, w),
            };
            if let Some(cot) = &upstream[li] {
                for (a, b) in g_out.data.iter_mut().zip(&cot.data) {
                    *a += b;
                }
            }
            let g_act = if layer.pool {
                avg_pool_backward(&g_out)
            } else {
                g_out
            };
            // Rectifier: pass gradient only where the pre-activation was > 0.
            let pre = &cache.preact[li];
            let mut g_pre = g_act;
            for (g, p) in g_pre.data.iter_mut().zip(&pre.data) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
            grad = Some(conv_backward_input(
                &g_pre,
                &self.weights[li],
                self.in_channels[li],
                layer,
                cache.inputs[li].height,
            ));
        }
        let g = grad.unwrap();
        // (C,H,W) -> (H,W,C)
        let mut out = vec![0.0; 3 * g.height * g.width];
        for c in 0..3 {
            for y in 0..g.height {
                for x in 0..g.width {
                    out[(y * g.width + x) * 3 + c] = g.data[g.idx(c, y, x)];
                }
            }
        }
        Ok(out)
    }

    /// Stable checksum of the first layer's weights (determinism tests).
    pub fn weight_checksum(&self) -> String {
        let mut bytes = Vec::new();
        for w in &self.weights {
            for v in w {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::dataio::sha256_hex(&bytes)
    }
}

fn conv_out(hw: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (hw + 2 * pad - kernel) / stride + 1
}

fn conv_forward(input: &FeatureMap, weights: &[f64], in_ch: usize, layer: &LayerSpec) -> FeatureMap {
    let k = layer.kernel;
    let pad = k / 2;
    let s = layer.stride;
    let out_hw = conv_out(input.height, k, s);
    let mut out = FeatureMap::zeros(layer.out_channels, out_hw, out_hw);
    let ih = input.height as isize;
    let iw = input.width as isize;
    for oc in 0..layer.out_channels {
        for ic in 0..in_ch {
            let wbase = ((oc * in_ch) + ic) * k * k;
            let in_base = ic * input.height * input.width;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..out_hw {
                        let sy = (oy * s + ky) as isize - pad as isize;
                        if sy < 0 || sy >= ih {
                            continue;
                        }
                        let in_row = in_base + sy as usize * input.width;
                        let out_row = (oc * out_hw + oy) * out_hw;
                        for ox in 0..out_hw {
                            let sx = (ox * s + kx) as isize - pad as isize;
                            if sx < 0 || sx >= iw {
                                continue;
                            }
                            out.data[out_row + ox] += wv * input.data[in_row + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the conv input, given the gradient at the conv output.
fn conv_backward_input(
    g_out: &FeatureMap,
    weights: &[f64],
    in_ch: usize,
    layer: &LayerSpec,
    in_hw: usize,
) -> FeatureMap {
    let k = layer.kernel;
    let pad = k / 2;
    let s = layer.stride;
    let out_hw = g_out.height;
    let mut g_in = FeatureMap::zeros(in_ch, in_hw, in_hw);
    let ih = in_hw as isize;
    for oc in 0..layer.out_channels {
        for ic in 0..in_ch {
            let wbase = ((oc * in_ch) + ic) * k * k;
            let gin_base = ic * in_hw * in_hw;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..out_hw {
                        let sy = (oy * s + ky) as isize - pad as isize;
                        if sy < 0 || sy >= ih {
                            continue;
                        }
                        let gin_row = gin_base + sy as usize * in_hw;
                        let gout_row = (oc * out_hw + oy) * out_hw;
                        for ox in 0..out_hw {
                            let sx = (ox * s + kx) as isize - pad as isize;
                            if sx < 0 || sx >= ih {
                                continue;
                            }
                            g_in.data[gin_row + sx as usize] += wv * g_out.data[gout_row + ox];
                        }
                    }
                }
            }
        }
    }
    g_in
}

fn avg_pool(input: &FeatureMap) -> FeatureMap {
    let oh = input.height / 2;
    let ow = input.width / 2;
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += input.data[input.idx(c, y * 2 + dy, x * 2 + dx)];
                    }
                }
                let i = out.idx(c, y, x);
                out.data[i] = s * 0.25;
            }
        }
    }
    out
}

fn avg_pool_backward(g_out: &FeatureMap) -> FeatureMap {
    let ih = g_out.height * 2;
    let iw = g_out.width * 2;
    let mut g_in = FeatureMap::zeros(g_out.channels, ih, iw);
    for c in 0..g_out.channels {
        for y in 0..g_out.height {
            for x in 0..g_out.width {
                let g = g_out.data[g_out.idx(c, y, x)] * 0.25;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = g_in.idx(c, y * 2 + dy, x * 2 + dx);
                        g_in.data[i] += g;
                    }
                }
            }
        }
    }
    g_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_rng;
    use rand::Rng;

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = derive_rng(seed, &["img"]);
        let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
        Image::new(size, size, data)
    }

    fn small_net(seed: u64) -> FeatureNet {
        let spec = ConvNetSpec {
            input_size: 16,
            layers: [4, 8, 8, 16]
                .iter()
                .map(|&c| LayerSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    pool: true,
                })
                .collect(),
            weight_seed: seed,
        };
        FeatureNet::init_deterministic(spec).unwrap()
    }

    #[test]
    fn same_seed_same_weights_different_seed_different() {
        let a = small_net(5);
        let b = small_net(5);
        let c = small_net(6);
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn glorot_bound_example() {
        assert!((glorot_bound(9, 16) - (6.0f64 / 25.0).sqrt()).abs() < 1e-12);
        assert!((glorot_bound(9, 16) - 0.4899).abs() < 1e-4);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let net = small_net(1);
        let img = Image::constant(16, 16, 0.0);
        let fs = net.forward_features(&img).unwrap();
        for layer in &fs.layers {
            assert!(layer.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn first_layer_is_positively_homogeneous() {
        let net = small_net(2);
        let img = random_image(16, 3);
        let half = Image::new(16, 16, img.data.iter().map(|v| v * 0.5).collect());
        let f1 = net.forward_features(&img).unwrap();
        let f2 = net.forward_features(&half).unwrap();
        for (a, b) in f1.layers[0].data.iter().zip(&f2.layers[0].data) {
            assert!((a * 0.5 - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn default_shape_table_follows_halving() {
        let spec = ConvNetSpec::default_for(64, 0);
        let net = FeatureNet::init_deterministic(spec).unwrap();
        assert_eq!(
            net.layer_shapes(),
            vec![(16, 32, 32), (32, 16, 16), (64, 8, 8), (128, 4, 4)]
        );
        // Spatial dims strictly non-increasing with depth, outputs >= 0.
        let img = random_image(64, 9);
        let fs = net.forward_features(&img).unwrap();
        let mut prev = usize::MAX;
        for layer in &fs.layers {
            assert!(layer.height <= prev);
            prev = layer.height;
            assert!(layer.data.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let net = small_net(1);
        let img = Image::constant(8, 8, 0.5);
        assert!(matches!(
            net.forward_features(&img),
            Err(FeatureError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = small_net(4);
        let img = random_image(16, 10);
        let upstream: Vec<Option<FeatureMap>> = net
            .layer_shapes()
            .iter()
            .map(|&(c, h, w)| Some(FeatureMap::zeros(c, h, w)))
            .collect();
        let g = net.input_gradient(&img, &upstream).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    /// Central finite differences on the scalar s(x) = <upstream, f(x)>
    /// for >= 20 random (image, upstream) pairs.
    #[test]
    fn input_gradient_matches_central_differences() {
        let net = small_net(7);
        let shapes = net.layer_shapes();
        let h = 1e-3;
        let mut checked_pairs = 0;
        let mut attempt = 0u64;
        while checked_pairs < 20 {
            attempt += 1;
            let img = random_image(16, 100 + attempt);
            // Stay away from rectifier kinks so FD is valid.
            if net.min_abs_preactivation(&img).unwrap() < 1e-4 {
                continue;
            }
            let mut rng = derive_rng(200 + attempt, &["cot"]);
            let upstream: Vec<Option<FeatureMap>> = shapes
                .iter()
                .map(|&(c, hh, ww)| {
                    let mut m = FeatureMap::zeros(c, hh, ww);
                    for v in &mut m.data {
                        *v = rng.random_range(-1.0..1.0);
                    }
                    Some(m)
                })
                .collect();
            let grad = net.input_gradient(&img, &upstream).unwrap();
            let scalar = |im: &Image| -> f64 {
                let fs = net.forward_features(im).unwrap();
                fs.layers
                    .iter()
                    .zip(&upstream)
                    .map(|(f, u)| {
                        f.data
                            .iter()
                            .zip(&u.as_ref().unwrap().data)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    })
                    .sum()
            };
            // Probe a handful of random pixels per pair.
            let mut max_rel = 0.0f64;
            let mut probe = 0;
            while probe < 5 {
                let pi = rng.random_range(0..img.data.len());
                let mut plus = img.clone();
                let mut minus = img.clone();
                plus.data[pi] += h as f32;
                minus.data[pi] -= h as f32;
                // The map is piecewise linear; the probe is only valid on a
                // single linear piece, so skip probes that cross a kink.
                if net.preactivation_signs(&plus).unwrap()
                    != net.preactivation_signs(&minus).unwrap()
                {
                    continue;
                }
                // Use the actually realized f32 step for the quotient.
                let step = (plus.data[pi] - minus.data[pi]) as f64;
                let fd = (scalar(&plus) - scalar(&minus)) / step;
                let an = grad[pi];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                let rel = (fd - an).abs() / denom;
                max_rel = max_rel.max(rel);
                assert!(
                    rel <= 1e-4,
                    "pair {checked_pairs} probe {probe}: fd={fd} analytic={an} rel={rel}"
                );
                probe += 1;
            }
            let _ = max_rel;
            checked_pairs += 1;
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut spec = ConvNetSpec::default_for(64, 0);
        spec.layers[0].out_channels = 0;
        assert!(FeatureNet::init_deterministic(spec).is_err());
        let mut spec = ConvNetSpec::default_for(64, 0);
        spec.layers.truncate(3);
        assert!(FeatureNet::init_deterministic(spec).is_err());
    }
}
