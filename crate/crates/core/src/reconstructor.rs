//! Stimulus reconstruction from voxels.
//!
//! A pluggable interface with one real baseline: ridge regression from voxels
//! to a low-resolution pixel grid, clamped and bilinearly upsampled. The
//! baseline is deliberately blurry — it captures general shape and color and
//! loses everything above its low-resolution Nyquist band, which is exactly
//! the failure mode the enhancement stage targets. A directory-backed
//! provider lets precomputed reconstructions from external methods slot in.

use crate::dataio::{load_image, resize_image, DataError, Image};
use crate::decoder::{default_ridge_lambda, fit_ridge, DecoderError, DecoderModel};
use ndarray::Array2;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("voxel dimension {got} does not match model input {want}")]
    VoxelDimMismatch { got: usize, want: usize },
    #[error("no reconstruction stored for stimulus {0:?}")]
    MissingReconstruction(String),
    #[error("unknown reconstructor backend {0:?}")]
    UnknownBackend(String),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Anything that maps voxels to an image plugs into the pipeline.
pub trait Reconstructor: Send + Sync {
    fn reconstruct(&self, stimulus_id: &str, voxels: &[f64]) -> Result<Image, ReconError>;
    fn name(&self) -> &str;
}

#[derive(Debug)]
pub struct PixelDecoderModel {
    pub model: DecoderModel,
    pub target_resolution: usize,
    pub working_resolution: usize,
}

pub const DEFAULT_TARGET_RESOLUTION: usize = 16;

/// Ridge regression voxels -> downsampled pixels. Images are downsampled to
/// `target_resolution` to form the regression targets; `lambda = None` uses
/// the decoder module's trace heuristic.
pub fn fit_pixel_decoder(
    train_voxels: &[Vec<f64>],
    train_images: &[Image],
    target_resolution: usize,
    working_resolution: usize,
    lambda: Option<f64>,
) -> Result<PixelDecoderModel, ReconError> {
    assert_eq!(train_voxels.len(), train_images.len());
    let (n, p) = (train_voxels.len(), train_voxels[0].len());
    let q = target_resolution * target_resolution * 3;
    let mut x = Array2::zeros((n, p));
    for (i, row) in train_voxels.iter().enumerate() {
        assert_eq!(row.len(), p);
        for (j, &v) in row.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let mut y = Array2::zeros((n, q));
    for (i, img) in train_images.iter().enumerate() {
        let small = resize_image(img, target_resolution, target_resolution);
        for (j, &v) in small.data.iter().enumerate() {
            y[[i, j]] = v as f64;
        }
    }
    let lambda = lambda.unwrap_or_else(|| {
        // Same trace heuristic fit_ridge's callers use, on z-scored columns.
        let mut z = x.clone();
        for mut col in z.columns_mut() {
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            col.mapv_inplace(|v| (v - mean) / sd);
        }
        default_ridge_lambda(&z)
    });
    let model = fit_ridge(&x, &y, lambda)?;
    Ok(PixelDecoderModel {
        model,
        target_resolution,
        working_resolution,
    })
}

impl PixelDecoderModel {
    pub fn reconstruct(&self, voxels: &[f64]) -> Result<Image, ReconError> {
        let want = self.model.weights.ncols();
        if voxels.len() != want {
            return Err(ReconError::VoxelDimMismatch {
                got: voxels.len(),
                want,
            });
        }
        let pred = self.model.predict(voxels)?;
        let r = self.target_resolution;
        let small = Image::new(
            r,
            r,
            pred.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect(),
        );
        Ok(resize_image(
            &small,
            self.working_resolution,
            self.working_resolution,
        ))
    }
}

impl Reconstructor for PixelDecoderModel {
    fn reconstruct(&self, _stimulus_id: &str, voxels: &[f64]) -> Result<Image, ReconError> {
        PixelDecoderModel::reconstruct(self, voxels)
    }
    fn name(&self) -> &str {
        "baseline-linear"
    }
}

/// Reads precomputed reconstructions (one PNG per stimulus id) from a
/// directory; lets outputs of real external methods flow through the rest of
/// the pipeline untouched.
pub struct ExternalDirReconstructor {
    pub dir: PathBuf,
    pub working_resolution: usize,
}

impl Reconstructor for ExternalDirReconstructor {
    fn reconstruct(&self, stimulus_id: &str, _voxels: &[f64]) -> Result<Image, ReconError> {
        let path = self.dir.join(format!("{stimulus_id}.png"));
        if !path.exists() {
            return Err(ReconError::MissingReconstruction(stimulus_id.to_string()));
        }
        let img = load_image(&path)?;
        Ok(resize_image(
            &img,
            self.working_resolution,
            self.working_resolution,
        ))
    }
    fn name(&self) -> &str {
        "external-dir"
    }
}

/// Fraction of image energy above the Nyquist band of a `band` x `band`
/// grid, measured as the residual after a down/up-sample round trip.
pub fn high_band_energy_fraction(img: &Image, band: usize) -> f64 {
    let low = resize_image(&resize_image(img, band, band), img.height, img.width);
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&a, &b) in img.data.iter().zip(&low.data) {
        let d = (a - b) as f64;
        num += d * d;
        den += (a as f64) * (a as f64);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalx::{ssim, SsimParams};
    use crate::simulator::{family_for, render_exemplar};
    use crate::util::{derive_rng, r_squared};
    use rand::Rng;

    fn stimuli(n: usize, size: usize, jitter_base: u64) -> Vec<Image> {
        // Families fixed; only per-image jitter varies with jitter_base.
        (0..n)
            .map(|i| {
                let fam = family_for(&format!("cat{}", i % 6), 3);
                render_exemplar(&fam, size, jitter_base.wrapping_add(i as u64))
            })
            .collect()
    }

    /// Unstructured images spanning the full low-res pixel space; makes the
    /// linear diagnostic task exactly invertible.
    fn random_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
        let mut rng = derive_rng(seed, &["randimg"]);
        (0..n)
            .map(|_| {
                let data = (0..size * size * 3)
                    .map(|_| rng.random_range(0.0..1.0f32))
                    .collect();
                Image::new(size, size, data)
            })
            .collect()
    }

    /// Diagnostic encoding: voxels are a random linear map of the 16x16
    /// pixels themselves, so the ridge decoder can invert it.
    fn diagnostic_voxels(images: &[Image], res: usize, v: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = derive_rng(seed, &["diag"]);
        let p = res * res * 3;
        let w: Vec<Vec<f64>> = (0..v)
            .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        images
            .iter()
            .map(|img| {
                let small = resize_image(img, res, res);
                w.iter()
                    .map(|row| {
                        row.iter()
                            .zip(&small.data)
                            .map(|(&wi, &x)| wi * x as f64)
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn diagnostic_config_reconstructs_nearly_perfectly() {
        let res = 8;
        let train = random_images(300, 8, 3);
        let test = random_images(12, 8, 77);
        let vox_tr = diagnostic_voxels(&train, res, 300, 5);
        let vox_te = diagnostic_voxels(&test, res, 300, 5);
        let model = fit_pixel_decoder(&vox_tr, &train, res, 32, Some(1e-8)).unwrap();
        // R^2 of predicted low-res pixels on held-out stimuli.
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for (v, img) in vox_te.iter().zip(&test) {
            preds.extend(model.model.predict(v).unwrap());
            truths.extend(
                resize_image(img, res, res)
                    .data
                    .iter()
                    .map(|&x| x as f64),
            );
        }
        let r2 = r_squared(&preds, &truths);
        assert!(r2 >= 0.99, "diagnostic R^2 = {r2}");
    }

    #[test]
    fn permuted_pairs_decode_nothing() {
        let res = 8;
        let train = random_images(300, 8, 3);
        let test = random_images(12, 8, 77);
        let mut vox_tr = diagnostic_voxels(&train, res, 300, 5);
        let vox_te = diagnostic_voxels(&test, res, 300, 5);
        vox_tr.rotate_left(37); // break the pairing
        let model = fit_pixel_decoder(&vox_tr, &train, res, 32, None).unwrap();
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for (v, img) in vox_te.iter().zip(&test) {
            preds.extend(model.model.predict(v).unwrap());
            truths.extend(
                resize_image(img, res, res)
                    .data
                    .iter()
                    .map(|&x| x as f64),
            );
        }
        let r2 = r_squared(&preds, &truths);
        assert!(r2 < 0.2, "permuted R^2 = {r2}");
    }

    #[test]
    fn constant_dataset_yields_intercept_image() {
        let imgs: Vec<Image> = (0..20).map(|_| Image::constant(32, 32, 0.42)).collect();
        let mut rng = derive_rng(9, &["const"]);
        let vox: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..30).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let model = fit_pixel_decoder(&vox, &imgs, 8, 32, None).unwrap();
        let out = Reconstructor::reconstruct(&model, "s", &vox[3]).unwrap();
        for &v in &out.data {
            assert!((v - 0.42).abs() < 0.02, "expected constant 0.42, got {v}");
        }
    }

    #[test]
    fn mean_voxels_give_intercept_and_output_is_clamped() {
        let res = 8;
        let train = stimuli(60, 32, 13);
        let vox = diagnostic_voxels(&train, res, 100, 2);
        let model = fit_pixel_decoder(&vox, &train, res, 32, None).unwrap();
        let n = vox.len() as f64;
        let mut mean = vec![0.0; vox[0].len()];
        for v in &vox {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        let pred = model.model.predict(&mean).unwrap();
        for (p, i) in pred.iter().zip(model.model.intercept.iter()) {
            assert!((p - i).abs() < 1e-8);
        }
        let img = PixelDecoderModel::reconstruct(&model, &vox[0]).unwrap();
        assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn beats_mean_image_baseline_on_ssim() {
        let res = 8;
        let train = stimuli(120, 32, 100);
        let test = stimuli(12, 32, 90_000);
        let vox_tr = diagnostic_voxels(&train, res, 300, 5);
        let vox_te = diagnostic_voxels(&test, res, 300, 5);
        let model = fit_pixel_decoder(&vox_tr, &train, res, 32, None).unwrap();
        // Mean training image, same blur treatment as the reconstruction.
        let mut mean = Image::constant(32, 32, 0.0);
        for img in &train {
            for (m, &v) in mean.data.iter_mut().zip(&img.data) {
                *m += v / train.len() as f32;
            }
        }
        let mean = resize_image(&resize_image(&mean, res, res), 32, 32);
        let params = SsimParams::default();
        let mut recon_sum = 0.0;
        let mut base_sum = 0.0;
        for (v, img) in vox_te.iter().zip(&test) {
            let rec = PixelDecoderModel::reconstruct(&model, v).unwrap();
            recon_sum += ssim(&rec, img, &params).unwrap();
            base_sum += ssim(&mean, img, &params).unwrap();
        }
        assert!(
            recon_sum > base_sum,
            "recon ssim {recon_sum} vs mean baseline {base_sum}"
        );
    }

    #[test]
    fn reconstructions_are_low_pass() {
        let res = 8;
        let train = stimuli(120, 32, 3);
        let vox_tr = diagnostic_voxels(&train, res, 300, 5);
        let model = fit_pixel_decoder(&vox_tr, &train, res, 32, None).unwrap();
        let rec = PixelDecoderModel::reconstruct(&model, &vox_tr[0]).unwrap();
        let frac = high_band_energy_fraction(&rec, res);
        assert!(frac <= 0.01, "high-band energy fraction {frac}");
    }

    #[test]
    fn voxel_dim_mismatch_is_reported() {
        let train = stimuli(40, 32, 3);
        let vox = diagnostic_voxels(&train, 8, 50, 5);
        let model = fit_pixel_decoder(&vox, &train, 8, 32, None).unwrap();
        assert!(matches!(
            PixelDecoderModel::reconstruct(&model, &vec![0.0; 7]),
            Err(ReconError::VoxelDimMismatch { got: 7, want: 50 })
        ));
    }

    #[test]
    fn external_dir_provider_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = render_exemplar(&family_for("x", 1), 32, 4);
        crate::dataio::save_image(&img, &dir.path().join("stim7.png")).unwrap();
        let provider = ExternalDirReconstructor {
            dir: dir.path().to_path_buf(),
            working_resolution: 32,
        };
        let out = provider.reconstruct("stim7", &[]).unwrap();
        assert_eq!(out.height, 32);
        assert!(matches!(
            provider.reconstruct("missing", &[]),
            Err(ReconError::MissingReconstruction(_))
        ));
    }
}
