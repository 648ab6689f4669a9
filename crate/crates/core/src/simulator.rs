//! Synthetic fMRI encoding model.
//!
//! Replaces real recordings while preserving the protocol shape: seven ROIs,
//! disjoint train/test category sets, single train trials and 35 averaged
//! test trials. Stimuli are procedurally generated image families (one
//! pattern/palette family per category) so the category signal is genuinely
//! decodable, and voxel responses are linear in net features plus Gaussian
//! noise.

use crate::dataio::{DatasetManifest, Image, ManifestEntry, RunStore, Split, TensorRecord};
use crate::featurenet::{FeatureNet, FeatureStack};
use crate::util::derive_rng;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("ROI {roi} references layer {layer}, net has {layers} layers")]
    UnknownLayer {
        roi: String,
        layer: usize,
        layers: usize,
    },
    #[error("train and test categories overlap: {0:?}")]
    OverlappingCategories(Vec<String>),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error(transparent)]
    Feature(#[from] crate::featurenet::FeatureError),
}

pub const ROI_NAMES: [&str; 7] = ["V1", "V2", "V3", "V4", "LOC", "FFA", "PPA"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoiSpec {
    pub name: String,
    pub voxel_count: usize,
    pub source_layer: usize,
    pub noise_sigma: f64,
}

/// The seven-ROI default protocol: early visual areas read shallow layers,
/// category-selective areas read the deepest layer.
pub fn default_rois(voxel_count: usize, noise_sigma: f64, deepest_layer: usize) -> Vec<RoiSpec> {
    let layer_of = |name: &str| match name {
        "V1" | "V2" => 0usize,
        "V3" => 1,
        "V4" => 2.min(deepest_layer),
        _ => deepest_layer,
    };
    ROI_NAMES
        .iter()
        .map(|&name| RoiSpec {
            name: name.to_string(),
            voxel_count,
            source_layer: layer_of(name),
            noise_sigma,
        })
        .collect()
}

#[derive(Debug)]
pub struct RoiEncoding {
    pub spec: RoiSpec,
    /// voxel-count x feature-dim, rows unit Euclidean norm.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug)]
pub struct EncodingModel {
    pub rois: Vec<RoiEncoding>,
    pub seed: u64,
}

pub fn build_encoding_model(
    rois: &[RoiSpec],
    feature_dims: &[usize],
    seed: u64,
) -> Result<EncodingModel, SimError> {
    let mut out = Vec::new();
    for roi in rois {
        let dim = *feature_dims
            .get(roi.source_layer)
            .ok_or_else(|| SimError::UnknownLayer {
                roi: roi.name.clone(),
                layer: roi.source_layer,
                layers: feature_dims.len(),
            })?;
        let mut rng = derive_rng(seed, &["encoding-model", &roi.name]);
        let mut weights = Array2::zeros((roi.voxel_count, dim));
        for mut row in weights.rows_mut() {
            let mut norm = 0.0f64;
            for v in row.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = g;
                norm += g * g;
            }
            let norm = norm.sqrt();
            // Unit-norm rows make noise_sigma interpretable as inverse SNR.
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let bias = Array1::from_shape_fn(roi.voxel_count, |_| rng.random_range(-0.1..0.1));
        out.push(RoiEncoding {
            spec: roi.clone(),
            weights,
            bias,
        });
    }
    Ok(EncodingModel { rois: out, seed })
}

#[derive(Debug, Clone)]
pub struct VoxelRecord {
    pub stimulus_id: String,
    pub roi_name: String,
    pub trial_index: usize,
    pub response: Vec<f64>,
}

/// `response = W . flatten(features[source_layer]) + b + eps`, with
/// `eps ~ Normal(0, sigma^2)` drawn independently per (roi, trial).
pub fn simulate_voxels(
    model: &EncodingModel,
    features: &FeatureStack,
    stimulus_id: &str,
    trials: usize,
    seed: u64,
) -> Vec<VoxelRecord> {
    assert!(trials >= 1);
    let mut records = Vec::with_capacity(model.rois.len() * trials);
    for roi in &model.rois {
        let f = Array1::from_vec(features.flattened(roi.spec.source_layer).to_vec());
        let base = roi.weights.dot(&f) + &roi.bias;
        for trial in 0..trials {
            let mut rng = derive_rng(
                seed,
                &["voxel-noise", stimulus_id, &roi.spec.name, &trial.to_string()],
            );
            let response: Vec<f64> = base
                .iter()
                .map(|&v| {
                    if roi.spec.noise_sigma > 0.0 {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        v + roi.spec.noise_sigma * g
                    } else {
                        v
                    }
                })
                .collect();
            records.push(VoxelRecord {
                stimulus_id: stimulus_id.to_string(),
                roi_name: roi.spec.name.clone(),
                trial_index: trial,
                response,
            });
        }
    }
    records
}

// ---------------------------------------------------------------------------
// Procedural stimulus families
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternKind {
    Stripes,
    Checker,
    Rings,
    Blobs,
}

/// Per-category recipe: pattern type, orientation, frequency and palette are
/// fixed per category; individual images jitter phase and color slightly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryFamily {
    pub category_id: String,
    pub pattern: PatternKind,
    pub orientation: f64,
    pub frequency: f64,
    pub palette: ([f32; 3], [f32; 3]),
}

pub fn family_for(category_id: &str, master_seed: u64) -> CategoryFamily {
    let mut rng = derive_rng(master_seed, &["family", category_id]);
    let pattern = match rng.random_range(0..4u32) {
        0 => PatternKind::Stripes,
        1 => PatternKind::Checker,
        2 => PatternKind::Rings,
        _ => PatternKind::Blobs,
    };
    let orientation = rng.random_range(0.0..std::f64::consts::PI);
    let frequency = rng.random_range(2.5..7.0);
    let color = |rng: &mut rand_chacha::ChaCha12Rng| -> [f32; 3] {
        [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ]
    };
    let mut c1 = color(&mut rng);
    let mut c2 = color(&mut rng);
    // Keep the two palette colors apart so the pattern has contrast.
    let dist2 = |a: &[f32; 3], b: &[f32; 3]| -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    while dist2(&c1, &c2) < 0.3 {
        c1 = color(&mut rng);
        c2 = color(&mut rng);
    }
    CategoryFamily {
        category_id: category_id.to_string(),
        pattern,
        orientation,
        frequency,
        palette: (c1, c2),
    }
}

/// Renders one member of a family. Same (family, jitter_seed) is the same
/// image, bit for bit.
pub fn render_exemplar(family: &CategoryFamily, size: usize, jitter_seed: u64) -> Image {
    let mut rng = derive_rng(jitter_seed, &["render", &family.category_id]);
    let phase: f64 = rng.random_range(-0.4..0.4);
    let freq = family.frequency * rng.random_range(0.97..1.03);
    let color_jitter: f32 = rng.random_range(-0.04..0.04);
    let cx: f64 = 0.5 + rng.random_range(-0.06..0.06);
    let cy: f64 = 0.5 + rng.random_range(-0.06..0.06);
    // Blob layout is a per-category constant; only amplitudes jitter.
    let mut blob_rng = derive_rng(0xb10b, &["blobs", &family.category_id]);
    let blobs: Vec<(f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                blob_rng.random_range(0.15..0.85),
                blob_rng.random_range(0.15..0.85),
                blob_rng.random_range(0.08..0.2),
            )
        })
        .collect();
    let blob_amp: Vec<f64> = (0..5).map(|_| rng.random_range(0.8..1.2)).collect();

    let (ct, st) = (family.orientation.cos(), family.orientation.sin());
    let tau = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let s = match family.pattern {
                PatternKind::Stripes => {
                    0.5 + 0.5 * (tau * freq * (u * ct + v * st) + phase).sin()
                }
                PatternKind::Checker => {
                    let a = (tau * freq * (u * ct + v * st) + phase).sin();
                    let b = (tau * freq * (-u * st + v * ct) + phase).sin();
                    if a * b > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                PatternKind::Rings => {
                    let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                    0.5 + 0.5 * (tau * freq * r + phase).sin()
                }
                PatternKind::Blobs => {
                    let mut acc: f64 = 0.0;
                    for (i, &(bx, by, bw)) in blobs.iter().enumerate() {
                        let d2 = (u - bx).powi(2) + (v - by).powi(2);
                        acc += blob_amp[i] * (-d2 / (2.0 * bw * bw)).exp();
                    }
                    acc.min(1.0)
                }
            };
            let s = s as f32;
            for c in 0..3 {
                let base = family.palette.0[c] * (1.0 - s) + family.palette.1[c] * s;
                data.push((base + color_jitter).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, data)
}

/// Category exemplars rendered fresh (never the stimulus images): the inputs
/// to category-average profiles and the exemplar generator bank.
pub fn render_category_exemplars(
    category_id: &str,
    count: usize,
    size: usize,
    master_seed: u64,
) -> Vec<Image> {
    let family = family_for(category_id, master_seed);
    (0..count)
        .map(|i| {
            let seed = crate::util::derive_seed(
                master_seed,
                &["exemplar", category_id, &i.to_string()],
            );
            render_exemplar(&family, size, seed)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset builder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub train_categories: usize,
    pub per_category: usize,
    pub test_categories: usize,
    pub train_trials: usize,
    pub test_trials: usize,
    pub resolution: usize,
    pub voxels_per_roi: usize,
    pub noise_sigma: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            train_categories: 30,
            per_category: 8,
            test_categories: 10,
            train_trials: 1,
            test_trials: 35,
            resolution: 64,
            voxels_per_roi: 1000,
            noise_sigma: 0.5,
        }
    }
}

impl ProtocolConfig {
    pub fn train_category_ids(&self) -> Vec<String> {
        (0..self.train_categories)
            .map(|i| format!("trn{i:03}"))
            .collect()
    }
    pub fn test_category_ids(&self) -> Vec<String> {
        (0..self.test_categories)
            .map(|i| format!("tst{i:03}"))
            .collect()
    }
}

pub fn voxel_key(split: Split, stimulus: &str, roi: &str) -> String {
    format!("voxels/{split}/{stimulus}/{roi}")
}

pub fn voxel_avg_key(split: Split, stimulus: &str, roi: &str) -> String {
    format!("voxels/{split}/{stimulus}/{roi}_avg")
}

pub fn stimulus_image_key(split: Split, stimulus: &str) -> String {
    format!("stimuli/{split}/{stimulus}")
}

/// Generates the full synthetic dataset into the run store: stimulus images,
/// per-trial voxel tensors and (for test) trial-averaged tensors, plus the
/// two dataset manifests.
pub fn build_synthetic_dataset(
    store: &mut RunStore,
    net: &FeatureNet,
    model: &EncodingModel,
    cfg: &ProtocolConfig,
    master_seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), SimError> {
    let train_cats = cfg.train_category_ids();
    let test_cats = cfg.test_category_ids();
    let overlap: Vec<String> = train_cats
        .iter()
        .filter(|c| test_cats.contains(c))
        .cloned()
        .collect();
    if !overlap.is_empty() {
        return Err(SimError::OverlappingCategories(overlap));
    }

    let mut train_entries = Vec::new();
    for (ci, cat) in train_cats.iter().enumerate() {
        let family = family_for(cat, master_seed);
        for k in 0..cfg.per_category {
            let stim_id = format!("trn_s{:04}", ci * cfg.per_category + k);
            let jitter = crate::util::derive_seed(master_seed, &["stimulus", &stim_id]);
            let img = render_exemplar(&family, cfg.resolution, jitter);
            store_stimulus(
                store, net, model, &img, Split::Train, &stim_id, cfg.train_trials, master_seed,
            )?;
            train_entries.push(ManifestEntry {
                stimulus_id: stim_id.clone(),
                category_id: cat.clone(),
                image_path: format!("images/{}.png", stimulus_image_key(Split::Train, &stim_id)),
                trial_count: cfg.train_trials,
            });
        }
    }
    let mut test_entries = Vec::new();
    for (ci, cat) in test_cats.iter().enumerate() {
        let family = family_for(cat, master_seed);
        let stim_id = format!("tst_s{ci:04}");
        let jitter = crate::util::derive_seed(master_seed, &["stimulus", &stim_id]);
        let img = render_exemplar(&family, cfg.resolution, jitter);
        store_stimulus(
            store, net, model, &img, Split::Test, &stim_id, cfg.test_trials, master_seed,
        )?;
        test_entries.push(ManifestEntry {
            stimulus_id: stim_id.clone(),
            category_id: cat.clone(),
            image_path: format!("images/{}.png", stimulus_image_key(Split::Test, &stim_id)),
            trial_count: cfg.test_trials,
        });
    }

    let train = DatasetManifest {
        split: Split::Train,
        entries: train_entries,
        category_count: cfg.train_categories,
        per_category_count: cfg.per_category,
    };
    let test = DatasetManifest {
        split: Split::Test,
        entries: test_entries,
        category_count: cfg.test_categories,
        per_category_count: 1,
    };
    train.validate()?;
    test.validate()?;
    DatasetManifest::validate_disjoint(&train, &test)?;
    store.put_bytes("dataset/train", "dataset/train.json", train.to_json().as_bytes())?;
    store.put_bytes("dataset/test", "dataset/test.json", test.to_json().as_bytes())?;
    store.save_manifest()?;
    Ok((train, test))
}

#[allow(clippy::too_many_arguments)]
fn store_stimulus(
    store: &mut RunStore,
    net: &FeatureNet,
    model: &EncodingModel,
    img: &Image,
    split: Split,
    stim_id: &str,
    trials: usize,
    master_seed: u64,
) -> Result<(), SimError> {
    store.put_image(&stimulus_image_key(split, stim_id), img)?;
    let features = net.forward_features(img)?;
    let records = simulate_voxels(model, &features, stim_id, trials, master_seed);
    for roi in &model.rois {
        let roi_records: Vec<&VoxelRecord> = records
            .iter()
            .filter(|r| r.roi_name == roi.spec.name)
            .collect();
        let v = roi.spec.voxel_count;
        let mut flat = Vec::with_capacity(trials * v);
        for rec in &roi_records {
            flat.extend(rec.response.iter().map(|&x| x as f32));
        }
        let t = TensorRecord::new(vec![trials, v], flat, voxel_key(split, stim_id, &roi.spec.name))
            .map_err(SimError::Data)?
            .with_lineage(format!("master={master_seed} stim={stim_id} roi={}", roi.spec.name));
        store.put_tensor(&voxel_key(split, stim_id, &roi.spec.name), &t)?;
        if split == Split::Test {
            // Trial-averaged record, stored alongside the per-trial tensors.
            let mut avg = vec![0.0f64; v];
            for rec in &roi_records {
                for (a, r) in avg.iter_mut().zip(&rec.response) {
                    *a += r;
                }
            }
            let avg32: Vec<f32> = avg.iter().map(|a| (*a / trials as f64) as f32).collect();
            let t = TensorRecord::new(
                vec![v],
                avg32,
                voxel_avg_key(split, stim_id, &roi.spec.name),
            )
            .map_err(SimError::Data)?
            .with_lineage(format!(
                "master={master_seed} stim={stim_id} roi={} avg-of-{trials}",
                roi.spec.name
            ));
            store.put_tensor(&voxel_avg_key(split, stim_id, &roi.spec.name), &t)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurenet::ConvNetSpec;

    fn test_net() -> FeatureNet {
        FeatureNet::init_deterministic(ConvNetSpec::default_for(32, 1)).unwrap()
    }

    fn feature_dims(net: &FeatureNet) -> Vec<usize> {
        (0..net.spec.layers.len()).map(|l| net.layer_dim(l)).collect()
    }

    #[test]
    fn default_protocol_has_all_seven_rois() {
        let rois = default_rois(100, 0.5, 3);
        let names: Vec<&str> = rois.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ROI_NAMES.to_vec());
        // Early ROIs shallow, category ROIs deep.
        assert_eq!(rois[0].source_layer, 0);
        assert!(rois[4].source_layer > rois[0].source_layer);
    }

    #[test]
    fn encoding_rows_are_unit_norm_and_seeded() {
        let net = test_net();
        let rois = default_rois(50, 0.5, net.deepest_layer());
        let dims = feature_dims(&net);
        let m1 = build_encoding_model(&rois, &dims, 7).unwrap();
        let m2 = build_encoding_model(&rois, &dims, 7).unwrap();
        for (a, b) in m1.rois.iter().zip(&m2.rois) {
            assert_eq!(a.weights, b.weights);
            for row in a.weights.rows() {
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
        // Shapes: voxel_count x flattened feature dim.
        assert_eq!(m1.rois[0].weights.shape(), &[50, dims[0]]);
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let net = test_net();
        let mut rois = default_rois(10, 0.5, net.deepest_layer());
        rois[0].source_layer = 99;
        assert!(matches!(
            build_encoding_model(&rois, &feature_dims(&net), 1),
            Err(SimError::UnknownLayer { .. })
        ));
    }

    #[test]
    fn zero_noise_trials_are_identical_and_deterministic() {
        let net = test_net();
        let rois = default_rois(20, 0.0, net.deepest_layer());
        let model = build_encoding_model(&rois, &feature_dims(&net), 3).unwrap();
        let img = render_exemplar(&family_for("c0", 9), 32, 1);
        let f = net.forward_features(&img).unwrap();
        let recs = simulate_voxels(&model, &f, "s0", 3, 11);
        let v1: Vec<&VoxelRecord> = recs.iter().filter(|r| r.roi_name == "V1").collect();
        assert_eq!(v1.len(), 3);
        assert_eq!(v1[0].response, v1[1].response);
        assert_eq!(v1[0].response, v1[2].response);
        // Identical images give identical noiseless responses.
        let recs2 = simulate_voxels(&model, &f, "s1", 1, 12);
        let v1b: Vec<&VoxelRecord> = recs2.iter().filter(|r| r.roi_name == "V1").collect();
        assert_eq!(v1[0].response, v1b[0].response);
    }

    #[test]
    fn trial_averaging_shrinks_noise_like_sqrt_n() {
        // Sample std of the 35-trial mean should be sigma/sqrt(35) within
        // 10%, estimated over many stimuli and voxels.
        let net = test_net();
        let sigma = 0.5;
        let rois = vec![RoiSpec {
            name: "V1".into(),
            voxel_count: 50,
            source_layer: 0,
            noise_sigma: sigma,
        }];
        let model = build_encoding_model(&rois, &feature_dims(&net), 5).unwrap();
        let img = render_exemplar(&family_for("c0", 9), 32, 2);
        let f = net.forward_features(&img).unwrap();
        let base = model.rois[0].weights.dot(
            &ndarray::Array1::from_vec(f.flattened(0).to_vec()),
        ) + &model.rois[0].bias;
        // 1000 independent averaging experiments (one per pseudo-stimulus).
        let mut devs = Vec::new();
        for s in 0..1000 {
            let recs = simulate_voxels(&model, &f, &format!("s{s}"), 35, 100 + s as u64);
            let mut mean = vec![0.0f64; 50];
            for r in &recs {
                for (m, x) in mean.iter_mut().zip(&r.response) {
                    *m += x / 35.0;
                }
            }
            // Use voxel 0's deviation from its noiseless value.
            devs.push(mean[0] - base[0]);
        }
        let n = devs.len() as f64;
        let var = devs.iter().map(|d| d * d).sum::<f64>() / n;
        let want = sigma / (35.0f64).sqrt();
        let got = var.sqrt();
        assert!(
            (got - want).abs() / want < 0.1,
            "std of mean {got} vs {want}"
        );
    }

    #[test]
    fn exemplars_are_deterministic_and_families_differ() {
        let fam_a = family_for("cat-a", 17);
        let fam_b = family_for("cat-b", 17);
        let a1 = render_exemplar(&fam_a, 32, 5);
        let a2 = render_exemplar(&fam_a, 32, 5);
        assert_eq!(a1, a2);
        let b1 = render_exemplar(&fam_b, 32, 5);
        let l2: f32 = a1
            .data
            .iter()
            .zip(&b1.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(l2 > 1.0, "families should be visually distinct, l2={l2}");
    }

    #[test]
    fn dataset_shapes_match_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let net = test_net();
        let cfg = ProtocolConfig {
            train_categories: 3,
            per_category: 2,
            test_categories: 2,
            train_trials: 1,
            test_trials: 4,
            resolution: 32,
            voxels_per_roi: 10,
            noise_sigma: 0.1,
        };
        let rois = default_rois(cfg.voxels_per_roi, cfg.noise_sigma, net.deepest_layer());
        let dims: Vec<usize> = (0..4).map(|l| net.layer_dim(l)).collect();
        let model = build_encoding_model(&rois, &dims, 21).unwrap();
        let mut store = RunStore::create(dir.path(), 21).unwrap();
        let (train, test) =
            build_synthetic_dataset(&mut store, &net, &model, &cfg, 21).unwrap();
        assert_eq!(train.entries.len(), 6);
        assert_eq!(test.entries.len(), 2);
        // Paper-shape arithmetic: 150 x 8 = 1200 and 50 test entries.
        let full = ProtocolConfig {
            train_categories: 150,
            per_category: 8,
            test_categories: 50,
            ..cfg.clone()
        };
        assert_eq!(full.train_categories * full.per_category, 1200);
        assert_eq!(full.test_category_ids().len(), 50);

        // Stored 4-trial tensor averages to the stored averaged record.
        let stim = &test.entries[0].stimulus_id;
        let per_trial = store.get_tensor(&voxel_key(Split::Test, stim, "V1")).unwrap();
        let avg = store.get_tensor(&voxel_avg_key(Split::Test, stim, "V1")).unwrap();
        assert_eq!(per_trial.shape, vec![4, 10]);
        for j in 0..10 {
            let m: f64 = (0..4)
                .map(|t| per_trial.data[t * 10 + j] as f64)
                .sum::<f64>()
                / 4.0;
            assert!((m - avg.data[j] as f64).abs() < 1e-6);
        }
        store.verify().unwrap();
    }
}
