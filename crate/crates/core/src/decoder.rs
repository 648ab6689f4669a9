//! Feature decoding from voxel responses: correlation-based voxel selection
//! per ROI, then ridge or L1 (coordinate-descent) linear regression from the
//! selected, z-scored voxels to the target feature vector.

use crate::util::cholesky_solve;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("need at least 3 training samples, got {0}")]
    TooFewSamples(usize),
    #[error("singular system: lambda = 0 with rank-deficient design")]
    SingularSystem,
    #[error("coordinate descent failed to converge for feature unit {unit} after {sweeps} sweeps (max coef change {delta:.3e})")]
    NonConvergence {
        unit: usize,
        sweeps: usize,
        delta: f64,
    },
    #[error("voxel vector has {got} entries, model expects {want}")]
    VoxelDimMismatch { got: usize, want: usize },
}

/// Top-k voxels of one ROI, scored by max |Pearson r| against any feature
/// unit over the training samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoxelSelection {
    pub roi: String,
    /// Sorted ascending; ties in score break toward the lower index.
    pub selected: Vec<usize>,
    pub k: usize,
    pub scores: Vec<f64>,
}

pub fn select_voxels(
    roi: &str,
    train_voxels: &Array2<f64>,
    train_features: &Array2<f64>,
    k: usize,
) -> Result<VoxelSelection, DecoderError> {
    let n = train_voxels.nrows();
    if n < 3 {
        return Err(DecoderError::TooFewSamples(n));
    }
    assert_eq!(n, train_features.nrows());
    let p = train_voxels.ncols();
    let q = train_features.ncols();

    // Standardize both sides so the score reduces to a matrix product.
    let zv = standardize_columns(train_voxels);
    let zf = standardize_columns(train_features);
    // corr[j][u] = z_vox_j . z_feat_u / n ; constant columns are all-zero
    // after standardization and therefore score 0.
    let corr = zv.z.t().dot(&zf.z) / n as f64;
    let mut scores = vec![0.0f64; p];
    for j in 0..p {
        let mut best = 0.0f64;
        for u in 0..q {
            let r = corr[(j, u)].abs();
            if r > best {
                best = r;
            }
        }
        scores[j] = best;
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(k.min(p)).collect();
    selected.sort_unstable();
    Ok(VoxelSelection {
        roi: roi.to_string(),
        selected,
        k,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Ridge,
    Sparse,
}

/// Linear map from z-scored voxels to features.
#[derive(Debug, Clone)]
pub struct DecoderModel {
    pub backend: Backend,
    /// feature-dim x voxel-dim.
    pub weights: Array2<f64>,
    pub intercept: Array1<f64>,
    pub train_mean: Array1<f64>,
    pub train_std: Array1<f64>,
    pub lambda: f64,
}

struct Standardized {
    z: Array2<f64>,
    mean: Array1<f64>,
    std: Array1<f64>,
}

/// Column z-scoring with population std. Constant columns get std 1 so they
/// map to exactly zero rather than NaN.
fn standardize_columns(x: &Array2<f64>) -> Standardized {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut std = Array1::zeros(x.ncols());
    for j in 0..x.ncols() {
        let col = x.column(j);
        let m = mean[j];
        let v = col.iter().map(|&u| (u - m) * (u - m)).sum::<f64>() / n;
        std[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    let mut z = x.clone();
    for j in 0..x.ncols() {
        let m = mean[j];
        let s = std[j];
        z.column_mut(j).mapv_inplace(|u| (u - m) / s);
    }
    Standardized { z, mean, std }
}

/// Default ridge penalty: `1e-3 * trace(X^T X) / p` on the z-scored design.
pub fn default_ridge_lambda(z: &Array2<f64>) -> f64 {
    let p = z.ncols() as f64;
    let trace: f64 = z.iter().map(|v| v * v).sum();
    1e-3 * trace / p
}

/// Ridge regression `argmin ||X W^T - Y||^2 + lambda ||W||^2` on the
/// z-scored design. Solved in whichever of the primal/dual forms is smaller.
pub fn fit_ridge(
    x: &Array2<f64>,
    y: &Array2<f64>,
    lambda: f64,
) -> Result<DecoderModel, DecoderError> {
    assert!(lambda >= 0.0);
    assert_eq!(x.nrows(), y.nrows());
    let st = standardize_columns(x);
    let n = x.nrows();
    let p = x.ncols();
    let y_mean = y.mean_axis(Axis(0)).unwrap();
    let yc = y - &y_mean;

    let weights = if p <= n {
        // Primal: (X^T X + lambda I) W^T = X^T Y.
        let mut gram = st.z.t().dot(&st.z);
        for j in 0..p {
            gram[(j, j)] += lambda;
        }
        let xty = st.z.t().dot(&yc); // p x q
        let a: Vec<f64> = gram.iter().cloned().collect();
        let mut rhs: Vec<Vec<f64>> = (0..yc.ncols())
            .map(|u| xty.column(u).to_vec())
            .collect();
        cholesky_solve(a, p, &mut rhs).ok_or(DecoderError::SingularSystem)?;
        let mut w = Array2::zeros((yc.ncols(), p));
        for (u, r) in rhs.iter().enumerate() {
            for j in 0..p {
                w[(u, j)] = r[j];
            }
        }
        w
    } else {
        // Dual: W^T = X^T (X X^T + lambda I)^{-1} Y. Identical solution,
        // n x n system instead of p x p.
        if lambda == 0.0 {
            return Err(DecoderError::SingularSystem);
        }
        let mut k = st.z.dot(&st.z.t());
        for i in 0..n {
            k[(i, i)] += lambda;
        }
        let a: Vec<f64> = k.iter().cloned().collect();
        let mut rhs: Vec<Vec<f64>> = (0..yc.ncols())
            .map(|u| yc.column(u).to_vec())
            .collect();
        cholesky_solve(a, n, &mut rhs).ok_or(DecoderError::SingularSystem)?;
        let mut b = Array2::zeros((n, yc.ncols()));
        for (u, r) in rhs.iter().enumerate() {
            for i in 0..n {
                b[(i, u)] = r[i];
            }
        }
        st.z.t().dot(&b).t().to_owned()
    };

    let model = DecoderModel {
        backend: Backend::Ridge,
        weights,
        intercept: y_mean,
        train_mean: st.mean,
        train_std: st.std,
        lambda,
    };
    model.check_normal_equations(&st.z, &yc)?;
    Ok(model)
}

impl DecoderModel {
    /// Residual of the ridge normal equations, asserted on every fit:
    /// `X^T X W^T - X^T Y + lambda W^T = 0` to 1e-6 (relative).
    fn check_normal_equations(&self, z: &Array2<f64>, yc: &Array2<f64>) -> Result<(), DecoderError> {
        if self.backend != Backend::Ridge {
            return Ok(());
        }
        let fitted = z.dot(&self.weights.t()); // n x q
        let resid = z.t().dot(&(&fitted - yc)) + &(self.weights.t().to_owned() * self.lambda);
        let scale = yc.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
        let worst = resid.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        debug_assert!(
            worst <= 1e-6 * scale.max(1.0) * z.nrows() as f64,
            "normal-equation residual {worst:.3e} too large"
        );
        Ok(())
    }

    pub fn predict(&self, voxels: &[f64]) -> Result<Vec<f64>, DecoderError> {
        if voxels.len() != self.weights.ncols() {
            return Err(DecoderError::VoxelDimMismatch {
                got: voxels.len(),
                want: self.weights.ncols(),
            });
        }
        let z: Array1<f64> = (0..voxels.len())
            .map(|j| (voxels[j] - self.train_mean[j]) / self.train_std[j])
            .collect();
        let out = self.weights.dot(&z) + &self.intercept;
        Ok(out.to_vec())
    }

    pub fn predict_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>, DecoderError> {
        let mut out = Array2::zeros((x.nrows(), self.weights.nrows()));
        for (i, row) in x.rows().into_iter().enumerate() {
            let p = self.predict(row.as_slice().unwrap())?;
            for (u, v) in p.iter().enumerate() {
                out[(i, u)] = *v;
            }
        }
        Ok(out)
    }

    pub fn zero_weight_fraction(&self) -> f64 {
        let zeros = self.weights.iter().filter(|&&w| w == 0.0).count();
        zeros as f64 / self.weights.len() as f64
    }
}

/// Smallest lambda for which the lasso solution is identically zero on the
/// z-scored design: `max_j |x_j^T y| / n` over all feature units.
pub fn lasso_lambda_max(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let st = standardize_columns(x);
    let n = x.nrows() as f64;
    let y_mean = y.mean_axis(Axis(0)).unwrap();
    let yc = y - &y_mean;
    let xty = st.z.t().dot(&yc);
    xty.iter().map(|v| v.abs()).fold(0.0, f64::max) / n
}

/// L1-regularized least squares per feature unit, solved by cyclic
/// coordinate descent with soft thresholding on the z-scored design.
///
/// Objective per unit: `1/(2n) ||y - X w||^2 + lambda ||w||_1`, verified
/// non-increasing across sweeps. Converges when the max coefficient change
/// in a full sweep is below 1e-6, capped at 10,000 sweeps.
pub fn fit_sparse(
    x: &Array2<f64>,
    y: &Array2<f64>,
    lambda: f64,
) -> Result<DecoderModel, DecoderError> {
    assert!(lambda > 0.0, "sparse backend requires lambda > 0");
    assert_eq!(x.nrows(), y.nrows());
    let st = standardize_columns(x);
    let n = x.nrows();
    let nf = n as f64;
    let p = x.ncols();
    let y_mean = y.mean_axis(Axis(0)).unwrap();
    let yc = y - &y_mean;
    let q = yc.ncols();

    // Per-column squared norms / n (curvature of each coordinate).
    let col_sq: Vec<f64> = (0..p)
        .map(|j| st.z.column(j).iter().map(|v| v * v).sum::<f64>() / nf)
        .collect();

    let cols: Vec<Vec<f64>> = (0..p).map(|j| st.z.column(j).to_vec()).collect();
    let mut weights = Array2::zeros((q, p));

    for unit in 0..q {
        let target: Vec<f64> = yc.column(unit).to_vec();
        let mut w = vec![0.0f64; p];
        let mut resid = target.clone();
        let objective = |resid: &[f64], w: &[f64]| -> f64 {
            let ss: f64 = resid.iter().map(|r| r * r).sum();
            ss / (2.0 * nf) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
        };
        let mut prev_obj = objective(&resid, &w);
        let mut converged = false;
        let mut last_delta = f64::INFINITY;
        let max_sweeps = 10_000usize;
        // Active-set schedule: full sweeps establish the support, then
        // cheap sweeps over the nonzero set until stable.
        let mut sweep_count = 0usize;
        while sweep_count < max_sweeps {
            let full = sweep_count % 10 == 0 || last_delta == f64::INFINITY;
            let mut delta = 0.0f64;
            for j in 0..p {
                if !full && w[j] == 0.0 {
                    continue;
                }
                if col_sq[j] == 0.0 {
                    continue;
                }
                let col = &cols[j];
                let old = w[j];
                // rho = x_j^T (r + x_j w_j) / n
                let mut dot = 0.0;
                for i in 0..n {
                    dot += col[i] * resid[i];
                }
                let rho = dot / nf + col_sq[j] * old;
                let new = soft_threshold(rho, lambda) / col_sq[j];
                if new != old {
                    let diff = new - old;
                    for i in 0..n {
                        resid[i] -= diff * col[i];
                    }
                    let change = diff.abs();
                    if change > delta {
                        delta = change;
                    }
                    w[j] = new;
                }
            }
            sweep_count += 1;
            last_delta = delta;
            let obj = objective(&resid, &w);
            assert!(
                obj <= prev_obj + 1e-10 * prev_obj.abs().max(1.0),
                "lasso objective increased: {prev_obj} -> {obj}"
            );
            prev_obj = obj;
            if delta < 1e-6 && full {
                converged = true;
                break;
            }
            // A converged active-set sweep still needs one full sweep to
            // confirm no excluded coordinate wants back in.
            if delta < 1e-6 && !full {
                let mut full_delta = 0.0f64;
                for j in 0..p {
                    if col_sq[j] == 0.0 {
                        continue;
                    }
                    let col = &cols[j];
                    let old = w[j];
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += col[i] * resid[i];
                    }
                    let rho = dot / nf + col_sq[j] * old;
                    let new = soft_threshold(rho, lambda) / col_sq[j];
                    if new != old {
                        let diff = new - old;
                        for i in 0..n {
                            resid[i] -= diff * col[i];
                        }
                        full_delta = full_delta.max(diff.abs());
                        w[j] = new;
                    }
                }
                sweep_count += 1;
                let obj = objective(&resid, &w);
                assert!(obj <= prev_obj + 1e-10 * prev_obj.abs().max(1.0));
                prev_obj = obj;
                if full_delta < 1e-6 {
                    converged = true;
                    break;
                }
                last_delta = full_delta;
            }
        }
        if !converged {
            return Err(DecoderError::NonConvergence {
                unit,
                sweeps: sweep_count,
                delta: last_delta,
            });
        }
        for j in 0..p {
            weights[(unit, j)] = w[j];
        }
    }

    Ok(DecoderModel {
        backend: Backend::Sparse,
        weights,
        intercept: y_mean,
        train_mean: st.mean,
        train_std: st.std,
        lambda,
    })
}

#[inline]
fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Convenience wrapper used by tests and the identification protocol.
pub fn prediction_r2(model: &DecoderModel, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let pred = model.predict_batch(x).unwrap();
    crate::util::r_squared(
        pred.as_slice().unwrap(),
        y.to_owned().as_slice().unwrap(),
    )
}

/// Affine-invariance helper for the selection property test.
pub fn selection_scores_affine_invariant(
    roi: &str,
    voxels: &Array2<f64>,
    features: &Array2<f64>,
    scale: f64,
    shift: f64,
    k: usize,
) -> bool {
    let scaled = voxels.mapv(|v| v * scale + shift);
    let a = select_voxels(roi, voxels, features, k).unwrap();
    let b = select_voxels(roi, &scaled, features, k).unwrap();
    a.selected == b.selected
}
