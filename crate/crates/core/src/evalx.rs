//! Quantitative evaluation: RMSE, SSIM (global and 7x7 windowed),
//! percent-change tables and the seeded n-way identification task.

use crate::dataio::Image;
use crate::util::{derive_rng, pearson};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("percent change undefined: 'before' value is zero")]
    UndefinedChange,
    #[error("candidate pool too small: need {need} distractors, pool has {have}")]
    InsufficientPool { need: usize, have: usize },
    #[error("identification undefined: probe has zero variance")]
    ZeroVarianceProbe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimMode {
    Global,
    Windowed,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub mode: SsimMode,
    pub window: usize,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            mode: SsimMode::Global,
            window: 7,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }
    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
    pub fn windowed() -> Self {
        Self {
            mode: SsimMode::Windowed,
            ..Self::default()
        }
    }
}

fn check_dims(x: &Image, y: &Image) -> Result<(), EvalError> {
    if x.height != y.height || x.width != y.width {
        return Err(EvalError::DimensionMismatch(
            x.height, x.width, y.height, y.width,
        ));
    }
    Ok(())
}

/// Root mean square error, computed per channel and averaged.
pub fn rmse(x: &Image, y: &Image) -> Result<f64, EvalError> {
    check_dims(x, y)?;
    let n = (x.height * x.width) as f64;
    let mut acc = 0.0;
    for c in 0..Image::CHANNELS {
        let mut ss = 0.0;
        for (a, b) in x.channel_f64(c).iter().zip(y.channel_f64(c).iter()) {
            let d = a - b;
            ss += d * d;
        }
        acc += (ss / n).sqrt();
    }
    Ok(acc / Image::CHANNELS as f64)
}

/// SSIM between two planes given their sample moments.
fn ssim_stat(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, p: &SsimParams) -> f64 {
    let c1 = p.c1();
    let c2 = p.c2();
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn plane_ssim_global(a: &[f64], b: &[f64], p: &SsimParams) -> f64 {
    let n = a.len() as f64;
    let mx = a.iter().sum::<f64>() / n;
    let my = b.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (&u, &v) in a.iter().zip(b) {
        vx += (u - mx) * (u - mx);
        vy += (v - my) * (v - my);
        cov += (u - mx) * (v - my);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    ssim_stat(mx, my, vx, vy, cov, p)
}

/// Structural similarity in `[-1, 1]`, per channel then averaged.
///
/// Global mode is one statistic over the whole plane; windowed mode averages
/// the statistic over every fully interior `window x window` patch (uniform
/// window). Images smaller than the window fall back to global.
pub fn ssim(x: &Image, y: &Image, params: &SsimParams) -> Result<f64, EvalError> {
    check_dims(x, y)?;
    let mut acc = 0.0;
    for c in 0..Image::CHANNELS {
        let a = x.channel_f64(c);
        let b = y.channel_f64(c);
        let v = match params.mode {
            SsimMode::Global => plane_ssim_global(&a, &b, params),
            SsimMode::Windowed => {
                let w = params.window;
                if x.height < w || x.width < w {
                    plane_ssim_global(&a, &b, params)
                } else {
                    let mut total = 0.0;
                    let mut count = 0usize;
                    for wy in 0..=(x.height - w) {
                        for wx in 0..=(x.width - w) {
                            let mut pa = Vec::with_capacity(w * w);
                            let mut pb = Vec::with_capacity(w * w);
                            for dy in 0..w {
                                for dx in 0..w {
                                    let i = (wy + dy) * x.width + (wx + dx);
                                    pa.push(a[i]);
                                    pb.push(b[i]);
                                }
                            }
                            total += plane_ssim_global(&pa, &pb, params);
                            count += 1;
                        }
                    }
                    total / count as f64
                }
            }
        };
        acc += v;
    }
    Ok(acc / Image::CHANNELS as f64)
}

/// Signed percent change `100 * (after - before) / |before|`.
pub fn percent_change(before: f64, after: f64) -> Result<f64, EvalError> {
    if before == 0.0 {
        return Err(EvalError::UndefinedChange);
    }
    Ok(100.0 * (after - before) / before.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Pearson,
    Ssim,
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreKind::Pearson => write!(f, "pearson"),
            ScoreKind::Ssim => write!(f, "ssim"),
        }
    }
}

fn image_score(kind: ScoreKind, probe: &Image, cand: &Image) -> Result<f64, EvalError> {
    match kind {
        ScoreKind::Pearson => {
            let a: Vec<f64> = probe.data.iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = cand.data.iter().map(|&v| v as f64).collect();
            // Zero-variance candidates score as no correlation.
            Ok(pearson(&a, &b).unwrap_or(0.0))
        }
        ScoreKind::Ssim => ssim(probe, cand, &SsimParams::default()),
    }
}

/// n-way forced-choice identification: per repeat, the truth plus `n-1`
/// seeded distractors compete for the max similarity to the probe. Ties go
/// against the truth. Returns the fraction of repeats won.
pub fn nway_identification(
    probe: &Image,
    truth: &Image,
    pool: &[Image],
    n: usize,
    repeats: usize,
    score: ScoreKind,
    seed: u64,
) -> Result<f64, EvalError> {
    assert!(n >= 2, "n-way needs n >= 2");
    if pool.len() < n - 1 {
        return Err(EvalError::InsufficientPool {
            need: n - 1,
            have: pool.len(),
        });
    }
    let probe_var = {
        let v: Vec<f64> = probe.data.iter().map(|&x| x as f64).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    if score == ScoreKind::Pearson && probe_var <= 0.0 {
        return Err(EvalError::ZeroVarianceProbe);
    }
    let truth_score = image_score(score, probe, truth)?;
    let mut wins = 0usize;
    for rep in 0..repeats {
        let mut rng = derive_rng(seed, &["nway", &rep.to_string()]);
        let picks = sample(&mut rng, pool.len(), n - 1);
        let mut best_distractor = f64::NEG_INFINITY;
        for i in picks {
            let s = image_score(score, probe, &pool[i])?;
            if s > best_distractor {
                best_distractor = s;
            }
        }
        // Truth loses ties.
        if truth_score > best_distractor {
            wins += 1;
        }
    }
    Ok(wins as f64 / repeats as f64)
}

/// One per-stimulus line of the evaluation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub stimulus_id: String,
    pub rmse_recon: f64,
    pub rmse_enhanced: f64,
    pub ssim_recon: f64,
    pub ssim_enhanced: f64,
    pub pct_change_rmse: f64,
    pub pct_change_ssim: f64,
    pub decoded_category: String,
    pub category_correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// The "Avg N" aggregate: arithmetic mean of every numeric column.
    pub fn aggregate(&self) -> EvalRow {
        let n = self.rows.len().max(1) as f64;
        let mean = |f: fn(&EvalRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        EvalRow {
            stimulus_id: format!("Avg {}", self.rows.len()),
            rmse_recon: mean(|r| r.rmse_recon),
            rmse_enhanced: mean(|r| r.rmse_enhanced),
            ssim_recon: mean(|r| r.ssim_recon),
            ssim_enhanced: mean(|r| r.ssim_enhanced),
            pct_change_rmse: mean(|r| r.pct_change_rmse),
            pct_change_ssim: mean(|r| r.pct_change_ssim),
            decoded_category: String::new(),
            category_correct: self.rows.iter().all(|r| r.category_correct),
        }
    }

    /// One row per stimulus plus the aggregate row, as in the result tables.
    pub fn to_csv(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record([
            "stimulus_id",
            "rmse_recon",
            "rmse_enhanced",
            "ssim_recon",
            "ssim_enhanced",
            "pct_change_rmse",
            "pct_change_ssim",
            "decoded_category",
            "category_correct",
        ])
        .unwrap();
        let emit = |wtr: &mut csv::Writer<Vec<u8>>, r: &EvalRow| {
            wtr.write_record([
                r.stimulus_id.clone(),
                format!("{:.12}", r.rmse_recon),
                format!("{:.12}", r.rmse_enhanced),
                format!("{:.12}", r.ssim_recon),
                format!("{:.12}", r.ssim_enhanced),
                format!("{:.12}", r.pct_change_rmse),
                format!("{:.12}", r.pct_change_ssim),
                r.decoded_category.clone(),
                r.category_correct.to_string(),
            ])
            .unwrap();
        };
        for r in &self.rows {
            emit(&mut wtr, r);
        }
        emit(&mut wtr, &self.aggregate());
        String::from_utf8(wtr.into_inner().unwrap()).unwrap()
    }
}

/// Accuracy table of the n-way suite: one row per (n, score) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NwayCell {
    pub n: usize,
    pub score: ScoreKind,
    pub stimulus_id: String,
    pub probe_kind: String,
    pub accuracy: f64,
}

pub fn nway_table_csv(cells: &[NwayCell]) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["n", "score", "stimulus_id", "probe_kind", "accuracy"])
        .unwrap();
    for c in cells {
        wtr.write_record([
            c.n.to_string(),
            c.score.to_string(),
            c.stimulus_id.clone(),
            c.probe_kind.clone(),
            format!("{:.6}", c.accuracy),
        ])
        .unwrap();
    }
    String::from_utf8(wtr.into_inner().unwrap()).unwrap()
}
