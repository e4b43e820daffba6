//! Central-difference check of the analytic gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad, trace_query, ModelParams, TrainConfig};
use crate::features::FeatureStore;
use crate::sampler::TrainingSample;

/// Denominator floor of the relative error, so near-zero gradients compare on
/// absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates where a ReLU changed sign within the step.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn mean_loss(params: &ModelParams, store: &FeatureStore, batch: &[TrainingSample], cfg: &TrainConfig) -> f64 {
    batch.iter().map(|s| super::loss(params, store, s, cfg)).sum::<f64>() / batch.len() as f64
}

fn relu_signs(params: &ModelParams, store: &FeatureStore, batch: &[TrainingSample], cfg: &TrainConfig) -> Vec<bool> {
    batch
        .iter()
        .flat_map(|s| trace_query(params, store, &s.to_query(), cfg).relu_signs)
        .collect()
}

/// Up to `per_tensor` coordinates of every tensor, preferring those with a
/// non-zero analytic gradient.
pub fn pick_coords(params: &ModelParams, analytic: &[f64], per_tensor: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (_, t) in params.layout.named() {
        let (mut live, mut dead): (Vec<usize>, Vec<usize>) = t.range().partition(|&i| analytic[i] != 0.0);
        live.shuffle(&mut rng);
        dead.shuffle(&mut rng);
        coords.extend(live.into_iter().chain(dead).take(per_tensor));
    }
    coords
}

/// Compares the analytic gradient of the mean batch loss with central
/// differences at the given coordinates.
pub fn check(params: &ModelParams, store: &FeatureStore, batch: &[TrainingSample], cfg: &TrainConfig, coords: &[usize], h: f64) -> GradCheckReport {
    let (_, analytic) = grad(params, store, batch, cfg);
    let base_signs = relu_signs(params, store, batch, cfg);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = params.clone();
    for &i in coords {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = mean_loss(&probe, store, batch, cfg);
        let plus_signs = relu_signs(&probe, store, batch, cfg);
        probe.data[i] = orig - h;
        let minus = mean_loss(&probe, store, batch, cfg);
        let minus_signs = relu_signs(&probe, store, batch, cfg);
        probe.data[i] = orig;
        if plus_signs != base_signs || minus_signs != base_signs {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(i);
        }
    }
    report
}
