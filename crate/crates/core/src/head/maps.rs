use super::forward::{activity_features_graph, observations_graph};
use super::{FeatureVolume, HeadParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Tight per-frame box around map cells at or above the threshold.
/// Bounds are inclusive cell indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionBox {
    pub activity: usize,
    pub t: usize,
    pub w_min: usize,
    pub h_min: usize,
    pub w_max: usize,
    pub h_max: usize,
}

/// Spatio-temporal focus of one activity over the backbone grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMap {
    pub activity: usize,
    /// `Σ_k attn_A(i, k) · attn_O(k, ·)` reshaped to `[T, W, H]`; sums to 1.
    pub raw: Tensor<f64>,
    /// `raw` min-max scaled to `[0, 1]`; a constant map scales to all zeros.
    pub normalized: Tensor<f64>,
    pub boxes: Vec<RegionBox>,
}

pub const BOX_THRESHOLD: f64 = 0.5;

/// Projects each requested activity's attention back onto the backbone grid.
pub fn export_activity_maps<T: Scalar>(
    features: &FeatureVolume<T>,
    params: &HeadParams<T>,
    activities: &[usize],
) -> Result<Vec<ActivityMap>> {
    let cfg = params.config();
    if let Some(&bad) = activities.iter().find(|&&a| a >= cfg.activities) {
        return Err(Error::Contract(format!(
            "activity {bad} out of range for {} activities",
            cfg.activities
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let x = tape.constant(features.data().clone())?;
    let (obs, attn_o) = observations_graph(&mut tape, &bound, x)?;
    let (_, attn_a) = activity_features_graph(&mut tape, &bound, obs, cfg.activities)?;
    let attn_o = tape.value(attn_o).cast::<f64>();
    let attn_a = tape.value(attn_a).cast::<f64>();
    let (t, w, h) = features.dims();

    activities
        .iter()
        .map(|&i| {
            let weights = Tensor::new(vec![1, cfg.observations], attn_a.row(i).to_vec())?;
            let raw = weights.matmul(&attn_o)?.reshape(&[t, w, h])?;
            let normalized = normalize(&raw);
            let boxes = region_boxes(&normalized, i, BOX_THRESHOLD);
            Ok(ActivityMap {
                activity: i,
                raw,
                normalized,
                boxes,
            })
        })
        .collect()
}

fn normalize(raw: &Tensor<f64>) -> Tensor<f64> {
    let lo = raw.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 1e-12 * hi.abs().max(f64::MIN_POSITIVE) {
        return raw.map(|_| 0.0);
    }
    raw.map(|v| (v - lo) / range)
}

/// One box per frame that has any cell `>= threshold`.
pub fn region_boxes(map: &Tensor<f64>, activity: usize, threshold: f64) -> Vec<RegionBox> {
    let (t, w, h) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = Vec::new();
    for ti in 0..t {
        let mut hit: Option<RegionBox> = None;
        for wi in 0..w {
            for hi in 0..h {
                if map.data()[(ti * w + wi) * h + hi] < threshold {
                    continue;
                }
                let b = hit.get_or_insert(RegionBox {
                    activity,
                    t: ti,
                    w_min: wi,
                    h_min: hi,
                    w_max: wi,
                    h_max: hi,
                });
                b.w_min = b.w_min.min(wi);
                b.h_min = b.h_min.min(hi);
                b.w_max = b.w_max.max(wi);
                b.h_max = b.h_max.max(hi);
            }
        }
        out.extend(hit);
    }
    out
}
