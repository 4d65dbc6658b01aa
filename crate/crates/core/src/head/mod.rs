//! The activity-specific feature head.
//!
//! Backbone features `F_f [C × M]` are summarised into `K` observations,
//! each through its own grouped projections and single-query attention over
//! the `M` spatio-temporal positions. Each activity then forms its own
//! descriptor as an attention-weighted mix of observations (`F_A`). A
//! correlation map, the sum of a static co-occurrence mask and an
//! input-dependent attention, mixes those descriptors (`F_AC`), and two
//! sigmoid heads score activities from `F_A` and `F_AC` separately.

mod checkpoint;
mod forward;
mod maps;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    activity_features_graph, compute_activity_features, compute_correlation, compute_mask, compute_observations,
    correlation_graph, forward_graph, head_forward, head_trace, observations_graph, predict, predict_graph,
    ActivityFeatureSet, CorrelationMap, HeadGraph, HeadTrace, ObservationSet, Predictions,
};
pub use maps::{export_activity_maps, ActivityMap, RegionBox};
pub use params::{count_parameters, estimate_flops, BoundHead, HeadParams, ParamCount, ParamKind};

use crate::error::{Error, Result};
use crate::nn::check_grouping;
use crate::tensor::{Scalar, Tensor};

/// Shape and structure of the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    /// Backbone channels `C`.
    pub channels: usize,
    /// Observation / activity feature channels `C'`.
    pub feature_channels: usize,
    /// Number of observations `K`.
    pub observations: usize,
    /// Number of activities `A`.
    pub activities: usize,
    /// Channel groups `n` of every grouped projection.
    pub groups: usize,
    pub dropout_rate: f64,
    /// Correlation stage and its `F_OC` head.
    pub correlation: bool,
    /// Per-activity attention over observations. When off, one shared
    /// attention row is broadcast to every activity.
    pub activity_specific: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::published(157)
    }
}

impl HeadConfig {
    /// Charades-scale head: C=2048, C'=128, K=64, n=32.
    pub fn published(activities: usize) -> Self {
        HeadConfig {
            channels: 2048,
            feature_channels: 128,
            observations: 64,
            activities,
            groups: 32,
            dropout_rate: 0.5,
            correlation: true,
            activity_specific: true,
        }
    }

    /// Desk-scale head used with the synthetic harness.
    pub fn desk(activities: usize) -> Self {
        HeadConfig {
            channels: 64,
            feature_channels: 32,
            observations: 8,
            activities,
            groups: 4,
            dropout_rate: 0.5,
            correlation: true,
            activity_specific: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("feature_channels", self.feature_channels),
            ("observations", self.observations),
            ("activities", self.activities),
            ("groups", self.groups),
        ] {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        check_grouping(self.channels, self.feature_channels, self.groups)
            .map_err(|e| Error::Spec(e.to_string()))?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Spec(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Backbone output `[C × M]` with `M = T·W·H`, positions flattened t-major,
/// then w, then h.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<T: Scalar = f32> {
    data: Tensor<T>,
    dims: (usize, usize, usize),
}

impl<T: Scalar> FeatureVolume<T> {
    pub fn new(data: Tensor<T>, dims: (usize, usize, usize)) -> Result<Self> {
        let (t, w, h) = dims;
        if data.rank() != 2 || data.shape()[1] != t * w * h {
            return Err(Error::dim(
                "FeatureVolume::new",
                format!("data {:?} does not match dims {dims:?}", data.shape()),
            ));
        }
        Ok(FeatureVolume { data, dims })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> FeatureVolume<U> {
        FeatureVolume {
            data: self.data.cast(),
            dims: self.dims,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(HeadConfig::published(157).validate().is_ok());
        assert!(HeadConfig::desk(6).validate().is_ok());
        let mut c = HeadConfig::desk(6);
        c.groups = 5;
        assert!(c.validate().is_err());
        c = HeadConfig::desk(6);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        c = HeadConfig::desk(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn feature_volume_dims_must_match() {
        let t = Tensor::<f32>::zeros(&[4, 12]).unwrap();
        assert!(FeatureVolume::new(t.clone(), (2, 3, 2)).is_ok());
        assert!(FeatureVolume::new(t, (2, 3, 3)).is_err());
    }
}
