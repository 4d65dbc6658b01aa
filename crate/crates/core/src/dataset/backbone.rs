use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::head::FeatureVolume;
use crate::tensor::Tensor;

/// Frozen stand-in for a 3D CNN: average pooling over `pool_t × pool_s × pool_s`
/// cells followed by a fixed random channel projection plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneStub {
    in_channels: usize,
    out_channels: usize,
    pool_t: usize,
    pool_s: usize,
    /// `[out × in]`, entries `N(0, 1/in)`.
    weight: Tensor<f32>,
    /// `[out]`, entries `N(0, 1)`.
    bias: Tensor<f32>,
}

impl BackboneStub {
    pub const DEFAULT_POOL_T: usize = 4;
    pub const DEFAULT_POOL_S: usize = 2;
    pub const DEFAULT_SEED: u64 = 0x5eed_bac4;

    pub fn new(in_channels: usize, out_channels: usize, pool_t: usize, pool_s: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || pool_t == 0 || pool_s == 0 {
            return Err(Error::Spec("backbone sizes and pooling factors must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (in_channels as f64).sqrt().recip();
        let mut normal = |s: f64| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * s) as f32
        };
        let weight = Tensor::from_fn(&[out_channels, in_channels], |_| normal(scale))?;
        let bias = Tensor::from_fn(&[out_channels], |_| normal(1.0))?;
        Ok(BackboneStub {
            in_channels,
            out_channels,
            pool_t,
            pool_s,
            weight,
            bias,
        })
    }

    /// Stub with the default pooling and seed.
    pub fn standard(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(
            in_channels,
            out_channels,
            Self::DEFAULT_POOL_T,
            Self::DEFAULT_POOL_S,
            Self::DEFAULT_SEED,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn bias(&self) -> &Tensor<f32> {
        &self.bias
    }

    /// Grid `(T, W', H')` produced for a clip of `frames × width × height`.
    pub fn output_dims(&self, frames: usize, width: usize, height: usize) -> Result<(usize, usize, usize)> {
        if !frames.is_multiple_of(self.pool_t) || !width.is_multiple_of(self.pool_s) || !height.is_multiple_of(self.pool_s) {
            return Err(Error::dim(
                "backbone_forward",
                format!(
                    "clip {frames}×{width}×{height} is not divisible by pooling {}×{}×{}",
                    self.pool_t, self.pool_s, self.pool_s
                ),
            ));
        }
        Ok((frames / self.pool_t, width / self.pool_s, height / self.pool_s))
    }

    /// Maps a `[channels × T × W × H]` clip to `F_f [C × T'·W'·H']`.
    pub fn forward(&self, clip: &Tensor<f32>) -> Result<FeatureVolume<f32>> {
        let s = clip.shape();
        if s.len() != 4 || s[0] != self.in_channels {
            return Err(Error::dim(
                "backbone_forward",
                format!("expected [{} × T × W × H] clip, got {s:?}", self.in_channels),
            ));
        }
        let (t, w, h) = (s[1], s[2], s[3]);
        let (tp, wp, hp) = self.output_dims(t, w, h)?;
        let m = tp * wp * hp;
        let norm = 1.0 / (self.pool_t * self.pool_s * self.pool_s) as f32;

        let mut pooled = vec![0f32; self.in_channels * m];
        let data = clip.data();
        for c in 0..self.in_channels {
            for ti in 0..tp {
                for wi in 0..wp {
                    for hi in 0..hp {
                        let mut acc = 0f32;
                        for dt in 0..self.pool_t {
                            for dw in 0..self.pool_s {
                                let base = ((c * t + ti * self.pool_t + dt) * w + wi * self.pool_s + dw) * h;
                                for dh in 0..self.pool_s {
                                    acc += data[base + hi * self.pool_s + dh];
                                }
                            }
                        }
                        pooled[c * m + (ti * wp + wi) * hp + hi] = acc * norm;
                    }
                }
            }
        }

        let mut out = vec![0f32; self.out_channels * m];
        for (o, row) in out.chunks_exact_mut(m).enumerate() {
            let wrow = self.weight.row(o);
            row.fill(self.bias.data()[o]);
            for (c, &wc) in wrow.iter().enumerate() {
                for (dst, &p) in row.iter_mut().zip(&pooled[c * m..(c + 1) * m]) {
                    *dst += wc * p;
                }
            }
        }
        FeatureVolume::new(Tensor::new(vec![self.out_channels, m], out)?, (tp, wp, hp))
    }
}
