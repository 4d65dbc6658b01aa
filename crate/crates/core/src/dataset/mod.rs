//! Synthetic multi-label videos with known per-activity regions, clip
//! sampling, the frozen backbone stub and the on-disk formats.
//!
//! Every activity owns a unit-norm channel signature; signatures are
//! mutually orthogonal. A video is unit Gaussian noise with each positive
//! activity's signature added inside its truth region. Regions of one video
//! occupy distinct spatial quadrants, or distinct (quadrant, temporal half)
//! slots when a video holds more than four activities.

mod asft;
mod backbone;
mod manifest;

pub use asft::{
    decode_any, decode_tensor, encode_tensor, read_any_tensor, read_tensor, write_tensor, AnyTensor, TENSOR_MAGIC,
};
pub use backbone::BackboneStub;
pub use manifest::{load_dataset, save_dataset, Manifest, ManifestEntry, MANIFEST_FILE};

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Frames per sampled clip.
pub const CLIP_FRAMES: usize = 32;

const MAX_SLOTS: usize = 8;

/// `P(target | source) = probability`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcedPair {
    pub source: usize,
    pub target: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_videos: usize,
    pub activities: usize,
    pub t_full: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Inclusive range for the number of base activities drawn per video.
    /// Forced targets are added on top.
    pub activities_per_video: (usize, usize),
    pub forced_pairs: Vec<ForcedPair>,
    /// Unordered pairs that never co-occur.
    pub forbidden_pairs: Vec<(usize, usize)>,
    /// Pattern energy over background energy per voxel inside a region.
    pub snr: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_videos: 200,
            activities: 6,
            t_full: 256,
            width: 8,
            height: 8,
            channels: 8,
            activities_per_video: (1, 3),
            forced_pairs: vec![ForcedPair {
                source: 0,
                target: 1,
                probability: 0.8,
            }],
            forbidden_pairs: vec![(2, 3)],
            snr: 4.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let spec = |m: String| Err(Error::Spec(m));
        for (name, v) in [
            ("num_videos", self.num_videos),
            ("activities", self.activities),
            ("t_full", self.t_full),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return spec(format!("{name} must be positive"));
            }
        }
        if self.width < 2 || self.height < 2 {
            return spec(format!("frames must be at least 2×2, got {}×{}", self.width, self.height));
        }
        if self.activities > self.channels {
            return spec(format!(
                "{} activities need {} orthogonal signatures but frames have only {} channels",
                self.activities, self.activities, self.channels
            ));
        }
        let (lo, hi) = self.activities_per_video;
        if lo == 0 || lo > hi || hi > self.activities {
            return spec(format!("activities_per_video {lo}..={hi} invalid for {} activities", self.activities));
        }
        if !(self.snr.is_finite() && self.snr > 0.0) {
            return spec(format!("snr must be positive, got {}", self.snr));
        }
        let check_pair = |kind: &str, j: usize, k: usize| {
            if j >= self.activities || k >= self.activities || j == k {
                Err(Error::Spec(format!("{kind} pair ({j},{k}) is invalid for {} activities", self.activities)))
            } else {
                Ok(())
            }
        };
        for f in &self.forced_pairs {
            check_pair("forced", f.source, f.target)?;
            if !(0.0..=1.0).contains(&f.probability) {
                return spec(format!(
                    "forced pair ({},{}) probability {} outside [0, 1]",
                    f.source, f.target, f.probability
                ));
            }
        }
        for &(j, k) in &self.forbidden_pairs {
            check_pair("forbidden", j, k)?;
            if let Some(f) = self.forced_pairs.iter().find(|f| same_pair((f.source, f.target), (j, k))) {
                return spec(format!(
                    "forced pair ({},{}) conflicts with forbidden pair ({j},{k})",
                    f.source, f.target
                ));
            }
        }
        let targets = self.forced_targets();
        if targets.len() == self.activities {
            return spec("every activity is a forced target; none can be drawn as a base activity".into());
        }
        if hi + targets.len() > MAX_SLOTS {
            return spec(format!(
                "up to {} activities per video exceed the {MAX_SLOTS} region slots",
                hi + targets.len()
            ));
        }
        if hi + targets.len() > 4 && self.t_full < 2 {
            return spec("more than four activities per video need t_full ≥ 2".into());
        }
        Ok(())
    }

    fn forced_targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.forced_pairs.iter().map(|f| f.target).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    fn forbidden(&self, j: usize, k: usize) -> bool {
        self.forbidden_pairs.iter().any(|&p| same_pair(p, (j, k)))
    }

    /// Per-element amplitude along a unit signature giving the configured SNR
    /// against unit-variance noise in every channel.
    pub fn amplitude(&self) -> f64 {
        (self.snr * self.channels as f64).sqrt()
    }
}

fn same_pair(a: (usize, usize), b: (usize, usize)) -> bool {
    a == b || a == (b.1, b.0)
}

/// Half-open box in video coordinates where an activity's signature was painted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthRegion {
    pub activity: usize,
    pub t: Range<usize>,
    pub w: Range<usize>,
    pub h: Range<usize>,
}

impl TruthRegion {
    pub fn volume(&self) -> usize {
        self.t.len() * self.w.len() * self.h.len()
    }

    pub fn contains(&self, t: usize, w: usize, h: usize) -> bool {
        self.t.contains(&t) && self.w.contains(&w) && self.h.contains(&h)
    }

    /// True when the boxes share no voxel.
    pub fn disjoint(&self, other: &TruthRegion) -> bool {
        let apart = |a: &Range<usize>, b: &Range<usize>| a.end <= b.start || b.end <= a.start;
        apart(&self.t, &other.t) || apart(&self.w, &other.w) || apart(&self.h, &other.h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    /// `[channels × T_full × W × H]`.
    pub frames: Tensor<f32>,
    pub labels: Vec<u8>,
    /// One region per positive label, ordered by activity.
    pub regions: Vec<TruthRegion>,
}

impl SyntheticVideo {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(a, _)| a)
    }

    pub fn region(&self, activity: usize) -> Option<&TruthRegion> {
        self.regions.iter().find(|r| r.activity == activity)
    }
}

/// Orthonormal activity signatures, `[A × channels]`.
pub fn activity_signatures(spec: &DatasetSpec) -> Result<Tensor<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.activities);
    while rows.len() < spec.activities {
        let mut v: Vec<f64> = (0..spec.channels).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        // Retry on a numerically degenerate draw.
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::from_rows(&rows)
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn draw_labels(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let a = spec.activities;
    let targets = spec.forced_targets();
    let mut chosen = vec![false; a];
    let (lo, hi) = spec.activities_per_video;
    let want = rng.gen_range(lo..=hi);
    for _ in 0..want {
        let eligible: Vec<usize> = (0..a)
            .filter(|&k| !chosen[k] && !targets.contains(&k))
            .filter(|&k| (0..a).all(|j| !chosen[j] || !spec.forbidden(j, k)))
            .collect();
        let Some(&k) = eligible.choose(rng) else { break };
        chosen[k] = true;
    }
    for f in &spec.forced_pairs {
        if !chosen[f.source] || chosen[f.target] {
            continue;
        }
        let hit = rng.gen_bool(f.probability);
        let allowed = (0..a).all(|j| !chosen[j] || !spec.forbidden(j, f.target));
        if hit && allowed {
            chosen[f.target] = true;
        }
    }
    chosen.into_iter().map(u8::from).collect()
}

fn quadrant(spec: &DatasetSpec, q: usize) -> (Range<usize>, Range<usize>) {
    let (w2, h2) = (spec.width / 2, spec.height / 2);
    let w = if q.is_multiple_of(2) { 0..w2 } else { w2..spec.width };
    let h = if q / 2 == 0 { 0..h2 } else { h2..spec.height };
    (w, h)
}

fn draw_interval(rng: &mut ChaCha8Rng, span: Range<usize>) -> Range<usize> {
    let len = span.len();
    let d = rng.gen_range(len.div_ceil(2)..=len);
    let start = span.start + rng.gen_range(0..=len - d);
    start..start + d
}

fn draw_regions(spec: &DatasetSpec, labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<TruthRegion> {
    let active: Vec<usize> = (0..labels.len()).filter(|&a| labels[a] == 1).collect();
    let halves = active.len() > 4;
    let mut slots: Vec<usize> = (0..if halves { 8 } else { 4 }).collect();
    slots.shuffle(rng);
    active
        .into_iter()
        .zip(slots)
        .map(|(activity, slot)| {
            let (w, h) = quadrant(spec, slot % 4);
            let span = match (halves, slot / 4) {
                (false, _) => 0..spec.t_full,
                (true, 0) => 0..spec.t_full / 2,
                (true, _) => spec.t_full / 2..spec.t_full,
            };
            TruthRegion {
                activity,
                t: draw_interval(rng, span),
                w,
                h,
            }
        })
        .collect()
}

/// Builds video `index` of the dataset. Each index has its own RNG stream, so
/// any subset can be regenerated independently.
pub fn generate_video(spec: &DatasetSpec, signatures: &Tensor<f64>, index: usize) -> Result<SyntheticVideo> {
    let mut rng = video_rng(spec.seed, index);
    let labels = draw_labels(spec, &mut rng);
    let regions = draw_regions(spec, &labels, &mut rng);
    let (c, t, w, h) = (spec.channels, spec.t_full, spec.width, spec.height);
    let mut frames = Tensor::from_fn(&[c, t, w, h], |_| StandardNormal.sample(&mut rng))?;
    let amp = spec.amplitude();
    let data = frames.data_mut();
    for r in &regions {
        for (ch, &s) in signatures.row(r.activity).iter().enumerate() {
            let v = (amp * s) as f32;
            for ti in r.t.clone() {
                for wi in r.w.clone() {
                    let base = ((ch * t + ti) * w + wi) * h;
                    data[base + r.h.start..base + r.h.end].iter_mut().for_each(|x| *x += v);
                }
            }
        }
    }
    Ok(SyntheticVideo { frames, labels, regions })
}

/// Generates the whole dataset, videos in parallel. Output is independent of
/// the thread count.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SyntheticVideo>> {
    let signatures = activity_signatures(spec)?;
    (0..spec.num_videos)
        .into_par_iter()
        .map(|i| generate_video(spec, &signatures, i))
        .collect()
}

/// Label rows of a set of videos, for `compute_mask`.
pub fn label_rows(videos: &[SyntheticVideo]) -> Vec<Vec<u8>> {
    videos.iter().map(|v| v.labels.clone()).collect()
}

/// Frames `offset, offset + r, ..., offset + 31·r` of a `[C × T × W × H]` video.
pub fn sample_clip<T: Scalar>(video: &Tensor<T>, rate: usize, offset: usize) -> Result<Tensor<T>> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::dim("sample_clip", format!("expected [C × T × W × H] video, got {s:?}")));
    }
    if rate == 0 {
        return Err(Error::Contract("sampling rate must be positive".into()));
    }
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    // The clip owns the whole stride window `offset .. offset + 32·r`.
    let end = offset + CLIP_FRAMES * rate;
    if end > t {
        return Err(Error::Contract(format!(
            "clip at offset {offset} with rate {rate} spans to frame {end}, video has {t}"
        )));
    }
    let mut out = Vec::with_capacity(c * CLIP_FRAMES * plane);
    for ch in 0..c {
        for i in 0..CLIP_FRAMES {
            let start = (ch * t + offset + i * rate) * plane;
            out.extend_from_slice(&video.data()[start..start + plane]);
        }
    }
    Tensor::new(vec![c, CLIP_FRAMES, s[2], s[3]], out)
}

/// Largest valid clip offset at `rate`, or `None` when no clip fits.
pub fn max_offset(t_full: usize, rate: usize) -> Option<usize> {
    t_full.checked_sub(CLIP_FRAMES * rate)
}

/// Fraction of each backbone cell's source voxels that fall inside `region`,
/// for a clip sampled at `(rate, offset)`. Shape `[T' × W' × H']`.
pub fn region_coverage(
    stub: &BackboneStub,
    region: &TruthRegion,
    rate: usize,
    offset: usize,
    width: usize,
    height: usize,
) -> Result<Tensor<f64>> {
    let (tp, wp, hp) = stub.output_dims(CLIP_FRAMES, width, height)?;
    let (pt, ps) = (CLIP_FRAMES / tp, width / wp);
    let per_cell = (pt * ps * (height / hp)) as f64;
    Tensor::from_fn(&[tp, wp, hp], |idx| {
        let (ti, wi, hi) = (idx / (wp * hp), idx / hp % wp, idx % hp);
        let mut inside = 0usize;
        for dt in 0..pt {
            let frame = offset + (ti * pt + dt) * rate;
            for dw in 0..ps {
                for dh in 0..height / hp {
                    inside += usize::from(region.contains(frame, wi * ps + dw, hi * (height / hp) + dh));
                }
            }
        }
        inside as f64 / per_cell
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::compute_mask;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_videos: 40,
            t_full: 64,
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_dataset(&small(3)).unwrap();
        let b = generate_dataset(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(&small(4)).unwrap());
    }

    #[test]
    fn parallel_matches_serial() {
        let spec = small(5);
        let sig = activity_signatures(&spec).unwrap();
        let serial: Vec<_> = (0..spec.num_videos).map(|i| generate_video(&spec, &sig, i).unwrap()).collect();
        assert_eq!(serial, generate_dataset(&spec).unwrap());
    }

    #[test]
    fn forbidden_pairs_never_co_occur() {
        let spec = DatasetSpec {
            num_videos: 400,
            t_full: 32,
            activities_per_video: (2, 4),
            forbidden_pairs: vec![(2, 3), (4, 5), (0, 5)],
            ..DatasetSpec::default()
        };
        for v in generate_dataset(&spec).unwrap() {
            for &(j, k) in &spec.forbidden_pairs {
                assert!(!(v.labels[j] == 1 && v.labels[k] == 1));
            }
        }
    }

    #[test]
    fn conflicting_rules_rejected() {
        let mut spec = DatasetSpec::default();
        spec.forbidden_pairs.push((1, 0));
        match generate_dataset(&spec) {
            Err(Error::Spec(m)) => assert!(m.contains("forced pair (0,1)") && m.contains("forbidden pair (1,0)")),
            other => panic!("expected spec error, got {other:?}"),
        }
    }

    #[test]
    fn regions_are_sound_and_disjoint() {
        let spec = DatasetSpec {
            num_videos: 60,
            t_full: 32,
            activities_per_video: (1, 6),
            forced_pairs: vec![],
            forbidden_pairs: vec![],
            ..DatasetSpec::default()
        };
        for v in generate_dataset(&spec).unwrap() {
            let pos: Vec<usize> = v.positives().collect();
            assert_eq!(pos, v.regions.iter().map(|r| r.activity).collect::<Vec<_>>());
            for (i, r) in v.regions.iter().enumerate() {
                assert!(r.volume() > 0);
                assert!(r.t.end <= spec.t_full && r.w.end <= spec.width && r.h.end <= spec.height);
                for other in &v.regions[i + 1..] {
                    assert!(r.disjoint(other));
                }
            }
        }
    }

    #[test]
    fn forced_pair_frequency_within_three_sigma() {
        let p = 0.7;
        let spec = DatasetSpec {
            num_videos: 1500,
            t_full: 2,
            activities_per_video: (1, 2),
            forced_pairs: vec![ForcedPair {
                source: 2,
                target: 4,
                probability: p,
            }],
            forbidden_pairs: vec![(0, 1)],
            ..DatasetSpec::default()
        };
        let videos = generate_dataset(&spec).unwrap();
        let rows = label_rows(&videos);
        let n_src = rows.iter().filter(|r| r[2] == 1).count() as f64;
        let mask: Tensor<f64> = compute_mask(&rows, spec.activities).unwrap();
        let sigma = (p * (1.0 - p) / n_src).sqrt();
        assert!(n_src > 100.0);
        assert!((mask.get(&[2, 4]).unwrap() - p).abs() < 3.0 * sigma);
        // The target only ever appears through its source.
        assert_eq!(mask.get(&[4, 2]).unwrap(), 1.0);
    }

    #[test]
    fn painted_energy_matches_snr() {
        let spec = DatasetSpec {
            num_videos: 30,
            t_full: 64,
            ..DatasetSpec::default()
        };
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        let (t, w, h) = (spec.t_full, spec.width, spec.height);
        for v in generate_dataset(&spec).unwrap() {
            for ti in 0..t {
                for wi in 0..w {
                    for hi in 0..h {
                        let e: f64 = (0..spec.channels)
                            .map(|c| (v.frames.data()[((c * t + ti) * w + wi) * h + hi] as f64).powi(2))
                            .sum();
                        if v.regions.iter().any(|r| r.contains(ti, wi, hi)) {
                            inside += e;
                            n_in += 1;
                        } else {
                            outside += e;
                            n_out += 1;
                        }
                    }
                }
            }
        }
        let background = outside / n_out as f64;
        let pattern = inside / n_in as f64 - background;
        let ratio = pattern / background;
        assert!((ratio - spec.snr).abs() < 0.1 * spec.snr, "measured SNR {ratio}");
    }

    #[test]
    fn signatures_are_orthonormal() {
        let s = activity_signatures(&DatasetSpec::default()).unwrap();
        let g = s.matmul(&s.transpose().unwrap()).unwrap();
        assert!(g.max_abs_diff(&Tensor::eye(6).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn clip_indices() {
        let video = Tensor::<f32>::from_fn(&[2, 128, 1, 1], |i| i as f32).unwrap();
        let clip = sample_clip(&video, 4, 0).unwrap();
        assert_eq!(clip.shape(), &[2, 32, 1, 1]);
        let want: Vec<f32> = (0..2).flat_map(|c| (0..32).map(move |i| (c * 128 + 4 * i) as f32)).collect();
        assert_eq!(clip.data(), &want[..]);
        assert!(matches!(sample_clip(&video, 4, 1), Err(Error::Contract(_))));
        assert_eq!(max_offset(128, 4), Some(0));
        assert_eq!(max_offset(256, 8), Some(0));
        assert_eq!(max_offset(100, 4), None);
    }

    #[test]
    fn rate_one_on_clip_length_video_is_identity() {
        let video = Tensor::<f64>::from_fn(&[3, 32, 2, 2], |i| (i as f64).sin()).unwrap();
        assert_eq!(sample_clip(&video, 1, 0).unwrap(), video);
    }

    #[test]
    fn constant_in_time_video_gives_identical_clips() {
        let video = Tensor::<f32>::from_fn(&[2, 256, 2, 3], |i| (i % 6) as f32 + (i / (256 * 6)) as f32).unwrap();
        let reference = sample_clip(&video, 2, 0).unwrap();
        for (r, o) in [(2, 190), (4, 0), (4, 77), (8, 0)] {
            assert_eq!(sample_clip(&video, r, o).unwrap(), reference);
        }
    }

    #[test]
    fn coverage_of_full_region_is_one() {
        let stub = BackboneStub::standard(8, 4).unwrap();
        let full = TruthRegion {
            activity: 0,
            t: 0..256,
            w: 0..8,
            h: 0..8,
        };
        let cov = region_coverage(&stub, &full, 8, 0, 8, 8).unwrap();
        assert_eq!(cov.shape(), &[8, 4, 4]);
        assert!(cov.data().iter().all(|&v| v == 1.0));
        let quarter = TruthRegion {
            activity: 0,
            t: 0..128,
            w: 0..4,
            h: 4..8,
        };
        let cov = region_coverage(&stub, &quarter, 8, 0, 8, 8).unwrap();
        assert_eq!(cov.sum(), 8.0 * 16.0 / 8.0);
        assert_eq!(cov.get(&[0, 0, 2]).unwrap(), 1.0);
        assert_eq!(cov.get(&[0, 2, 2]).unwrap(), 0.0);
        assert_eq!(cov.get(&[4, 0, 2]).unwrap(), 0.0);
    }
}
