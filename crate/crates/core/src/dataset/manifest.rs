//! Plain-text dataset manifest.
//!
//! ```text
//! # asf-manifest v1
//! activities=6 t_full=256 width=8 height=8 channels=8
//! video_0000.asft 110000 0:12-200,0-4,0-4 1:3-250,4-8,0-4
//! ```
//!
//! One record per video: tensor path relative to the manifest, the binary
//! label string, then one `activity:t0-t1,w0-w1,h0-h1` half-open box per
//! positive activity.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use super::{read_tensor, write_tensor, DatasetSpec, SyntheticVideo, TruthRegion};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const HEADER: &str = "# asf-manifest v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub labels: Vec<u8>,
    pub regions: Vec<TruthRegion>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub activities: usize,
    pub t_full: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub entries: Vec<ManifestEntry>,
}

fn range(r: &Range<usize>) -> String {
    format!("{}-{}", r.start, r.end)
}

fn parse_range(s: &str) -> Option<Range<usize>> {
    let (a, b) = s.split_once('-')?;
    let (a, b) = (a.parse().ok()?, b.parse().ok()?);
    (a < b).then_some(a..b)
}

fn parse_region(s: &str) -> Option<TruthRegion> {
    let (a, rest) = s.split_once(':')?;
    let mut parts = rest.split(',').map(parse_range);
    let region = TruthRegion {
        activity: a.parse().ok()?,
        t: parts.next()??,
        w: parts.next()??,
        h: parts.next()??,
    };
    parts.next().is_none().then_some(region)
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{HEADER}\nactivities={} t_full={} width={} height={} channels={}\n",
            self.activities, self.t_full, self.width, self.height, self.channels
        );
        for e in &self.entries {
            out.push_str(&e.path);
            out.push(' ');
            out.extend(e.labels.iter().map(|&l| if l == 1 { '1' } else { '0' }));
            for r in &e.regions {
                let _ = write!(out, " {}:{},{},{}", r.activity, range(&r.t), range(&r.w), range(&r.h));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, why: String| Error::Data(format!("manifest line {}: {why}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(bad(0, format!("expected header `{HEADER}`"))),
        }
        let (i, dims_line) = lines.next().ok_or_else(|| bad(1, "missing dimensions line".into()))?;
        let mut dims = [0usize; 5];
        let keys = ["activities", "t_full", "width", "height", "channels"];
        let fields: Vec<&str> = dims_line.split_whitespace().collect();
        if fields.len() != keys.len() {
            return Err(bad(i, format!("expected {} dimension fields", keys.len())));
        }
        for ((slot, key), field) in dims.iter_mut().zip(keys).zip(fields) {
            *slot = field
                .strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .filter(|&v: &usize| v > 0)
                .ok_or_else(|| bad(i, format!("expected positive `{key}=`, found `{field}`")))?;
        }
        let [activities, t_full, width, height, channels] = dims;

        let mut entries = Vec::new();
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let mut fields = line.split_whitespace();
            let path = fields.next().expect("nonempty line").to_string();
            let label_str = fields.next().ok_or_else(|| bad(i, "missing labels".into()))?;
            if label_str.len() != activities || !label_str.bytes().all(|b| b == b'0' || b == b'1') {
                return Err(bad(i, format!("labels `{label_str}` are not {activities} binary digits")));
            }
            let labels: Vec<u8> = label_str.bytes().map(|b| b - b'0').collect();
            let regions = fields
                .map(|f| parse_region(f).ok_or_else(|| bad(i, format!("malformed region `{f}`"))))
                .collect::<Result<Vec<_>>>()?;
            let positives: Vec<usize> = (0..activities).filter(|&a| labels[a] == 1).collect();
            if regions.iter().map(|r| r.activity).collect::<Vec<_>>() != positives {
                return Err(bad(i, "regions must list every positive activity once, in order".into()));
            }
            if let Some(r) = regions.iter().find(|r| r.t.end > t_full || r.w.end > width || r.h.end > height) {
                return Err(bad(i, format!("region of activity {} exceeds the video", r.activity)));
            }
            entries.push(ManifestEntry { path, labels, regions });
        }
        Ok(Manifest {
            activities,
            t_full,
            width,
            height,
            channels,
            entries,
        })
    }

    pub fn label_rows(&self) -> Vec<Vec<u8>> {
        self.entries.iter().map(|e| e.labels.clone()).collect()
    }
}

/// Writes one `ASFT` file per video plus the manifest into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec, videos: &[SyntheticVideo]) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let width = videos.len().max(1).ilog10() as usize + 1;
    let mut entries = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        let path = format!("video_{i:0width$}.asft", width = width.max(4));
        write_tensor(dir.join(&path), &v.frames)?;
        entries.push(ManifestEntry {
            path,
            labels: v.labels.clone(),
            regions: v.regions.clone(),
        });
    }
    let manifest = Manifest {
        activities: spec.activities,
        t_full: spec.t_full,
        width: spec.width,
        height: spec.height,
        channels: spec.channels,
        entries,
    };
    std::fs::write(dir.join(MANIFEST_FILE), manifest.render())?;
    Ok(manifest)
}

/// Reads the manifest in `dir` and every video it lists.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<SyntheticVideo>)> {
    let dir = dir.as_ref();
    let manifest = Manifest::parse(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let expected = [manifest.channels, manifest.t_full, manifest.width, manifest.height];
    let videos = manifest
        .entries
        .iter()
        .map(|e| {
            let frames = read_tensor::<f32>(dir.join(&e.path))?;
            if frames.shape() != expected {
                return Err(Error::Data(format!(
                    "{} has shape {:?}, manifest says {expected:?}",
                    e.path,
                    frames.shape()
                )));
            }
            Ok(SyntheticVideo {
                frames,
                labels: e.labels.clone(),
                regions: e.regions.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, videos))
}
