//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use asf_core::dataset::ForcedPair;
use asf_core::{DatasetSpec, HeadConfig, TrainConfig, ViewPlan};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("output_dir", "directory for checkpoints, curves, reports and maps"),
    ("data_dir", "dataset directory (default: <output_dir>/data)"),
    ("train_fraction", "leading share of videos used for training; the rest is the test split"),
    ("num_videos", "videos to generate"),
    ("activities", "activity classes A"),
    ("t_full", "frames per video"),
    ("width", "frame width"),
    ("height", "frame height"),
    ("input_channels", "channels of the raw frames"),
    ("activities_min", "fewest base activities per video"),
    ("activities_max", "most base activities per video"),
    ("forced_pairs", "comma list of source>target:probability"),
    ("forbidden_pairs", "comma list of j-k"),
    ("snr", "pattern over background energy per voxel"),
    ("data_seed", "dataset generation seed"),
    ("backbone_seed", "seed of the frozen backbone projection"),
    ("channels", "backbone output channels C"),
    ("feature_channels", "observation channels C'"),
    ("observations", "observations K"),
    ("groups", "channel groups n"),
    ("dropout_rate", "dropout before the output layers"),
    ("disable_correlation", "drop the correlation stage and its output head"),
    ("disable_activity_specific", "share one attention row across activities"),
    ("learning_rate", "SGD learning rate"),
    ("weight_decay", "L2 decay on weights, not biases"),
    ("batch_size", "clips per step"),
    ("iterations", "phase-1 steps at base_rate"),
    ("finetune_iterations", "phase-2 steps at a random tuning rate"),
    ("base_rate", "phase-1 sampling rate"),
    ("tuning_rates", "comma list of phase-2 sampling rates"),
    ("seed", "training seed"),
    ("views", "inference views as comma list of rate:count"),
    ("vis_rate", "sampling rate of the clip used for visualisation"),
    ("vis_offset", "offset of the clip used for visualisation"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub train_fraction: f64,
    pub dataset: DatasetSpec,
    pub backbone_seed: u64,
    /// `activities`, `correlation` and `activity_specific` are derived from
    /// the dataset and the ablation flags; see [`RunConfig::head_config`].
    pub head: HeadConfig,
    pub disable_correlation: bool,
    pub disable_activity_specific: bool,
    pub train: TrainConfig,
    pub views: Vec<(usize, usize)>,
    pub vis_rate: usize,
    pub vis_offset: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::default();
        RunConfig {
            output_dir: PathBuf::from("asf-run"),
            data_dir: None,
            train_fraction: 0.75,
            head: HeadConfig::desk(dataset.activities),
            dataset,
            backbone_seed: asf_core::BackboneStub::DEFAULT_SEED,
            disable_correlation: false,
            disable_activity_specific: false,
            train: TrainConfig::default(),
            views: vec![(2, 9), (4, 12), (8, 9)],
            vis_rate: 8,
            vis_offset: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("`{key}` expects a number, got `{value}`"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("`{key}` expects true or false, got `{value}`"),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_forced(value: &str) -> Result<Vec<ForcedPair>> {
    list(value)
        .map(|item| {
            let bad = || anyhow!("forced pair `{item}` is not source>target:probability");
            let (pair, p) = item.split_once(':').ok_or_else(bad)?;
            let (s, t) = pair.split_once('>').ok_or_else(bad)?;
            Ok(ForcedPair {
                source: s.trim().parse().map_err(|_| bad())?,
                target: t.trim().parse().map_err(|_| bad())?,
                probability: p.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn parse_forbidden(value: &str) -> Result<Vec<(usize, usize)>> {
    list(value)
        .map(|item| {
            let bad = || anyhow!("forbidden pair `{item}` is not j-k");
            let (j, k) = item.split_once('-').ok_or_else(bad)?;
            Ok((j.trim().parse().map_err(|_| bad())?, k.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn parse_views(value: &str) -> Result<Vec<(usize, usize)>> {
    list(value)
        .map(|item| {
            let bad = || anyhow!("view group `{item}` is not rate:count");
            let (r, c) = item.split_once(':').ok_or_else(bad)?;
            Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.dataset;
        let h = &mut self.head;
        let t = &mut self.train;
        match key {
            "output_dir" => self.output_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "train_fraction" => self.train_fraction = num(key, value)?,
            "num_videos" => d.num_videos = num(key, value)?,
            "activities" => d.activities = num(key, value)?,
            "t_full" => d.t_full = num(key, value)?,
            "width" => d.width = num(key, value)?,
            "height" => d.height = num(key, value)?,
            "input_channels" => d.channels = num(key, value)?,
            "activities_min" => d.activities_per_video.0 = num(key, value)?,
            "activities_max" => d.activities_per_video.1 = num(key, value)?,
            "forced_pairs" => d.forced_pairs = parse_forced(value)?,
            "forbidden_pairs" => d.forbidden_pairs = parse_forbidden(value)?,
            "snr" => d.snr = num(key, value)?,
            "data_seed" => d.seed = num(key, value)?,
            "backbone_seed" => self.backbone_seed = num(key, value)?,
            "channels" => h.channels = num(key, value)?,
            "feature_channels" => h.feature_channels = num(key, value)?,
            "observations" => h.observations = num(key, value)?,
            "groups" => h.groups = num(key, value)?,
            "dropout_rate" => h.dropout_rate = num(key, value)?,
            "disable_correlation" => self.disable_correlation = flag(key, value)?,
            "disable_activity_specific" => self.disable_activity_specific = flag(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "iterations" => t.iterations = num(key, value)?,
            "finetune_iterations" => t.finetune_iterations = num(key, value)?,
            "base_rate" => t.base_rate = num(key, value)?,
            "tuning_rates" => t.tuning_rates = list(value).map(|v| num(key, v)).collect::<Result<_>>()?,
            "seed" => t.seed = num(key, value)?,
            "views" => self.views = parse_views(value)?,
            "vis_rate" => self.vis_rate = num(key, value)?,
            "vis_offset" => self.vis_offset = num(key, value)?,
            _ => bail!(
                "unknown key `{key}`; accepted keys: {}",
                KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
            ),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{assignment}` is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn render(&self) -> String {
        let d = &self.dataset;
        let h = &self.head;
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("output_dir", self.output_dir.display().to_string());
        put("data_dir", self.data_dir().display().to_string());
        put("train_fraction", self.train_fraction.to_string());
        put("num_videos", d.num_videos.to_string());
        put("activities", d.activities.to_string());
        put("t_full", d.t_full.to_string());
        put("width", d.width.to_string());
        put("height", d.height.to_string());
        put("input_channels", d.channels.to_string());
        put("activities_min", d.activities_per_video.0.to_string());
        put("activities_max", d.activities_per_video.1.to_string());
        put(
            "forced_pairs",
            join(d.forced_pairs.iter().map(|f| format!("{}>{}:{}", f.source, f.target, f.probability))),
        );
        put("forbidden_pairs", join(d.forbidden_pairs.iter().map(|(j, k)| format!("{j}-{k}"))));
        put("snr", d.snr.to_string());
        put("data_seed", d.seed.to_string());
        put("backbone_seed", self.backbone_seed.to_string());
        put("channels", h.channels.to_string());
        put("feature_channels", h.feature_channels.to_string());
        put("observations", h.observations.to_string());
        put("groups", h.groups.to_string());
        put("dropout_rate", h.dropout_rate.to_string());
        put("disable_correlation", self.disable_correlation.to_string());
        put("disable_activity_specific", self.disable_activity_specific.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("batch_size", t.batch_size.to_string());
        put("iterations", t.iterations.to_string());
        put("finetune_iterations", t.finetune_iterations.to_string());
        put("base_rate", t.base_rate.to_string());
        put("tuning_rates", join(&t.tuning_rates));
        put("seed", t.seed.to_string());
        put("views", join(self.views.iter().map(|(r, c)| format!("{r}:{c}"))));
        put("vis_rate", self.vis_rate.to_string());
        put("vis_offset", self.vis_offset.to_string());
        out
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    /// Head structure after syncing `activities` and applying ablations.
    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            activities: self.dataset.activities,
            correlation: !self.disable_correlation,
            activity_specific: !self.disable_activity_specific,
            ..self.head
        }
    }

    pub fn plan(&self) -> Result<ViewPlan> {
        Ok(ViewPlan::evenly_spaced(self.dataset.t_full, &self.views)?)
    }

    /// Number of leading videos in the training split.
    pub fn train_count(&self, videos: usize) -> usize {
        ((videos as f64 * self.train_fraction).floor() as usize).clamp(1, videos)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.head_config().validate()?;
        self.train.validate(self.dataset.t_full)?;
        self.plan()?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            bail!("train_fraction must lie in (0, 1], got {}", self.train_fraction);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap().render(), cfg.render());
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.plan().unwrap().len(), 30);
    }

    #[test]
    fn every_documented_key_is_accepted_and_rendered() {
        let rendered = RunConfig::default().render();
        for (key, _) in KEYS {
            assert!(rendered.lines().any(|l| l.starts_with(&format!("{key} ="))), "{key}");
        }
        assert_eq!(rendered.lines().count(), KEYS.len());
    }

    #[test]
    fn parses_lists_comments_and_overrides() {
        let cfg = RunConfig::parse(
            "# run\nforced_pairs = 0>1:0.9, 2>3:0.5\nforbidden_pairs = 1-4\n\nviews = 4:3 # short\ndisable_correlation = true\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset.forced_pairs.len(), 2);
        assert_eq!(cfg.dataset.forced_pairs[1].probability, 0.5);
        assert_eq!(cfg.dataset.forbidden_pairs, vec![(1, 4)]);
        assert_eq!(cfg.views, vec![(4, 3)]);
        assert!(!cfg.head_config().correlation);
        let mut cfg = cfg;
        cfg.apply_override("iterations=7").unwrap();
        assert_eq!(cfg.train.iterations, 7);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = RunConfig::parse("colour = red").unwrap_err();
        assert!(format!("{err:#}").contains("unknown key `colour`"));
        assert!(RunConfig::parse("iterations = many").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("forced_pairs = 0-1").is_err());
        assert!(RunConfig::parse("disable_correlation = maybe").is_err());
    }
}
