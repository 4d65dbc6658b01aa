use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use asf_core::dataset::{
    generate_dataset, load_dataset, region_coverage, sample_clip, save_dataset, write_tensor, Manifest,
    BackboneStub, SyntheticVideo, CLIP_FRAMES,
};
use asf_core::head::{
    compute_mask, count_parameters, estimate_flops, export_activity_maps, read_checkpoint, write_checkpoint,
    HeadConfig, HeadParams,
};
use asf_core::train::{evaluate, localization_score, train, ViewPlan};
use asf_core::{dataset::read_tensor, Tensor};

use crate::config::RunConfig;
use crate::exit::{fail, Failure, WithCode, CONFIG, IO, MISMATCH, MISSING};

type Outcome<T = ()> = Result<T, Failure>;

pub const CHECKPOINT_FILE: &str = "head.asfh";
pub const LOSS_FILE: &str = "loss.csv";
pub const MASK_FILE: &str = "mask.asft";
pub const CONFIG_FILE: &str = "config.txt";

fn backbone(cfg: &RunConfig) -> Outcome<BackboneStub> {
    Ok(BackboneStub::new(
        cfg.dataset.channels,
        cfg.head.channels,
        BackboneStub::DEFAULT_POOL_T,
        BackboneStub::DEFAULT_POOL_S,
        cfg.backbone_seed,
    )?)
}

fn validated(cfg: &RunConfig) -> Outcome {
    cfg.validate().code(CONFIG)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .code(IO)
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .code(IO)
}

pub fn gen_data(cfg: &RunConfig) -> Outcome {
    validated(cfg)?;
    let videos = generate_dataset(&cfg.dataset)?;
    let dir = cfg.data_dir();
    save_dataset(&dir, &cfg.dataset, &videos)
        .map_err(Failure::from)
        .map_err(|f| Failure {
            error: f.error.context(format!("saving dataset to {}", dir.display())),
            ..f
        })?;
    println!("wrote {} videos to {}", videos.len(), dir.display());
    let n = videos.len() as f64;
    for a in 0..cfg.dataset.activities {
        let count = videos.iter().filter(|v| v.labels[a] == 1).count();
        println!("activity {a}: {count} videos ({:.1}%)", 100.0 * count as f64 / n);
    }
    Ok(())
}

struct Loaded {
    manifest: Manifest,
    videos: Vec<SyntheticVideo>,
    train_count: usize,
}

impl Loaded {
    fn train(&self) -> &[SyntheticVideo] {
        &self.videos[..self.train_count]
    }

    fn split(&self, name: &str) -> Outcome<&[SyntheticVideo]> {
        let s = match name {
            "train" => self.train(),
            "test" => &self.videos[self.train_count..],
            "all" => &self.videos,
            other => return Err(fail(CONFIG, format!("unknown split `{other}`; use train, test or all"))),
        };
        if s.is_empty() {
            return Err(fail(CONFIG, format!("split `{name}` is empty; adjust train_fraction")));
        }
        Ok(s)
    }

    /// Co-occurrence mask from training labels only.
    fn mask(&self) -> Outcome<Tensor<f32>> {
        let rows: Vec<Vec<u8>> = self.train().iter().map(|v| v.labels.clone()).collect();
        Ok(compute_mask(&rows, self.manifest.activities)?)
    }
}

fn load(cfg: &RunConfig) -> Outcome<Loaded> {
    let dir = cfg.data_dir();
    let (manifest, videos) = load_dataset(&dir).map_err(|e| Failure {
        code: IO,
        error: anyhow::Error::from(e).context(format!("loading dataset from {}", dir.display())),
    })?;
    let d = &cfg.dataset;
    let want = (d.activities, d.t_full, d.width, d.height, d.channels);
    let have = (
        manifest.activities,
        manifest.t_full,
        manifest.width,
        manifest.height,
        manifest.channels,
    );
    if want != have {
        return Err(fail(
            MISMATCH,
            format!(
                "dataset has (activities, t_full, width, height, channels) = {have:?}, config says {want:?}"
            ),
        ));
    }
    if videos.is_empty() {
        return Err(fail(IO, format!("dataset in {} has no videos", dir.display())));
    }
    let train_count = cfg.train_count(videos.len());
    Ok(Loaded {
        manifest,
        videos,
        train_count,
    })
}

pub fn train_cmd(cfg: &RunConfig) -> Outcome {
    validated(cfg)?;
    let data = load(cfg)?;
    let head = cfg.head_config();
    let mask = data.mask()?;
    let bb = backbone(cfg)?;
    eprintln!(
        "training on {} of {} videos: {} + {} iterations, {} parameters",
        data.train_count,
        data.videos.len(),
        cfg.train.iterations,
        cfg.train.finetune_iterations,
        count_parameters(&head).total()
    );
    let out = train(data.train(), &bb, &head, &cfg.train, Some(&mask))?;

    create_dir(&cfg.output_dir)?;
    let ckpt = cfg.output_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&ckpt, &out.params)?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    write(&cfg.output_dir.join(LOSS_FILE), csv)?;
    write_tensor(cfg.output_dir.join(MASK_FILE), &mask)?;
    write(&cfg.output_dir.join(CONFIG_FILE), cfg.render())?;
    let first = out.losses.first().copied().unwrap_or(f64::NAN);
    let last = out.losses.last().copied().unwrap_or(f64::NAN);
    println!("loss {first:.4} -> {last:.4} over {} iterations", out.losses.len());
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE), Path::to_path_buf)
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Outcome<HeadParams<f32>> {
    if !path.exists() {
        return Err(fail(MISSING, format!("checkpoint {} does not exist", path.display())));
    }
    let params = read_checkpoint(path)
        .with_context(|| format!("reading {}", path.display()))
        .code(IO)?;
    let want = cfg.head_config();
    if *params.config() != want {
        return Err(fail(
            MISMATCH,
            format!("checkpoint head {:?} does not match run config {want:?}", params.config()),
        ));
    }
    Ok(params)
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, split: &str, compare_rates: bool) -> Outcome {
    validated(cfg)?;
    let params = load_checkpoint(cfg, &checkpoint_path(cfg, checkpoint))?;
    let data = load(cfg)?;
    let mask = data.mask()?;
    let saved_mask = cfg.output_dir.join(MASK_FILE);
    if saved_mask.exists() && read_tensor::<f32>(&saved_mask)? != mask {
        return Err(fail(
            MISMATCH,
            format!("{} was not computed from this run's training split", saved_mask.display()),
        ));
    }
    let videos = data.split(split)?;
    let bb = backbone(cfg)?;
    let plan = cfg.plan().code(CONFIG)?;
    let (_, report) = evaluate(videos, &bb, &params, Some(&mask), &plan)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("eval_{split}.csv"));
    write(&path, report.to_csv())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for a in report.activities.iter() {
        if let Some(ap) = a.ap {
            println!("activity {}: AP {:.4} ({} positives)", a.activity, ap, a.positives);
        }
    }
    println!("mAP {:.4} over {} {split} videos, {} views", report.map, videos.len(), plan.len());

    if compare_rates {
        let mut rows = vec![];
        for &(rate, count) in &cfg.views {
            let single = ViewPlan::evenly_spaced(cfg.dataset.t_full, &[(rate, count)])?;
            let (_, r) = evaluate(videos, &bb, &params, Some(&mask), &single)?;
            rows.push((format!("r={rate}"), single.len(), r.map));
        }
        rows.push(("multi-rate".to_string(), plan.len(), report.map));
        let mut csv = String::from("plan,views,mAP\n");
        println!("{:<12} {:>5} {:>8}", "plan", "views", "mAP");
        for (name, views, map) in rows {
            let _ = writeln!(csv, "{name},{views},{map:.6}");
            println!("{name:<12} {views:>5} {map:>8.4}");
        }
        write(&cfg.output_dir.join(format!("rates_{split}.csv")), csv)?;
    }
    Ok(())
}

const MILLION: f64 = 1e6;

/// `(label, setting, config, published value in millions, compare total?)`.
fn published_rows() -> Vec<(&'static str, String, HeadConfig, f64, bool)> {
    let mut rows = vec![];
    for (n, published) in [(1, 50.4), (8, 6.3), (32, 1.6), (64, 0.8)] {
        let cfg = HeadConfig {
            groups: n,
            ..HeadConfig::published(157)
        };
        rows.push(("2a", format!("n={n}"), cfg, published, false));
    }
    for (k, published) in [(16, 0.4), (32, 0.8), (64, 1.6), (128, 3.2)] {
        let cfg = HeadConfig {
            observations: k,
            ..HeadConfig::published(157)
        };
        rows.push(("2b", format!("K={k}"), cfg, published, false));
    }
    rows.push(("4", "full head".into(), HeadConfig::published(157), 1.6, true));
    rows
}

/// The reference rows: Table 2a/2b count the observation banks, Table 4
/// counts the whole head.
pub fn published_table() -> String {
    let mut out = String::from("table,setting,bank_params,total_params,compared_M,published_M,rel_err,within_3pct\n");
    for (table, setting, cfg, published, total) in published_rows() {
        let count = count_parameters(&cfg);
        let compared = if total { count.total() } else { count.observation_banks } as f64 / MILLION;
        let rel = (compared - published).abs() / published;
        let _ = writeln!(
            out,
            "{table},{setting},{},{},{compared:.4},{published},{rel:.4},{}",
            count.observation_banks,
            count.total(),
            if rel <= 0.03 { "yes" } else { "no" }
        );
    }
    out
}

pub fn params_cmd(cfg: &RunConfig, published: bool) -> Outcome {
    if published {
        print!("{}", published_table());
        return Ok(());
    }
    let head = cfg.head_config();
    head.validate()?;
    let c = count_parameters(&head);
    let bb = backbone(cfg)?;
    let (t, w, h) = bb.output_dims(CLIP_FRAMES, cfg.dataset.width, cfg.dataset.height)?;
    println!("observation banks        {:>12}", c.observation_banks);
    println!("activity queries         {:>12}", c.queries);
    println!("correlation projections  {:>12}", c.correlation_projections);
    println!("output layers            {:>12}", c.outputs);
    println!("total                    {:>12}", c.total());
    println!("forward FLOPs ({t}x{w}x{h})  {:>12}", estimate_flops(&head, t * w * h));
    Ok(())
}

fn pgm(map: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(map.iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn visualize_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, video: usize, activities: Option<&[usize]>) -> Outcome {
    validated(cfg)?;
    let params = load_checkpoint(cfg, &checkpoint_path(cfg, checkpoint))?;
    let data = load(cfg)?;
    let v = data
        .videos
        .get(video)
        .ok_or_else(|| fail(MISSING, format!("video {video} not in manifest ({} videos)", data.videos.len())))?;
    let acts: Vec<usize> = match activities {
        Some(a) => a.to_vec(),
        None => v.positives().collect(),
    };
    if let Some(bad) = acts.iter().find(|&&a| a >= cfg.dataset.activities) {
        return Err(fail(MISSING, format!("activity {bad} does not exist ({} activities)", cfg.dataset.activities)));
    }
    let bb = backbone(cfg)?;
    let clip = sample_clip(&v.frames, cfg.vis_rate, cfg.vis_offset).code(CONFIG)?;
    let features = bb.forward(&clip)?;
    let maps = export_activity_maps(&features, &params, &acts)?;

    let dir = cfg.output_dir.join("vis").join(format!("video_{video:04}"));
    create_dir(&dir)?;
    let mut boxes = String::from("activity,t,w_min,h_min,w_max,h_max\n");
    let mut loc = String::from("activity,positive,inside,uniform,ratio\n");
    for m in &maps {
        let a = m.activity;
        write_tensor(dir.join(format!("activity_{a}.asft")), &m.normalized)?;
        let (t, w, h) = (m.normalized.shape()[0], m.normalized.shape()[1], m.normalized.shape()[2]);
        for ti in 0..t {
            let frame = &m.normalized.data()[ti * w * h..(ti + 1) * w * h];
            write(&dir.join(format!("activity_{a}_t{ti:02}.pgm")), pgm(frame, w, h))?;
        }
        for b in &m.boxes {
            let _ = writeln!(boxes, "{a},{},{},{},{},{}", b.t, b.w_min, b.h_min, b.w_max, b.h_max);
        }
        match v.region(a) {
            Some(region) => {
                let cov = region_coverage(&bb, region, cfg.vis_rate, cfg.vis_offset, cfg.dataset.width, cfg.dataset.height)?;
                match localization_score(&m.raw, &cov) {
                    Ok(l) if l.uniform > 0.0 => {
                        let _ = writeln!(loc, "{a},1,{:.6},{:.6},{:.4}", l.inside, l.uniform, l.ratio());
                        println!(
                            "activity {a}: {:.1}% of map mass in truth region (uniform {:.1}%)",
                            100.0 * l.inside,
                            100.0 * l.uniform
                        );
                    }
                    _ => {
                        let _ = writeln!(loc, "{a},1,,,");
                        println!("activity {a}: truth region not visible in this clip");
                    }
                }
            }
            None => {
                let _ = writeln!(loc, "{a},0,,,");
                println!("activity {a}: not present in video {video}");
            }
        }
    }
    write(&dir.join("boxes.csv"), boxes)?;
    write(&dir.join("localization.csv"), loc)?;
    println!("maps written to {}", dir.display());
    Ok(())
}
