use rayon::prelude::*;

use crate::dataset::{max_offset, sample_clip, BackboneStub, SyntheticVideo};
use crate::error::{Error, Result};
use crate::head::{head_forward, HeadParams};
use crate::nn::DropoutSpec;
use crate::tensor::Tensor;

/// Clips summed into one video-level score, as `(rate, offset)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPlan {
    views: Vec<(usize, usize)>,
}

impl ViewPlan {
    pub fn new(views: Vec<(usize, usize)>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Spec("a view plan needs at least one view".into()));
        }
        if let Some(&(r, o)) = views.iter().find(|(r, _)| *r == 0) {
            return Err(Error::Spec(format!("view ({r}, {o}) has zero rate")));
        }
        Ok(ViewPlan { views })
    }

    /// `count` views per rate with offsets spread evenly over `0..=max_offset`.
    pub fn evenly_spaced(t_full: usize, counts: &[(usize, usize)]) -> Result<Self> {
        let mut views = Vec::new();
        for &(rate, count) in counts {
            let max = max_offset(t_full, rate)
                .filter(|_| rate > 0)
                .ok_or_else(|| Error::Spec(format!("rate {rate} does not fit in {t_full} frames")))?;
            views.extend((0..count).map(|i| {
                let offset = if count == 1 {
                    max / 2
                } else {
                    (i * max + (count - 1) / 2) / (count - 1)
                };
                (rate, offset)
            }));
        }
        Self::new(views)
    }

    /// 9 views at rate 2, 12 at rate 4, 9 at rate 8.
    pub fn standard(t_full: usize) -> Result<Self> {
        Self::evenly_spaced(t_full, &[(2, 9), (4, 12), (8, 9)])
    }

    pub fn views(&self) -> &[(usize, usize)] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn validate(&self, t_full: usize) -> Result<()> {
        match self
            .views
            .iter()
            .find(|&&(r, o)| max_offset(t_full, r).is_none_or(|m| o > m))
        {
            Some(&(r, o)) => Err(Error::Spec(format!(
                "view (rate {r}, offset {o}) overruns a {t_full}-frame video"
            ))),
            None => Ok(()),
        }
    }
}

/// Sum of inference-mode `F_out` over every view. Views are summed in
/// `(rate, offset)` order, so any permutation of the plan gives the same bits.
pub fn multi_view_predict(
    video: &Tensor<f32>,
    backbone: &BackboneStub,
    params: &HeadParams<f32>,
    mask: Option<&Tensor<f32>>,
    plan: &ViewPlan,
) -> Result<Tensor<f64>> {
    let t_full = *video
        .shape()
        .get(1)
        .ok_or_else(|| Error::dim("multi_view_predict", "video must be [C × T × W × H]"))?;
    plan.validate(t_full)?;
    let mut views = plan.views.clone();
    views.sort_unstable();
    let mask = if params.config().correlation { mask } else { None };
    let outputs: Vec<Result<Tensor<f32>>> = views
        .par_iter()
        .map(|&(rate, offset)| {
            let clip = sample_clip(video, rate, offset)?;
            let features = backbone.forward(&clip)?;
            // Inference dropout draws nothing, any RNG will do.
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            Ok(head_forward(&features, params, mask, DropoutSpec::inference(), &mut rng)?.f_out)
        })
        .collect();
    let mut total = vec![0f64; params.config().activities];
    for out in outputs {
        for (t, &v) in total.iter_mut().zip(out?.data()) {
            *t += v as f64;
        }
    }
    Tensor::vector(total)
}

/// Mean of precision at each positive, scores ranked descending with ties
/// kept in index order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "average_precision",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("non-binary label {bad}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Data("average precision needs at least one positive".into()));
    }
    Ok(sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityAp {
    pub activity: usize,
    /// `None` when the activity has no positives.
    pub ap: Option<f64>,
    pub positives: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub activities: Vec<ActivityAp>,
    /// Unweighted mean over activities with at least one positive.
    pub map: f64,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// `activity,ap,positives` rows for scored activities, then `mAP,<value>,`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("activity,ap,positives\n");
        for a in self.activities.iter().filter(|a| a.ap.is_some()) {
            out.push_str(&format!("{},{:.6},{}\n", a.activity, a.ap.expect("filtered"), a.positives));
        }
        out.push_str(&format!("mAP,{:.6},\n", self.map));
        out
    }

    pub fn scored(&self) -> usize {
        self.activities.iter().filter(|a| a.ap.is_some()).count()
    }
}

/// Per-activity AP over rows of `scores[video][activity]`.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<EvalReport> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::dim(
            "mean_average_precision",
            format!("{} score rows vs {} label rows", scores.len(), labels.len()),
        ));
    }
    let a = labels[0].len();
    if let Some(i) = (0..scores.len()).find(|&i| scores[i].len() != a || labels[i].len() != a) {
        return Err(Error::dim("mean_average_precision", format!("row {i} does not have {a} activities")));
    }
    let mut activities = Vec::with_capacity(a);
    let mut warnings = Vec::new();
    for j in 0..a {
        let col_s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        let col_l: Vec<u8> = labels.iter().map(|r| r[j]).collect();
        let positives = col_l.iter().filter(|&&l| l == 1).count();
        let ap = if positives == 0 {
            warnings.push(format!("activity {j} has no positives; excluded from mAP"));
            None
        } else {
            Some(average_precision(&col_s, &col_l)?)
        };
        activities.push(ActivityAp {
            activity: j,
            ap,
            positives,
            total: col_l.len(),
        });
    }
    let aps: Vec<f64> = activities.iter().filter_map(|x| x.ap).collect();
    if aps.is_empty() {
        return Err(Error::Data("no activity has a positive label".into()));
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(EvalReport {
        activities,
        map,
        warnings,
    })
}

/// Multi-view scores for every video plus the resulting report.
pub fn evaluate(
    videos: &[SyntheticVideo],
    backbone: &BackboneStub,
    params: &HeadParams<f32>,
    mask: Option<&Tensor<f32>>,
    plan: &ViewPlan,
) -> Result<(Vec<Vec<f64>>, EvalReport)> {
    let scores = videos
        .iter()
        .map(|v| Ok(multi_view_predict(&v.frames, backbone, params, mask, plan)?.into_data()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<u8>> = videos.iter().map(|v| v.labels.clone()).collect();
    let report = mean_average_precision(&scores, &labels)?;
    Ok((scores, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    /// Share of the map's mass inside the truth region.
    pub inside: f64,
    /// Share a uniform map would put inside: region volume over total volume.
    pub uniform: f64,
}

impl Localization {
    pub fn ratio(&self) -> f64 {
        self.inside / self.uniform
    }
}

/// Compares an activity map against per-cell region coverage in `[0, 1]`.
pub fn localization_score(map: &Tensor<f64>, coverage: &Tensor<f64>) -> Result<Localization> {
    if map.shape() != coverage.shape() {
        return Err(Error::shapes("localization_score", map.shape(), coverage.shape()));
    }
    let mass = map.sum();
    if !(mass > 0.0) {
        return Err(Error::Numeric(format!("map mass {mass} is not positive")));
    }
    let inside = map.data().iter().zip(coverage.data()).map(|(m, c)| m * c).sum::<f64>() / mass;
    let uniform = coverage.sum() / coverage.len() as f64;
    Ok(Localization { inside, uniform })
}
