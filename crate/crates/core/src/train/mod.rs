//! Loss, optimiser, the two-phase training schedule and evaluation.
//!
//! Phase 1 trains every head parameter on clips sampled at the base rate.
//! Phase 2 keeps training the same parameters, drawing one rate per batch
//! from the tuning rates. The backbone stub is never updated.

mod eval;

pub use eval::{
    average_precision, evaluate, localization_score, mean_average_precision, multi_view_predict, ActivityAp,
    EvalReport, Localization, ViewPlan,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{max_offset, sample_clip, BackboneStub, SyntheticVideo};
use crate::error::{Error, Result};
use crate::head::{forward_graph, FeatureVolume, HeadConfig, HeadGraph, HeadParams, ParamKind};
use crate::nn::{DropoutSpec, Mode};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Floor applied to `p` and `1 − p` before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Phase-1 steps at `base_rate`.
    pub iterations: usize,
    /// Phase-2 steps with a random rate per batch.
    pub finetune_iterations: usize,
    pub base_rate: usize,
    pub tuning_rates: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3.5e-2,
            weight_decay: 1.25e-5,
            batch_size: 12,
            iterations: 2000,
            finetune_iterations: 1000,
            base_rate: 4,
            tuning_rates: vec![2, 4, 8],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_iterations(&self) -> usize {
        self.iterations + self.finetune_iterations
    }

    /// Checks every rate leaves room for a clip in a `t_full`-frame video.
    pub fn validate(&self, t_full: usize) -> Result<()> {
        let spec = |m: String| Err(Error::Spec(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return spec(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return spec(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return spec("batch_size must be positive".into());
        }
        if self.tuning_rates.is_empty() && self.finetune_iterations > 0 {
            return spec("finetuning needs at least one tuning rate".into());
        }
        for &r in std::iter::once(&self.base_rate).chain(&self.tuning_rates) {
            if r == 0 || max_offset(t_full, r).is_none() {
                return spec(format!("rate {r} does not fit a 32-frame clip in {t_full} frames"));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over activities, on the tape.
pub fn bce<T: Scalar>(tape: &mut Tape<T>, pred: Var, labels: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(labels) {
        return Err(Error::shapes("bce", tape.shape(pred), tape.shape(labels)));
    }
    let n = tape.value(pred).len() as f64;
    let ln_p = tape.ln_clamped(pred, LOG_FLOOR)?;
    let one_minus_p = tape.affine(pred, -1.0, 1.0)?;
    let ln_q = tape.ln_clamped(one_minus_p, LOG_FLOOR)?;
    let one_minus_y = tape.affine(labels, -1.0, 1.0)?;
    let pos = tape.mul(labels, ln_p)?;
    let neg = tape.mul(one_minus_y, ln_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum_all(both)?;
    tape.scale(total, -1.0 / n)
}

/// `0.5·(BCE(F_OA) + BCE(F_OC))`, or `BCE(F_OA)` without the correlation stage.
pub fn head_loss<T: Scalar>(tape: &mut Tape<T>, graph: &HeadGraph, labels: Var) -> Result<Var> {
    let oa = bce(tape, graph.f_oa, labels)?;
    let Some(f_oc) = graph.f_oc else { return Ok(oa) };
    let oc = bce(tape, f_oc, labels)?;
    let sum = tape.add(oa, oc)?;
    tape.scale(sum, 0.5)
}

fn check_probabilities<T: Scalar>(name: &str, p: &Tensor<T>, n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::dim("bce_loss", format!("{name} has {} entries, labels {n}", p.len())));
    }
    match p.data().iter().find(|v| !(T::zero()..=T::one()).contains(*v)) {
        Some(v) => Err(Error::Numeric(format!("{name} holds {v}, outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Value-level dual-head loss, for reporting.
pub fn bce_loss<T: Scalar>(pred_oa: &Tensor<T>, pred_oc: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    check_probabilities("pred_OA", pred_oa, labels.len())?;
    check_probabilities("pred_OC", pred_oc, labels.len())?;
    let mut tape = Tape::<T>::new();
    let y = tape.constant(label_tensor(labels)?)?;
    let oa = tape.constant(pred_oa.reshape(&[labels.len()])?)?;
    let oc = tape.constant(pred_oc.reshape(&[labels.len()])?)?;
    let l_oa = bce(&mut tape, oa, y)?;
    let l_oc = bce(&mut tape, oc, y)?;
    Ok(0.5 * (tape.value(l_oa).data()[0].as_f64() + tape.value(l_oc).data()[0].as_f64()))
}

fn label_tensor<T: Scalar>(labels: &[u8]) -> Result<Tensor<T>> {
    Tensor::vector(labels.iter().map(|&l| T::from_f64(l as f64)).collect())
}

/// `w ← w − lr·(g + wd·w)` for weights, `w ← w − lr·g` for biases.
/// `grads` follows [`HeadParams::visit`] order.
pub fn sgd_step<T: Scalar>(
    params: &mut HeadParams<T>,
    grads: &[Option<Tensor<T>>],
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    let expected = HeadParams::<T>::layout(params.config()).len();
    if grads.len() != expected {
        return Err(Error::Contract(format!("{} gradients for {expected} parameters", grads.len())));
    }
    if let Some(i) = grads.iter().position(Option::is_none) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    for ((_, w), g) in params.named_tensors().iter().zip(grads) {
        let g = g.as_ref().expect("checked above");
        if g.shape() != w.shape() {
            return Err(Error::shapes("sgd_step", g.shape(), w.shape()));
        }
    }
    let (lr, wd) = (T::from_f64(learning_rate), T::from_f64(weight_decay));
    let mut i = 0;
    params.visit_mut(|_, kind, w| {
        let g = grads[i].as_ref().expect("checked above");
        i += 1;
        let decay = if kind == ParamKind::Bias { T::zero() } else { wd };
        for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
            *w = *w - lr * (g + decay * *w);
        }
    });
    Ok(())
}

/// Loss and parameter gradients for one clip.
pub fn item_gradients<R: Rng + ?Sized>(
    params: &HeadParams<f32>,
    features: &FeatureVolume<f32>,
    labels: &[u8],
    mask: Option<&Tensor<f32>>,
    rng: &mut R,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let cfg = params.config();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true)?;
    let x = tape.constant(features.data().clone())?;
    let mask = match (cfg.correlation, mask) {
        (true, Some(m)) => Some(tape.constant(m.clone())?),
        (true, None) => return Err(Error::Contract("training with correlation needs a mask".into())),
        (false, _) => None,
    };
    let spec = DropoutSpec::new(cfg.dropout_rate, Mode::Training)?;
    let graph = forward_graph(&mut tape, &bound, cfg, x, mask, spec, rng)?;
    let y = tape.constant(label_tensor(labels)?)?;
    let loss = head_loss(&mut tape, &graph, y)?;
    tape.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .map(|&v| tape.grad_tensor(v).map_or_else(|| Tensor::zeros(tape.shape(v)), Ok))
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.value(loss).data()[0] as f64, grads))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: HeadParams<f32>,
    /// Mean batch loss per iteration, phase 1 then phase 2.
    pub losses: Vec<f64>,
}

/// Independent stream for batch item `item` of the run.
fn item_rng(seed: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item);
    rng
}

const INIT_STREAM: u64 = u64::MAX;
const SCHEDULE_STREAM: u64 = u64::MAX - 1;

/// Initialises a head from `config.seed` and trains it.
pub fn train(
    videos: &[SyntheticVideo],
    backbone: &BackboneStub,
    head: &HeadConfig,
    config: &TrainConfig,
    mask: Option<&Tensor<f32>>,
) -> Result<TrainOutput> {
    let params = HeadParams::init(head, &mut item_rng(config.seed, INIT_STREAM))?;
    train_from(params, videos, backbone, config, mask, |_, _| {})
}

/// Trains `params` in place through both phases. `on_step(iteration, loss)`
/// runs after every optimiser step.
pub fn train_from(
    mut params: HeadParams<f32>,
    videos: &[SyntheticVideo],
    backbone: &BackboneStub,
    config: &TrainConfig,
    mask: Option<&Tensor<f32>>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    let first = videos
        .first()
        .ok_or_else(|| Error::Data("training needs at least one video".into()))?;
    let t_full = first.frames.shape()[1];
    config.validate(t_full)?;
    if let Some(v) = videos.iter().find(|v| v.frames.shape() != first.frames.shape()) {
        return Err(Error::Data(format!(
            "videos differ in shape: {:?} vs {:?}",
            v.frames.shape(),
            first.frames.shape()
        )));
    }
    if let Some(m) = mask {
        let a = params.config().activities;
        if m.shape() != [a, a] {
            return Err(Error::shapes("train mask", m.shape(), &[a, a]));
        }
    }

    let mut schedule = item_rng(config.seed, SCHEDULE_STREAM);
    let mut losses = Vec::with_capacity(config.total_iterations());
    let b = config.batch_size;
    for it in 0..config.total_iterations() {
        let rate = if it < config.iterations {
            config.base_rate
        } else {
            *config.tuning_rates.choose(&mut schedule).expect("validated")
        };
        let max_off = max_offset(t_full, rate).expect("validated");
        let snapshot = &params;
        let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut rng = item_rng(config.seed, (it * b + i) as u64);
                let video = &videos[rng.gen_range(0..videos.len())];
                let offset = rng.gen_range(0..=max_off);
                let clip = sample_clip(&video.frames, rate, offset)?;
                let features = backbone.forward(&clip)?;
                item_gradients(snapshot, &features, &video.labels, mask, &mut rng)
            })
            .collect();

        let mut loss = 0.0;
        let mut total: Option<Vec<Tensor<f32>>> = None;
        for r in results {
            let (l, grads) = r.map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { iteration: it },
                e => e,
            })?;
            loss += l;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &g)| *a += g);
                    }
                }
            }
        }
        let loss = loss / b as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: it });
        }
        let inv = 1.0 / b as f32;
        let grads: Vec<Option<Tensor<f32>>> = total
            .expect("batch is nonempty")
            .into_iter()
            .map(|g| Some(g.map(|v| v * inv)))
            .collect();
        sgd_step(&mut params, &grads, config.learning_rate, config.weight_decay)?;
        if params.named_tensors().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence { iteration: it });
        }
        losses.push(loss);
        on_step(it, loss);
    }
    Ok(TrainOutput { params, losses })
}
