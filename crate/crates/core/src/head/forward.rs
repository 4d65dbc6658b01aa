use rand::Rng;

use super::params::BoundHead;
use super::{FeatureVolume, HeadConfig, HeadParams};
use crate::error::{Error, Result};
use crate::nn::{attention_from_query, dropout, group_linear_forward, DropoutSpec};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `K` observations `[K × C']` and the attention rows `[K × M]` that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet<T: Scalar = f32> {
    pub data: Tensor<T>,
    pub attn_o: Tensor<T>,
}

/// Activity-specific features `[A × C']`, their attention over observations
/// `[A × K]` and, once the correlation stage ran, the correlated features.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityFeatureSet<T: Scalar = f32> {
    pub f_a: Tensor<T>,
    pub attn_a: Tensor<T>,
    pub f_ac: Option<Tensor<T>>,
}

/// `corr = attn_c + mask`, all `[A × A]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap<T: Scalar = f32> {
    pub mask: Tensor<T>,
    pub attn_c: Tensor<T>,
    pub corr: Tensor<T>,
}

/// Per-activity probabilities, each of length `A`.
///
/// `f_out` is the elementwise mean of `f_oa` and `f_oc`, or `f_oa` alone when
/// the correlation stage is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions<T: Scalar = f32> {
    pub f_oa: Tensor<T>,
    pub f_oc: Option<Tensor<T>>,
    pub f_out: Tensor<T>,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace<T: Scalar = f32> {
    pub observations: ObservationSet<T>,
    pub features: ActivityFeatureSet<T>,
    pub correlation: Option<CorrelationMap<T>>,
    pub predictions: Predictions<T>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadGraph {
    pub obs: Var,
    pub attn_o: Var,
    pub f_a: Var,
    pub attn_a: Var,
    pub attn_c: Option<Var>,
    pub corr: Option<Var>,
    pub f_ac: Option<Var>,
    pub f_oa: Var,
    pub f_oc: Option<Var>,
    pub f_out: Var,
}

/// Builds `Obs [K × C']` and `Attn_O [K × M]` from features `x [C × M]`.
///
/// Observation `k` attends over positions with its own `β`/`γ` projections,
/// the query being the last position of `g_k^β(x)`, then pools `g_k^α(x)`
/// with that attention row.
pub fn observations_graph<T: Scalar>(tape: &mut Tape<T>, bound: &BoundHead, x: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("observations", format!("features must be 2-D, got {shape:?}")));
    }
    let positions = shape[1];
    // Projections act column by column, so projecting only the last position
    // equals taking the last column of the full projection.
    let last = tape.narrow(x, 1, positions - 1, 1)?;
    let mut rows = Vec::with_capacity(bound.observations());
    let mut attns = Vec::with_capacity(bound.observations());
    for k in 0..bound.observations() {
        let [alpha, beta, gamma] = bound.observation(k);
        let query = group_linear_forward(tape, beta, last)?;
        let keys = group_linear_forward(tape, gamma, x)?;
        let attn = attention_from_query(tape, query, keys)?;
        let values = group_linear_forward(tape, alpha, x)?;
        let values_t = tape.transpose(values)?;
        rows.push(tape.matmul(attn, values_t)?);
        attns.push(attn);
    }
    let obs = tape.concat(&rows, 0)?;
    let attn_o = tape.concat(&attns, 0)?;
    Ok((obs, attn_o))
}

/// Builds `F_A [A × C']` and `Attn_A [A × K]`: each activity's learned query
/// attends over the observations. With a single shared query the one
/// attention row is broadcast to all `activities`.
pub fn activity_features_graph<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundHead,
    obs: Var,
    activities: usize,
) -> Result<(Var, Var)> {
    let queries = bound.queries();
    let obs_t = tape.transpose(obs)?;
    let logits = tape.matmul(queries, obs_t)?;
    let mut attn = tape.softmax(logits, 1)?;
    let rows = tape.shape(queries)[0];
    if rows != activities {
        if rows != 1 {
            return Err(Error::dim(
                "activity_features",
                format!("{rows} queries for {activities} activities"),
            ));
        }
        attn = tape.concat(&vec![attn; activities], 0)?;
    }
    let f_a = tape.matmul(attn, obs)?;
    Ok((f_a, attn))
}

/// Returns `(Attn_C, Corr, F_AC)`.
///
/// `Attn_C` is the row softmax of `p^β(F_Aᵀ)ᵀ · p^γ(F_Aᵀ)`; `Corr` adds the
/// static mask without renormalising; `F_AC = Corr · F_A`. The two sums
/// that run over activities add their terms in sorted order, so relabelling
/// activities permutes every output bit for bit.
pub fn correlation_graph<T: Scalar>(
    tape: &mut Tape<T>,
    projections: (Var, Var),
    f_a: Var,
    mask: Var,
) -> Result<(Var, Var, Var)> {
    let a = tape.shape(f_a)[0];
    if tape.shape(mask) != [a, a] {
        return Err(Error::shapes("correlation mask", tape.shape(mask), &[a, a]));
    }
    let f_a_t = tape.transpose(f_a)?;
    let keys_beta = group_linear_forward(tape, projections.0, f_a_t)?;
    let keys_gamma = group_linear_forward(tape, projections.1, f_a_t)?;
    let beta_t = tape.transpose(keys_beta)?;
    let logits = tape.matmul(beta_t, keys_gamma)?;
    let attn_c = tape.softmax_sorted(logits, 1)?;
    let corr = tape.add(attn_c, mask)?;
    let f_ac = tape.matmul_sorted(corr, f_a)?;
    Ok((attn_c, corr, f_ac))
}

/// `sigmoid(rowwise(W ∘ dropout(F)) + b)`, one probability per activity.
pub fn predict_graph<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    output: (Var, Var),
    features: Var,
    spec: DropoutSpec,
    rng: &mut R,
) -> Result<Var> {
    let (w, b) = output;
    let dropped = dropout(tape, features, spec, rng)?;
    let prod = tape.mul(w, dropped)?;
    let z = tape.reduce_sum(prod, 1)?;
    let logits = tape.add(z, b)?;
    tape.sigmoid(logits)
}

/// Full forward pass on a tape. `mask` is required when the correlation
/// stage is enabled.
pub fn forward_graph<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bound: &BoundHead,
    config: &HeadConfig,
    x: Var,
    mask: Option<Var>,
    spec: DropoutSpec,
    rng: &mut R,
) -> Result<HeadGraph> {
    if tape.shape(x)[0] != config.channels {
        return Err(Error::dim(
            "head_forward",
            format!("features have {} channels, head expects {}", tape.shape(x)[0], config.channels),
        ));
    }
    let (obs, attn_o) = observations_graph(tape, bound, x)?;
    let (f_a, attn_a) = activity_features_graph(tape, bound, obs, config.activities)?;
    let f_oa = predict_graph(tape, bound.activity_output(), f_a, spec, rng)?;

    let Some(projections) = bound.correlation_projections() else {
        return Ok(HeadGraph {
            obs,
            attn_o,
            f_a,
            attn_a,
            attn_c: None,
            corr: None,
            f_ac: None,
            f_oa,
            f_oc: None,
            f_out: f_oa,
        });
    };
    let mask = mask.ok_or_else(|| Error::Contract("correlation stage needs a mask".into()))?;
    let (attn_c, corr, f_ac) = correlation_graph(tape, projections, f_a, mask)?;
    let output = bound.correlated_output().expect("correlation enabled");
    let f_oc = predict_graph(tape, output, f_ac, spec, rng)?;
    let sum = tape.add(f_oa, f_oc)?;
    let f_out = tape.scale(sum, 0.5)?;
    Ok(HeadGraph {
        obs,
        attn_o,
        f_a,
        attn_a,
        attn_c: Some(attn_c),
        corr: Some(corr),
        f_ac: Some(f_ac),
        f_oa,
        f_oc: Some(f_oc),
        f_out,
    })
}

fn check_channels<T: Scalar>(features: &FeatureVolume<T>, config: &HeadConfig) -> Result<()> {
    if features.channels() != config.channels {
        return Err(Error::dim(
            "head",
            format!("features have {} channels, head expects {}", features.channels(), config.channels),
        ));
    }
    Ok(())
}

pub fn compute_observations<T: Scalar>(features: &FeatureVolume<T>, params: &HeadParams<T>) -> Result<ObservationSet<T>> {
    check_channels(features, params.config())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let x = tape.constant(features.data().clone())?;
    let (obs, attn_o) = observations_graph(&mut tape, &bound, x)?;
    Ok(ObservationSet {
        data: tape.value(obs).clone(),
        attn_o: tape.value(attn_o).clone(),
    })
}

pub fn compute_activity_features<T: Scalar>(
    obs: &ObservationSet<T>,
    params: &HeadParams<T>,
) -> Result<ActivityFeatureSet<T>> {
    let cfg = params.config();
    if obs.data.shape() != [cfg.observations, cfg.feature_channels] {
        return Err(Error::shapes(
            "activity_features",
            obs.data.shape(),
            &[cfg.observations, cfg.feature_channels],
        ));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let o = tape.constant(obs.data.clone())?;
    let (f_a, attn_a) = activity_features_graph(&mut tape, &bound, o, cfg.activities)?;
    Ok(ActivityFeatureSet {
        f_a: tape.value(f_a).clone(),
        attn_a: tape.value(attn_a).clone(),
        f_ac: None,
    })
}

/// Applies the correlation map, returning it together with `F_AC`.
pub fn compute_correlation<T: Scalar>(
    features: &ActivityFeatureSet<T>,
    mask: &Tensor<T>,
    params: &HeadParams<T>,
) -> Result<(CorrelationMap<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let projections = bound
        .correlation_projections()
        .ok_or_else(|| Error::Contract("correlation stage is disabled for this head".into()))?;
    let f_a = tape.constant(features.f_a.clone())?;
    let m = tape.constant(mask.clone())?;
    let (attn_c, corr, f_ac) = correlation_graph(&mut tape, projections, f_a, m)?;
    Ok((
        CorrelationMap {
            mask: mask.clone(),
            attn_c: tape.value(attn_c).clone(),
            corr: tape.value(corr).clone(),
        },
        tape.value(f_ac).clone(),
    ))
}

pub fn predict<T: Scalar, R: Rng + ?Sized>(
    features: &ActivityFeatureSet<T>,
    params: &HeadParams<T>,
    spec: DropoutSpec,
    rng: &mut R,
) -> Result<Predictions<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let f_a = tape.constant(features.f_a.clone())?;
    let f_oa = predict_graph(&mut tape, bound.activity_output(), f_a, spec, rng)?;
    let Some(output) = bound.correlated_output() else {
        let f_oa = tape.value(f_oa).clone();
        return Ok(Predictions {
            f_out: f_oa.clone(),
            f_oa,
            f_oc: None,
        });
    };
    let f_ac = features
        .f_ac
        .as_ref()
        .ok_or_else(|| Error::Contract("predict needs F_AC when the correlation stage is enabled".into()))?;
    let f_ac = tape.constant(f_ac.clone())?;
    let f_oc = predict_graph(&mut tape, output, f_ac, spec, rng)?;
    let sum = tape.add(f_oa, f_oc)?;
    let f_out = tape.scale(sum, 0.5)?;
    Ok(Predictions {
        f_oa: tape.value(f_oa).clone(),
        f_oc: Some(tape.value(f_oc).clone()),
        f_out: tape.value(f_out).clone(),
    })
}

/// Runs the whole head and keeps every intermediate.
pub fn head_trace<T: Scalar, R: Rng + ?Sized>(
    features: &FeatureVolume<T>,
    params: &HeadParams<T>,
    mask: Option<&Tensor<T>>,
    spec: DropoutSpec,
    rng: &mut R,
) -> Result<HeadTrace<T>> {
    check_channels(features, params.config())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let x = tape.constant(features.data().clone())?;
    let mask = mask.map(|m| tape.constant(m.clone())).transpose()?;
    let g = forward_graph(&mut tape, &bound, params.config(), x, mask, spec, rng)?;
    let value = |v: Var| tape.value(v).clone();
    Ok(HeadTrace {
        observations: ObservationSet {
            data: value(g.obs),
            attn_o: value(g.attn_o),
        },
        features: ActivityFeatureSet {
            f_a: value(g.f_a),
            attn_a: value(g.attn_a),
            f_ac: g.f_ac.map(value),
        },
        correlation: match (g.attn_c, g.corr, mask) {
            (Some(attn_c), Some(corr), Some(m)) => Some(CorrelationMap {
                mask: value(m),
                attn_c: value(attn_c),
                corr: value(corr),
            }),
            _ => None,
        },
        predictions: Predictions {
            f_oa: value(g.f_oa),
            f_oc: g.f_oc.map(value),
            f_out: value(g.f_out),
        },
    })
}

pub fn head_forward<T: Scalar, R: Rng + ?Sized>(
    features: &FeatureVolume<T>,
    params: &HeadParams<T>,
    mask: Option<&Tensor<T>>,
    spec: DropoutSpec,
    rng: &mut R,
) -> Result<Predictions<T>> {
    Ok(head_trace(features, params, mask, spec, rng)?.predictions)
}

/// Conditional co-occurrence `mask(j, k) = N_jk / N_j` over binary label rows.
/// Rows of activities that never occur are all zero.
pub fn compute_mask<T: Scalar>(labels: &[Vec<u8>], activities: usize) -> Result<Tensor<T>> {
    if activities == 0 {
        return Err(Error::Data("mask needs at least one activity".into()));
    }
    let mut pair = vec![0u64; activities * activities];
    for (i, row) in labels.iter().enumerate() {
        if row.len() != activities {
            return Err(Error::Data(format!(
                "label row {i} has {} entries, expected {activities}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("label row {i} holds non-binary value {bad}")));
        }
        for j in (0..activities).filter(|&j| row[j] == 1) {
            for k in (0..activities).filter(|&k| row[k] == 1) {
                pair[j * activities + k] += 1;
            }
        }
    }
    Tensor::from_fn(&[activities, activities], |idx| {
        let (j, _) = (idx / activities, idx % activities);
        let n_j = pair[j * activities + j];
        if n_j == 0 {
            T::zero()
        } else {
            T::from_f64(pair[idx] as f64 / n_j as f64)
        }
    })
}
