use rand::Rng;

use super::HeadConfig;
use crate::error::{Error, Result};
use crate::nn::{init_params, GroupLinear};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Weights are decayed by the optimizer, biases are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Per-observation projections `g_k^α`, `g_k^β`, `g_k^γ` (each `C → C'`).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBank<T: Scalar> {
    pub alpha: GroupLinear<T>,
    pub beta: GroupLinear<T>,
    pub gamma: GroupLinear<T>,
}

/// Correlation-stage projections (`C' → C'`) and the `F_OC` output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationParams<T: Scalar> {
    pub p_beta: GroupLinear<T>,
    pub p_gamma: GroupLinear<T>,
    pub w_theta: Tensor<T>,
    pub b_theta: Tensor<T>,
}

/// Every learnable of the head.
///
/// Tensors are addressed by stable names (`obs.{k}.alpha`, `queries`,
/// `out.w_phi`, ...); [`HeadParams::visit`] walks them in a fixed order that
/// the optimizer, checkpoints and gradient reductions all share.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T: Scalar = f32> {
    config: HeadConfig,
    observations: Vec<ObservationBank<T>>,
    /// `[A × C']`, or `[1 × C']` when activity-specific attention is off.
    queries: Tensor<T>,
    w_phi: Tensor<T>,
    b_phi: Tensor<T>,
    correlation: Option<CorrelationParams<T>>,
}

/// Learnable counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// `3·K·C·C'/n`.
    pub observation_banks: usize,
    pub queries: usize,
    pub correlation_projections: usize,
    pub outputs: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.observation_banks + self.queries + self.correlation_projections + self.outputs
    }
}

/// Exact learnable count for a configuration, without instantiating it.
pub fn count_parameters(config: &HeadConfig) -> ParamCount {
    let (c, cp, k, a, n) = (
        config.channels,
        config.feature_channels,
        config.observations,
        config.activities,
        config.groups,
    );
    let heads = if config.correlation { 2 } else { 1 };
    ParamCount {
        observation_banks: 3 * k * GroupLinear::<f32>::param_count(c, cp, n),
        queries: if config.activity_specific { a * cp } else { cp },
        correlation_projections: if config.correlation {
            2 * GroupLinear::<f32>::param_count(cp, cp, n)
        } else {
            0
        },
        outputs: heads * (a * cp + a),
    }
}

/// Multiply-add count of one forward pass over `positions` backbone
/// positions, doubled to FLOPs.
pub fn estimate_flops(config: &HeadConfig, positions: usize) -> u64 {
    let (c, cp, k, a, n) = (
        config.channels as u64,
        config.feature_channels as u64,
        config.observations as u64,
        config.activities as u64,
        config.groups as u64,
    );
    let m = positions as u64;
    let proj = c * cp / n;
    let per_obs = proj * m * 2 + proj + cp * m * 2;
    let mut macs = k * per_obs + 2 * a * k * cp + 2 * a * cp;
    if config.correlation {
        macs += 2 * (cp * cp / n) * a + 2 * a * a * cp + 2 * a * cp;
    }
    2 * macs
}

impl<T: Scalar> HeadParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, cp, a, n) = (config.channels, config.feature_channels, config.activities, config.groups);
        let observations = (0..config.observations)
            .map(|_| {
                Ok(ObservationBank {
                    alpha: GroupLinear::init(c, cp, n, rng)?,
                    beta: GroupLinear::init(c, cp, n, rng)?,
                    gamma: GroupLinear::init(c, cp, n, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let query_rows = if config.activity_specific { a } else { 1 };
        let queries = init_params(&[query_rows, cp], cp, rng)?;
        let w_phi = init_params(&[a, cp], cp, rng)?;
        let b_phi = Tensor::zeros(&[a])?;
        let correlation = if config.correlation {
            Some(CorrelationParams {
                p_beta: GroupLinear::init(cp, cp, n, rng)?,
                p_gamma: GroupLinear::init(cp, cp, n, rng)?,
                w_theta: init_params(&[a, cp], cp, rng)?,
                b_theta: Tensor::zeros(&[a])?,
            })
        } else {
            None
        };
        Ok(HeadParams {
            config: *config,
            observations,
            queries,
            w_phi,
            b_phi,
            correlation,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Names, kinds and shapes of every learnable, in visiting order.
    pub fn layout(config: &HeadConfig) -> Vec<(String, ParamKind, Vec<usize>)> {
        let (c, cp, a, n) = (config.channels, config.feature_channels, config.activities, config.groups);
        let bank = GroupLinear::<T>::weight_shape(c, cp, n).to_vec();
        let square = GroupLinear::<T>::weight_shape(cp, cp, n).to_vec();
        let mut out = Vec::new();
        for k in 0..config.observations {
            for part in ["alpha", "beta", "gamma"] {
                out.push((format!("obs.{k}.{part}"), ParamKind::Weight, bank.clone()));
            }
        }
        let query_rows = if config.activity_specific { a } else { 1 };
        out.push(("queries".into(), ParamKind::Weight, vec![query_rows, cp]));
        out.push(("out.w_phi".into(), ParamKind::Weight, vec![a, cp]));
        out.push(("out.b_phi".into(), ParamKind::Bias, vec![a]));
        if config.correlation {
            out.push(("corr.p_beta".into(), ParamKind::Weight, square.clone()));
            out.push(("corr.p_gamma".into(), ParamKind::Weight, square));
            out.push(("out.w_theta".into(), ParamKind::Weight, vec![a, cp]));
            out.push(("out.b_theta".into(), ParamKind::Bias, vec![a]));
        }
        out
    }

    /// Rebuilds parameters from named tensors; names and shapes must match
    /// [`HeadParams::layout`] exactly.
    pub fn from_named(config: &HeadConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(config);
        if named.len() != layout.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((want, _, shape), (got, t)) in layout.iter().zip(named) {
            if *want != got || t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "expected tensor {want} {shape:?}, got {got} {:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        let (c, cp, n) = (config.channels, config.feature_channels, config.groups);
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("layout length checked");
        let mut observations = Vec::with_capacity(config.observations);
        for _ in 0..config.observations {
            observations.push(ObservationBank {
                alpha: GroupLinear::new(c, cp, n, next())?,
                beta: GroupLinear::new(c, cp, n, next())?,
                gamma: GroupLinear::new(c, cp, n, next())?,
            });
        }
        let queries = next();
        let w_phi = next();
        let b_phi = next();
        let correlation = if config.correlation {
            Some(CorrelationParams {
                p_beta: GroupLinear::new(cp, cp, n, next())?,
                p_gamma: GroupLinear::new(cp, cp, n, next())?,
                w_theta: next(),
                b_theta: next(),
            })
        } else {
            None
        };
        Ok(HeadParams {
            config: *config,
            observations,
            queries,
            w_phi,
            b_phi,
            correlation,
        })
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for bank in &self.observations {
            out.extend([bank.alpha.weights(), bank.beta.weights(), bank.gamma.weights()]);
        }
        out.extend([&self.queries, &self.w_phi, &self.b_phi]);
        if let Some(corr) = &self.correlation {
            out.extend([corr.p_beta.weights(), corr.p_gamma.weights(), &corr.w_theta, &corr.b_theta]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for bank in &mut self.observations {
            out.push(bank.alpha.weights_mut());
            out.push(bank.beta.weights_mut());
            out.push(bank.gamma.weights_mut());
        }
        out.push(&mut self.queries);
        out.push(&mut self.w_phi);
        out.push(&mut self.b_phi);
        if let Some(corr) = &mut self.correlation {
            out.push(corr.p_beta.weights_mut());
            out.push(corr.p_gamma.weights_mut());
            out.push(&mut corr.w_theta);
            out.push(&mut corr.b_theta);
        }
        out
    }

    pub fn visit(&self, mut f: impl FnMut(&str, ParamKind, &Tensor<T>)) {
        for ((name, kind, _), t) in Self::layout(&self.config).iter().zip(self.tensors()) {
            f(name, *kind, t);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut Tensor<T>)) {
        let layout = Self::layout(&self.config);
        for ((name, kind, _), t) in layout.iter().zip(self.tensors_mut()) {
            f(name, *kind, t);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        Self::layout(&self.config)
            .into_iter()
            .zip(self.tensors())
            .map(|((name, _, _), t)| (name, t))
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let idx = Self::layout(&self.config).iter().position(|(n, _, _)| n == name)?;
        self.tensors_mut().into_iter().nth(idx)
    }

    /// Total scalar learnables actually instantiated.
    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn observation_bank(&self, k: usize) -> &ObservationBank<T> {
        &self.observations[k]
    }

    pub fn correlation(&self) -> Option<&CorrelationParams<T>> {
        self.correlation.as_ref()
    }

    pub fn cast<U: Scalar>(&self) -> HeadParams<U> {
        let named = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<U>()))
            .collect();
        HeadParams::from_named(&self.config, named).expect("same layout")
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundHead> {
        let mut vars = Vec::new();
        for t in self.tensors() {
            let v = if trainable {
                tape.leaf(t.clone())?
            } else {
                tape.constant(t.clone())?
            };
            vars.push(v);
        }
        Ok(BoundHead::from_vars_unchecked(&self.config, vars))
    }
}

/// Tape handles for a [`HeadParams`], in visiting order.
#[derive(Debug, Clone)]
pub struct BoundHead {
    vars: Vec<Var>,
    observations: usize,
    correlation: bool,
}

impl BoundHead {
    fn from_vars_unchecked(config: &HeadConfig, vars: Vec<Var>) -> Self {
        BoundHead {
            vars,
            observations: config.observations,
            correlation: config.correlation,
        }
    }

    /// Wraps handles already on a tape, one per [`HeadParams::layout`] entry
    /// in order. Shapes are checked against the layout.
    pub fn from_vars<T: Scalar>(tape: &Tape<T>, config: &HeadConfig, vars: Vec<Var>) -> Result<Self> {
        let layout = HeadParams::<T>::layout(config);
        if layout.len() != vars.len() {
            return Err(Error::Contract(format!("{} handles for {} head tensors", vars.len(), layout.len())));
        }
        for ((name, _, shape), &v) in layout.iter().zip(&vars) {
            if tape.shape(v) != shape.as_slice() {
                return Err(Error::dim("BoundHead::from_vars", format!("{name}: {:?} vs {shape:?}", tape.shape(v))));
            }
        }
        Ok(Self::from_vars_unchecked(config, vars))
    }

    /// `[alpha, beta, gamma]` of observation `k`.
    pub fn observation(&self, k: usize) -> [Var; 3] {
        [self.vars[3 * k], self.vars[3 * k + 1], self.vars[3 * k + 2]]
    }

    pub fn observations(&self) -> usize {
        self.observations
    }

    pub fn queries(&self) -> Var {
        self.vars[3 * self.observations]
    }

    /// `(W^φ, b^φ)`.
    pub fn activity_output(&self) -> (Var, Var) {
        let base = 3 * self.observations;
        (self.vars[base + 1], self.vars[base + 2])
    }

    /// `(p^β, p^γ)`.
    pub fn correlation_projections(&self) -> Option<(Var, Var)> {
        let base = 3 * self.observations + 3;
        self.correlation.then(|| (self.vars[base], self.vars[base + 1]))
    }

    /// `(W^θ, b^θ)`.
    pub fn correlated_output(&self) -> Option<(Var, Var)> {
        let base = 3 * self.observations + 5;
        self.correlation.then(|| (self.vars[base], self.vars[base + 1]))
    }

    /// Every handle, in the same order as [`HeadParams::visit`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
