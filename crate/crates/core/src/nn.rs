//! Reusable building blocks of the head: grouped linear projections,
//! single-query dot-product attention, inverted dropout and initialisation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Checks that `groups` splits both channel counts evenly.
pub fn check_grouping(in_channels: usize, out_channels: usize, groups: usize) -> Result<()> {
    if in_channels == 0 || out_channels == 0 || groups == 0 {
        return Err(Error::dim(
            "group_linear",
            format!("channels and groups must be positive (in {in_channels}, out {out_channels}, groups {groups})"),
        ));
    }
    if !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
        return Err(Error::dim(
            "group_linear",
            format!("{groups} groups do not divide in {in_channels} / out {out_channels}"),
        ));
    }
    Ok(())
}

/// Block-diagonal linear map: channels are split into `groups` contiguous
/// groups and each group gets its own `(out/groups) × (in/groups)` block.
///
/// Weights are stored as one `[groups, out/groups, in/groups]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLinear<T: Scalar = f32> {
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    weights: Tensor<T>,
}

impl<T: Scalar> GroupLinear<T> {
    pub fn new(in_channels: usize, out_channels: usize, groups: usize, weights: Tensor<T>) -> Result<Self> {
        check_grouping(in_channels, out_channels, groups)?;
        let expected = Self::weight_shape(in_channels, out_channels, groups);
        if weights.shape() != expected {
            return Err(Error::shapes("GroupLinear::new", weights.shape(), &expected));
        }
        Ok(GroupLinear {
            in_channels,
            out_channels,
            groups,
            weights,
        })
    }

    /// Uniform fan-in initialisation, fan-in being the per-group input width.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, groups: usize, rng: &mut R) -> Result<Self> {
        check_grouping(in_channels, out_channels, groups)?;
        let shape = Self::weight_shape(in_channels, out_channels, groups);
        let weights = init_params(&shape, in_channels / groups, rng)?;
        Self::new(in_channels, out_channels, groups, weights)
    }

    pub fn weight_shape(in_channels: usize, out_channels: usize, groups: usize) -> [usize; 3] {
        [groups, out_channels / groups, in_channels / groups]
    }

    /// `in · out / groups`.
    pub fn param_count(in_channels: usize, out_channels: usize, groups: usize) -> usize {
        in_channels * out_channels / groups
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    /// The equivalent dense `[out × in]` matrix.
    pub fn block_diagonal(&self) -> Tensor<T> {
        let (bo, bi) = (self.out_channels / self.groups, self.in_channels / self.groups);
        let mut dense = Tensor::zeros(&[self.out_channels, self.in_channels]).expect("positive dims");
        let w = self.weights.data();
        for g in 0..self.groups {
            for r in 0..bo {
                for c in 0..bi {
                    let v = w[(g * bo + r) * bi + c];
                    dense
                        .set(&[g * bo + r, g * bi + c], v)
                        .expect("in range");
                }
            }
        }
        dense
    }
}

/// Applies grouped weights `[groups, out/groups, in/groups]` to `x[in × M]`.
///
/// Row-group `g` of `x` is multiplied by block `g`; the products are
/// concatenated along the channel axis. Differentiable in both inputs.
pub fn group_linear_forward<T: Scalar>(tape: &mut Tape<T>, weights: Var, x: Var) -> Result<Var> {
    let ws = tape.shape(weights).to_vec();
    if ws.len() != 3 {
        return Err(Error::dim("group_linear", format!("weights must be rank 3, got {ws:?}")));
    }
    let (groups, block_in) = (ws[0], ws[2]);
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[0] != groups * block_in {
        return Err(Error::dim(
            "group_linear",
            format!("input {xs:?} does not have {} rows for weights {ws:?}", groups * block_in),
        ));
    }
    let mut parts = Vec::with_capacity(groups);
    for g in 0..groups {
        let xg = if groups == 1 { x } else { tape.narrow(x, 0, g * block_in, block_in)? };
        let wg = tape.slice(weights, 0, g)?;
        parts.push(tape.matmul(wg, xg)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 0)
    }
}

/// Single-query dot-product attention over positions.
///
/// The query is the last position (column `M - 1`) of `beta_proj`; the
/// result is `softmax(qᵀ · gamma_proj)` over the `M` positions, shape `[1 × M]`.
/// Logits are not scaled by `1/√C'`.
pub fn attention_row<T: Scalar>(tape: &mut Tape<T>, beta_proj: Var, gamma_proj: Var) -> Result<Var> {
    let (bs, gs) = (tape.shape(beta_proj).to_vec(), tape.shape(gamma_proj).to_vec());
    if bs.len() != 2 || bs != gs {
        return Err(Error::shapes("attention_row", &bs, &gs));
    }
    let query = tape.narrow(beta_proj, 1, bs[1] - 1, 1)?;
    attention_from_query(tape, query, gamma_proj)
}

/// `softmax(queryᵀ · keys)` for a `[C' × 1]` query and `[C' × M]` keys.
pub fn attention_from_query<T: Scalar>(tape: &mut Tape<T>, query: Var, keys: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(query).to_vec(), tape.shape(keys).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != 1 || qs[0] != ks[0] {
        return Err(Error::shapes("attention", &qs, &ks));
    }
    let qt = tape.transpose(query)?;
    let logits = tape.matmul(qt, keys)?;
    tape.softmax(logits, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    rate: f64,
    mode: Mode,
}

impl DropoutSpec {
    pub fn new(rate: f64, mode: Mode) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        Ok(DropoutSpec { rate, mode })
    }

    pub fn inference() -> Self {
        DropoutSpec {
            rate: 0.0,
            mode: Mode::Inference,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Inverted dropout: survivors are scaled by `1/(1 - rate)` at training time,
/// so inference is the identity.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(tape: &mut Tape<T>, x: Var, spec: DropoutSpec, rng: &mut R) -> Result<Var> {
    if spec.mode == Mode::Inference || spec.rate == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - spec.rate));
    let shape = tape.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.gen::<f64>() < spec.rate {
            T::zero()
        } else {
            keep
        }
    })?;
    let mask = tape.constant(mask)?;
    tape.mul(x, mask)
}

/// Uniform draws from `[-1/√fan_in, 1/√fan_in]`.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Contract("fan_in must be positive".into()));
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn apply(layer: &GroupLinear<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let w = tape.constant(layer.weights().clone()).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let out = group_linear_forward(&mut tape, w, xv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn single_group_is_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = GroupLinear::<f64>::init(6, 4, 1, &mut rng).unwrap();
        let x = random(&[6, 5], &mut rng);
        let dense = layer.weights().reshape(&[4, 6]).unwrap();
        assert_eq!(apply(&layer, &x), dense.matmul(&x).unwrap());
    }

    #[test]
    fn identity_blocks_pass_input_through() {
        let eye = Tensor::<f64>::eye(3).unwrap();
        let mut data = eye.data().to_vec();
        data.extend_from_slice(eye.data());
        let layer = GroupLinear::new(6, 6, 2, Tensor::new(vec![2, 3, 3], data).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[6, 4], &mut rng);
        assert_eq!(apply(&layer, &x), x);
    }

    #[test]
    fn construction_rejects_bad_grouping() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(GroupLinear::<f32>::init(6, 4, 4, &mut rng).is_err());
        assert!(GroupLinear::<f32>::init(8, 6, 4, &mut rng).is_err());
        assert!(GroupLinear::<f32>::new(8, 8, 2, Tensor::zeros(&[2, 4, 3]).unwrap()).is_err());
    }

    #[test]
    fn forward_rejects_wrong_row_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = GroupLinear::<f64>::init(8, 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let w = tape.constant(layer.weights().clone()).unwrap();
        let x = tape.constant(Tensor::zeros(&[6, 3]).unwrap()).unwrap();
        assert!(matches!(
            group_linear_forward(&mut tape, w, x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn param_count_matches_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (c, cp, n) in [(2048, 128, 32), (64, 32, 4), (12, 6, 3)] {
            let layer = GroupLinear::<f32>::init(c, cp, n, &mut rng).unwrap();
            assert_eq!(layer.num_params(), GroupLinear::<f32>::param_count(c, cp, n));
            assert_eq!(layer.num_params(), c * cp / n);
        }
    }

    #[test]
    fn attention_uniform_when_keys_constant() {
        let mut tape = Tape::<f64>::new();
        let beta = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3).unwrap()).unwrap();
        let gamma = tape.constant(Tensor::full(&[3, 4], 0.7).unwrap()).unwrap();
        let a = attention_row(&mut tape, beta, gamma).unwrap();
        assert_eq!(tape.shape(a), &[1, 4]);
        for &v in tape.value(a).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_closed_form_two_positions() {
        // q = last column of beta = [1, 0]; logits = q·gamma = first row of gamma.
        let mut tape = Tape::<f64>::new();
        let beta = tape.constant(Tensor::new(vec![2, 2], vec![5.0, 1.0, 5.0, 0.0]).unwrap()).unwrap();
        let gamma = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 3f64.ln(), 9.0, -9.0]).unwrap()).unwrap();
        let a = attention_row(&mut tape, beta, gamma).unwrap();
        let d = tape.value(a).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_hand_composed_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let beta = random(&[4, 5], &mut rng);
        let gamma = random(&[4, 5], &mut rng);
        let mut tape = Tape::<f64>::new();
        let b = tape.constant(beta.clone()).unwrap();
        let g = tape.constant(gamma.clone()).unwrap();
        let a = attention_row(&mut tape, b, g).unwrap();

        // Oracle: explicit last-column extraction, dot products and exp-normalise.
        let q: Vec<f64> = (0..4).map(|c| beta.get(&[c, 4]).unwrap()).collect();
        let logits: Vec<f64> = (0..5)
            .map(|m| (0..4).map(|c| q[c] * gamma.get(&[c, m]).unwrap()).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in tape.value(a).data().iter().zip(&exps) {
            assert!((got - e / total).abs() < 1e-12);
        }
        let wrong = tape_const(&mut tape, &[4, 4]);
        assert!(attention_row(&mut tape, b, wrong).is_err());
    }

    fn tape_const(tape: &mut Tape<f64>, shape: &[usize]) -> Var {
        tape.constant(Tensor::zeros(shape).unwrap()).unwrap()
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[10, 10], &mut rng)).unwrap();
        let y = dropout(&mut tape, x, DropoutSpec::new(0.5, Mode::Inference).unwrap(), &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = dropout(&mut tape, x, DropoutSpec::new(0.0, Mode::Training).unwrap(), &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(DropoutSpec::new(1.0, Mode::Training).is_err());
        assert!(DropoutSpec::new(-0.1, Mode::Training).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Each output is 0 or 2 with p = 1/2: mean 1, std 1 per element.
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[n], 1.0).unwrap()).unwrap();
        let y = dropout(&mut tape, x, DropoutSpec::new(0.5, Mode::Training).unwrap(), &mut rng).unwrap();
        let mean = tape.value(y).sum() / n as f64;
        let sigma = 1.0 / (n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn init_bounds_determinism_and_mean() {
        let draw = |seed| init_params::<f64, _>(&[100, 100], 100, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let t = draw(3);
        assert!(t.data().iter().all(|v| v.abs() <= 0.1));
        assert_eq!(t, draw(3));
        // Uniform on [-0.1, 0.1]: sd = 0.1/√3 per draw.
        let sigma = 0.1 / 3f64.sqrt() / (t.len() as f64).sqrt();
        assert!((t.sum() / t.len() as f64).abs() < 3.0 * sigma);
        assert!(init_params::<f64, _>(&[2], 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn layer_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer = GroupLinear::<f64>::init(8, 4, 2, &mut rng).unwrap();
        let params = vec![layer.weights().clone(), random(&[8, 5], &mut rng), random(&[8, 5], &mut rng)];
        let err = grad_check(
            |tape, v| {
                let beta = group_linear_forward(tape, v[0], v[1])?;
                let gamma = group_linear_forward(tape, v[0], v[2])?;
                let a = attention_row(tape, beta, gamma)?;
                let keys = tape.transpose(gamma)?;
                let o = tape.matmul(a, keys)?;
                let s = tape.sigmoid(o)?;
                tape.sum_all(s)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    proptest! {
        #[test]
        fn group_linear_equals_block_diagonal_matmul(
            groups in prop::sample::select(vec![1usize, 2, 4]),
            in_mult in 1usize..4,
            out_mult in 1usize..4,
            cols in 1usize..7,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, cp) = (groups * in_mult, groups * out_mult);
            let layer = GroupLinear::<f64>::init(c, cp, groups, &mut rng).unwrap();
            let x = random(&[c, cols], &mut rng);
            let got = apply(&layer, &x);
            let want = layer.block_diagonal().matmul(&x).unwrap();
            prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
            prop_assert_eq!(layer.num_params(), c * cp / groups);
        }

        #[test]
        fn attention_rows_are_distributions(
            channels in 1usize..6,
            positions in 1usize..10,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::<f64>::new();
            let b = tape.constant(Tensor::from_fn(&[channels, positions], |_| rng.gen_range(-5.0..5.0)).unwrap()).unwrap();
            let g = tape.constant(Tensor::from_fn(&[channels, positions], |_| rng.gen_range(-5.0..5.0)).unwrap()).unwrap();
            let a = attention_row(&mut tape, b, g).unwrap();
            let row = tape.value(a).data();
            prop_assert_eq!(row.len(), positions);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
