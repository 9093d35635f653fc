//! Finite-difference verification of analytic gradients.
//!
//! [`grad_check`] compares the tape's backward pass against a central
//! finite-difference oracle on a random scalar projection of the op's
//! output: with a fixed direction tensor `R`, the scalar `L = sum(f(x) . R)`
//! has analytic gradient `backward(R)` and numeric gradient
//! `(L(x + h e_i) - L(x - h e_i)) / 2h` per coordinate. The two must agree
//! to `|a - n| / max(|a|, |n|, 1e-8) <= tolerance` at `h = 1e-5`.
//!
//! [`primitive_reports`] runs the check over every primitive op at fixed
//! seeds; composite blocks register their own checks next to their
//! definitions and the CLI aggregates everything.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{Activation, BnState, Mode};
use crate::tensor::NdArray;

/// Central-difference step mandated for every gradient check.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Which op or parameter group was checked.
    pub name: String,
    /// Worst relative disagreement across every input coordinate.
    pub max_rel_err: f64,
    /// Bound the disagreement was held to.
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max rel err {:>12.3e}  (tol {:.1e})  {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Relative disagreement between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Check `f`'s gradients with respect to every entry of `inputs`.
///
/// `f` must be deterministic: called repeatedly with perturbed copies of
/// the same inputs it must rebuild exactly the same computation (clone any
/// RNG it consumes per call).
pub fn grad_check<F>(name: &str, inputs: &[NdArray], tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    // Fixed projection direction derived from the check's name.
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| graph.leaf(x.clone())).collect();
    let y = f(&graph, &vars)?;
    let mut dir_rng = ChaCha8Rng::seed_from_u64(fnv1a(name) ^ 0x9e37_79b9_7f4a_7c15);
    let direction = NdArray::from_vec(
        y.shape(),
        (0..y.value().len()).map(|_| dir_rng.random_range(-1.0..1.0)).collect(),
    )?;
    let grads = graph.backward_seeded(&y, direction.clone())?;

    let project = |perturbed: &[NdArray]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|x| g.leaf(x.clone())).collect();
        let y = f(&g, &vars)?;
        Ok(y.value().data().iter().zip(direction.data()).map(|(&a, &b)| a * b).sum())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<NdArray> = inputs.to_vec();
    for (j, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&vars[j]);
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[j].data_mut()[i] = orig + FD_STEP;
            let lo_hi = project(&work)?;
            work[j].data_mut()[i] = orig - FD_STEP;
            let lo_lo = project(&work)?;
            work[j].data_mut()[i] = orig;
            let numeric = (lo_hi - lo_lo) / (2.0 * FD_STEP);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let e = rel_err(a, numeric);
            if !e.is_finite() {
                worst = f64::INFINITY;
            } else if e > worst {
                worst = e;
            }
        }
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, tolerance })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
    NdArray::from_vec(
        shape,
        (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .expect("shape/product mismatch")
}

/// Like [`random_tensor`] but keeps values away from 0, where the ReLU and
/// max-pool kinks would make finite differences meaningless.
fn random_tensor_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
    let mut t = random_tensor(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1 * if *v >= 0.0 { 1.0 } else { -1.0 };
        }
    }
    t
}

/// Run the finite-difference check over every primitive op.
pub fn primitive_reports(tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();

    let a = random_tensor(&mut rng, &[2, 3]);
    let b = random_tensor(&mut rng, &[2, 3]);
    out.push(grad_check("add", &[a.clone(), b.clone()], tolerance, |g, v| g.add(&v[0], &v[1]))?);
    out.push(grad_check("sub", &[a.clone(), b.clone()], tolerance, |g, v| g.sub(&v[0], &v[1]))?);
    out.push(grad_check("mul", &[a.clone(), b.clone()], tolerance, |g, v| g.mul(&v[0], &v[1]))?);
    out.push(grad_check("scale", &[a.clone()], tolerance, |g, v| g.scale(&v[0], -1.7))?);
    out.push(grad_check("exp", &[a.clone()], tolerance, |g, v| g.exp(&v[0]))?);

    for (name, act) in [
        ("gelu", Activation::Gelu),
        ("silu", Activation::Silu),
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
        ("softplus", Activation::Softplus),
    ] {
        let x = random_tensor_off_kink(&mut rng, &[2, 7]);
        out.push(grad_check(name, &[x], tolerance, move |g, v| g.activation(&v[0], act))?);
    }

    let x = random_tensor(&mut rng, &[3, 5]);
    out.push(grad_check("softmax", &[x], tolerance, |g, v| g.softmax(&v[0]))?);

    let x = random_tensor(&mut rng, &[2, 3, 4]);
    let w = random_tensor(&mut rng, &[5, 4]);
    let bias = random_tensor(&mut rng, &[5]);
    out.push(grad_check("linear", &[x, w, bias], tolerance, |g, v| {
        g.linear(&v[0], &v[1], &v[2])
    })?);

    let x = random_tensor(&mut rng, &[3, 6]);
    let gamma = random_tensor(&mut rng, &[6]);
    let beta = random_tensor(&mut rng, &[6]);
    out.push(grad_check("layer_norm", &[x, gamma, beta], tolerance, |g, v| {
        g.layer_norm(&v[0], &v[1], &v[2], 1e-5)
    })?);

    let x = random_tensor(&mut rng, &[2, 3, 4]);
    let gamma = random_tensor(&mut rng, &[3]);
    let beta = random_tensor(&mut rng, &[3]);
    out.push(grad_check("batch_norm_train", &[x.clone(), gamma.clone(), beta.clone()], tolerance, |g, v| {
        let mut state = BnState::new(3);
        g.batch_norm1d(&v[0], &v[1], &v[2], &mut state, Mode::Train, 0.1, 1e-5)
    })?);
    out.push(grad_check("batch_norm_eval", &[x, gamma, beta], tolerance, |g, v| {
        let mut state = BnState::new(3);
        state.running_mean = NdArray::from_vec(&[3], vec![0.2, -0.1, 0.4]).unwrap();
        state.running_var = NdArray::from_vec(&[3], vec![1.3, 0.8, 2.1]).unwrap();
        g.batch_norm1d(&v[0], &v[1], &v[2], &mut state, Mode::Eval, 0.1, 1e-5)
    })?);

    let x = random_tensor(&mut rng, &[2, 2, 12]);
    let w = random_tensor(&mut rng, &[3, 2, 4]);
    let bias = random_tensor(&mut rng, &[3]);
    out.push(grad_check("conv1d_s1", &[x.clone(), w.clone(), bias.clone()], tolerance, |g, v| {
        g.conv1d(&v[0], &v[1], &v[2], 1, 0)
    })?);
    out.push(grad_check("conv1d_s2_padded", &[x, w, bias], tolerance, |g, v| {
        g.conv1d(&v[0], &v[1], &v[2], 2, 1)
    })?);

    let x = random_tensor(&mut rng, &[2, 5, 3]);
    let w = random_tensor(&mut rng, &[3, 4]);
    let bias = random_tensor(&mut rng, &[3]);
    out.push(grad_check("depthwise_causal_conv1d", &[x, w, bias], tolerance, |g, v| {
        g.depthwise_causal_conv1d(&v[0], &v[1], &v[2])
    })?);

    let x = random_tensor_off_kink(&mut rng, &[2, 2, 9]);
    out.push(grad_check("max_pool1d", &[x], tolerance, |g, v| g.max_pool1d(&v[0], 3, 2))?);

    let x = random_tensor(&mut rng, &[2, 6]);
    out.push(grad_check("dropout", &[x], tolerance, |g, v| {
        // Clone a fixed RNG per call so every finite-difference evaluation
        // sees the identical mask.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        g.dropout(&v[0], 0.4, Mode::Train, &mut rng)
    })?);

    let x = random_tensor(&mut rng, &[2, 3, 5]);
    out.push(grad_check("mean_last", &[x], tolerance, |g, v| g.mean_last(&v[0]))?);
    let x = random_tensor(&mut rng, &[2, 5, 3]);
    out.push(grad_check("mean_over_len", &[x], tolerance, |g, v| g.mean_over_len(&v[0]))?);

    let a = random_tensor(&mut rng, &[2, 2, 4]);
    let b = random_tensor(&mut rng, &[2, 3, 4]);
    out.push(grad_check("concat_channels", &[a, b], tolerance, |g, v| {
        g.concat_channels(&[&v[0], &v[1]])
    })?);

    let x = random_tensor(&mut rng, &[2, 3, 4]);
    out.push(grad_check("to_time_major", &[x.clone()], tolerance, |g, v| g.to_time_major(&v[0]))?);
    let x = random_tensor(&mut rng, &[2, 4, 3]);
    out.push(grad_check("reverse_time", &[x], tolerance, |g, v| g.reverse_time(&v[0]))?);

    let x = random_tensor(&mut rng, &[2, 3, 4]);
    let s = random_tensor(&mut rng, &[2, 3]);
    out.push(grad_check("mul_channel", &[x, s], tolerance, |g, v| g.mul_channel(&v[0], &v[1]))?);

    let x = random_tensor(&mut rng, &[2, 3, 2]);
    let a = random_tensor(&mut rng, &[2, 4]);
    out.push(grad_check("outer_state", &[x.clone(), a], tolerance, |g, v| {
        g.outer_state(&v[0], &v[1])
    })?);
    let s = random_tensor(&mut rng, &[2, 3, 4]);
    out.push(grad_check("outer_seq", &[x, s], tolerance, |g, v| g.outer_seq(&v[0], &v[1]))?);

    Ok(out)
}
