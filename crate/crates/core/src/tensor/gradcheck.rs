//! Central finite-difference checks of analytic gradients, run in `f64`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Graph, Tensor, Var};
use crate::{rng, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-3;

/// Error between analytic gradient `a` and numeric gradient `n`, relative to
/// `max(|a|, |n|, 1)` so vanishing gradients are compared absolutely.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Standard-normal tensor from a seeded stream.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| r.sample(StandardNormal)).collect(),
    }
}

/// Builds `build(inputs)`, reduces it to a scalar with fixed random weights
/// and returns the worst relative error over every input entry.
pub fn check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var>,
{
    let loss = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        let w = g.input(random_tensor(g.shape(out), seed ^ 0x5eed));
        let weighted = g.mul(out, w)?;
        let total = g.sum(weighted);
        let value = g.value(total)[0];
        if !want_grad {
            return Ok((value, vec![]));
        }
        let grads = g.backward(total);
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.get_or_zeros(v, x.numel()))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = loss(inputs, true)?;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data[j];
            xs[i].data[j] = orig + FD_STEP;
            let (up, _) = loss(&xs, false)?;
            xs[i].data[j] = orig - FD_STEP;
            let (down, _) = loss(&xs, false)?;
            xs[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Named single-op checks on random 5×4 inputs (other operands shaped to
/// fit). Returns `(op, worst relative error)` pairs.
pub fn core_op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let x = |s: u64, shape: &[usize]| random_tensor(shape, rng::derive_seed(seed, &[s]));
    let a = x(0, &[5, 4]);
    let b = x(1, &[5, 4]);
    let mut out = Vec::new();
    out.push((
        "matmul",
        check(&[a.clone(), x(2, &[4, 3])], seed, |g, v| g.matmul(v[0], v[1]))?,
    ));
    out.push((
        "bmm",
        check(&[x(3, &[2, 5, 4]), x(4, &[2, 4, 3])], seed, |g, v| g.bmm(v[0], v[1], false))?,
    ));
    out.push((
        "bmm_trans",
        check(&[x(5, &[2, 5, 4]), x(6, &[2, 3, 4])], seed, |g, v| g.bmm(v[0], v[1], true))?,
    ));
    out.push(("add", check(&[a.clone(), b.clone()], seed, |g, v| g.add(v[0], v[1]))?));
    out.push((
        "add_broadcast",
        check(&[a.clone(), x(7, &[4])], seed, |g, v| g.add(v[0], v[1]))?,
    ));
    out.push(("mul", check(&[a.clone(), b.clone()], seed, |g, v| g.mul(v[0], v[1]))?));
    out.push(("scale", check(&[a.clone()], seed, |g, v| Ok(g.scale(v[0], 0.37)))?));
    out.push(("softmax", check(&[a.clone()], seed, |g, v| Ok(g.softmax(v[0])))?));
    out.push((
        "layer_norm",
        check(&[a.clone(), x(8, &[4]), x(9, &[4])], seed, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        })?,
    ));
    out.push(("gelu", check(&[a.clone()], seed, |g, v| Ok(g.gelu(v[0])))?));
    out.push((
        "dropout",
        check(&[a.clone()], seed, |g, v| Ok(g.dropout(v[0], 0.3, true, 11)))?,
    ));
    out.push((
        "embedding",
        check(&[a.clone()], seed, |g, v| g.embedding(v[0], &[3, 0, 3, 4]))?,
    ));
    out.push((
        "concat",
        check(&[a.clone(), x(10, &[5, 2])], seed, |g, v| g.concat(&[v[0], v[1]], 1))?,
    ));
    out.push(("slice", check(&[a.clone()], seed, |g, v| g.slice(v[0], 1, 1, 2))?));
    out.push(("reshape", check(&[a.clone()], seed, |g, v| g.reshape(v[0], &[2, 10]))?));
    out.push((
        "permute",
        check(&[x(11, &[2, 5, 4])], seed, |g, v| g.permute(v[0], &[2, 0, 1]))?,
    ));
    out.push(("mse", check(&[a.clone(), b.clone()], seed, |g, v| g.mse(v[0], v[1]))?));
    out.push(("sum", check(&[a], seed, |g, v| Ok(g.sum(v[0])))?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn every_core_op_matches_finite_differences() {
        for (op, err) in core_op_suite(7).unwrap() {
            assert!(err < 1e-4, "{op}: {err:e}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn composed_ops_match_finite_differences(
            rows in 1usize..5, inner in 3usize..6, cols in 1usize..5, seed in any::<u64>()
        ) {
            let a = random_tensor(&[rows, inner], seed);
            // Layer norm is ill-conditioned for nearly constant rows.
            for row in a.data.chunks(inner) {
                let mean = row.iter().sum::<f64>() / inner as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / inner as f64;
                prop_assume!(var > 0.1);
            }
            let b = random_tensor(&[inner, cols], seed.wrapping_add(1));
            let gamma = random_tensor(&[inner], seed.wrapping_add(2));
            let beta = random_tensor(&[inner], seed.wrapping_add(3));
            let err = check(&[a, b, gamma, beta], seed, |g, v| {
                let y = g.layer_norm(v[0], v[2], v[3], 1e-5)?;
                let y = g.matmul(y, v[1])?;
                let y = g.gelu(y);
                Ok(g.softmax(y))
            }).unwrap();
            prop_assert!(err < 1e-4, "{err:e}");
        }
    }
}
