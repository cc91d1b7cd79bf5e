use super::{Graph, NumericsError, Tensor, Var};

/// Largest elementwise relative error between reverse-mode gradients and
/// central differences of `f` over every input tensor.
///
/// The relative error of one element is `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps)
}

/// Names of every differentiable primitive covered by [`op_suite`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "concat_rows",
    "slice",
    "relu",
    "softmax",
    "masked_softmax",
    "layernorm",
    "max_axis",
    "mean",
    "sum",
    "square",
    "sqrt",
    "l2_normalize",
    "gather_rows",
    "transpose",
    "reshape",
    "quat_to_mat",
    "chamfer",
];

/// Gradient-checks every primitive on `trials` random inputs each and returns
/// the worst relative error per op. Each op output is reduced to a scalar by a
/// random fixed weighting so every output element contributes.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<(&'static str, f64)>, NumericsError> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::new();
    for &name in OP_NAMES {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let mut rand_t = |shape: &[usize], lo: f64, hi: f64| {
                let n: usize = shape.iter().product();
                Tensor::new(
                    shape.to_vec(),
                    (0..n).map(|_| rng.random_range(lo..hi)).collect(),
                )
                .expect("shape")
            };
            let away_from_zero = |t: Tensor| {
                let shape = t.shape().to_vec();
                let d = t
                    .into_data()
                    .into_iter()
                    .map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
                    .collect();
                Tensor::new(shape, d).expect("shape")
            };
            let a = rand_t(&[3, 4], -1.0, 1.0);
            let b = rand_t(&[4, 2], -1.0, 1.0);
            let c = rand_t(&[3, 4], -1.0, 1.0);
            let pos = rand_t(&[3, 4], 0.5, 2.0);
            let pts_a = rand_t(&[6, 3], -1.0, 1.0);
            let pts_b = rand_t(&[5, 3], -1.0, 1.0);
            let q = rand_t(&[1, 4], -1.0, 1.0);
            let w34 = rand_t(&[3, 4], -1.0, 1.0);
            let w32 = rand_t(&[3, 2], -1.0, 1.0);
            let w38 = rand_t(&[3, 8], -1.0, 1.0);
            let w64 = rand_t(&[6, 4], -1.0, 1.0);
            let w33 = rand_t(&[3, 3], -1.0, 1.0);
            let w43 = rand_t(&[4, 3], -1.0, 1.0);
            let w12 = rand_t(&[12], -1.0, 1.0);
            let w22 = rand_t(&[3, 2], -1.0, 1.0);
            let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3 || i == 3).collect();

            fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var, NumericsError> {
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            }

            let err = match name {
                "matmul" => grad_check_many(
                    |g, v| {
                        let y = g.matmul(v[0], v[1])?;
                        weighted(g, y, &w32)
                    },
                    &[a.clone(), b.clone()],
                    1e-5,
                )?,
                "add" | "sub" | "mul" => grad_check_many(
                    |g, v| {
                        let y = match name {
                            "add" => g.add(v[0], v[1])?,
                            "sub" => g.sub(v[0], v[1])?,
                            _ => g.mul(v[0], v[1])?,
                        };
                        weighted(g, y, &w34)
                    },
                    &[a.clone(), c.clone()],
                    1e-5,
                )?,
                "scale" => grad_check(
                    |g, x| {
                        let y = g.scale(x, -1.7);
                        weighted(g, y, &w34)
                    },
                    &a,
                    1e-5,
                )?,
                "concat" => grad_check_many(
                    |g, v| {
                        let y = g.concat(&[v[0], v[1]])?;
                        weighted(g, y, &w38)
                    },
                    &[a.clone(), c.clone()],
                    1e-5,
                )?,
                "concat_rows" => grad_check_many(
                    |g, v| {
                        let y = g.concat_rows(&[v[0], v[1]])?;
                        weighted(g, y, &w64)
                    },
                    &[a.clone(), c.clone()],
                    1e-5,
                )?,
                "slice" => grad_check(
                    |g, x| {
                        let y = g.slice(x, 1, 2)?;
                        weighted(g, y, &w22)
                    },
                    &a,
                    1e-5,
                )?,
                "relu" => grad_check(
                    |g, x| {
                        let y = g.relu(x);
                        weighted(g, y, &w34)
                    },
                    &away_from_zero(a.clone()),
                    1e-5,
                )?,
                "softmax" => grad_check(
                    |g, x| {
                        let y = g.softmax(x);
                        weighted(g, y, &w34)
                    },
                    &a,
                    1e-5,
                )?,
                "masked_softmax" => grad_check(
                    |g, x| {
                        let y = g.masked_softmax(x, &mask)?;
                        weighted(g, y, &w34)
                    },
                    &a,
                    1e-5,
                )?,
                "layernorm" => grad_check(
                    |g, x| {
                        let y = g.layernorm(x, 1e-5);
                        weighted(g, y, &w34)
                    },
                    &a,
                    1e-5,
                )?,
                "max_axis" => grad_check(
                    |g, x| {
                        let r = g.reshape(x, &[3, 2, 2])?;
                        let y = g.max_axis(r, 1)?;
                        let y = g.reshape(y, &[3, 2])?;
                        weighted(g, y, &w32)
                    },
                    &a,
                    1e-5,
                )?,
                "mean" => grad_check(|g, x| Ok(g.mean(x)), &a, 1e-5)?,
                "sum" => grad_check(|g, x| Ok(g.sum(x)), &a, 1e-5)?,
                "square" => grad_check(
                    |g, x| {
                        let y = g.square(x);
                        weighted(g, y, &w34)
                    },
                    &a,
                    1e-5,
                )?,
                "sqrt" => grad_check(
                    |g, x| {
                        let y = g.sqrt(x);
                        weighted(g, y, &w34)
                    },
                    &pos,
                    1e-5,
                )?,
                "l2_normalize" => grad_check(
                    |g, x| {
                        let y = g.l2_normalize(x, 1e-12);
                        weighted(g, y, &w34)
                    },
                    &a,
                    1e-5,
                )?,
                "gather_rows" => grad_check(
                    |g, x| {
                        let y = g.gather_rows(x, &[2, 0, 2, 1, 0, 2])?;
                        weighted(g, y, &w64)
                    },
                    &a,
                    1e-5,
                )?,
                "transpose" => grad_check(
                    |g, x| {
                        let y = g.transpose(x)?;
                        weighted(g, y, &w43)
                    },
                    &a,
                    1e-5,
                )?,
                "reshape" => grad_check(
                    |g, x| {
                        let y = g.reshape(x, &[12])?;
                        weighted(g, y, &w12)
                    },
                    &a,
                    1e-5,
                )?,
                "quat_to_mat" => grad_check(
                    |g, x| {
                        let y = g.quat_to_mat(x)?;
                        weighted(g, y, &w33)
                    },
                    &q,
                    1e-5,
                )?,
                "chamfer" => grad_check_many(
                    |g, v| g.chamfer(v[0], v[1]),
                    &[pts_a.clone(), pts_b.clone()],
                    1e-5,
                )?,
                _ => unreachable!("unknown op {name}"),
            };
            worst = worst.max(err);
        }
        report.push((name, worst));
    }
    Ok(report)
}
