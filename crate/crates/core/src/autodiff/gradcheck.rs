//! Central finite-difference gradient checks (64-bit only).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::graph::{Graph, Var};
use super::kernels::NormKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default perturbation; balances truncation and round-off error in f64.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients of `build(graph, inputs)` against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every input element.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                node: "finite-difference probe".into(),
            });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

/// Result row of the per-op suite.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub trials: usize,
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Values bounded away from zero so kinks (relu, abs, max) are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced at least 0.05 apart, randomly permuted.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.5).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random projection head `sum(r * y)` so every output element gets a distinct cotangent.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.input(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

struct Case {
    name: &'static str,
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    build: Builder,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs: Box::new(inputs),
        build: Box::new(move |g, v| {
            let y = build(g, v)?;
            if g.value(y).numel() == 1 {
                Ok(y)
            } else {
                project(g, y, 7)
            }
        }),
    }
}

fn op_cases() -> Vec<Case> {
    vec![
        case(
            "conv2d",
            |r| vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case(
            "conv2d_strided",
            |r| vec![uniform(r, &[1, 2, 6, 6], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -1.0, 1.0)],
            |g, v| g.conv2d(v[0], v[1], None, 2, 1),
        ),
        case(
            "conv_transpose2d",
            |r| vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1),
        ),
        case(
            "upsample",
            |r| vec![uniform(r, &[1, 2, 3, 3], -1.0, 1.0)],
            |g, v| g.upsample_nearest(v[0], 2),
        ),
        case(
            "linear",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        case(
            "matmul",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        case(
            "batch_norm",
            |r| vec![uniform(r, &[3, 2, 2, 2], -1.0, 1.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)],
            |g, v| Ok(g.norm(v[0], v[1], v[2], NormKind::Batch, 1e-5)?.0),
        ),
        case(
            "instance_norm",
            |r| vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)],
            |g, v| Ok(g.norm(v[0], v[1], v[2], NormKind::Instance, 1e-5)?.0),
        ),
        case(
            "layer_norm",
            |r| vec![uniform(r, &[2, 2, 2, 3], -1.0, 1.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)],
            |g, v| Ok(g.norm(v[0], v[1], v[2], NormKind::Layer, 1e-5)?.0),
        ),
        case(
            "batch_norm_eval",
            |r| vec![uniform(r, &[2, 2, 2, 2], -1.0, 1.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)],
            |g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], 1e-5),
        ),
        case("relu", |r| vec![away_from_zero(r, &[3, 4])], |g, v| g.relu(v[0])),
        case("leaky_relu", |r| vec![away_from_zero(r, &[3, 4])], |g, v| g.leaky_relu(v[0], 0.2)),
        case("tanh", |r| vec![uniform(r, &[3, 4], -2.0, 2.0)], |g, v| g.tanh(v[0])),
        case("sigmoid", |r| vec![uniform(r, &[3, 4], -3.0, 3.0)], |g, v| g.sigmoid(v[0])),
        case("log_sigmoid", |r| vec![uniform(r, &[3, 4], -3.0, 3.0)], |g, v| g.log_sigmoid(v[0])),
        case("exp", |r| vec![uniform(r, &[3, 4], -1.0, 1.0)], |g, v| g.exp(v[0])),
        case("log", |r| vec![uniform(r, &[3, 4], 0.2, 2.0)], |g, v| g.log(v[0], 1e-12)),
        case("abs", |r| vec![away_from_zero(r, &[3, 4])], |g, v| g.abs(v[0])),
        case("square", |r| vec![uniform(r, &[3, 4], -1.0, 1.0)], |g, v| g.square(v[0])),
        case("cos", |r| vec![uniform(r, &[3, 4], -2.0, 2.0)], |g, v| g.cos(v[0])),
        case("magnitude", |r| vec![away_from_zero(r, &[3, 2])], |g, v| g.magnitude(v[0])),
        case("max_pool", |r| vec![distinct(r, &[1, 2, 4, 4])], |g, v| g.max_pool(v[0], 2)),
        case("avg_pool", |r| vec![uniform(r, &[1, 2, 4, 4], -1.0, 1.0)], |g, v| g.avg_pool(v[0], 2)),
        case(
            "add",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| g.add(v[0], v[1]),
        ),
        case(
            "sub",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| g.sub(v[0], v[1]),
        ),
        case(
            "mul",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            |g, v| g.mul(v[0], v[1]),
        ),
        case("add_scalar", |r| vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| g.add_scalar(v[0], 0.7)),
        case("scale", |r| vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| g.scale(v[0], -1.3)),
        case("swap_axes", |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |g, v| g.swap_axes(v[0], 1, 2)),
        case("reshape", |r| vec![uniform(r, &[2, 3, 2], -1.0, 1.0)], |g, v| g.reshape(v[0], &[3, 4])),
        case("sum", |r| vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| {
            let s = g.square(v[0])?;
            g.sum(s)
        }),
        case("mean", |r| vec![uniform(r, &[2, 3], -1.0, 1.0)], |g, v| {
            let s = g.square(v[0])?;
            g.mean(s)
        }),
        case("sum_trailing", |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |g, v| g.sum_trailing(v[0], 2)),
        case("max_trailing", |r| vec![distinct(r, &[2, 3, 4])], |g, v| g.max_trailing(v[0], 2)),
        case("index_select", |r| vec![uniform(r, &[2, 5], -1.0, 1.0)], |g, v| g.index_select(v[0], &[4, 0, 0, 2])),
        case("log_softmax", |r| vec![uniform(r, &[3, 4], -2.0, 2.0)], |g, v| g.log_softmax(v[0])),
        case("dft2", |r| vec![uniform(r, &[2, 4, 4], -1.0, 1.0)], |g, v| g.dft2(v[0])),
        case("dft2_odd", |r| vec![uniform(r, &[1, 3, 5], -1.0, 1.0)], |g, v| g.dft2(v[0])),
    ]
}

/// Finite-difference check of every differentiable op over `trials` random draws.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let inputs = (c.inputs)(&mut rng);
                let r = check_gradients(&c.build, &inputs, DEFAULT_EPS)?;
                worst = worst.max(r.max_rel_error);
            }
            Ok(OpCheck {
                name: c.name.to_string(),
                max_rel_error: worst,
                trials,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::scalar(1.0);
        let f = |g: &mut Graph<f64>, v: &[Var]| g.sum(v[0]);
        assert!(check_gradients(f, std::slice::from_ref(&x), 1e-2).is_err());
        assert!(check_gradients(f, &[x], 1e-8).is_err());
    }

    #[test]
    fn sum_of_squares_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform(&mut rng, &[4, 5], -2.0, 2.0);
        let r = check_gradients(
            |g, v| {
                let s = g.square(v[0])?;
                g.sum(s)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(r.checked, 20);
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn every_op_passes_finite_differences() {
        for row in op_suite(100, 11).unwrap() {
            assert!(row.max_rel_error < 1e-4, "{}: {:e}", row.name, row.max_rel_error);
        }
    }
}
