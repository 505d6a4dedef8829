//! Finite-difference gradient oracles for every tape op, every distance
//! metric and the loss terms, shared by the `grad-check` command and the
//! test suite.

use crate::error::Result;
use crate::losses::{
    cross_entropy_rows, metric_rows, rotation_loss, supervised_loss, unlabeled_loss, DistanceMetric,
    UnlabeledBatch,
};
use crate::model::{ModelConfig, ModelState, ParamVars};
use crate::rng::Rng;
use crate::tensor::{grad_check, SumAxis, Tape, Tensor, Var};

/// Maximum relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub name: String,
    pub max_error: f64,
    pub cases: usize,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

#[derive(Clone, Copy)]
enum Dist {
    /// Uniform in [-1, 1] but at least 0.05 away from 0 (ReLU kink).
    Signed,
    /// Uniform in [0.2, 2].
    Positive,
}

fn tensor(rng: &mut Rng, shape: &[usize], dist: Dist) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match dist {
            Dist::Signed => {
                let v = rng.range(0.05, 1.0);
                if rng.bernoulli(0.5) {
                    v
                } else {
                    -v
                }
            }
            Dist::Positive => rng.range(0.2, 2.0),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ c ⊙ y` with a fixed random `c`, so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, c: &[f64]) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let cv = tape.constant(shape, c[..tape.value(y).len()].to_vec())?;
    let p = tape.mul(y, cv)?;
    tape.sum(p)
}

fn weights(rng: &mut Rng) -> Vec<f64> {
    (0..4096).map(|_| rng.range(-1.0, 1.0)).collect()
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn unary(f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static, c: Vec<f64>) -> Builder {
    Box::new(move |t, v| {
        let y = f(t, v[0])?;
        weighted_sum(t, y, &c)
    })
}

fn binary(f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var> + 'static, c: Vec<f64>) -> Builder {
    Box::new(move |t, v| {
        let y = f(t, v[0], v[1])?;
        weighted_sum(t, y, &c)
    })
}

/// One random instance of a named case.
fn case(name: &str, rng: &mut Rng) -> Option<(Builder, Vec<Tensor<f64>>)> {
    use Dist::*;
    let c = weights(rng);
    let mut t = |shape: &[usize], d: Dist| tensor(rng, shape, d);
    Some(match name {
        "matmul" => (binary(|t, a, b| t.matmul(a, b), c), vec![t(&[3, 4], Signed), t(&[4, 2], Signed)]),
        "add" => (binary(|t, a, b| t.add(a, b), c), vec![t(&[2, 3], Signed), t(&[2, 3], Signed)]),
        "add_row" => (binary(|t, a, b| t.add(a, b), c), vec![t(&[3, 4], Signed), t(&[4], Signed)]),
        "add_scalar" => (binary(|t, a, b| t.add(a, b), c), vec![t(&[3, 4], Signed), t(&[], Signed)]),
        "scale" => (unary(|t, x| t.scale(x, -1.7), c), vec![t(&[5], Signed)]),
        "conv2d" => (
            Box::new(move |tp: &mut Tape<f64>, v: &[Var]| {
                let y = tp.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                weighted_sum(tp, y, &c)
            }),
            vec![t(&[2, 2, 5, 5], Signed), t(&[3, 2, 3, 3], Signed), t(&[3], Signed)],
        ),
        "conv2d_strided" => (
            Box::new(move |tp: &mut Tape<f64>, v: &[Var]| {
                let y = tp.conv2d(v[0], v[1], None, 2, 0)?;
                weighted_sum(tp, y, &c)
            }),
            vec![t(&[1, 2, 7, 6], Signed), t(&[2, 2, 3, 2], Signed)],
        ),
        "relu" => (unary(|t, x| t.relu(x), c), vec![t(&[4, 5], Signed)]),
        "avg_pool2" => (unary(|t, x| t.avg_pool2(x), c), vec![t(&[2, 2, 4, 6], Signed)]),
        "global_avg_pool" => (unary(|t, x| t.global_avg_pool(x), c), vec![t(&[2, 3, 3, 4], Signed)]),
        "flatten" => (unary(|t, x| t.flatten(x), c), vec![t(&[2, 3, 2, 2], Signed)]),
        "log_softmax" => (unary(|t, x| t.log_softmax(x), c), vec![t(&[3, 5], Signed)]),
        "mul" => (binary(|t, a, b| t.mul(a, b), c), vec![t(&[2, 4], Signed), t(&[2, 4], Signed)]),
        "mul_row" => (binary(|t, a, b| t.mul(a, b), c), vec![t(&[3, 4], Signed), t(&[4], Signed)]),
        "sum" => (unary(|t, x| t.apply(crate::tensor::OpKind::Sum(SumAxis::All), &[x]), c), vec![t(&[3, 3], Signed)]),
        "sum_last" => (unary(|t, x| t.sum_last(x), c), vec![t(&[3, 4], Signed)]),
        "mean" => (unary(|t, x| t.mean(x), c), vec![t(&[2, 5], Signed)]),
        "l2_normalize" => (unary(|t, x| t.l2_normalize(x), c), vec![t(&[3, 4], Signed)]),
        "exp" => (unary(|t, x| t.exp(x), c), vec![t(&[6], Signed)]),
        "ln" => (unary(|t, x| t.ln(x, 1e-8), c), vec![t(&[6], Positive)]),
        "sqrt" => (unary(|t, x| t.sqrt(x), c), vec![t(&[6], Positive)]),
        "slice_rows" => (unary(|t, x| t.slice_rows(x, 1, 3), c), vec![t(&[4, 3], Signed)]),
        "cross_entropy" => (
            Box::new(|tp: &mut Tape<f64>, v: &[Var]| supervised_loss(tp, &[2, 0, 1], v[0])),
            vec![t(&[3, 4], Signed)],
        ),
        "rotation_loss" => (
            Box::new(|tp: &mut Tape<f64>, v: &[Var]| rotation_loss(tp, v[0], &[0, 1, 2, 3, 0, 1, 2, 3])),
            vec![t(&[8, 4], Signed)],
        ),
        "unlabeled_loss" => {
            // weak logits are confident for rows 0 and 2 only
            let mut weak = t(&[4, 3], Signed);
            weak.data_mut()[0] = 8.0;
            weak.data_mut()[7] = 8.0;
            (
                Box::new(|tp: &mut Tape<f64>, v: &[Var]| {
                    let b = UnlabeledBatch { weak_logits: v[0], strong_logits: v[1], weak_proj: v[2], strong_proj: v[3] };
                    Ok(unlabeled_loss(tp, &b, 0.95, Some(DistanceMetric::CosineSimilarity), false)?.total)
                }),
                vec![weak, t(&[4, 3], Signed), t(&[4, 6], Signed), t(&[4, 6], Signed)],
            )
        }
        _ => {
            let m: DistanceMetric = name.strip_prefix("metric:")?.parse().ok()?;
            (
                Box::new(move |tp: &mut Tape<f64>, v: &[Var]| {
                    let r = metric_rows(tp, m, v[0], v[1])?;
                    weighted_sum(tp, r, &c)
                }),
                vec![t(&[2, 8], Signed), t(&[2, 8], Signed)],
            )
        }
    })
}

/// Names of every case the suite runs.
pub fn case_names() -> Vec<String> {
    let mut v: Vec<String> = [
        "matmul", "add", "add_row", "add_scalar", "scale", "conv2d", "conv2d_strided", "relu", "avg_pool2",
        "global_avg_pool", "flatten", "log_softmax", "mul", "mul_row", "sum", "sum_last", "mean", "l2_normalize",
        "exp", "ln", "sqrt", "slice_rows", "detach", "cross_entropy", "rotation_loss", "unlabeled_loss",
        "rotation_head",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(DistanceMetric::ALL.iter().map(|m| format!("metric:{m}")));
    v
}

/// Detach is a stop-gradient, so finite differences are not its oracle:
/// check instead that its value is the identity and that no gradient
/// reaches the input. Returns 0 on success, infinity otherwise.
fn detach_check(rng: &mut Rng) -> Result<f64> {
    let x = tensor(rng, &[3, 2], Dist::Signed).with_grad();
    let mut t = Tape::<f64>::new();
    let v = t.leaf(&x);
    let d = t.detach(v)?;
    let sq = t.mul(d, d)?;
    let s = t.sum(sq)?;
    t.backward(s)?;
    let same = t.value(d) == x.data();
    let no_grad = t.grad(v).is_none_or(|g| g.iter().all(|&g| g == 0.0));
    Ok(if same && no_grad { 0.0 } else { f64::INFINITY })
}

/// CE of rotation logits with respect to the rotation head and its input.
fn rotation_head_check(rng: &mut Rng, seed: u64) -> Result<f64> {
    let cfg = ModelConfig { num_classes: 2, image_size: 8, width: 1, proj_dim: 2, ..ModelConfig::default() };
    let state = ModelState::init(&cfg, seed)?;
    let names: Vec<&str> = ["rot.w1", "rot.b1", "rot.w2", "rot.b2"].to_vec();
    let mut leaves: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| {
            let p = state.param(n).expect("rotation head parameter");
            let mut t = p.cast::<f64>();
            // zero-initialized biases are perturbed so they are exercised
            t.data_mut().iter_mut().for_each(|v| *v += rng.range(-0.3, 0.3));
            t
        })
        .collect();
    let feat = tensor(rng, &[4, cfg.feat_channels()], Dist::Signed);
    leaves.push(feat);
    let positions: Vec<usize> = names
        .iter()
        .map(|n| state.names().iter().position(|m| m == n).expect("known"))
        .collect();
    grad_check(
        |tp, v| {
            // all parameters as constants, then swap in the checked leaves
            let mut vars = state.bind(tp, false).vars().to_vec();
            for (&i, &leaf) in positions.iter().zip(v) {
                vars[i] = leaf;
            }
            let pv = ParamVars::from_vars(vars);
            let logits = state.rot_forward(tp, &pv, v[4])?;
            let ce = cross_entropy_rows(tp, logits, &[0, 1, 2, 3])?;
            tp.mean(ce)
        },
        &leaves,
        EPS,
    )
}

/// Runs every case for `seeds` random draws and reports the worst relative
/// error per case.
pub fn run_suite(seeds: usize) -> Result<Vec<OracleResult>> {
    let mut out = Vec::new();
    for name in case_names() {
        let mut worst = 0.0f64;
        for s in 0..seeds as u64 {
            let mut rng = Rng::new(crate::rng::derive_seed(s, &[name.len() as u64, name.as_bytes()[0] as u64]));
            let err = match name.as_str() {
                "detach" => detach_check(&mut rng)?,
                "rotation_head" => rotation_head_check(&mut rng, s)?,
                _ => {
                    let (builder, leaves) = case(&name, &mut rng).expect("every listed case is buildable");
                    grad_check(&*builder, &leaves, EPS)?
                }
            };
            worst = worst.max(err);
        }
        out.push(OracleResult { name, max_error: worst, cases: seeds });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_name_builds() {
        let mut rng = Rng::new(0);
        for n in case_names() {
            if n != "detach" && n != "rotation_head" {
                assert!(case(&n, &mut rng).is_some(), "{n}");
            }
        }
    }

    #[test]
    fn suite_passes_on_two_seeds() {
        for r in run_suite(2).unwrap() {
            assert!(r.passed(), "{} {}", r.name, r.max_error);
        }
    }
}
