//! Gradient verification catalog: one case per registered primitive,
//! each checked against central differences at random points.

use rand::RngExt;

use super::{
    finite_difference_check, Conv1dSpec, DiffError, Graph, NodeId, PadMode, ParamSet, Tensor,
};
use crate::rng::{self, Rng};

type Build = fn(&mut Graph<f64>) -> Result<NodeId, DiffError>;
type Sample = fn(&mut Rng) -> ParamSet<f64>;

/// One primitive under test: a random-point sampler and a scalar graph.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub sample: Sample,
    pub build: Build,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub points: usize,
    pub max_relative_error: f64,
}

fn uniform(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Values bounded away from zero (for kinks and poles).
fn away_from_zero(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.5);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn point(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// `Σ y ⊙ proj` so every output coordinate contributes a distinct weight.
fn project(g: &mut Graph<f64>, y: NodeId) -> Result<NodeId, DiffError> {
    let p = g.var("proj")?;
    let m = g.mul(y, p)?;
    g.sum(m)
}

fn unary_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("x", away_from_zero(rng, vec![3, 4])),
        ("proj", uniform(rng, vec![3, 4], -1.0, 1.0)),
    ])
}

fn positive_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("x", uniform(rng, vec![3, 4], 0.2, 2.0)),
        ("proj", uniform(rng, vec![3, 4], -1.0, 1.0)),
    ])
}

fn binary_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("a", uniform(rng, vec![3, 4], -1.0, 1.0)),
        ("b", away_from_zero(rng, vec![3, 4])),
        ("proj", uniform(rng, vec![3, 4], -1.0, 1.0)),
    ])
}

fn matrix_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("a", uniform(rng, vec![3, 4], -1.0, 1.0)),
        ("b", uniform(rng, vec![4, 5], -1.0, 1.0)),
        ("proj", uniform(rng, vec![3, 5], -1.0, 1.0)),
    ])
}

fn mm(g: &mut Graph<f64>, ta: bool, tb: bool) -> Result<NodeId, DiffError> {
    let (a, b) = (g.var("a")?, g.var("b")?);
    let a = if ta { g.transpose(a)? } else { a };
    let b = if tb { g.transpose(b)? } else { b };
    let y = g.matmul_t(a, b, ta, tb)?;
    project(g, y)
}

fn unary_build(g: &mut Graph<f64>, f: super::UnaryFn) -> Result<NodeId, DiffError> {
    let x = g.var("x")?;
    let y = g.unary(x, f)?;
    project(g, y)
}

fn binary_build(g: &mut Graph<f64>, f: super::BinaryFn) -> Result<NodeId, DiffError> {
    let (a, b) = (g.var("a")?, g.var("b")?);
    let y = g.binary(a, b, f)?;
    project(g, y)
}

fn conv_point(rng: &mut Rng) -> ParamSet<f64> {
    // 13 frames, 2 channels in, kernel 4 stride 2, 3 channels out -> 6 frames
    point(vec![
        ("x", uniform(rng, vec![13, 2], -1.0, 1.0)),
        ("w", uniform(rng, vec![8, 3], -1.0, 1.0)),
        ("bias", uniform(rng, vec![3], -1.0, 1.0)),
        ("proj", uniform(rng, vec![6, 3], -1.0, 1.0)),
    ])
}

fn conv_same_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("x", uniform(rng, vec![7, 2], -1.0, 1.0)),
        ("w", uniform(rng, vec![6, 3], -1.0, 1.0)),
        ("bias", uniform(rng, vec![3], -1.0, 1.0)),
        ("proj", uniform(rng, vec![7, 3], -1.0, 1.0)),
    ])
}

fn gru_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("gx", uniform(rng, vec![2, 9], -1.0, 1.0)),
        ("h", uniform(rng, vec![2, 3], -1.0, 1.0)),
        ("w", uniform(rng, vec![3, 9], -1.0, 1.0)),
        ("b", uniform(rng, vec![9], -1.0, 1.0)),
        ("proj", uniform(rng, vec![2, 3], -1.0, 1.0)),
    ])
}

fn lstm_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("gx", uniform(rng, vec![2, 12], -1.0, 1.0)),
        ("state", uniform(rng, vec![2, 6], -1.0, 1.0)),
        ("w", uniform(rng, vec![3, 12], -1.0, 1.0)),
        ("b", uniform(rng, vec![12], -1.0, 1.0)),
        ("proj", uniform(rng, vec![2, 6], -1.0, 1.0)),
    ])
}

fn broadcast_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("a", uniform(rng, vec![3, 4], -1.0, 1.0)),
        ("row", uniform(rng, vec![4], -1.0, 1.0)),
        ("col", away_from_zero(rng, vec![3])),
        ("proj", uniform(rng, vec![3, 4], -1.0, 1.0)),
    ])
}

fn reduce_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("x", uniform(rng, vec![3, 4], -1.0, 1.0)),
        ("p_rows", uniform(rng, vec![3], -1.0, 1.0)),
        ("p_cols", uniform(rng, vec![4], -1.0, 1.0)),
    ])
}

fn cos_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("a", uniform(rng, vec![3, 4], -1.0, 1.0)),
        ("b", uniform(rng, vec![5, 4], -1.0, 1.0)),
        ("proj", uniform(rng, vec![3, 5], -1.0, 1.0)),
    ])
}

fn cumsum_point(rng: &mut Rng) -> ParamSet<f64> {
    point(vec![
        ("x", uniform(rng, vec![6, 2], -1.0, 1.0)),
        ("proj", uniform(rng, vec![6, 2], -1.0, 1.0)),
    ])
}

/// Every primitive (and the row-wise log-sum-exp composite).
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    use super::{BinaryFn as B, UnaryFn as U};
    vec![
        PrimitiveCase {
            name: "matmul",
            sample: matrix_point,
            build: |g| mm(g, false, false),
        },
        PrimitiveCase {
            name: "matmul_ta",
            sample: matrix_point,
            build: |g| mm(g, true, false),
        },
        PrimitiveCase {
            name: "matmul_tb",
            sample: matrix_point,
            build: |g| mm(g, false, true),
        },
        PrimitiveCase {
            name: "conv1d_strided",
            sample: conv_point,
            build: |g| {
                let (x, w, b) = (g.var("x")?, g.var("w")?, g.var("bias")?);
                let y = g.conv1d(x, w, Some(b), Conv1dSpec::downsampling(4, 2))?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "conv1d_replicate",
            sample: conv_same_point,
            build: |g| {
                let (x, w, b) = (g.var("x")?, g.var("w")?, g.var("bias")?);
                let y = g.conv1d(x, w, Some(b), Conv1dSpec::same(3, PadMode::Replicate))?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "gru_step",
            sample: gru_point,
            build: |g| {
                let (gx, h, w, b) = (g.var("gx")?, g.var("h")?, g.var("w")?, g.var("b")?);
                let y = g.gru_step(gx, h, w, b)?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "lstm_step",
            sample: lstm_point,
            build: |g| {
                let (gx, s, w, b) = (g.var("gx")?, g.var("state")?, g.var("w")?, g.var("b")?);
                let y = g.lstm_step(gx, s, w, b)?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "sigmoid",
            sample: unary_point,
            build: |g| unary_build(g, U::Sigmoid),
        },
        PrimitiveCase {
            name: "tanh",
            sample: unary_point,
            build: |g| unary_build(g, U::Tanh),
        },
        PrimitiveCase {
            name: "relu",
            sample: unary_point,
            build: |g| unary_build(g, U::Relu),
        },
        PrimitiveCase {
            name: "exp",
            sample: unary_point,
            build: |g| unary_build(g, U::Exp),
        },
        PrimitiveCase {
            name: "log",
            sample: positive_point,
            build: |g| unary_build(g, U::Log),
        },
        PrimitiveCase {
            name: "add",
            sample: binary_point,
            build: |g| binary_build(g, B::Add),
        },
        PrimitiveCase {
            name: "sub",
            sample: binary_point,
            build: |g| binary_build(g, B::Sub),
        },
        PrimitiveCase {
            name: "mul",
            sample: binary_point,
            build: |g| binary_build(g, B::Mul),
        },
        PrimitiveCase {
            name: "div",
            sample: binary_point,
            build: |g| binary_build(g, B::Div),
        },
        PrimitiveCase {
            name: "scale_shift",
            sample: unary_point,
            build: |g| {
                let x = g.var("x")?;
                let y = g.scale(x, -1.7)?;
                let y = g.shift(y, 0.3)?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "add_row",
            sample: broadcast_point,
            build: |g| {
                let (a, r) = (g.var("a")?, g.var("row")?);
                let y = g.add_row(a, r)?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "add_col",
            sample: broadcast_point,
            build: |g| {
                let (a, c) = (g.var("a")?, g.var("col")?);
                let y = g.add_col(a, c)?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "div_col",
            sample: broadcast_point,
            build: |g| {
                let (a, c) = (g.var("a")?, g.var("col")?);
                let y = g.div_col(a, c)?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "reductions",
            sample: reduce_point,
            build: |g| {
                let x = g.var("x")?;
                let rows = g.sum_rows(x)?;
                let cols = g.sum_cols(x)?;
                let pr = g.var("p_rows")?;
                let pc = g.var("p_cols")?;
                let r = g.mul(rows, pr)?;
                let c = g.mul(cols, pc)?;
                let r = g.sum(r)?;
                let c = g.mean(c)?;
                let sq = g.mul(x, x)?;
                let all = g.mean(sq)?;
                let t = g.add(r, c)?;
                g.add(t, all)
            },
        },
        PrimitiveCase {
            name: "cumsum",
            sample: cumsum_point,
            build: |g| {
                let x = g.var("x")?;
                let y = g.cumsum(x)?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "cosine_similarity",
            sample: cos_point,
            build: |g| {
                let (a, b) = (g.var("a")?, g.var("b")?);
                let y = g.cosine_similarity(a, b)?;
                project(g, y)
            },
        },
        PrimitiveCase {
            name: "structure",
            sample: cumsum_point,
            build: |g| {
                // slice, concat, transpose, reshape and gather round trip
                let x = g.var("x")?;
                let top = g.slice_rows(x, 0, 2)?;
                let rest = g.slice_rows(x, 2, 6)?;
                let left = g.slice_cols(rest, 0, 1)?;
                let right = g.slice_cols(rest, 1, 2)?;
                let lr = g.concat_rows(&[left, right])?;
                let lr = g.reshape(lr, vec![4, 2])?;
                let y = g.concat_rows(&[top, lr])?;
                let y = g.transpose(y)?;
                let y = g.transpose(y)?;
                let picked = g.gather(y, vec![11, 0, 3, 3, 7, 5, 2, 8, 9, 10, 1, 4], vec![6, 2])?;
                project(g, picked)
            },
        },
        PrimitiveCase {
            name: "logsumexp_rows",
            sample: unary_point,
            build: |g| {
                let x = g.var("x")?;
                let y = g.logsumexp_rows(x)?;
                let p = g.var("proj")?;
                let p = g.slice_cols(p, 0, 1)?;
                let p = g.reshape(p, vec![3])?;
                let m = g.mul(y, p)?;
                g.sum(m)
            },
        },
    ]
}

/// Runs every primitive case at `points` random points.
pub fn check_primitives(
    points: usize,
    seed: u64,
    epsilon: f64,
) -> Result<Vec<CaseReport>, DiffError> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(i, case)| {
            let mut rng = rng::stream(seed, i as u64);
            let mut worst = 0.0f64;
            for _ in 0..points {
                let p = (case.sample)(&mut rng);
                worst = worst.max(finite_difference_check(&p, epsilon, case.build)?);
            }
            Ok(CaseReport {
                name: case.name,
                points,
                max_relative_error: worst,
            })
        })
        .collect()
}
