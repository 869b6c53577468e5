//! Minimal reverse-mode differentiation engine.
//!
//! The primitive set is closed: dense products, strided 1-D convolution,
//! gated recurrence steps (GRU and LSTM), sigmoid/tanh/relu/exp/log,
//! prefix sums along time, elementwise arithmetic, broadcasting adds and
//! divides, reductions, pairwise cosine similarity, and a handful of
//! structural ops (slices, concatenation, gather, reshape, transpose).
//! Everything the models need is composed from these.
//!
//! Graphs are built define-by-run: each op evaluates its forward value
//! when it is appended, so a [`Graph`] is always in topological order and
//! every shape error surfaces at construction.

mod graph;
mod tensor;
pub mod verify;

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use graph::{BinaryFn, Conv1dSpec, Gradients, Graph, NodeId, PadMode, UnaryFn};
pub use tensor::{Precision, Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("output node {node} is not scalar (shape {shape:?})")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("unbound input `{0}`")]
    Unbound(String),
    #[error("duplicate binding `{0}`")]
    Duplicate(String),
    #[error("{0}")]
    Contract(String),
}

/// Named tensors: model parameters or differentiable inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values.
    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Binds every tensor as a named differentiable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Result<(), DiffError> {
        for (name, t) in &self.tensors {
            graph.variable(name, t.clone())?;
        }
        Ok(())
    }
}

impl<T: Real> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

impl<T: Real> From<Gradients<T>> for ParamSet<T> {
    fn from(g: Gradients<T>) -> Self {
        Self {
            tensors: g.into_map(),
        }
    }
}

/// Builds the graph for `point`, evaluates the scalar output and returns
/// it with the gradient for every bound tensor.
pub fn value_and_grad<T, F>(point: &ParamSet<T>, build: F) -> Result<(T, ParamSet<T>), DiffError>
where
    T: Real,
    F: Fn(&mut Graph<T>) -> Result<NodeId, DiffError>,
{
    let mut g = Graph::new();
    point.bind(&mut g)?;
    let out = build(&mut g)?;
    let v = g.value(out);
    let value = v.item().ok_or_else(|| DiffError::NotScalar {
        node: out.index(),
        shape: v.shape().to_vec(),
    })?;
    let grads = g.backward(out)?;
    Ok((value, grads.into()))
}

fn eval_scalar<F>(point: &ParamSet<f64>, build: &F) -> Result<(f64, Vec<bool>), DiffError>
where
    F: Fn(&mut Graph<f64>) -> Result<NodeId, DiffError>,
{
    let mut g = Graph::new();
    point.bind(&mut g)?;
    let out = build(&mut g)?;
    let v = g.value(out);
    let y = v.item().ok_or_else(|| DiffError::NotScalar {
        node: out.index(),
        shape: v.shape().to_vec(),
    })?;
    Ok((y, g.relu_pattern()))
}

/// Relative error between an analytic and a numeric derivative, falling
/// back to absolute error when both are below `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs());
    if den < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / den
    }
}

const MIN_EPSILON: f64 = 1e-7;

/// Which coordinates a finite-difference check visits.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many random coordinates per tensor.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

/// Maximum relative error between reverse-mode gradients and central
/// differences over every coordinate of `point`. 64-bit only. Where a
/// ReLU changes branch within `±epsilon` the step is halved until
/// it does not (never below `1e-7`).
pub fn finite_difference_check<F>(
    point: &ParamSet<f64>,
    epsilon: f64,
    build: F,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph<f64>) -> Result<NodeId, DiffError>,
{
    finite_difference_check_with(point, epsilon, Coverage::All, build)
}

pub fn finite_difference_check_with<F>(
    point: &ParamSet<f64>,
    epsilon: f64,
    coverage: Coverage,
    build: F,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph<f64>) -> Result<NodeId, DiffError>,
{
    Ok(finite_difference_report(point, epsilon, coverage, build)?.max_relative_error)
}

/// The coordinate behind a check's maximum error.
#[derive(Debug, Clone, PartialEq)]
pub struct FdCoordinate {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Step actually used after any kink avoidance.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub worst: Option<FdCoordinate>,
    /// Scalar output at the checked point.
    pub value: f64,
    pub coordinates: usize,
    /// Coordinates whose step had to shrink to avoid a ReLU kink.
    pub shrunk: usize,
}

impl FdReport {
    /// Rounding noise of the worst coordinate's central difference,
    /// about `u |f| / (2 eps)` with `u` the f64 unit roundoff.
    pub fn roundoff_floor(&self) -> Option<f64> {
        self.worst.as_ref().map(|w| f64::EPSILON * self.value.abs() / (2.0 * w.epsilon))
    }
}

/// [`finite_difference_check_with`] with the worst coordinate attached.
pub fn finite_difference_report<F>(
    point: &ParamSet<f64>,
    epsilon: f64,
    coverage: Coverage,
    build: F,
) -> Result<FdReport, DiffError>
where
    F: Fn(&mut Graph<f64>) -> Result<NodeId, DiffError>,
{
    if !(MIN_EPSILON..=1e-4).contains(&epsilon) {
        return Err(DiffError::Contract(format!(
            "epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let (_, grads) = value_and_grad(point, &build)?;
    let (value, base_pattern) = eval_scalar(point, &build)?;
    let mut report = FdReport { max_relative_error: 0.0, worst: None, value, coordinates: 0, shrunk: 0 };
    let mut probe = point.clone();
    for (name, t) in point.iter() {
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..t.len()).collect(),
            Coverage::Sample { per_tensor, seed } => {
                if t.len() <= per_tensor {
                    (0..t.len()).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_name(name));
                    (0..per_tensor)
                        .map(|_| rng.random_range(0..t.len()))
                        .collect()
                }
            }
        };
        let analytic = grads.get(name).expect("gradient for every bound tensor");
        for i in coords {
            let orig = t.data()[i];
            let mut eps = epsilon;
            let numeric = loop {
                probe.get_mut(name).expect("bound")[i] = orig + eps;
                let (plus, pp) = eval_scalar(&probe, &build)?;
                probe.get_mut(name).expect("bound")[i] = orig - eps;
                let (minus, pm) = eval_scalar(&probe, &build)?;
                probe.get_mut(name).expect("bound")[i] = orig;
                // a ReLU switching inside the stencil makes the quotient
                // meaningless; shrink the step until it stays on one piece
                if (pp == base_pattern && pm == base_pattern) || eps / 2.0 < MIN_EPSILON {
                    break (plus - minus) / (2.0 * eps);
                }
                eps /= 2.0;
            };
            report.coordinates += 1;
            report.shrunk += (eps < epsilon) as usize;
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some(FdCoordinate { tensor: name.clone(), index: i, analytic: a, numeric, epsilon: eps });
            }
        }
    }
    Ok(report)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl<T: Real> std::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data()[i]
    }
}

impl<T: Real> std::ops::IndexMut<usize> for Tensor<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data_mut()[i]
    }
}
