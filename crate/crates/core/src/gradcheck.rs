//! Central finite-difference checks of the hand-written backward passes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, l2_loss, linear_backward,
    linear_forward, relu_backward, relu_forward, tanh_backward, tanh_forward, BatchNormState, Mode,
};
use crate::models::{build_network, Network, NetworkSpec};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient vanishes are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;
/// Factor applied to the analytic gradient by a corrupted check.
pub const CORRUPTION: f64 = 1.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a kink lies within one step.
    pub excluded: Vec<usize>,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

/// Compares `analytic` against central differences of `objective` at
/// `point`, with step 1e-4 * max(1, |x|). When `pattern` is given, a
/// coordinate whose perturbation changes the pattern (e.g. ReLU signs) is
/// excluded and reported instead of compared.
pub fn finite_diff_check(
    objective: &mut dyn FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    tolerance: f64,
    mut pattern: Option<&mut dyn FnMut(&[f64]) -> Vec<bool>>,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded: Vec::new(),
        passed: false,
        diagnostic: None,
    };
    if analytic.len() != point.len() {
        report.diagnostic = Some(format!(
            "{} analytic entries for {} coordinates",
            analytic.len(),
            point.len()
        ));
        return report;
    }
    let base_pattern = pattern.as_mut().map(|p| p(point));
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let h = 1e-4 * point[i].abs().max(1.0);
        x[i] = point[i] + h;
        let plus = objective(&x);
        let kink_plus = pattern.as_mut().map(|p| p(&x));
        x[i] = point[i] - h;
        let minus = objective(&x);
        let kink_minus = pattern.as_mut().map(|p| p(&x));
        x[i] = point[i];
        if base_pattern.is_some() && (kink_plus != base_pattern || kink_minus != base_pattern) {
            report.excluded.push(i);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            report.diagnostic = Some(format!(
                "non-finite value at coordinate {i}: analytic {}, numeric {numeric}",
                analytic[i]
            ));
            report.worst_index = Some(i);
            return report;
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    if !report.passed {
        report.diagnostic = Some(format!(
            "relative error {:.3e} at coordinate {} exceeds {tolerance:.1e}",
            report.max_rel_error,
            report.worst_index.unwrap_or(0)
        ));
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Conv2d,
    BatchNorm,
    Relu,
    Tanh,
    Linear,
    L2Loss,
    Cnn3,
}

impl Primitive {
    pub const ALL: [Primitive; 7] = [
        Primitive::Conv2d,
        Primitive::BatchNorm,
        Primitive::Relu,
        Primitive::Tanh,
        Primitive::Linear,
        Primitive::L2Loss,
        Primitive::Cnn3,
    ];
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Primitive::Conv2d => "conv2d",
            Primitive::BatchNorm => "batchnorm",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Linear => "linear",
            Primitive::L2Loss => "l2_loss",
            Primitive::Cnn3 => "cnn3",
        })
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv" | "conv2d" => Ok(Primitive::Conv2d),
            "bn" | "batchnorm" => Ok(Primitive::BatchNorm),
            "relu" => Ok(Primitive::Relu),
            "tanh" => Ok(Primitive::Tanh),
            "linear" => Ok(Primitive::Linear),
            "loss" | "l2" | "l2_loss" => Ok(Primitive::L2Loss),
            "cnn" | "cnn3" => Ok(Primitive::Cnn3),
            other => Err(Error::param(format!("unknown layer primitive '{other}'"))),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(shape: Shape, data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).expect("slice length matches shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// A scalar test problem over a flat coordinate vector.
struct Problem {
    point: Vec<f64>,
    /// Coordinates [start, end) that hold the corrupted parameter gradient.
    weight_range: (usize, usize),
    objective: Box<dyn FnMut(&[f64]) -> f64>,
    gradient: Box<dyn FnMut(&[f64]) -> Vec<f64>>,
    pattern: Option<Box<dyn FnMut(&[f64]) -> Vec<bool>>>,
}

fn conv_problem(rng: &mut ChaCha8Rng) -> Problem {
    let xs: Shape = [1, 2, 5, 5];
    let ks: Shape = [3, 2, 3, 3];
    let (nx, nk, nb) = (numel(xs), numel(ks), 3);
    let point = [uniform(rng, nx, -1.0, 1.0), uniform(rng, nk, -0.5, 0.5), uniform(rng, nb, -0.2, 0.2)].concat();
    let r = uniform(rng, 3 * 25, -1.0, 1.0);
    let split = move |v: &[f64]| (tensor(xs, &v[..nx]), tensor(ks, &v[nx..nx + nk]), v[nx + nk..].to_vec());
    let r2 = r.clone();
    Problem {
        point,
        weight_range: (nx, nx + nk),
        objective: Box::new(move |v| {
            let (x, k, b) = split(v);
            dot(conv2d_forward(&x, &k, Some(&b)).unwrap().data(), &r)
        }),
        gradient: Box::new(move |v| {
            let (x, k, _) = split(v);
            let up = tensor([1, 3, 5, 5], &r2);
            let (gx, gk, gb) = conv2d_backward(&up, &x, &k).unwrap();
            [gx.into_data(), gk.into_data(), gb].concat()
        }),
        pattern: None,
    }
}

fn batchnorm_problem(rng: &mut ChaCha8Rng) -> Problem {
    let xs: Shape = [2, 2, 3, 3];
    let nx = numel(xs);
    let point = [uniform(rng, nx, -1.0, 1.0), uniform(rng, 2, 0.5, 1.5), uniform(rng, 2, -0.5, 0.5)].concat();
    let r = uniform(rng, nx, -1.0, 1.0);
    let state = move |v: &[f64]| {
        let mut st = BatchNormState::<f64>::new(2);
        st.gamma.value.data_mut().copy_from_slice(&v[nx..nx + 2]);
        st.beta.value.data_mut().copy_from_slice(&v[nx + 2..]);
        (tensor(xs, &v[..nx]), st)
    };
    let r2 = r.clone();
    Problem {
        point,
        weight_range: (nx, nx + 2),
        objective: Box::new(move |v| {
            let (x, mut st) = state(v);
            dot(batchnorm_forward(&x, &mut st, Mode::Training).unwrap().0.data(), &r)
        }),
        gradient: Box::new(move |v| {
            let (x, mut st) = state(v);
            let (_, cache) = batchnorm_forward(&x, &mut st, Mode::Training).unwrap();
            let (gx, gg, gb) = batchnorm_backward(&tensor(xs, &r2), cache.as_ref(), &mut st).unwrap();
            [gx.into_data(), gg, gb].concat()
        }),
        pattern: None,
    }
}

fn elementwise_problem(rng: &mut ChaCha8Rng, relu: bool) -> Problem {
    let xs: Shape = [2, 3, 4, 4];
    let n = numel(xs);
    let point = uniform(rng, n, -1.0, 1.0);
    let r = uniform(rng, n, -1.0, 1.0);
    let r2 = r.clone();
    let forward = move |x: &Tensor<f64>| if relu { relu_forward(x) } else { tanh_forward(x) };
    Problem {
        point,
        weight_range: (0, 0),
        objective: Box::new(move |v| dot(forward(&tensor(xs, v)).data(), &r)),
        gradient: Box::new(move |v| {
            let x = tensor(xs, v);
            let up = tensor(xs, &r2);
            let g = if relu {
                relu_backward(&up, &x)
            } else {
                tanh_backward(&up, &tanh_forward(&x))
            };
            g.unwrap().into_data()
        }),
        pattern: relu.then(|| Box::new(move |v: &[f64]| v.iter().map(|x| *x > 0.0).collect()) as Box<_>),
    }
}

fn linear_problem(rng: &mut ChaCha8Rng) -> Problem {
    let xs: Shape = [3, 5, 1, 1];
    let ws: Shape = [4, 5, 1, 1];
    let (nx, nw) = (numel(xs), numel(ws));
    let point = [uniform(rng, nx, -1.0, 1.0), uniform(rng, nw, -1.0, 1.0), uniform(rng, 4, -0.5, 0.5)].concat();
    let r = uniform(rng, 12, -1.0, 1.0);
    let split = move |v: &[f64]| (tensor(xs, &v[..nx]), tensor(ws, &v[nx..nx + nw]), v[nx + nw..].to_vec());
    let r2 = r.clone();
    Problem {
        point,
        weight_range: (nx, nx + nw),
        objective: Box::new(move |v| {
            let (x, w, b) = split(v);
            dot(linear_forward(&x, &w, Some(&b)).unwrap().data(), &r)
        }),
        gradient: Box::new(move |v| {
            let (x, w, _) = split(v);
            let (gx, gw, gb) = linear_backward(&tensor([3, 4, 1, 1], &r2), &x, &w).unwrap();
            [gx.into_data(), gw.into_data(), gb].concat()
        }),
        pattern: None,
    }
}

fn loss_problem(rng: &mut ChaCha8Rng) -> Problem {
    let s: Shape = [2, 1, 4, 4];
    let n = numel(s);
    let point = uniform(rng, n, -1.0, 1.0);
    let target = uniform(rng, n, -1.0, 1.0);
    let t2 = target.clone();
    Problem {
        point,
        weight_range: (0, 0),
        objective: Box::new(move |v| l2_loss(&tensor(s, v), &tensor(s, &target)).unwrap().0),
        gradient: Box::new(move |v| l2_loss(&tensor(s, v), &tensor(s, &t2)).unwrap().1.into_data()),
        pattern: None,
    }
}

fn load_params(net: &mut Network<f64>, v: &[f64]) {
    let mut offset = 0;
    for p in net.parameters_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&v[offset..offset + n]);
        offset += n;
    }
}

fn cnn3_problem(rng: &mut ChaCha8Rng, seed: u64) -> Problem {
    let spec = NetworkSpec::dncnn(3, 1).with_features(4);
    let net: Network<f64> = build_network(&spec, seed).expect("valid spec");
    let xs: Shape = [2, 1, 6, 6];
    let nx = numel(xs);
    let mut params: Vec<f64> = Vec::new();
    for (_, p) in net.parameters() {
        params.extend_from_slice(p.value.data());
    }
    // move biases and batch-norm shifts off their zero initialization
    for v in params.iter_mut().filter(|v| **v == 0.0) {
        *v = rng.random_range(-0.1..0.1);
    }
    let first_weight = net.parameters()[0].1.value.len();
    let point = [uniform(rng, nx, -1.0, 1.0), params].concat();
    let r = uniform(rng, nx, -1.0, 1.0);
    let r2 = r.clone();
    let (mut a, mut b, mut c) = (net.clone(), net.clone(), net);
    Problem {
        point,
        weight_range: (nx, nx + first_weight),
        objective: Box::new(move |v| {
            load_params(&mut a, &v[nx..]);
            dot(a.forward(&tensor(xs, &v[..nx]), Mode::Training).unwrap().data(), &r)
        }),
        gradient: Box::new(move |v| {
            load_params(&mut b, &v[nx..]);
            b.zero_grad();
            b.forward(&tensor(xs, &v[..nx]), Mode::Training).unwrap();
            let gx = b.backward_with_input_grad(&tensor(xs, &r2)).unwrap();
            let mut g = gx.into_data();
            for (_, p) in b.parameters() {
                g.extend_from_slice(p.grad.data());
            }
            g
        }),
        pattern: Some(Box::new(move |v| {
            load_params(&mut c, &v[nx..]);
            c.activation_pattern(&tensor(xs, &v[..nx])).unwrap()
        })),
    }
}

fn problem(primitive: Primitive, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match primitive {
        Primitive::Conv2d => conv_problem(&mut rng),
        Primitive::BatchNorm => batchnorm_problem(&mut rng),
        Primitive::Relu => elementwise_problem(&mut rng, true),
        Primitive::Tanh => elementwise_problem(&mut rng, false),
        Primitive::Linear => linear_problem(&mut rng),
        Primitive::L2Loss => loss_problem(&mut rng),
        Primitive::Cnn3 => cnn3_problem(&mut rng, seed),
    }
}

/// Checks one primitive at a seeded random point. With `corrupt`, the
/// analytic gradient of its weights (or of its input, for weightless
/// primitives) is scaled by [`CORRUPTION`] as a negative control.
pub fn check_primitive(primitive: Primitive, seed: u64, tolerance: f64, corrupt: bool) -> GradCheckReport {
    let mut p = problem(primitive, seed);
    let mut analytic = (p.gradient)(&p.point);
    if corrupt {
        let (lo, hi) = match p.weight_range {
            (0, 0) => (0, analytic.len()),
            r => r,
        };
        analytic[lo..hi].iter_mut().for_each(|g| *g *= CORRUPTION);
    }
    let pattern = p.pattern.as_mut().map(|f| f.as_mut() as &mut dyn FnMut(&[f64]) -> Vec<bool>);
    finite_diff_check(p.objective.as_mut(), &analytic, &p.point, tolerance, pattern)
}

/// One primitive's results over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub primitive: Primitive,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

pub fn run_suite(seeds: &[u64], tolerance: f64, corrupt: Option<Primitive>) -> Vec<SuiteRow> {
    Primitive::ALL
        .iter()
        .map(|&primitive| {
            let mut row = SuiteRow {
                primitive,
                seeds: seeds.len(),
                max_rel_error: 0.0,
                checked: 0,
                excluded: 0,
                passed: true,
                diagnostic: None,
            };
            for &seed in seeds {
                let r = check_primitive(primitive, seed, tolerance, corrupt == Some(primitive));
                row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
                row.checked += r.checked;
                row.excluded += r.excluded.len();
                if !r.passed {
                    row.passed = false;
                    if row.diagnostic.is_none() {
                        row.diagnostic = r.diagnostic.map(|d| format!("seed {seed}: {d}"));
                    }
                }
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for p in Primitive::ALL {
            for seed in 0..3 {
                let r = check_primitive(p, seed, DEFAULT_TOLERANCE, false);
                assert!(r.passed, "{p} seed {seed}: {:?}", r.diagnostic);
                assert!(r.checked > 0);
            }
        }
    }

    #[test]
    fn loss_gradient_is_tight() {
        let r = check_primitive(Primitive::L2Loss, 11, 1e-6, false);
        assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn corrupted_kernel_gradient_fails() {
        let r = check_primitive(Primitive::Conv2d, 0, DEFAULT_TOLERANCE, true);
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.05);
    }

    #[test]
    fn relu_at_zero_is_excluded_not_failed() {
        let point = vec![-1.0, 0.0, 2.0, 0.0];
        let mut objective = |v: &[f64]| relu_forward(&tensor([1, 1, 1, 4], v)).data().iter().sum::<f64>();
        let analytic = relu_backward(&Tensor::full([1, 1, 1, 4], 1.0), &tensor([1, 1, 1, 4], &point))
            .unwrap()
            .into_data();
        let mut pattern = |v: &[f64]| v.iter().map(|x| *x > 0.0).collect::<Vec<bool>>();
        let r = finite_diff_check(&mut objective, &analytic, &point, 1e-4, Some(&mut pattern));
        assert!(r.passed);
        assert_eq!(r.excluded, vec![1, 3]);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn non_finite_objective_is_diagnosed() {
        let mut objective = |v: &[f64]| v[0].ln();
        let r = finite_diff_check(&mut objective, &[1.0], &[-1.0], 1e-4, None);
        assert!(!r.passed);
        assert!(r.diagnostic.unwrap().contains("non-finite"));
    }

    #[test]
    fn suite_reports_one_row_per_primitive() {
        let rows = run_suite(&[1], DEFAULT_TOLERANCE, Some(Primitive::Conv2d));
        assert_eq!(rows.len(), Primitive::ALL.len());
        assert!(!rows[0].passed);
        assert!(rows[1..].iter().all(|r| r.passed));
    }

    #[test]
    fn primitive_names_parse() {
        assert_eq!("conv".parse::<Primitive>().unwrap(), Primitive::Conv2d);
        assert!("pool".parse::<Primitive>().is_err());
    }
}
