//! Central finite-difference gradient oracle.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, REL_FLOOR)`, where
//! `a` is the analytic and `n` the numerical derivative. The floor keeps
//! coordinates with vanishing gradients from dominating the report.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::{NumError, Tape, Tensor, Var};

pub const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-5;
/// Step for full-model checks. Attention projections have gradients near
/// 1e-6, where rounding in the difference quotient at smaller steps is
/// already comparable to the tolerance.
pub const MODEL_STEP: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_coord: Option<usize>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares a supplied gradient against central differences of `value`.
/// Only `coords` are perturbed when given, otherwise every coordinate.
pub fn compare_gradient<F>(
    name: &str,
    mut value: F,
    x: &Tensor,
    analytic: &[f64],
    h: f64,
    tol: f64,
    coords: Option<&[usize]>,
) -> GradCheckReport
where
    F: FnMut(&Tensor) -> f64,
{
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: coords.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_coord: None,
        tol,
        passed: true,
    };
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = value(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = value(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let mut rel = relative_error(analytic[i], numeric);
        if rel.is_nan() {
            rel = f64::INFINITY;
        }
        report.max_abs_err = report.max_abs_err.max((analytic[i] - numeric).abs());
        if report.worst_coord.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = Some(i);
        }
    }
    report.passed = report.max_rel_err <= tol;
    report
}

/// Checks the tape gradient of a scalar function of one tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, NumError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, NumError>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    tape.backward(loss)?;
    let analytic = xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let value = |probe: &Tensor| {
        let tape = Tape::new();
        let v = tape.param(probe.clone());
        f(&tape, v).map(|l| l.value().item()).unwrap_or(f64::NAN)
    };
    Ok(compare_gradient("x", value, x, analytic.data(), h, tol, None))
}

/// Checks a scalar function of many named tensors, one report per tensor.
///
/// With `max_coords = Some(k)`, each tensor larger than `k` is probed at `k`
/// coordinates drawn without replacement from `rng`.
pub fn check_params<F, R, E>(
    f: F,
    params: &[(String, Tensor)],
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<Vec<GradCheckReport>, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    R: Rng + ?Sized,
    E: From<NumError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, (_, t))| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(vars);
    drop(tape);

    let mut reports = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let coords: Option<Vec<usize>> = match max_coords {
            Some(k) if tensor.len() > k => {
                let mut c = sample(rng, tensor.len(), k).into_vec();
                c.sort_unstable();
                Some(c)
            }
            _ => None,
        };
        let value = |probe: &Tensor| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = params
                .iter()
                .enumerate()
                .map(|(j, (_, t))| tape.param(if j == pi { probe.clone() } else { t.clone() }))
                .collect();
            f(&tape, &vars).map(|l| l.value().item()).unwrap_or(f64::NAN)
        };
        reports.push(compare_gradient(
            name,
            value,
            tensor,
            grads[pi].data(),
            h,
            tol,
            coords.as_deref(),
        ));
    }
    Ok(reports)
}

type OpLoss = for<'t> fn(&'t Tape, &[Var<'t>], &[Tensor]) -> Result<Var<'t>, NumError>;

/// Scalar probe `sum(y * w)` with a fixed random weighting `w` of `y`'s shape.
fn probe<'t>(tape: &'t Tape, y: Var<'t>, w: &Tensor) -> Result<Var<'t>, NumError> {
    Ok(y.mul(tape.constant(w.clone()))?.sum())
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Vec<usize>, OpLoss)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], vec![3, 2], |t, v, w| {
            probe(t, v[0].matmul(v[1])?, &w[0])
        }),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], vec![3, 2], |t, v, w| {
            probe(t, v[0].matmul_nt(v[1])?, &w[0])
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], vec![2, 3], |t, v, w| {
            probe(t, v[0].add(v[1])?, &w[0])
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], vec![2, 3], |t, v, w| {
            probe(t, v[0].sub(v[1])?, &w[0])
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], vec![2, 3], |t, v, w| {
            probe(t, v[0].mul(v[1])?, &w[0])
        }),
        ("add_row", vec![vec![3, 4], vec![4]], vec![3, 4], |t, v, w| {
            probe(t, v[0].add_row(v[1])?, &w[0])
        }),
        ("scale", vec![vec![2, 3]], vec![2, 3], |t, v, w| {
            probe(t, v[0].scale(-1.7), &w[0])
        }),
        ("sigmoid", vec![vec![2, 3]], vec![2, 3], |t, v, w| {
            probe(t, v[0].sigmoid(), &w[0])
        }),
        ("tanh", vec![vec![2, 3]], vec![2, 3], |t, v, w| {
            probe(t, v[0].tanh(), &w[0])
        }),
        ("gelu", vec![vec![2, 3]], vec![2, 3], |t, v, w| {
            probe(t, v[0].gelu(), &w[0])
        }),
        (
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            vec![3, 5],
            |t, v, w| probe(t, v[0].layer_norm(v[1], v[2], 1e-5)?, &w[0]),
        ),
        ("softmax_rows", vec![vec![2, 4]], vec![2, 4], |t, v, w| {
            let mask = [true, false, true, true, true, true, false, true];
            probe(t, v[0].softmax_rows(Some(&mask))?, &w[0])
        }),
        ("segment_softmax", vec![vec![5, 2]], vec![5, 2], |t, v, w| {
            probe(t, v[0].segment_softmax(&[0, 1, 0, 1, 1])?, &w[0])
        }),
        ("concat_last", vec![vec![2, 3], vec![2, 2]], vec![2, 5], |t, v, w| {
            probe(t, v[0].concat_last(v[1])?, &w[0])
        }),
        ("gather_rows", vec![vec![3, 2]], vec![4, 2], |t, v, w| {
            probe(t, v[0].gather_rows(&[2, 0, 2, 1])?, &w[0])
        }),
        ("scatter_add_rows", vec![vec![4, 2]], vec![3, 2], |t, v, w| {
            probe(t, v[0].scatter_add_rows(&[1, 1, 0, 2], 3)?, &w[0])
        }),
        ("head_dot", vec![vec![3, 4], vec![3, 4]], vec![3, 2], |t, v, w| {
            probe(t, v[0].head_dot(v[1], 2)?, &w[0])
        }),
        ("head_scale", vec![vec![3, 4], vec![3, 2]], vec![3, 4], |t, v, w| {
            probe(t, v[0].head_scale(v[1])?, &w[0])
        }),
        ("mean", vec![vec![2, 3]], vec![], |_, v, _| Ok(v[0].gelu().mean())),
        ("bce_with_logits", vec![vec![4]], vec![], |_, v, _| {
            v[0].bce_with_logits(&[1.0, 0.0, 1.0, 0.0], Some(&[1.0, 1.0, 0.0, 2.0]))
        }),
        ("softmax_cross_entropy", vec![vec![3, 4]], vec![], |_, v, _| {
            v[0].softmax_cross_entropy(&[0, 3, 1])
        }),
        ("mse", vec![vec![4]], vec![], |_, v, _| {
            v[0].mse(&[0.5, -1.0, 2.0, 0.0], Some(&[1.0, 0.0, 1.0, 1.0]))
        }),
    ]
}

/// Central-difference check of every differentiable tape operation on
/// seeded random inputs, one report per operation input.
pub fn op_suite<R: Rng + ?Sized>(h: f64, tol: f64, rng: &mut R) -> Result<Vec<GradCheckReport>, NumError> {
    let mut reports = Vec::new();
    for (name, shapes, out_shape, loss) in op_cases() {
        let inputs: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("{name}[{i}]"), Tensor::normal(s, 1.0, rng)))
            .collect();
        let weights = vec![Tensor::normal(&out_shape, 1.0, rng)];
        let mut r = rand::rngs::mock::StepRng::new(0, 1);
        reports.extend(check_params(
            |tape, vars| loss(tape, vars, &weights),
            &inputs,
            h,
            tol,
            None,
            &mut r,
        )?);
    }
    Ok(reports)
}
