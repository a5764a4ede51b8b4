//! Central finite-difference checks of every analytic gradient, plus the
//! randomized suite behind `losses check`.

use ndarray::{Array, Array1, Array2, Array4, Dimension, ShapeBuilder};
use serde::Serialize;

use crate::error::Result;
use crate::rng::SeededRng;

use super::*;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradient entries smaller than this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;
pub const CASES_PER_OP: usize = 20;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad<D: Dimension>(x: &Array<f64, D>, h: f64, mut f: impl FnMut(&Array<f64, D>) -> f64) -> Array<f64, D> {
    let mut xp = x.as_standard_layout().into_owned();
    let mut grad = Array::zeros(x.raw_dim());
    let n = xp.len();
    for i in 0..n {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + h;
        let up = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, MAGNITUDE_FLOOR)`.
pub fn max_relative_error<D: Dimension>(analytic: &Array<f64, D>, numeric: &Array<f64, D>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(MAGNITUDE_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Case = fn(&mut SeededRng) -> Result<f64>;

const OPS: [(&str, Case); 9] = [
    ("kd_kl_loss", check_kd),
    ("pixelwise_kl", check_pixelwise),
    ("cross_entropy", check_ce),
    ("info_nce_contrastive", check_info_nce),
    ("cosine_sim_loss", check_cosine),
    ("linear_projection", check_linear),
    ("feature_resize_bilinear", check_resize),
    ("normalize_rows", check_normalize),
    ("projected_info_nce", check_projected_info_nce),
];

/// Runs `cases` random-shape checks per differentiable op.
pub fn run_suite(seed: u64, cases: usize) -> Vec<CheckRow> {
    OPS.iter()
        .map(|&(op, case)| {
            let mut rng = SeededRng::keyed(seed, "losses-check", op.as_bytes());
            let mut worst = 0.0f64;
            for _ in 0..cases {
                let err = case(&mut rng).unwrap_or(f64::INFINITY);
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
            CheckRow {
                op,
                cases,
                max_rel_error: worst,
                passed: worst < REL_TOL,
            }
        })
        .collect()
}

fn size(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn randn<Sh: ShapeBuilder>(rng: &mut SeededRng, shape: Sh, scale: f64) -> Array<f64, Sh::Dim> {
    Array::from_shape_simple_fn(shape, || rng.normal() * scale)
}

fn check_kd(rng: &mut SeededRng) -> Result<f64> {
    let (b, c) = (size(rng, 1, 4), size(rng, 2, 10));
    let temp = rng.uniform(0.5, 4.0);
    let s = randn(rng, (b, c), 2.0);
    let t = randn(rng, (b, c), 2.0);
    let out = kd_kl_loss(s.view(), t.view(), temp)?;
    let num = numeric_grad(&s, FD_STEP, |x| kd_kl_loss(x.view(), t.view(), temp).unwrap().loss);
    Ok(max_relative_error(&out.grad, &num))
}

fn check_pixelwise(rng: &mut SeededRng) -> Result<f64> {
    let shape = (size(rng, 1, 2), size(rng, 2, 5), size(rng, 1, 3), size(rng, 1, 3));
    let temp = rng.uniform(0.5, 4.0);
    let s = randn(rng, shape, 2.0);
    let t = randn(rng, shape, 2.0);
    let out = pixelwise_kl(s.view(), t.view(), temp)?;
    let num = numeric_grad(&s, FD_STEP, |x| pixelwise_kl(x.view(), t.view(), temp).unwrap().loss);
    Ok(max_relative_error(&out.grad, &num))
}

fn check_ce(rng: &mut SeededRng) -> Result<f64> {
    let (b, c) = (size(rng, 1, 5), size(rng, 2, 8));
    let x = randn(rng, (b, c), 2.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.below(c as u64) as usize).collect();
    let out = cross_entropy(x.view(), &labels)?;
    let num = numeric_grad(&x, FD_STEP, |x| cross_entropy(x.view(), &labels).unwrap().loss);
    Ok(max_relative_error(&out.grad, &num))
}

fn check_info_nce(rng: &mut SeededRng) -> Result<f64> {
    let (b, d) = (size(rng, 2, 6), size(rng, 2, 8));
    let tau = rng.uniform(0.07, 1.0);
    let s = normalize_rows(randn(rng, (b, d), 1.0).view())?;
    let t = normalize_rows(randn(rng, (b, d), 1.0).view())?;
    let out = info_nce_contrastive(s.view(), t.view(), tau)?;
    let num = numeric_grad(&s, FD_STEP, |x| info_nce_raw(x.view(), t.view(), tau).unwrap().loss);
    Ok(max_relative_error(&out.grad, &num))
}

fn check_cosine(rng: &mut SeededRng) -> Result<f64> {
    let shape = (size(rng, 1, 2), size(rng, 2, 16), size(rng, 1, 3), size(rng, 1, 3));
    let s = randn(rng, shape, 1.0);
    let t = randn(rng, shape, 1.0);
    let out = cosine_sim_loss(s.view(), t.view())?;
    let num = numeric_grad(&s, FD_STEP, |x| cosine_sim_loss(x.view(), t.view()).unwrap().loss);
    Ok(max_relative_error(&out.grad, &num))
}

fn check_linear(rng: &mut SeededRng) -> Result<f64> {
    let (b, d_in, d_out) = (size(rng, 1, 4), size(rng, 1, 6), size(rng, 1, 6));
    let x = randn(rng, (b, d_in), 1.0);
    let w = randn(rng, (d_out, d_in), 1.0);
    let bias = randn(rng, d_out, 1.0);
    let r = randn(rng, (b, d_out), 1.0);
    let lin = Linear::new(w.clone(), bias.clone())?;
    let grads = lin.backward(x.view(), r.view())?;

    let loss = |x: &Array2<f64>, w: &Array2<f64>, bias: &Array1<f64>| {
        let y = Linear::new(w.clone(), bias.clone()).unwrap().forward(x.view()).unwrap();
        (&y * &r).sum()
    };
    let gx = numeric_grad(&x, FD_STEP, |x| loss(x, &w, &bias));
    let gw = numeric_grad(&w, FD_STEP, |w| loss(&x, w, &bias));
    let gb = numeric_grad(&bias, FD_STEP, |b| loss(&x, &w, b));
    Ok(max_relative_error(&grads.x, &gx)
        .max(max_relative_error(&grads.weight, &gw))
        .max(max_relative_error(&grads.bias, &gb)))
}

fn check_resize(rng: &mut SeededRng) -> Result<f64> {
    let (b, d, h, w) = (size(rng, 1, 2), size(rng, 1, 2), size(rng, 1, 4), size(rng, 1, 4));
    let (oh, ow) = (size(rng, 1, 6), size(rng, 1, 6));
    let x: Array4<f64> = randn(rng, (b, d, h, w), 1.0);
    let r = randn(rng, (b, d, oh, ow), 1.0);
    let analytic = feature_resize_bilinear_backward(r.view(), h, w)?;
    let num = numeric_grad(&x, FD_STEP, |x| (&feature_resize_bilinear(x.view(), oh, ow).unwrap() * &r).sum());
    Ok(max_relative_error(&analytic, &num))
}

fn check_normalize(rng: &mut SeededRng) -> Result<f64> {
    let (b, d) = (size(rng, 1, 4), size(rng, 2, 8));
    let x = randn(rng, (b, d), 1.0);
    let r = randn(rng, (b, d), 1.0);
    let analytic = normalize_rows_backward(x.view(), r.view())?;
    let num = numeric_grad(&x, FD_STEP, |x| (&normalize_rows(x.view()).unwrap() * &r).sum());
    Ok(max_relative_error(&analytic, &num))
}

/// Student features through a projection and row normalization into
/// InfoNCE; checks the chained gradient w.r.t. the features and the weights.
fn check_projected_info_nce(rng: &mut SeededRng) -> Result<f64> {
    let (b, d_in, d_out) = (size(rng, 2, 5), size(rng, 2, 6), size(rng, 2, 6));
    let tau = rng.uniform(0.07, 1.0);
    let x = randn(rng, (b, d_in), 1.0);
    let w = randn(rng, (d_out, d_in), 1.0);
    let bias = randn(rng, d_out, 0.1);
    let t = normalize_rows(randn(rng, (b, d_out), 1.0).view())?;

    let lin = Linear::new(w.clone(), bias.clone())?;
    let y = lin.forward(x.view())?;
    let z = normalize_rows(y.view())?;
    let g_z = info_nce_contrastive(z.view(), t.view(), tau)?.grad;
    let g_y = normalize_rows_backward(y.view(), g_z.view())?;
    let grads = lin.backward(x.view(), g_y.view())?;

    let loss = |x: &Array2<f64>, w: &Array2<f64>| {
        let y = Linear::new(w.clone(), bias.clone()).unwrap().forward(x.view()).unwrap();
        info_nce_raw(normalize_rows(y.view()).unwrap().view(), t.view(), tau).unwrap().loss
    };
    let gx = numeric_grad(&x, FD_STEP, |x| loss(x, &w));
    let gw = numeric_grad(&w, FD_STEP, |w| loss(&x, w));
    Ok(max_relative_error(&grads.x, &gx).max(max_relative_error(&grads.weight, &gw)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_grad_of_a_quadratic() {
        let x = ndarray::array![1.0, -2.0, 0.5];
        let g = numeric_grad(&x, FD_STEP, |v| v.mapv(|a| a * a).sum());
        assert!(max_relative_error(&(2.0 * &x), &g) < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = ndarray::array![1.0, 2.0];
        let g = numeric_grad(&x, FD_STEP, |v| v.mapv(|a| a * a).sum());
        assert!(max_relative_error(&x, &g) > 0.4);
    }

    #[test]
    fn full_suite_passes() {
        for row in run_suite(7, CASES_PER_OP) {
            assert!(row.passed, "{row:?}");
        }
    }
}
