use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4};

use crate::error::{Error, Result};

use super::{finite, log_softmax, positive_temperature, same_shape, LossOutput};

pub const KD_TEMPERATURE: f64 = 1.0;

/// `T² · KL(softmax(t/T) ‖ softmax(s/T))` for one row and its gradient
/// `T · (softmax(s/T) − softmax(t/T))` with respect to `s`.
fn kl_row(s: ArrayView1<'_, f64>, t: ArrayView1<'_, f64>, temp: f64) -> (f64, Array1<f64>) {
    let ls = log_softmax(s.mapv(|v| v / temp).view());
    let lt = log_softmax(t.mapv(|v| v / temp).view());
    let mut kl = 0.0;
    let mut grad = Array1::zeros(s.len());
    for c in 0..s.len() {
        let pt = lt[c].exp();
        if pt > 0.0 {
            kl += pt * (lt[c] - ls[c]);
        }
        grad[c] = temp * (ls[c].exp() - pt);
    }
    (temp * temp * kl.max(0.0), grad)
}

/// Batch-mean temperature-scaled KL from teacher to student logits (`b × c`).
pub fn kd_kl_loss(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>, temperature: f64) -> Result<LossOutput<ndarray::Ix2>> {
    same_shape("kd_kl_loss", &student, &teacher)?;
    positive_temperature("kd_kl_loss", temperature)?;
    finite("kd_kl_loss", "student", &student)?;
    finite("kd_kl_loss", "teacher", &teacher)?;
    let b = student.nrows();
    if b == 0 {
        return Err(Error::invalid("kd_kl_loss: empty batch"));
    }

    let mut loss = 0.0;
    let mut grad = Array2::zeros(student.raw_dim());
    for i in 0..b {
        let (l, g) = kl_row(student.row(i), teacher.row(i), temperature);
        loss += l;
        grad.row_mut(i).assign(&(g / b as f64));
    }
    Ok(LossOutput { loss: loss / b as f64, grad })
}

/// Per-pixel KD loss over the class axis of `b × c × h × w` logits, averaged
/// over all `b·h·w` pixels.
pub fn pixelwise_kl(student: ArrayView4<'_, f64>, teacher: ArrayView4<'_, f64>, temperature: f64) -> Result<LossOutput<ndarray::Ix4>> {
    same_shape("pixelwise_kl", &student, &teacher)?;
    positive_temperature("pixelwise_kl", temperature)?;
    finite("pixelwise_kl", "student", &student)?;
    finite("pixelwise_kl", "teacher", &teacher)?;
    let (b, _, h, w) = student.dim();
    let pixels = b * h * w;
    if pixels == 0 {
        return Err(Error::invalid("pixelwise_kl: empty input"));
    }

    let mut loss = 0.0;
    let mut grad = Array4::zeros(student.raw_dim());
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (l, g) = kl_row(student.slice(s![n, .., y, x]), teacher.slice(s![n, .., y, x]), temperature);
                loss += l;
                grad.slice_mut(s![n, .., y, x]).assign(&(g / pixels as f64));
            }
        }
    }
    Ok(LossOutput { loss: loss / pixels as f64, grad })
}

/// Mean negative log-likelihood of integer `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<LossOutput<ndarray::Ix2>> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: vec![b, c],
            right: vec![labels.len()],
        });
    }
    if b == 0 {
        return Err(Error::invalid("cross_entropy: empty batch"));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(Error::invalid(format!("cross_entropy: label {l} at row {i} outside [0, {c})")));
    }
    finite("cross_entropy", "logits", &logits)?;

    let mut loss = 0.0;
    let mut grad = Array2::zeros((b, c));
    for (i, &label) in labels.iter().enumerate() {
        let ls = log_softmax(logits.row(i));
        loss -= ls[label];
        let mut g = ls.mapv(f64::exp);
        g[label] -= 1.0;
        grad.row_mut(i).assign(&(g / b as f64));
    }
    Ok(LossOutput { loss: loss / b as f64, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use ndarray::{array, Array, Dimension, ShapeBuilder};

    fn randn<Sh: ShapeBuilder>(rng: &mut SeededRng, shape: Sh, scale: f64) -> Array<f64, Sh::Dim>
    where
        Sh::Dim: Dimension,
    {
        Array::from_shape_simple_fn(shape, || rng.normal() * scale)
    }

    #[test]
    fn identical_logits_give_zero() {
        let mut rng = SeededRng::new(1, 0);
        let s = randn(&mut rng, (4, 10), 2.0);
        let out = kd_kl_loss(s.view(), s.view(), 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn two_class_reference_value() {
        // KL(softmax(2,0) || softmax(0,2)) = 2·tanh(1), evaluated at 40 digits.
        let out = kd_kl_loss(array![[0.0, 2.0]].view(), array![[2.0, 0.0]].view(), 1.0).unwrap();
        assert!((out.loss - 1.523_188_311_911_529_8).abs() < 1e-14, "{}", out.loss);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 4));
        assert!(matches!(kd_kl_loss(a.view(), b.view(), 1.0), Err(Error::ShapeMismatch { .. })));
        assert!(kd_kl_loss(a.view(), a.view(), 0.0).is_err());
        assert!(kd_kl_loss(a.view(), a.view(), -1.0).is_err());
        assert!(cross_entropy(a.view(), &[0, 3]).is_err());
        let mut nan = a.clone();
        nan[[1, 1]] = f64::NAN;
        assert!(kd_kl_loss(nan.view(), a.view(), 1.0).is_err());
    }

    #[test]
    fn unequal_distributions_have_positive_loss() {
        let out = kd_kl_loss(array![[0.0, 0.0, 1e-3]].view(), array![[0.0, 0.0, 0.0]].view(), 1.0).unwrap();
        assert!(out.loss > 1e-9);
    }

    #[test]
    fn temperature_limit() {
        // The divergence itself vanishes as T grows; with the T² factor the
        // loss tends to half the variance of the logit gap over classes.
        let mut rng = SeededRng::new(2, 0);
        let s = randn(&mut rng, (3, 5), 1.0);
        let t = randn(&mut rng, (3, 5), 1.0);
        let cold = kd_kl_loss(s.view(), t.view(), 1.0).unwrap().loss;
        let hot = kd_kl_loss(s.view(), t.view(), 1e3).unwrap().loss;
        assert!(hot / 1e6 < cold);
        let gap = &t - &s;
        let half_var = gap
            .rows()
            .into_iter()
            .map(|r| {
                let m = r.mean().unwrap();
                0.5 * r.mapv(|v| (v - m).powi(2)).mean().unwrap()
            })
            .sum::<f64>()
            / 3.0;
        assert!((hot - half_var).abs() < 1e-3 * half_var, "{hot} vs {half_var}");
    }

    #[test]
    fn single_pixel_grid_matches_flat_loss() {
        let mut rng = SeededRng::new(3, 0);
        let s = randn(&mut rng, (3, 6, 1, 1), 1.5);
        let t = randn(&mut rng, (3, 6, 1, 1), 1.5);
        let px = pixelwise_kl(s.view(), t.view(), 2.0).unwrap();
        let s2 = s.clone().into_shape_with_order((3, 6)).unwrap();
        let t2 = t.clone().into_shape_with_order((3, 6)).unwrap();
        let flat = kd_kl_loss(s2.view(), t2.view(), 2.0).unwrap();
        assert_eq!(px.loss, flat.loss);
        assert_eq!(px.grad.into_shape_with_order((3, 6)).unwrap(), flat.grad);
    }

    #[test]
    fn pixelwise_matches_per_pixel_loop() {
        let mut rng = SeededRng::new(4, 0);
        let s = randn(&mut rng, (2, 3, 2, 2), 1.0);
        let t = randn(&mut rng, (2, 3, 2, 2), 1.0);
        let px = pixelwise_kl(s.view(), t.view(), 1.0).unwrap();
        let mut total = 0.0;
        for n in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let sv = s.slice(s![n, .., y, x]).to_owned().insert_axis(ndarray::Axis(0));
                    let tv = t.slice(s![n, .., y, x]).to_owned().insert_axis(ndarray::Axis(0));
                    total += kd_kl_loss(sv.view(), tv.view(), 1.0).unwrap().loss;
                }
            }
        }
        assert!((px.loss - total / 8.0).abs() < 1e-12);
        assert_eq!(pixelwise_kl(s.view(), s.view(), 1.0).unwrap().loss, 0.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Array2::<f64>::zeros((3, 10));
        let out = cross_entropy(uniform.view(), &[0, 4, 9]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-15);
        let mut sure = Array2::<f64>::zeros((2, 7));
        sure[[0, 3]] = 30.0;
        sure[[1, 0]] = 30.0;
        assert!(cross_entropy(sure.view(), &[3, 0]).unwrap().loss < 1e-9);
    }

    #[test]
    fn shift_invariance() {
        let mut rng = SeededRng::new(5, 0);
        let s = randn(&mut rng, (4, 7), 2.0);
        let t = randn(&mut rng, (4, 7), 2.0);
        let shifted = &s + 13.25;
        let a = kd_kl_loss(s.view(), t.view(), 1.0).unwrap().loss;
        let b = kd_kl_loss(shifted.view(), t.view(), 1.0).unwrap().loss;
        assert!((a - b).abs() < 1e-10);
        let labels = [0, 6, 2, 3];
        let a = cross_entropy(s.view(), &labels).unwrap().loss;
        let b = cross_entropy(shifted.view(), &labels).unwrap().loss;
        assert!((a - b).abs() < 1e-10);
    }
}
