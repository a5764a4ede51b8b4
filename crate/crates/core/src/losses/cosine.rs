use ndarray::{s, Array4, ArrayView4, Ix4};

use crate::error::{Error, Result};

use super::{finite, same_shape, LossOutput};

/// Mean over all `b·h·w` locations of `1 − cos(student, teacher)`, with the
/// channel axis (axis 1) holding the feature vector.
pub fn cosine_sim_loss(student: ArrayView4<'_, f64>, teacher: ArrayView4<'_, f64>) -> Result<LossOutput<Ix4>> {
    same_shape("cosine_sim_loss", &student, &teacher)?;
    finite("cosine_sim_loss", "student", &student)?;
    finite("cosine_sim_loss", "teacher", &teacher)?;
    let (b, _, h, w) = student.dim();
    let m = (b * h * w) as f64;
    if m == 0.0 {
        return Err(Error::invalid("cosine_sim_loss: empty input"));
    }

    let mut loss = 0.0;
    let mut grad = Array4::zeros(student.raw_dim());
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let sv = student.slice(s![n, .., y, x]);
                let tv = teacher.slice(s![n, .., y, x]);
                let ns = sv.dot(&sv).sqrt();
                let nt = tv.dot(&tv).sqrt();
                if ns == 0.0 || nt == 0.0 {
                    return Err(Error::invalid(format!(
                        "cosine_sim_loss: zero-norm feature vector at ({n}, {y}, {x})"
                    )));
                }
                let cos = sv.dot(&tv) / (ns * nt);
                loss += 1.0 - cos;
                let g = (&sv * (cos / (ns * ns)) - &tv / (ns * nt)) / m;
                grad.slice_mut(s![n, .., y, x]).assign(&g);
            }
        }
    }
    Ok(LossOutput { loss: loss / m, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn identical_and_opposite_fields() {
        let mut rng = SeededRng::new(21, 0);
        let s = Array4::from_shape_simple_fn((2, 16, 3, 3), || rng.normal());
        let same = cosine_sim_loss(s.view(), s.view()).unwrap();
        assert!(same.loss.abs() < 1e-12);
        let neg = -&s;
        let opposite = cosine_sim_loss(s.view(), neg.view()).unwrap();
        assert!((opposite.loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_is_rejected() {
        let mut s = Array4::<f64>::ones((1, 4, 2, 2));
        let t = s.clone();
        s.slice_mut(s![0, .., 1, 0]).fill(0.0);
        assert!(cosine_sim_loss(s.view(), t.view()).is_err());
    }
}
