use ndarray::{Array2, ArrayView2, Axis, Ix2};

use crate::error::{Error, Result};
use crate::store::UNIT_NORM_TOL;

use super::{finite, log_softmax, positive_temperature, same_shape, LossOutput};

pub const INFO_NCE_TEMPERATURE: f64 = 0.07;

/// Symmetric InfoNCE between row-normalized student and teacher embeddings
/// (`b × d`), positives on the diagonal of `student · teacherᵀ / τ`.
pub fn info_nce_contrastive(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>, temperature: f64) -> Result<LossOutput<Ix2>> {
    same_shape("info_nce_contrastive", &student, &teacher)?;
    if student.nrows() < 2 {
        return Err(Error::invalid("info_nce_contrastive: batch needs at least two rows"));
    }
    for (what, m) in [("student", &student), ("teacher", &teacher)] {
        finite("info_nce_contrastive", what, m)?;
        for (i, row) in m.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "info_nce_contrastive: {what} row {i} has norm {norm}, expected unit rows"
                )));
            }
        }
    }
    info_nce_raw(student, teacher, temperature)
}

/// The same loss without the unit-norm precondition, so that it can be
/// differentiated at arbitrary points.
pub fn info_nce_raw(student: ArrayView2<'_, f64>, teacher: ArrayView2<'_, f64>, temperature: f64) -> Result<LossOutput<Ix2>> {
    same_shape("info_nce_raw", &student, &teacher)?;
    positive_temperature("info_nce_raw", temperature)?;
    let b = student.nrows();
    if b == 0 {
        return Err(Error::invalid("info_nce_raw: empty batch"));
    }

    let logits = student.dot(&teacher.t()) / temperature;
    let mut loss = 0.0;
    // d loss / d logits, accumulated over both directions.
    let mut dlogits = Array2::<f64>::zeros((b, b));
    let scale = 0.5 / b as f64;
    for transposed in [false, true] {
        let lanes = if transposed { logits.t() } else { logits.view() };
        for (i, lane) in lanes.axis_iter(Axis(0)).enumerate() {
            let ls = log_softmax(lane);
            loss -= ls[i];
            for (j, v) in ls.iter().enumerate() {
                let g = scale * (v.exp() - if i == j { 1.0 } else { 0.0 });
                let (r, c) = if transposed { (j, i) } else { (i, j) };
                dlogits[[r, c]] += g;
            }
        }
    }
    let grad = dlogits.dot(&teacher) / temperature;
    Ok(LossOutput { loss: loss * scale, grad })
}

/// Divides each row by its L2 norm.
pub fn normalize_rows(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n.is_nan() || n <= 0.0 {
            return Err(Error::invalid(format!("normalize_rows: row {i} has zero norm")));
        }
        row /= n;
    }
    Ok(out)
}

/// Pulls `grad_out` (w.r.t. normalized rows) back through `normalize_rows`:
/// `(g − y (y·g)) / ‖x‖`.
pub fn normalize_rows_backward(x: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    same_shape("normalize_rows_backward", &x, &grad_out)?;
    let y = normalize_rows(x)?;
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let n = x.row(i).dot(&x.row(i)).sqrt();
        let yi = y.row(i);
        let gi = grad_out.row(i);
        let proj = yi.dot(&gi);
        out.row_mut(i).assign(&((&gi - &(&yi * proj)) / n));
    }
    Ok(out)
}
