//! Reference loss kernels for knowledge transfer, each returning the loss
//! together with its analytic gradient. Everything is f64 and
//! log-sum-exp stabilized; these are for verification, not speed.

mod contrastive;
mod cosine;
pub mod gradcheck;
mod kl;
mod projection;
mod resize;

pub use contrastive::{info_nce_contrastive, info_nce_raw, normalize_rows, normalize_rows_backward, INFO_NCE_TEMPERATURE};
pub use cosine::cosine_sim_loss;
pub use kl::{cross_entropy, kd_kl_loss, pixelwise_kl, KD_TEMPERATURE};
pub use projection::{Linear, LinearGrads};
pub use resize::{feature_resize_bilinear, feature_resize_bilinear_backward};

use ndarray::{Array, Array1, ArrayBase, ArrayView1, Data, Dimension};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<D: Dimension> {
    pub loss: f64,
    /// Gradient with respect to the differentiated (student) input.
    pub grad: Array<f64, D>,
}

fn same_shape<S1, S2, D>(op: &'static str, a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<()>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn finite<S, D>(op: &str, what: &str, a: &ArrayBase<S, D>) -> Result<()>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{op}: {what} contains non-finite values")))
    }
}

fn positive_temperature(op: &str, t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{op}: temperature must be positive and finite, got {t}")))
    }
}

/// `x - logsumexp(x)`, shifted by the max first.
fn log_softmax(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let log_sum = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.mapv(|v| (v - m) - log_sum)
}
