use ndarray::{Array4, ArrayView4};

use crate::error::{Error, Result};

/// Source taps `(i0, i1, w0, w1)` per output index, half-pixel centers
/// (`align_corners = false`), source coordinate clamped at zero.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

fn check_dims(op: &str, h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("{op}: degenerate size {h}x{w} -> {out_h}x{out_w}")));
    }
    Ok(())
}

/// Channel-wise bilinear resize of `b × d × h × w` features.
pub fn feature_resize_bilinear(patch: ArrayView4<'_, f64>, out_h: usize, out_w: usize) -> Result<Array4<f64>> {
    let (b, d, h, w) = patch.dim();
    check_dims("feature_resize_bilinear", h, w, out_h, out_w)?;
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Array4::zeros((b, d, out_h, out_w));
    for n in 0..b {
        for c in 0..d {
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let top = wx0 * patch[[n, c, y0, x0]] + wx1 * patch[[n, c, y0, x1]];
                    let bottom = wx0 * patch[[n, c, y1, x0]] + wx1 * patch[[n, c, y1, x1]];
                    out[[n, c, oy, ox]] = wy0 * top + wy1 * bottom;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`feature_resize_bilinear`]: scatters `grad_out` back onto an
/// `in_h × in_w` grid.
pub fn feature_resize_bilinear_backward(grad_out: ArrayView4<'_, f64>, in_h: usize, in_w: usize) -> Result<Array4<f64>> {
    let (b, d, out_h, out_w) = grad_out.dim();
    check_dims("feature_resize_bilinear_backward", in_h, in_w, out_h, out_w)?;
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let mut grad = Array4::zeros((b, d, in_h, in_w));
    for n in 0..b {
        for c in 0..d {
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let g = grad_out[[n, c, oy, ox]];
                    grad[[n, c, y0, x0]] += g * wy0 * wx0;
                    grad[[n, c, y0, x1]] += g * wy0 * wx1;
                    grad[[n, c, y1, x0]] += g * wy1 * wx0;
                    grad[[n, c, y1, x1]] += g * wy1 * wx1;
                }
            }
        }
    }
    Ok(grad)
}
