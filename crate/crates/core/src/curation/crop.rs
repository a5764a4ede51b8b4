//! Random-resized-crop rectangles for building a crop-level gallery.
//!
//! Sampling follows the usual scheme: target area uniform over `scale`
//! times the image area, aspect ratio log-uniform over `ratio`, up to ten
//! attempts, then a center crop clamped to the ratio range. Only geometry is
//! produced here; decoding and resampling to `out_size` happen elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::store::{CropIndex, CropRect, ItemRecord};

pub const CROPS_PER_IMAGE: u32 = 10;
pub const CROP_SCALE: (f64, f64) = (0.08, 1.0);
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const CROP_OUT_SIZE: u32 = 224;
const ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub out_size: u32,
    pub crops_per_image: u32,
    pub aug_tag: String,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams {
            scale: CROP_SCALE,
            ratio: CROP_RATIO,
            out_size: CROP_OUT_SIZE,
            crops_per_image: CROPS_PER_IMAGE,
            aug_tag: "random-resized-crop".to_owned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub source_image_id: String,
    pub crop_index: u32,
    pub rect: CropRect,
    pub out_size: u32,
    pub aug_tag: String,
}

impl CropParams {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::invalid(format!("crop scale range {:?} must lie within (0, 1]", self.scale)));
        }
        let (r0, r1) = self.ratio;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::invalid(format!("crop ratio range {:?} is invalid", self.ratio)));
        }
        if self.crops_per_image == 0 || self.out_size == 0 {
            return Err(Error::invalid("crops per image and output size must be positive"));
        }
        Ok(())
    }
}

/// Samples the crop rectangle for `(source_image_id, crop_index)`; the same
/// arguments always give the same rectangle.
pub fn sample_crop_rect(
    width: u32,
    height: u32,
    params: &CropParams,
    seed: u64,
    source_image_id: &str,
    crop_index: u32,
) -> Result<CropSpec> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("degenerate image size {width}x{height}")));
    }
    params.validate()?;
    if crop_index >= params.crops_per_image {
        return Err(Error::invalid(format!(
            "crop index {crop_index} outside [0, {})",
            params.crops_per_image
        )));
    }

    let mut key = source_image_id.as_bytes().to_vec();
    key.push(0);
    key.extend_from_slice(&crop_index.to_le_bytes());
    let mut rng = SeededRng::keyed(seed, "random-resized-crop", &key);

    let (wf, hf) = (f64::from(width), f64::from(height));
    let area = wf * hf;
    let (log_lo, log_hi) = (params.ratio.0.ln(), params.ratio.1.ln());
    let mut rect = None;
    for _ in 0..ATTEMPTS {
        let target = area * rng.uniform(params.scale.0, params.scale.1);
        let aspect = rng.uniform(log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round_ties_even();
        let h = (target / aspect).sqrt().round_ties_even();
        if w > 0.0 && w <= wf && h > 0.0 && h <= hf {
            let (w, h) = (w as u32, h as u32);
            let y = rng.below(u64::from(height - h) + 1) as u32;
            let x = rng.below(u64::from(width - w) + 1) as u32;
            rect = Some(CropRect { x, y, w, h });
            break;
        }
    }
    let rect = rect.unwrap_or_else(|| center_crop(width, height, params.ratio));

    Ok(CropSpec {
        source_image_id: source_image_id.to_owned(),
        crop_index,
        rect,
        out_size: params.out_size,
        aug_tag: params.aug_tag.clone(),
    })
}

fn center_crop(width: u32, height: u32, ratio: (f64, f64)) -> CropRect {
    let (wf, hf) = (f64::from(width), f64::from(height));
    let in_ratio = wf / hf;
    let (w, h) = if in_ratio < ratio.0 {
        (width, ((wf / ratio.0).round_ties_even() as u32).clamp(1, height))
    } else if in_ratio > ratio.1 {
        (((hf * ratio.1).round_ties_even() as u32).clamp(1, width), height)
    } else {
        (width, height)
    };
    CropRect {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
    }
}

/// All `crops_per_image` crops of one source image.
pub fn gallery_crops(source_image_id: &str, width: u32, height: u32, params: &CropParams, seed: u64) -> Result<Vec<CropSpec>> {
    (0..params.crops_per_image)
        .map(|i| sample_crop_rect(width, height, params, seed, source_image_id, i))
        .collect()
}

/// Store record describing a crop's provenance.
pub fn crop_record(spec: &CropSpec, item_id: u64, split_tag: &str, source_size: [u32; 2]) -> ItemRecord {
    ItemRecord {
        item_id,
        source_image_id: spec.source_image_id.clone(),
        crop_index: CropIndex::Crop(spec.crop_index),
        crop_rect: Some(spec.rect),
        aug_tag: format!("{};out={}", spec.aug_tag, spec.out_size),
        split_tag: split_tag.to_owned(),
        source_size: Some(source_size),
    }
}
