//! Windowed structural similarity for small interleaved RGB images.
//!
//! Uniform 8x8 windows slide with stride 1 over each channel independently; the score is the
//! mean SSIM over all windows and channels with `C1 = 0.01²` and `C2 = 0.03²` (dynamic range
//! 1). Images smaller than a window in either direction use a single window covering the
//! whole channel.

use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

pub const WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// SSIM of two `height x width x channels` images stored row-major with interleaved channels.
pub fn ssim<T: Scalar>(a: &[T], b: &[T], height: usize, width: usize, channels: usize) -> Result<f64> {
    let len = height * width * channels;
    check_len("ssim first image", len, a.len())?;
    check_len("ssim second image", len, b.len())?;
    if len == 0 {
        return Err(Error::InvalidInput("ssim of an empty image".into()));
    }
    let (wh, ww) = if height < WINDOW || width < WINDOW {
        (height, width)
    } else {
        (WINDOW, WINDOW)
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        for top in 0..=height - wh {
            for left in 0..=width - ww {
                total += window_ssim(a, b, width, channels, ch, top, left, wh, ww);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[allow(clippy::too_many_arguments)]
fn window_ssim<T: Scalar>(
    a: &[T],
    b: &[T],
    width: usize,
    channels: usize,
    ch: usize,
    top: usize,
    left: usize,
    wh: usize,
    ww: usize,
) -> f64 {
    let n = (wh * ww) as f64;
    let at = |img: &[T], r: usize, c: usize| img[(r * width + c) * channels + ch].as_f64();
    let (mut sa, mut sb) = (0.0, 0.0);
    for r in top..top + wh {
        for c in left..left + ww {
            sa += at(a, r, c);
            sb += at(b, r, c);
        }
    }
    let (mu_a, mu_b) = (sa / n, sb / n);
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for r in top..top + wh {
        for c in left..left + ww {
            let da = at(a, r, c) - mu_a;
            let db = at(b, r, c) - mu_b;
            vaa += da * da;
            vbb += db * db;
            vab += da * db;
        }
    }
    let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
    ((2.0 * mu_a * mu_b + C1) * (2.0 * vab + C2)) / ((mu_a * mu_a + mu_b * mu_b + C1) * (vaa + vbb + C2))
}
