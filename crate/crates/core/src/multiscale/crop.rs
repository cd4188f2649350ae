//! Mapping attended feature regions back to pixels and resampling them.

use crate::attention::Region;
use crate::backbone::ToyBackbone;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inclusive window in pixel-centre coordinates of a source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelWindow {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl PixelWindow {
    pub fn full(h: usize, w: usize) -> Self {
        PixelWindow {
            top: 0.0,
            left: 0.0,
            bottom: (h - 1) as f64,
            right: (w - 1) as f64,
        }
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top + 1.0
    }

    pub fn width(&self) -> f64 {
        self.right - self.left + 1.0
    }

    pub fn contained_in(&self, h: usize, w: usize) -> bool {
        self.top >= 0.0 && self.left >= 0.0 && self.bottom <= (h - 1) as f64 && self.right <= (w - 1) as f64
    }
}

/// Feature cell `r` covers pixel rows `r*stride ..= r*stride + stride - 1`.
/// Returns `None` when nothing of the region survives clipping.
pub fn region_to_window(region: &Region, stride: usize, h: usize, w: usize) -> Option<PixelWindow> {
    let s = stride as f64;
    let window = PixelWindow {
        top: (region.top * s).max(0.0),
        left: (region.left * s).max(0.0),
        bottom: ((region.bottom + 1.0) * s - 1.0).min((h - 1) as f64),
        right: ((region.right + 1.0) * s - 1.0).min((w - 1) as f64),
    };
    (window.bottom >= window.top && window.right >= window.left).then_some(window)
}

fn sample_positions(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (start + end)];
    }
    let span = end - start;
    (0..n).map(|i| start + (i as f64 * span) / (n - 1) as f64).collect()
}

/// Corner-aligned bilinear resampling of `window` to `out_h x out_w`: the
/// first and last output samples sit exactly on the window's edge pixels.
pub fn resize_window(image: &Tensor, window: &PixelWindow, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if !window.contained_in(h, w) || window.bottom < window.top || window.right < window.left {
        return Err(Error::invalid(format!("window {window:?} outside a {h}x{w} image")));
    }
    let taps = |pos: &[f64], limit: usize| -> Vec<(usize, usize, f64)> {
        pos.iter()
            .map(|&p| {
                let lo = (p.floor() as usize).min(limit - 1);
                let hi = (lo + 1).min(limit - 1);
                (lo, hi, p - lo as f64)
            })
            .collect()
    };
    let ys = taps(&sample_positions(window.top, window.bottom, out_h), h);
    let xs = taps(&sample_positions(window.left, window.right, out_w), w);
    Ok(Tensor::from_fn3(c, out_h, out_w, |k, i, j| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = image.at3(k, y0, x0) * (1.0 - fx) + image.at3(k, y0, x1) * fx;
        let bottom = image.at3(k, y1, x0) * (1.0 - fx) + image.at3(k, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    resize_window(image, &PixelWindow::full(h, w), out_h, out_w)
}

#[derive(Debug, Clone)]
pub struct CropOutcome {
    pub image: Tensor,
    pub window: PixelWindow,
    /// The region vanished after clipping and the full image was used.
    pub fallback: bool,
}

/// Crops the pixels under a feature-map region and zooms them to
/// `out_h x out_w`.
pub fn crop_and_zoom(
    image: &Tensor,
    region: &Region,
    geometry: &ToyBackbone,
    out_h: usize,
    out_w: usize,
) -> Result<CropOutcome> {
    let (_, h, w) = image.dims3()?;
    if out_h < geometry.min_extent() || out_w < geometry.min_extent() {
        return Err(Error::invalid(format!(
            "zoom target {out_h}x{out_w} is below the backbone minimum {}",
            geometry.min_extent()
        )));
    }
    let (window, fallback) = match region_to_window(region, geometry.cumulative_stride(), h, w) {
        Some(win) => (win, false),
        None => {
            log::warn!("attended region {region:?} is empty after clipping; using the full image");
            (PixelWindow::full(h, w), true)
        }
    };
    Ok(CropOutcome {
        image: resize_window(image, &window, out_h, out_w)?,
        window,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hand_values() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resize(&img, 3, 3).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn full_region_same_size_is_identity() {
        let bb = ToyBackbone::init(&[3, 4, 4, 4], 1).unwrap();
        let img = Tensor::from_fn3(3, 16, 24, |c, i, j| ((c * 131 + i * 17 + j * 7) % 255) as f64 / 255.0);
        let region = Region {
            top: 0.0,
            left: 0.0,
            bottom: 1.0,
            right: 2.0,
        };
        let out = crop_and_zoom(&img, &region, &bb, 16, 24).unwrap();
        assert!(!out.fallback);
        assert_eq!(out.image, img);
    }

    #[test]
    fn single_pixel_upscales_to_constant() {
        let img = Tensor::from_fn3(1, 4, 4, |_, i, j| (i * 4 + j) as f64);
        let win = PixelWindow {
            top: 2.0,
            left: 1.0,
            bottom: 2.0,
            right: 1.0,
        };
        let out = resize_window(&img, &win, 5, 7).unwrap();
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn region_maps_through_stride_and_clips() {
        let r = Region {
            top: 1.0,
            left: 0.0,
            bottom: 2.0,
            right: 3.0,
        };
        let w = region_to_window(&r, 8, 20, 64).unwrap();
        assert_eq!(
            w,
            PixelWindow {
                top: 8.0,
                left: 0.0,
                bottom: 19.0,
                right: 31.0
            }
        );
        let outside = Region {
            top: 5.0,
            left: 0.0,
            bottom: 6.0,
            right: 0.0,
        };
        assert!(region_to_window(&outside, 8, 20, 64).is_none());
    }

    #[test]
    fn empty_region_falls_back_to_full_image() {
        let bb = ToyBackbone::init(&[1, 2], 1).unwrap();
        let img = Tensor::from_fn3(1, 4, 4, |_, i, j| (i + j) as f64);
        let region = Region {
            top: 9.0,
            left: 9.0,
            bottom: 9.0,
            right: 9.0,
        };
        let out = crop_and_zoom(&img, &region, &bb, 4, 4).unwrap();
        assert!(out.fallback);
        assert_eq!(out.image, img);
    }

    #[test]
    fn target_below_minimum_rejected() {
        let bb = ToyBackbone::init(&[1, 2, 2], 1).unwrap();
        let img = Tensor::zeros(&[1, 8, 8]);
        let region = Region {
            top: 0.0,
            left: 0.0,
            bottom: 0.0,
            right: 0.0,
        };
        assert!(crop_and_zoom(&img, &region, &bb, 3, 8).is_err());
    }
}
