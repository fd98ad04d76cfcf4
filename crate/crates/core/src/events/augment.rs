use rand::Rng;

use super::{PseudoFrame, Resolution, CH_B, CH_MASK, CH_R};
use crate::error::{GepError, Result};

/// Source rectangle for a crop, resampled to `out` afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub out: Resolution,
}

/// Concrete augmentation applied to one frame: crop and resize, zoom by
/// `upscale`, horizontal flip, then polarity swap.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugSpec {
    pub polarity_swap: bool,
    pub hflip: bool,
    pub crop: Option<Crop>,
    /// Zoom factor ≥ 1: the frame is enlarged and center-cropped back to size.
    pub upscale: Option<f64>,
}

impl AugSpec {
    pub fn validate(&self, res: Resolution) -> Result<()> {
        if let Some(c) = self.crop {
            if c.height == 0
                || c.width == 0
                || c.top + c.height > res.height
                || c.left + c.width > res.width
                || c.out.height == 0
                || c.out.width == 0
            {
                return Err(GepError::Parameter(format!(
                    "crop {c:?} does not fit a {}x{} frame",
                    res.height, res.width
                )));
            }
        }
        if let Some(f) = self.upscale {
            if !(f >= 1.0) || !f.is_finite() {
                return Err(GepError::Parameter(format!("upscale factor must be >= 1, got {f}")));
            }
        }
        Ok(())
    }
}

/// Sampling probabilities and ranges for alignment-stage augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugPolicy {
    pub p_polarity_swap: f64,
    pub p_hflip: f64,
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    pub p_upscale: f64,
    pub upscale_factor: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            p_polarity_swap: 0.5,
            p_hflip: 0.5,
            crop_scale: (0.25, 1.0),
            p_upscale: 0.1,
            upscale_factor: 2.0,
        }
    }
}

impl AugPolicy {
    /// Draws a concrete spec for a frame of resolution `res`. The crop keeps
    /// the frame's aspect ratio and is resized back to `res`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, res: Resolution) -> AugSpec {
        let (lo, hi) = self.crop_scale;
        let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let side = area.sqrt();
        let h = ((res.height as f64 * side).round() as usize).clamp(1, res.height);
        let w = ((res.width as f64 * side).round() as usize).clamp(1, res.width);
        let top = rng.random_range(0..=res.height - h);
        let left = rng.random_range(0..=res.width - w);
        AugSpec {
            polarity_swap: rng.random_bool(self.p_polarity_swap),
            hflip: rng.random_bool(self.p_hflip),
            crop: Some(Crop {
                top,
                left,
                height: h,
                width: w,
                out: res,
            }),
            upscale: rng.random_bool(self.p_upscale).then_some(self.upscale_factor),
        }
    }
}

/// Resamples the region `(top, left, h, w)` (fractional allowed) to `out`.
/// Pixel centers map as `src = top + (dst + 0.5)·h/out − 0.5`; count
/// channels are bilinear, the mask is nearest-neighbour.
fn resample(frame: &PseudoFrame, top: f64, left: f64, h: f64, w: f64, out: Resolution) -> PseudoFrame {
    let (fh, fw) = (frame.height(), frame.width());
    let mut res = PseudoFrame::zeros(out, frame.percentile);
    let sy = h / out.height as f64;
    let sx = w / out.width as f64;
    for oy in 0..out.height {
        let y = (top + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (fh - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(fh - 1);
        let dy = y - y0 as f64;
        for ox in 0..out.width {
            let x = (left + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (fw - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(fw - 1);
            let dx = x - x0 as f64;
            for c in [CH_R, CH_B] {
                let v = if dx == 0.0 && dy == 0.0 {
                    frame.get(y0, x0, c)
                } else {
                    let top_row = frame.get(y0, x0, c) * (1.0 - dx) + frame.get(y0, x1, c) * dx;
                    let bot_row = frame.get(y1, x0, c) * (1.0 - dx) + frame.get(y1, x1, c) * dx;
                    top_row * (1.0 - dy) + bot_row * dy
                };
                res.set(oy, ox, c, v.clamp(0.0, 1.0));
            }
            let ny = (y.round() as usize).min(fh - 1);
            let nx = (x.round() as usize).min(fw - 1);
            res.set(oy, ox, CH_MASK, frame.get(ny, nx, CH_MASK));
        }
    }
    res
}

pub fn augment(frame: &PseudoFrame, spec: &AugSpec) -> Result<PseudoFrame> {
    spec.validate(frame.resolution)?;
    let mut out = frame.clone();
    if let Some(c) = spec.crop {
        let identity = c.top == 0
            && c.left == 0
            && c.height == frame.height()
            && c.width == frame.width()
            && c.out == frame.resolution;
        if !identity {
            out = resample(
                &out,
                c.top as f64,
                c.left as f64,
                c.height as f64,
                c.width as f64,
                c.out,
            );
        }
    }
    if let Some(f) = spec.upscale {
        if f > 1.0 {
            let (h, w) = (out.height() as f64, out.width() as f64);
            let (ch, cw) = (h / f, w / f);
            out = resample(&out, (h - ch) / 2.0, (w - cw) / 2.0, ch, cw, out.resolution);
        }
    }
    if spec.hflip {
        let (h, w) = (out.height(), out.width());
        let src = out.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.set(y, x, c, src.get(y, w - 1 - x, c));
                }
            }
        }
    }
    if spec.polarity_swap {
        for px in out.data.chunks_mut(3) {
            px.swap(CH_R, CH_B);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frame(seed: u64, h: usize, w: usize) -> PseudoFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = PseudoFrame::zeros(Resolution::new(h, w), 99);
        for px in f.data.chunks_mut(3) {
            px[CH_R] = rng.random_range(0.0..1.0);
            px[CH_B] = rng.random_range(0.0..1.0);
            px[CH_MASK] = (px[CH_R] + px[CH_B] > 0.5) as u8 as f64;
        }
        f
    }

    fn only(f: impl Fn(&mut AugSpec)) -> AugSpec {
        let mut s = AugSpec::default();
        f(&mut s);
        s
    }

    #[test]
    fn polarity_swap_is_involution() {
        let f = random_frame(1, 5, 7);
        let s = only(|s| s.polarity_swap = true);
        let once = augment(&f, &s).unwrap();
        assert_ne!(once, f);
        assert_eq!(augment(&once, &s).unwrap(), f);
    }

    #[test]
    fn hflip_is_involution() {
        let f = random_frame(2, 5, 7);
        let s = only(|s| s.hflip = true);
        assert_eq!(augment(&augment(&f, &s).unwrap(), &s).unwrap(), f);
    }

    #[test]
    fn full_crop_is_identity() {
        let f = random_frame(3, 6, 4);
        let s = only(|s| {
            s.crop = Some(Crop {
                top: 0,
                left: 0,
                height: 6,
                width: 4,
                out: Resolution::new(6, 4),
            })
        });
        assert_eq!(augment(&f, &s).unwrap(), f);
        // The resampler is exact at unit scale as well.
        let r = resample(&f, 0.0, 0.0, 6.0, 4.0, Resolution::new(6, 4));
        assert_eq!(r, f);
    }

    #[test]
    fn swap_commutes_with_flip() {
        let f = random_frame(4, 4, 9);
        let a = augment(&augment(&f, &only(|s| s.hflip = true)).unwrap(), &only(|s| s.polarity_swap = true)).unwrap();
        let b = augment(&augment(&f, &only(|s| s.polarity_swap = true)).unwrap(), &only(|s| s.hflip = true)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resampling_keeps_mask_binary_and_range() {
        let f = random_frame(5, 8, 8);
        let policy = AugPolicy {
            p_upscale: 1.0,
            ..AugPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s = policy.sample(&mut rng, f.resolution);
            let out = augment(&f, &s).unwrap();
            assert_eq!(out.resolution, f.resolution);
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(out.channel(CH_MASK).iter().all(|&m| m == 0.0 || m == 1.0));
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let f = random_frame(6, 4, 4);
        let bad_crop = only(|s| {
            s.crop = Some(Crop {
                top: 2,
                left: 0,
                height: 3,
                width: 4,
                out: Resolution::new(4, 4),
            })
        });
        assert!(augment(&f, &bad_crop).is_err());
        assert!(augment(&f, &only(|s| s.upscale = Some(0.5))).is_err());
    }
}
