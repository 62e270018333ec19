//! Weak image augmentation: random horizontal flip and small rotation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest rotation applied, in degrees.
pub const MAX_ROTATION_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parse `HxWxC` (or `HxW`, one channel).
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        let nums: std::result::Result<Vec<usize>, _> =
            parts.iter().map(|p| p.trim().parse::<usize>()).collect();
        match nums.as_deref() {
            Ok([h, w]) if *h > 0 && *w > 0 => Ok(Self { height: *h, width: *w, channels: 1 }),
            Ok([h, w, c]) if *h > 0 && *w > 0 && *c > 0 => {
                Ok(Self { height: *h, width: *w, channels: *c })
            }
            _ => Err(Error::InvalidParameter(format!("bad image shape {s:?}, expected HxWxC"))),
        }
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Augmentation for row-flattened `H×W×C` images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub shape: ImageShape,
    /// Value written where rotation samples fall outside the image.
    pub fill: f64,
}

impl Augmentation {
    /// Flip with probability ½, then rotate by a uniform angle in ±10°.
    pub fn apply<R: Rng + ?Sized>(&self, pixels: &[f64], rng: &mut R, out: &mut [f64]) {
        let flip = rng.random_bool(0.5);
        let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
        self.transform(pixels, flip, angle, out);
    }

    /// Deterministic transform: optional horizontal flip followed by a
    /// bilinear rotation about the image centre.
    pub fn transform(&self, pixels: &[f64], flip: bool, angle: f64, out: &mut [f64]) {
        let ImageShape { height: h, width: w, channels: c } = self.shape;
        debug_assert_eq!(pixels.len(), h * w * c);
        debug_assert_eq!(out.len(), pixels.len());
        let at = |y: usize, x: usize, ch: usize| -> f64 {
            let x = if flip { w - 1 - x } else { x };
            pixels[(y * w + x) * c + ch]
        };
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                // inverse map: output pixel -> source coordinate
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = cos * dy - sin * dx + cy;
                let sx = sin * dy + cos * dx + cx;
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = self.bilinear(&at, sy, sx, ch);
                }
            }
        }
    }

    fn bilinear(&self, at: &impl Fn(usize, usize, usize) -> f64, sy: f64, sx: f64, ch: usize) -> f64 {
        let (h, w) = (self.shape.height as isize, self.shape.width as isize);
        let y0 = sy.floor();
        let x0 = sx.floor();
        let (fy, fx) = (sy - y0, sx - x0);
        let sample = |yy: isize, xx: isize| -> f64 {
            if yy < 0 || xx < 0 || yy >= h || xx >= w {
                self.fill
            } else {
                at(yy as usize, xx as usize, ch)
            }
        };
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = sample(y0, x0) * (1.0 - fx) + sample(y0, x0 + 1) * fx;
        let bottom = sample(y0 + 1, x0) * (1.0 - fx) + sample(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aug(h: usize, w: usize) -> Augmentation {
        Augmentation { shape: ImageShape { height: h, width: w, channels: 1 }, fill: -1.0 }
    }

    #[test]
    fn parse_shapes() {
        assert_eq!(ImageShape::parse("28x28x1").unwrap(), ImageShape { height: 28, width: 28, channels: 1 });
        assert_eq!(ImageShape::parse("4x5").unwrap().len(), 20);
        assert!(ImageShape::parse("0x3").is_err());
        assert!(ImageShape::parse("abc").is_err());
    }

    #[test]
    fn identity_transform() {
        let a = aug(3, 4);
        let px: Vec<f64> = (0..12).map(f64::from).collect();
        let mut out = vec![0.0; 12];
        a.transform(&px, false, 0.0, &mut out);
        assert_eq!(out, px);
    }

    #[test]
    fn flip_mirrors_rows() {
        let a = aug(2, 3);
        let px = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 6];
        a.transform(&px, true, 0.0, &mut out);
        assert_eq!(out, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn rotation_keeps_centre_and_uses_fill() {
        let a = aug(5, 5);
        let mut px = vec![0.0; 25];
        px[12] = 1.0;
        let mut out = vec![0.0; 25];
        a.transform(&px, false, 10f64.to_radians(), &mut out);
        assert!((out[12] - 1.0).abs() < 1e-12);
        // corners sample outside the image
        assert!(out[0] < 0.0);
    }
}
