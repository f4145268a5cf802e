//! Differentiable image transforms used by the invariant watermark domains.
//!
//! The translation invariant is the modulus of the unnormalized 2-D DFT
//! (DC bin equals the sample sum). The rotation invariant resamples the
//! plane onto a log-polar grid, where a rotation about the grid center
//! becomes a circular shift along the angular axis, and takes the DFT
//! modulus of that.
//!
//! Every transform has a vector-Jacobian product so that losses defined on
//! transformed values can be pulled back to pixels.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::ImageBuffer;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major 2-D scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Field2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("field contains non-finite values".into()));
        }
        Ok(Field2D { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Field2D { height, width, values: vec![value; height * width] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::ShapeMismatch {
                expected: (height, width, 1),
                actual: (self.height, self.width, 1),
            });
        }
        Ok(())
    }
}

/// Sampling lattice for the log-polar resampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogPolarGrid {
    pub n_radial: usize,
    pub n_angular: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// (row, col) of the rotation center.
    pub center: (f64, f64),
}

impl LogPolarGrid {
    /// Default lattice for an `h x w` plane: centered, radii 1 .. min(h,w)/2 - 1,
    /// and `min(h, w)` samples along each axis.
    pub fn default_for(h: usize, w: usize) -> Self {
        let side = h.min(w);
        LogPolarGrid {
            n_radial: side,
            n_angular: side,
            r_min: 1.0,
            r_max: side as f64 / 2.0 - 1.0,
            center: ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0),
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let limit = h.min(w) as f64 / 2.0;
        if self.n_radial < 2 || self.n_angular < 1 {
            return Err(Error::InvalidConfig("log-polar grid needs n_radial >= 2 and n_angular >= 1".into()));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max && self.r_max <= limit) {
            return Err(Error::InvalidConfig(format!(
                "log-polar radii must satisfy 0 < r_min < r_max <= {limit}, got {} .. {}",
                self.r_min, self.r_max
            )));
        }
        Ok(())
    }

    pub fn radius(&self, i: usize) -> f64 {
        let t = i as f64 / (self.n_radial - 1) as f64;
        (self.r_min.ln() + t * (self.r_max.ln() - self.r_min.ln())).exp()
    }

    pub fn angle(&self, j: usize) -> f64 {
        2.0 * PI * j as f64 / self.n_angular as f64
    }

    /// Bilinear taps for every output sample, row-major over (radial, angular).
    pub fn taps(&self, h: usize, w: usize) -> Result<Vec<Taps>> {
        self.validate(h, w)?;
        let mut out = Vec::with_capacity(self.n_radial * self.n_angular);
        for i in 0..self.n_radial {
            let r = self.radius(i);
            for j in 0..self.n_angular {
                let t = self.angle(j);
                let y = self.center.0 + r * t.sin();
                let x = self.center.1 + r * t.cos();
                out.push(bilinear_taps(h, w, y, x));
            }
        }
        Ok(out)
    }
}

/// Bilinear interpolation stencil.
pub type Taps = [(usize, f64); 4];

/// Four (flat index, weight) taps of bilinear interpolation at `(y, x)`,
/// with coordinates clamped to the field (edge replication).
pub fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> Taps {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

#[inline]
fn sample(values: &[f64], taps: &Taps) -> f64 {
    taps.iter().map(|&(i, wt)| values[i] * wt).sum()
}

pub fn luminance(img: &ImageBuffer) -> Field2D {
    let values = match img.channels {
        1 => img.pixels.clone(),
        _ => img
            .pixels
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect(),
    };
    Field2D { height: img.height, width: img.width, values }
}

/// Pulls a luminance cotangent back to image pixels.
pub fn luminance_vjp(shape: (usize, usize, usize), cotangent: &Field2D) -> Result<Vec<f64>> {
    let (h, w, c) = shape;
    cotangent.check_shape(h, w)?;
    Ok(match c {
        1 => cotangent.values.clone(),
        _ => cotangent
            .values
            .iter()
            .flat_map(|&g| LUMA_WEIGHTS.map(|wt| wt * g))
            .collect(),
    })
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place unnormalized forward 2-D DFT of a row-major `h x w` buffer.
pub fn fft2(data: &mut [Complex<f64>], h: usize, w: usize) {
    debug_assert_eq!(data.len(), h * w);
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let row_fft = planner.plan_fft_forward(w);
        row_fft.process(data);
        let col_fft = planner.plan_fft_forward(h);
        let mut column = vec![Complex::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = data[r * w + c];
            }
            col_fft.process(&mut column);
            for r in 0..h {
                data[r * w + c] = column[r];
            }
        }
    });
}

/// Complex spectrum of a real field.
pub fn spectrum(f: &Field2D) -> Vec<Complex<f64>> {
    let mut data: Vec<Complex<f64>> = f.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut data, f.height, f.width);
    data
}

pub fn fft_magnitude(f: &Field2D) -> Field2D {
    let values = spectrum(f).iter().map(|z| z.norm()).collect();
    Field2D { height: f.height, width: f.width, values }
}

/// Gradient of `<cotangent, |F(f)|>` given the precomputed spectrum `F(f)`.
///
/// With `G_k = c_k conj(F_k) / |F_k|` the gradient is `Re(DFT(G))`; bins
/// with zero modulus contribute nothing.
fn magnitude_vjp_from_spectrum(spec: &[Complex<f64>], cotangent: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut g: Vec<Complex<f64>> = spec
        .iter()
        .zip(cotangent)
        .map(|(z, &c)| {
            let m = z.norm();
            if m > 0.0 && c != 0.0 {
                z.conj() * (c / m)
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    fft2(&mut g, h, w);
    g.iter().map(|z| z.re).collect()
}

pub fn log_polar(f: &Field2D, grid: &LogPolarGrid) -> Result<Field2D> {
    let taps = grid.taps(f.height, f.width)?;
    Ok(log_polar_with_taps(f, grid, &taps))
}

fn log_polar_with_taps(f: &Field2D, grid: &LogPolarGrid, taps: &[Taps]) -> Field2D {
    Field2D {
        height: grid.n_radial,
        width: grid.n_angular,
        values: taps.iter().map(|t| sample(&f.values, t)).collect(),
    }
}

fn log_polar_adjoint(h: usize, w: usize, taps: &[Taps], cotangent: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for (t, &c) in taps.iter().zip(cotangent) {
        for &(i, wt) in t {
            out[i] += wt * c;
        }
    }
    out
}

pub fn fourier_mellin(f: &Field2D, grid: &LogPolarGrid) -> Result<Field2D> {
    Ok(fft_magnitude(&log_polar(f, grid)?))
}

/// A field-to-field transform with a known adjoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    FftMagnitude,
    LogPolar(LogPolarGrid),
    FourierMellin(LogPolarGrid),
}

impl Transform {
    pub fn apply(&self, f: &Field2D) -> Result<Field2D> {
        match self {
            Transform::Identity => Ok(f.clone()),
            Transform::FftMagnitude => Ok(fft_magnitude(f)),
            Transform::LogPolar(grid) => log_polar(f, grid),
            Transform::FourierMellin(grid) => fourier_mellin(f, grid),
        }
    }

    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Identity | Transform::FftMagnitude => (h, w),
            Transform::LogPolar(g) | Transform::FourierMellin(g) => (g.n_radial, g.n_angular),
        }
    }

    /// Gradient of `<cotangent, self.apply(f)>` with respect to `f`.
    pub fn vjp(&self, f: &Field2D, cotangent: &Field2D) -> Result<Field2D> {
        let (oh, ow) = self.output_shape(f.height, f.width);
        cotangent.check_shape(oh, ow)?;
        let (h, w) = (f.height, f.width);
        let values = match self {
            Transform::Identity => cotangent.values.clone(),
            Transform::FftMagnitude => {
                magnitude_vjp_from_spectrum(&spectrum(f), &cotangent.values, h, w)
            }
            Transform::LogPolar(grid) => {
                let taps = grid.taps(h, w)?;
                log_polar_adjoint(h, w, &taps, &cotangent.values)
            }
            Transform::FourierMellin(grid) => {
                let taps = grid.taps(h, w)?;
                let lp = log_polar_with_taps(f, grid, &taps);
                let inner = magnitude_vjp_from_spectrum(&spectrum(&lp), &cotangent.values, oh, ow);
                log_polar_adjoint(h, w, &taps, &inner)
            }
        };
        Ok(Field2D { height: h, width: w, values })
    }
}

/// Precomputed evaluator for one invariant domain on a fixed plane size,
/// returning values and a pullback in one pass.
#[derive(Clone, Debug)]
pub struct InvariantEvaluator {
    height: usize,
    width: usize,
    lp: Option<(LogPolarGrid, Vec<Taps>)>,
}

/// Forward state kept for the pullback.
pub struct InvariantForward {
    pub values: Vec<f64>,
    spec: Vec<Complex<f64>>,
}

impl InvariantEvaluator {
    pub fn translation(height: usize, width: usize) -> Self {
        InvariantEvaluator { height, width, lp: None }
    }

    pub fn rotation(height: usize, width: usize, grid: LogPolarGrid) -> Result<Self> {
        let taps = grid.taps(height, width)?;
        Ok(InvariantEvaluator { height, width, lp: Some((grid, taps)) })
    }

    pub fn output_len(&self) -> usize {
        match &self.lp {
            None => self.height * self.width,
            Some((g, _)) => g.n_radial * g.n_angular,
        }
    }

    pub fn forward(&self, lum: &Field2D) -> InvariantForward {
        let spec = match &self.lp {
            None => spectrum(lum),
            Some((grid, taps)) => spectrum(&log_polar_with_taps(lum, grid, taps)),
        };
        InvariantForward {
            values: spec.iter().map(|z| z.norm()).collect(),
            spec,
        }
    }

    /// Luminance-plane gradient of `<cotangent, forward values>`.
    pub fn pullback(&self, fwd: &InvariantForward, cotangent: &[f64]) -> Vec<f64> {
        match &self.lp {
            None => magnitude_vjp_from_spectrum(&fwd.spec, cotangent, self.height, self.width),
            Some((grid, taps)) => {
                let inner = magnitude_vjp_from_spectrum(&fwd.spec, cotangent, grid.n_radial, grid.n_angular);
                log_polar_adjoint(self.height, self.width, taps, &inner)
            }
        }
    }
}

/// Circular shift: `out[(r + dy) mod h][(c + dx) mod w] = f[r][c]`.
pub fn circular_shift(f: &Field2D, dy: isize, dx: isize) -> Field2D {
    let (h, w) = (f.height as isize, f.width as isize);
    let mut out = vec![0.0; f.values.len()];
    for r in 0..h {
        for c in 0..w {
            let rr = (r + dy).rem_euclid(h);
            let cc = (c + dx).rem_euclid(w);
            out[(rr * w + cc) as usize] = f.values[(r * w + c) as usize];
        }
    }
    Field2D { height: f.height, width: f.width, values: out }
}

/// Rotates the field by `angle` radians about its center, bilinear
/// resampling with edge replication. Positive angles move content towards
/// larger log-polar angles.
pub fn rotate_about_center(f: &Field2D, angle: f64) -> Field2D {
    let (h, w) = (f.height, f.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let dy = r as f64 - cy;
            let dx = col as f64 - cx;
            let sx = cx + dx * c + dy * s;
            let sy = cy + dy * c - dx * s;
            out.push(sample(&f.values, &bilinear_taps(h, w, sy, sx)));
        }
    }
    Field2D { height: h, width: w, values: out }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn shift_invariance_holds_for_all_shifts(
            values in prop::collection::vec(0.0f64..1.0, 8 * 12),
            dy in -20isize..20,
            dx in -20isize..20,
        ) {
            let f = Field2D::new(8, 12, values).unwrap();
            let a = fft_magnitude(&f);
            let b = fft_magnitude(&circular_shift(&f, dy, dx));
            let scale = a.values.iter().cloned().fold(0.0, f64::max);
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-6 * scale);
            }
        }
    }
}
