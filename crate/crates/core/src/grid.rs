//! Regular-grid rasters and the finite-difference operators shared by every
//! solver.
//!
//! All operators use unit grid spacing and forward differences with a
//! replicate (Neumann) boundary: the difference leaving the last column or
//! row is zero. Integrals over the image domain are plain pixel sums.

use crate::error::{Error, Result};

/// One real value per pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::input(format!(
                "field buffer has {} values, expected {}x{}={}",
                data.len(),
                height,
                width,
                height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("field contains non-finite values"));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty field");
        assert!(value.is_finite());
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Builds a field from `f(row, col)`. Panics on non-finite output.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty field");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite value at ({i}, {j})");
                data.push(v);
            }
        }
        Self { height, width, data }
    }

    /// Wraps a buffer produced by internal arithmetic on finite inputs.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced non-finite values");
        Self::from_raw(self.height, self.width, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// An `H x W x C` raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if channels == 0 {
            return Err(Error::input("image must have at least one channel"));
        }
        if data.len() != height * width * channels {
            return Err(Error::input(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("image contains non-finite values"));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Single-channel image sharing the field's values.
    pub fn from_field(field: &ScalarField) -> Self {
        Self {
            height: field.height,
            width: field.width,
            channels: 1,
            data: field.data.clone(),
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty image");
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    let v = f(i, j, c);
                    assert!(v.is_finite(), "non-finite value at ({i}, {j}, {c})");
                    data.push(v);
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Channel values of the pixel with flat (row-major) index `p`.
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> ScalarField {
        assert!(c < self.channels);
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        ScalarField::from_raw(self.height, self.width, data)
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = self.num_pixels() as f64;
        sums.into_iter().map(|s| s / n).collect()
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::input(format!("grid must be non-empty, got {height}x{width}")));
    }
    Ok(())
}

/// Forward differences `(gx, gy)` with zero flux leaving the last column/row.
pub fn grad_forward(f: &ScalarField) -> (ScalarField, ScalarField) {
    let (h, w) = f.shape();
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    forward_diff(&f.data, h, w, &mut gx, &mut gy);
    (ScalarField::from_raw(h, w, gx), ScalarField::from_raw(h, w, gy))
}

/// Discrete divergence, the negative adjoint of [`grad_forward`].
pub fn divergence(px: &ScalarField, py: &ScalarField) -> Result<ScalarField> {
    if px.shape() != py.shape() {
        return Err(Error::input("divergence components differ in shape"));
    }
    let (h, w) = px.shape();
    let mut out = vec![0.0; h * w];
    adjoint_forward_diff(&px.data, &py.data, h, w, &mut out);
    for v in &mut out {
        *v = -*v;
    }
    Ok(ScalarField::from_raw(h, w, out))
}

/// Smoothed isotropic total variation
/// `sum sqrt(gx^2 + gy^2 + eps^2) - H*W*eps`, zero on constant fields.
pub fn tv_smooth(f: &ScalarField, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(tv_value(&f.data, f.height, f.width, eps))
}

/// Exact gradient of [`tv_smooth`] with respect to every pixel.
pub fn tv_smooth_grad(f: &ScalarField, eps: f64) -> Result<ScalarField> {
    check_eps(eps)?;
    let (h, w) = f.shape();
    let mut out = vec![0.0; h * w];
    tv_grad_into(&f.data, h, w, eps, &mut out);
    Ok(ScalarField::from_raw(h, w, out))
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::param(format!("TV smoothing eps must be positive, got {eps}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn forward_diff(f: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            gx[p] = if j + 1 < w { f[p + 1] - f[p] } else { 0.0 };
            gy[p] = if i + 1 < h { f[p + w] - f[p] } else { 0.0 };
        }
    }
}

/// Accumulates `D^T (px, py)` into `out` where `D` is the forward-difference map.
#[inline]
pub(crate) fn adjoint_forward_diff(px: &[f64], py: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if j + 1 < w {
                out[p] -= px[p];
                out[p + 1] += px[p];
            }
            if i + 1 < h {
                out[p] -= py[p];
                out[p + w] += py[p];
            }
        }
    }
}

pub(crate) fn tv_value(f: &[f64], h: usize, w: usize, eps: f64) -> f64 {
    let eps2 = eps * eps;
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let gx = if j + 1 < w { f[p + 1] - f[p] } else { 0.0 };
            let gy = if i + 1 < h { f[p + w] - f[p] } else { 0.0 };
            total += (gx * gx + gy * gy + eps2).sqrt() - eps;
        }
    }
    total
}

/// Writes the gradient of `tv_value` into `out` (overwriting it).
pub(crate) fn tv_grad_into(f: &[f64], h: usize, w: usize, eps: f64, out: &mut [f64]) {
    let eps2 = eps * eps;
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let gx = if j + 1 < w { f[p + 1] - f[p] } else { 0.0 };
            let gy = if i + 1 < h { f[p + w] - f[p] } else { 0.0 };
            let m = (gx * gx + gy * gy + eps2).sqrt();
            let (nx, ny) = (gx / m, gy / m);
            if j + 1 < w {
                out[p] -= nx;
                out[p + 1] += nx;
            }
            if i + 1 < h {
                out[p] -= ny;
                out[p + w] += ny;
            }
        }
    }
}
