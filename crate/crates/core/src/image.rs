//! Image-domain containers.
//!
//! Pixel math outside the networks runs in `f64` on normalized `[0, 1]`
//! values. Conversion to and from the `f32` [`Tensor`] layout happens at the
//! network boundary only.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// An `H x W x 3` RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RadianceImage {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut img = Self::zeros(height, width)?;
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Ok(img)
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * 3 {
            return Err(dim_err!(
                "expected {} samples for {}x{}x3, got {}",
                height * width * 3,
                height,
                width,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut img = Self::zeros(height, width)?;
        for y in 0..height {
            for x in 0..width {
                img.set_pixel(y, x, f(y, x));
            }
        }
        Ok(img)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    /// Clamps every sample into `[0, 1]` in place.
    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mean of the three channels at a pixel.
    pub fn intensity(&self, y: usize, x: usize) -> f64 {
        let p = self.pixel(y, x);
        (p[0] + p[1] + p[2]) / 3.0
    }

    /// `1 x 3 x H x W` planar tensor.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.pixel_count();
        let mut out = vec![0.0f32; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f32;
            }
        }
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), out)
            .expect("shape matches by construction")
    }

    /// Reads image `n` of a `N x 3 x H x W` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 3 || n >= s.n {
            return Err(dim_err!("cannot read image {n} from tensor {s}"));
        }
        let hw = s.h * s.w;
        let base = n * 3 * hw;
        let src = t.data();
        let mut data = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                data.push((src[base + c * hw + i] as f64).clamp(0.0, 1.0));
            }
        }
        Self::from_vec(s.h, s.w, data)
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        let mut out = Self::zeros(height, width)?;
        resample(
            self.height,
            self.width,
            3,
            &self.data,
            height,
            width,
            &mut out.data,
        );
        Ok(out)
    }

    /// Extracts a `height x width` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(dim_err!(
                "crop {height}x{width}@({y0},{x0}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        Self::from_fn(height, width, |y, x| self.pixel(y0 + y, x0 + x))
    }
}

/// A single-channel `H x W` map of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            data: vec![value; height * width],
        })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(dim_err!(
                "expected {} samples for {}x{}, got {}",
                height * width,
                height,
                width,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_size(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    /// `1 x 1 x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("shape matches by construction")
    }

    /// Reads map `n` of a `N x 1 x H x W` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 || n >= s.n {
            return Err(dim_err!("cannot read plane {n} from tensor {s}"));
        }
        let hw = s.h * s.w;
        Self::from_vec(
            s.h,
            s.w,
            t.data()[n * hw..(n + 1) * hw]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        let mut out = Self::filled(height, width, 0.0)?;
        resample(
            self.height,
            self.width,
            1,
            &self.data,
            height,
            width,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(dim_err!(
                "crop {height}x{width}@({y0},{x0}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        Self::from_fn(height, width, |y, x| self.get(y0 + y, x0 + x))
    }
}

/// Normalized scene depth, nominally in `[0, 1]`.
///
/// Construction checks only the dimensions; value checks happen where the
/// depth is consumed so that corrupt inputs surface as data errors there.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(pub Plane);

impl DepthMap {
    pub fn new(plane: Plane) -> Self {
        Self(plane)
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }
}

/// Per-pixel transmission, every value in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap(Plane);

impl TransmissionMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(v) = plane
            .data
            .iter()
            .find(|v| !(v.is_finite() && **v > 0.0 && **v <= 1.0))
        {
            return Err(Error::Data(format!(
                "transmission value {v} outside (0, 1]"
            )));
        }
        Ok(Self(plane))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Plane::filled(height, width, value)?)
    }

    /// Builds a map from raw network output, forcing values into `[floor, 1]`.
    pub fn from_tensor_clamped(t: &Tensor, n: usize, floor: f64) -> Result<Self> {
        let mut plane = Plane::from_tensor(t, n)?;
        for v in &mut plane.data {
            *v = v.clamp(floor, 1.0);
        }
        Self::new(plane)
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn min(&self) -> f64 {
        self.0.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(dim_err!(
            "image dimensions must be >= 1, got {height}x{width}"
        ));
    }
    Ok(())
}

fn resample(
    src_h: usize,
    src_w: usize,
    channels: usize,
    src: &[f64],
    dst_h: usize,
    dst_w: usize,
    dst: &mut [f64],
) {
    let sy = src_h as f64 / dst_h as f64;
    let sx = src_w as f64 / dst_w as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    for y in 0..dst_h {
        let (y0, y1, fy) = coord(y, sy, src_h);
        for x in 0..dst_w {
            let (x0, x1, fx) = coord(x, sx, src_w);
            for c in 0..channels {
                let at = |yy: usize, xx: usize| src[(yy * src_w + xx) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                dst[(y * dst_w + x) * channels + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
}
