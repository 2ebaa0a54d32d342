//! Images, displacement fields, affine transforms and bilinear resampling.
//!
//! Coordinates are `(x, y)` = `(column, row)` in pixels of the grid they live
//! on. Displacements are stored as separate horizontal (`u`) and vertical
//! (`v`) planes. Warping is backward: the output at `p` samples the moving
//! image at `p + φ(p)`, with border replication outside the grid.

use crate::error::{Error, Result};

/// Single-channel intensity grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::dim(format!("image must be at least 2x2, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "image data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::dim("image contains non-finite values".to_string()));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Applies `f` to every intensity. The result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Rescales intensities linearly to `[0, 1]`. Constant images map to zero.
    pub fn normalized(&self) -> Self {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let data = if span > 0.0 {
            self.data.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Self { height: self.height, width: self.width, data }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Dense per-pixel displacement field, in pixels of its own grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField2D {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl DeformationField2D {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::dim(format!("field must be at least 2x2, got {height}x{width}")));
        }
        let n = height * width;
        if u.len() != n || v.len() != n {
            return Err(Error::dim(format!(
                "field components have lengths {}/{} but grid is {height}x{width}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(v.iter()).any(|d| !d.is_finite()) {
            return Err(Error::dim("field contains non-finite displacements".to_string()));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self { height, width, u: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn uniform(height: usize, width: usize, du: f64, dv: f64) -> Self {
        let n = height * width;
        Self { height, width, u: vec![du; n], v: vec![dv; n] }
    }

    /// Builds a field by evaluating `f(x, y) -> (u, v)` at every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl Fn(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let n = height * width;
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self::new(height, width, u, v)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.u, self.v)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|&d| d == 0.0)
    }

    /// Mean Euclidean displacement length.
    pub fn mean_magnitude(&self) -> f64 {
        let total: f64 = self.u.iter().zip(&self.v).map(|(a, b)| a.hypot(*b)).sum();
        total / self.u.len() as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u.iter().zip(&self.v).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
    }

    /// Mean endpoint error against `other`, optionally restricted to pixels
    /// where `mask` is true.
    pub fn mean_endpoint_error(&self, other: &Self, mask: Option<&[bool]>) -> Result<f64> {
        ensure_same_shape(self.shape(), other.shape(), "endpoint error")?;
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..self.u.len() {
            if mask.map_or(true, |m| m[i]) {
                total += (self.u[i] - other.u[i]).hypot(self.v[i] - other.v[i]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::dim("endpoint error over an empty mask".to_string()));
        }
        Ok(total / count as f64)
    }
}

/// Six-parameter affine transform in normalized `[-1, 1]²` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform2D {
    /// Row-major 2×2 linear part.
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Default for AffineTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform2D {
    pub fn identity() -> Self {
        Self { matrix: [[1.0, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { translation: [tx, ty], ..Self::identity() }
    }

    /// Rotation by `angle` radians about the grid center.
    ///
    /// In normalized coordinates an isotropic rotation is only isotropic in
    /// pixels when the grid is square, so the aspect ratio is folded in.
    pub fn rotation(angle: f64, height: usize, width: usize) -> Self {
        let sx = (width as f64 - 1.0) / 2.0;
        let sy = (height as f64 - 1.0) / 2.0;
        let (s, c) = angle.sin_cos();
        Self { matrix: [[c, -s * sy / sx], [s * sx / sy, c]], translation: [0.0, 0.0] }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// Parameters as `[a11, a12, a21, a22, tx, ty]`.
    pub fn to_params(&self) -> [f64; 6] {
        let m = &self.matrix;
        [m[0][0], m[0][1], m[1][0], m[1][1], self.translation[0], self.translation[1]]
    }

    pub fn from_params(p: &[f64; 6]) -> Self {
        Self { matrix: [[p[0], p[1]], [p[2], p[3]]], translation: [p[4], p[5]] }
    }

    /// Rotation angle of the linear part when measured in pixel units.
    pub fn pixel_rotation(&self, height: usize, width: usize) -> f64 {
        let sx = (width as f64 - 1.0) / 2.0;
        let sy = (height as f64 - 1.0) / 2.0;
        // Pixel-frame linear map is S·A·S⁻¹ with S = diag(sx, sy).
        let m = &self.matrix;
        let b10 = m[1][0] * sy / sx;
        let b00 = m[0][0];
        b10.atan2(b00)
    }
}

/// Multi-resolution stack, coarsest level first.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<Image2D>,
}

impl Pyramid {
    pub fn coarsest(&self) -> &Image2D {
        &self.levels[0]
    }

    pub fn finest(&self) -> &Image2D {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub(crate) fn ensure_same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!(
            "{what}: shapes {}x{} and {}x{} differ",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        (1.0 - t) * a + t * b
    }
}

/// Cell lookup for a clamped sample position: base indices, fractional
/// offsets, and whether each axis was clamped.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Cell {
    pub x0: usize,
    pub y0: usize,
    pub fx: f64,
    pub fy: f64,
    pub clamped_x: bool,
    pub clamped_y: bool,
}

#[inline]
pub(crate) fn locate(xs: f64, ys: f64, height: usize, width: usize) -> Cell {
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    let clamped_x = !(0.0..=max_x).contains(&xs);
    let clamped_y = !(0.0..=max_y).contains(&ys);
    let xc = xs.clamp(0.0, max_x);
    let yc = ys.clamp(0.0, max_y);
    let x0 = (xc.floor() as usize).min(width - 2);
    let y0 = (yc.floor() as usize).min(height - 2);
    Cell { x0, y0, fx: xc - x0 as f64, fy: yc - y0 as f64, clamped_x, clamped_y }
}

/// Bilinear sample of a row-major plane at `(xs, ys)` with border replication.
#[inline]
pub(crate) fn sample(plane: &[f64], height: usize, width: usize, xs: f64, ys: f64) -> f64 {
    let c = locate(xs, ys, height, width);
    let i = c.y0 * width + c.x0;
    let top = lerp(plane[i], plane[i + 1], c.fx);
    let bottom = lerp(plane[i + width], plane[i + width + 1], c.fx);
    lerp(top, bottom, c.fy)
}

/// Bilinear sample plus its partial derivatives with respect to the sample
/// position. Derivatives vanish along a clamped axis.
#[inline]
pub(crate) fn sample_with_grad(
    plane: &[f64],
    height: usize,
    width: usize,
    xs: f64,
    ys: f64,
) -> (f64, f64, f64) {
    let c = locate(xs, ys, height, width);
    let i = c.y0 * width + c.x0;
    let (p00, p10, p01, p11) = (plane[i], plane[i + 1], plane[i + width], plane[i + width + 1]);
    let top = lerp(p00, p10, c.fx);
    let bottom = lerp(p01, p11, c.fx);
    let value = lerp(top, bottom, c.fy);
    let dx = if c.clamped_x { 0.0 } else { (1.0 - c.fy) * (p10 - p00) + c.fy * (p11 - p01) };
    let dy = if c.clamped_y { 0.0 } else { bottom - top };
    (value, dx, dy)
}

/// Scatters `g` into `acc` with the bilinear weights of the sample at
/// `(xs, ys)`; the adjoint of [`sample`] with respect to the plane values.
#[inline]
pub(crate) fn splat(acc: &mut [f64], height: usize, width: usize, xs: f64, ys: f64, g: f64) {
    let c = locate(xs, ys, height, width);
    let i = c.y0 * width + c.x0;
    acc[i] += (1.0 - c.fx) * (1.0 - c.fy) * g;
    acc[i + 1] += c.fx * (1.0 - c.fy) * g;
    acc[i + width] += (1.0 - c.fx) * c.fy * g;
    acc[i + width + 1] += c.fx * c.fy * g;
}

/// Pull-warps `plane` (row-major, `height`×`width`) by the field planes.
pub(crate) fn warp_plane(plane: &[f64], height: usize, width: usize, u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            out.push(sample(plane, height, width, x as f64 + u[i], y as f64 + v[i]));
        }
    }
    out
}

/// Backward bilinear warp: `out(p) = image(p + φ(p))`, border-replicated.
pub fn warp_bilinear(image: &Image2D, field: &DeformationField2D) -> Result<Image2D> {
    ensure_same_shape(image.shape(), field.shape(), "warp_bilinear")?;
    let (h, w) = image.shape();
    let data = warp_plane(&image.data, h, w, &field.u, &field.v);
    Ok(Image2D { height: h, width: w, data })
}

/// Warped image plus the moving-image gradient at each sample location.
pub(crate) fn warp_with_gradient(
    image: &Image2D,
    field: &DeformationField2D,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = image.shape();
    let n = h * w;
    let mut out = Vec::with_capacity(n);
    let mut gx = Vec::with_capacity(n);
    let mut gy = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (val, dx, dy) =
                sample_with_grad(&image.data, h, w, x as f64 + field.u[i], y as f64 + field.v[i]);
            out.push(val);
            gx.push(dx);
            gy.push(dy);
        }
    }
    (out, gx, gy)
}

/// Normalized coordinate of pixel index `i` on an axis of length `n`.
#[inline]
pub(crate) fn normalized_coord(i: usize, n: usize) -> f64 {
    2.0 * i as f64 / (n as f64 - 1.0) - 1.0
}

/// Dense pixel-displacement field equivalent to `affine`.
///
/// `φ(p) = (A − I)·p̃ + t` in normalized coordinates, scaled back to pixels.
pub fn affine_to_field(
    affine: &AffineTransform2D,
    height: usize,
    width: usize,
) -> Result<DeformationField2D> {
    if height < 2 || width < 2 {
        return Err(Error::dim(format!("affine field needs at least 2x2, got {height}x{width}")));
    }
    let m = &affine.matrix;
    let sx = (width as f64 - 1.0) / 2.0;
    let sy = (height as f64 - 1.0) / 2.0;
    DeformationField2D::from_fn(height, width, |x, y| {
        let xn = normalized_coord(x, width);
        let yn = normalized_coord(y, height);
        let du = (m[0][0] - 1.0) * xn + m[0][1] * yn + affine.translation[0];
        let dv = m[1][0] * xn + (m[1][1] - 1.0) * yn + affine.translation[1];
        (du * sx, dv * sy)
    })
}

/// `(outer ∘ inner)(p) = inner(p) + outer(p + inner(p))`.
pub fn compose_fields(
    outer: &DeformationField2D,
    inner: &DeformationField2D,
) -> Result<DeformationField2D> {
    ensure_same_shape(outer.shape(), inner.shape(), "compose_fields")?;
    let (h, w) = outer.shape();
    let n = h * w;
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let xs = x as f64 + inner.u[i];
            let ys = y as f64 + inner.v[i];
            u.push(inner.u[i] + sample(&outer.u, h, w, xs, ys));
            v.push(inner.v[i] + sample(&outer.v, h, w, xs, ys));
        }
    }
    DeformationField2D::new(h, w, u, v)
}

/// Source coordinate for destination index `i` under pixel-center alignment.
#[inline]
fn resample_coord(i: usize, src: usize, dst: usize) -> f64 {
    if src == dst {
        i as f64
    } else {
        (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
    }
}

/// Resamples a plane to a new grid with pixel-center-aligned bilinear sampling.
pub(crate) fn resize_plane(
    plane: &[f64],
    height: usize,
    width: usize,
    new_height: usize,
    new_width: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(new_height * new_width);
    for y in 0..new_height {
        let ys = resample_coord(y, height, new_height);
        for x in 0..new_width {
            let xs = resample_coord(x, width, new_width);
            out.push(sample(plane, height, width, xs, ys));
        }
    }
    out
}

/// Resamples a field to a new grid, scaling displacements by the per-axis
/// size ratio so the physical motion is preserved.
pub fn resize_field(
    field: &DeformationField2D,
    new_height: usize,
    new_width: usize,
) -> Result<DeformationField2D> {
    if new_height < 2 || new_width < 2 {
        return Err(Error::dim(format!(
            "resize target must be at least 2x2, got {new_height}x{new_width}"
        )));
    }
    let (h, w) = field.shape();
    if (h, w) == (new_height, new_width) {
        return Ok(field.clone());
    }
    let rx = new_width as f64 / w as f64;
    let ry = new_height as f64 / h as f64;
    let u = resize_plane(&field.u, h, w, new_height, new_width).into_iter().map(|d| d * rx).collect();
    let v = resize_plane(&field.v, h, w, new_height, new_width).into_iter().map(|d| d * ry).collect();
    DeformationField2D::new(new_height, new_width, u, v)
}

/// Resizes an image with pixel-center-aligned bilinear sampling.
pub fn resize_image(image: &Image2D, new_height: usize, new_width: usize) -> Result<Image2D> {
    let (h, w) = image.shape();
    if (h, w) == (new_height, new_width) {
        return Ok(image.clone());
    }
    Image2D::new(new_height, new_width, resize_plane(&image.data, h, w, new_height, new_width))
}

/// 2×2 average pooling; odd trailing rows/columns pool over what exists.
pub(crate) fn downsample_plane(plane: &[f64], height: usize, width: usize) -> (Vec<f64>, usize, usize) {
    let nh = height.div_ceil(2);
    let nw = width.div_ceil(2);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        for x in 0..nw {
            let mut sum = 0.0;
            let mut count = 0.0;
            for yy in (2 * y)..(2 * y + 2).min(height) {
                for xx in (2 * x)..(2 * x + 2).min(width) {
                    sum += plane[yy * width + xx];
                    count += 1.0;
                }
            }
            out.push(sum / count);
        }
    }
    (out, nh, nw)
}

pub fn downsample(image: &Image2D) -> Result<Image2D> {
    let (data, h, w) = downsample_plane(&image.data, image.height, image.width);
    Image2D::new(h, w, data)
}

/// Average-pool pyramid with `levels` entries, coarsest first.
pub fn build_pyramid(image: &Image2D, levels: usize) -> Result<Pyramid> {
    if levels == 0 {
        return Err(Error::config("pyramid needs at least one level"));
    }
    let mut stack = vec![image.clone()];
    for _ in 1..levels {
        let next = downsample(stack.last().unwrap())?;
        stack.push(next);
    }
    let coarsest = stack.last().unwrap();
    if coarsest.height < 8 || coarsest.width < 8 {
        return Err(Error::config(format!(
            "{levels} pyramid levels leave a {}x{} coarsest level; need at least 8x8",
            coarsest.height, coarsest.width
        )));
    }
    stack.reverse();
    Ok(Pyramid { levels: stack })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp4() -> Image2D {
        Image2D::from_fn(4, 4, |x, _| x as f64).unwrap()
    }

    #[test]
    fn zero_field_warp_is_identity() {
        let img = Image2D::from_fn(5, 7, |x, y| ((x * 13 + y * 7) % 11) as f64 / 10.0).unwrap();
        let out = warp_bilinear(&img, &DeformationField2D::zeros(5, 7)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn ramp_shift_clamps_at_border() {
        let out = warp_bilinear(&ramp4(), &DeformationField2D::uniform(4, 4, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.get(x, y), (x as f64 + 1.0).min(3.0));
            }
        }
    }

    #[test]
    fn half_pixel_shift_interpolates() {
        let img = Image2D::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = warp_bilinear(&img, &DeformationField2D::uniform(2, 2, 0.5, 0.0)).unwrap();
        assert_eq!(out.get(0, 0), 0.5);
        assert_eq!(out.get(0, 1), 0.5);
    }

    #[test]
    fn warp_rejects_shape_mismatch() {
        let err = warp_bilinear(&ramp4(), &DeformationField2D::zeros(4, 5)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn identity_affine_is_zero_field() {
        let f = affine_to_field(&AffineTransform2D::identity(), 9, 13).unwrap();
        assert!(f.is_zero());
    }

    #[test]
    fn affine_translation_in_pixels() {
        let f = affine_to_field(&AffineTransform2D::translation(0.5, 0.0), 6, 11).unwrap();
        for i in 0..66 {
            assert!((f.u()[i] - 0.5 * 10.0 / 2.0).abs() < 1e-12);
            assert_eq!(f.v()[i], 0.0);
        }
    }

    #[test]
    fn affine_scaling_is_linear_in_x() {
        let a = AffineTransform2D { matrix: [[1.1, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] };
        let (h, w) = (5, 9);
        let f = affine_to_field(&a, h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                let xn = 2.0 * x as f64 / 8.0 - 1.0;
                let (u, v) = f.at(x, y);
                assert!((u - 0.1 * xn * 4.0).abs() < 1e-12);
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn composition_with_zero_is_exact() {
        let f = DeformationField2D::from_fn(6, 6, |x, y| (0.3 * x as f64, -0.2 * y as f64)).unwrap();
        let z = DeformationField2D::zeros(6, 6);
        assert_eq!(compose_fields(&z, &f).unwrap(), f);
        assert_eq!(compose_fields(&f, &z).unwrap(), f);
    }

    #[test]
    fn composition_of_translations_adds() {
        let a = DeformationField2D::uniform(8, 8, 1.0, 0.0);
        let b = DeformationField2D::uniform(8, 8, 0.0, 2.0);
        let c = compose_fields(&a, &b).unwrap();
        for i in 0..64 {
            assert!((c.u()[i] - 1.0).abs() < 1e-12);
            assert!((c.v()[i] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_scales_displacements() {
        let f = DeformationField2D::uniform(8, 8, 2.0, 0.0);
        let g = resize_field(&f, 16, 16).unwrap();
        assert!(g.u().iter().all(|&d| (d - 4.0).abs() < 1e-12));
        assert!(g.v().iter().all(|&d| d == 0.0));
        assert_eq!(resize_field(&f, 8, 8).unwrap(), f);
        assert!(resize_field(&DeformationField2D::zeros(8, 8), 5, 13).unwrap().is_zero());
    }

    #[test]
    fn pyramid_shapes_and_pooling() {
        let img = Image2D::constant(64, 64, 0.25).unwrap();
        let p = build_pyramid(&img, 3).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|l| l.shape()).collect();
        assert_eq!(shapes, vec![(16, 16), (32, 32), (64, 64)]);
        assert!(p.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.25)));
        assert_eq!(p.finest(), &img);

        let checker = Image2D::from_fn(4, 4, |x, y| ((x + y) % 2) as f64).unwrap();
        let pooled = downsample(&checker).unwrap();
        assert!(pooled.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pyramid_rejects_too_many_levels() {
        let img = Image2D::constant(32, 32, 0.0).unwrap();
        assert!(matches!(build_pyramid(&img, 4), Err(Error::Config(_))));
        assert!(build_pyramid(&img, 3).is_ok());
    }

    #[test]
    fn rotation_preserves_pixel_angle() {
        let a = AffineTransform2D::rotation(0.1, 40, 60);
        assert!((a.pixel_rotation(40, 60) - 0.1).abs() < 1e-12);
    }
}
