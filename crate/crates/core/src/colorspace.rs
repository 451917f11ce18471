//! sRGB (D65) <-> CIE L*a*b* conversion and the 8-bit storage channel.
//!
//! The working representation splits an image into a luminance plane `L`
//! scaled to `[0, 1]` (from L* in `[0, 100]`) and two chrominance planes
//! scaled by `1/128` (from a*, b* in the reference interval `[-128, 127]`).
//! Zero chroma stays exactly zero, so gray pixels carry no color.
//!
//! The white point is taken as the row sums of the RGB->XYZ matrix, which
//! makes `RGB(1, 1, 1)` and every gray level map to `a = b = 0` exactly.

use std::io::Cursor;
use std::path::Path;

use image::ImageFormat;
use thiserror::Error;

/// Scale between CIE L* and the normalized luminance plane.
pub const L_SCALE: f64 = 100.0;
/// Scale between CIE a*/b* and the normalized chrominance planes.
pub const AB_SCALE: f64 = 128.0;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = invert3(&RGB_TO_XYZ);

const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const DELTA: f64 = 6.0 / 29.0;

#[derive(Debug, Error)]
pub enum ColorError {
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("buffer of length {len} does not match {width}x{height}x{channels}")]
    Shape {
        width: usize,
        height: usize,
        channels: usize,
        len: usize,
    },
    #[error("{0} is a lossy or unsupported container format; only PNG is accepted")]
    LossyFormat(String),
    #[error("image i/o: {0}")]
    Image(#[from] image::ImageError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// RGB image in working form: interleaved reals, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// RGB image in storage form: interleaved 8-bit integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// Luminance plane plus two channel-major chrominance planes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    width: usize,
    height: usize,
    l: Vec<f64>,
    c: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ColorError> {
        check_len(width, height, 3, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

impl StorageImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ColorError> {
        check_len(width, height, 3, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Maps every entry back to the working range by `/255`.
    pub fn to_working(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    /// Decodes a PNG. Any other container format is rejected.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, ColorError> {
        let format = image::guess_format(bytes)?;
        if format != ImageFormat::Png {
            return Err(ColorError::LossyFormat(format!("{format:?}")));
        }
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw(),
        })
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self, ColorError> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    /// Encodes as a plain 8-bit RGB PNG with no ancillary chunks.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ColorError> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<(), ColorError> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

impl LabImage {
    /// `l` is `height*width` row-major, `c` is `2*height*width` channel-major.
    pub fn new(width: usize, height: usize, l: Vec<f64>, c: Vec<f64>) -> Result<Self, ColorError> {
        check_len(width, height, 1, l.len())?;
        check_len(width, height, 2, c.len())?;
        Ok(Self {
            width,
            height,
            l,
            c,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn luminance(&self) -> &[f64] {
        &self.l
    }

    pub fn chroma(&self) -> &[f64] {
        &self.c
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.l, self.c)
    }
}

fn check_len(width: usize, height: usize, channels: usize, len: usize) -> Result<(), ColorError> {
    if width * height * channels != len {
        return Err(ColorError::Shape {
            width,
            height,
            channels,
            len,
        });
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<(), ColorError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ColorError::NonFinite(i)),
        None => Ok(()),
    }
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(u: f64) -> f64 {
    if u > DELTA {
        u * u * u
    } else {
        3.0 * DELTA * DELTA * (u - 4.0 / 29.0)
    }
}

const fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    [
        [c00 / det, (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det, (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det],
        [c01 / det, (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det, (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det],
        [c02 / det, (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det, (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det],
    ]
}

fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Gamma-encoded sRGB in `[0, 1]` to CIE `(L*, a*, b*)`.
pub fn srgb_to_cielab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = mat_mul(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIE `(L*, a*, b*)` to gamma-encoded sRGB, without any gamut clipping.
///
/// The piecewise transfer curves extend naturally past `[0, 1]`, so this is
/// an exact inverse of [`srgb_to_cielab`] on the extended range.
pub fn cielab_to_srgb_unclipped(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    mat_mul(&XYZ_TO_RGB, xyz).map(linear_to_srgb)
}

fn normalized_to_cielab(l: f64, a: f64, b: f64) -> [f64; 3] {
    [l * L_SCALE, a * AB_SCALE, b * AB_SCALE]
}

/// True when the normalized Lab triple maps inside the RGB cube.
pub fn in_gamut(l: f64, a: f64, b: f64) -> bool {
    cielab_to_srgb_unclipped(normalized_to_cielab(l, a, b))
        .iter()
        .all(|v| (0.0..=1.0).contains(v))
}

/// Pulls an out-of-gamut chroma pair toward gray at fixed luminance.
///
/// Returns the largest scale `k` in `[0, 1]` (to bisection precision) with
/// `(l, k*a, k*b)` inside the RGB cube, plus whether any reduction happened.
pub fn fit_chroma_to_gamut(l: f64, a: f64, b: f64) -> (f64, f64, bool) {
    let l = l.clamp(0.0, 1.0);
    if in_gamut(l, a, b) {
        return (a, b, false);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if in_gamut(l, a * mid, b * mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (a * lo, b * lo, true)
}

/// Converts a working-form RGB image to the normalized Lab representation.
pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage, ColorError> {
    check_finite(&img.data)?;
    let n = img.width * img.height;
    let mut l = Vec::with_capacity(n);
    let mut c = vec![0.0; 2 * n];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        let lab = srgb_to_cielab([px[0], px[1], px[2]]);
        l.push(lab[0] / L_SCALE);
        c[i] = lab[1] / AB_SCALE;
        c[n + i] = lab[2] / AB_SCALE;
    }
    Ok(LabImage {
        width: img.width,
        height: img.height,
        l,
        c,
    })
}

/// Inverse of [`rgb_to_lab`]; out-of-gamut results are clipped per channel.
pub fn lab_to_rgb(img: &LabImage) -> Result<RgbImage, ColorError> {
    let mut out = lab_to_rgb_unclipped(img)?;
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Inverse of [`rgb_to_lab`] on the extended range, with no clipping.
///
/// The result may leave `[0, 1]`; it models a lossless float channel.
pub fn lab_to_rgb_unclipped(img: &LabImage) -> Result<RgbImage, ColorError> {
    check_finite(&img.l)?;
    check_finite(&img.c)?;
    let n = img.width * img.height;
    let mut data = Vec::with_capacity(3 * n);
    for i in 0..n {
        let rgb = cielab_to_srgb_unclipped(normalized_to_cielab(img.l[i], img.c[i], img.c[n + i]));
        data.extend_from_slice(&rgb);
    }
    Ok(RgbImage {
        width: img.width,
        height: img.height,
        data,
    })
}

/// The lossy save step: `round(255 * v)` (half away from zero), clamped.
pub fn quantize_to_storage(img: &RgbImage) -> StorageImage {
    StorageImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| quantize_value(v)).collect(),
    }
}

pub fn quantize_value(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}
