//! RGB images in `[0, 1]`, image metrics and the image file formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::ByteReader;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Row-major `height x width x 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = 3 * (y * self.width + x);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = 3 * (y * self.width + x);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(12 + 8 * self.data.len());
        out.extend_from_slice(IMG_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        let magic = r.array::<4>()?;
        if &magic != IMG_MAGIC {
            return Err(Error::BadMagic { expected: *IMG_MAGIC, found: magic });
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let expected = 12 + 8 * 3 * width * height;
        if bytes.len() != expected {
            return Err(Error::Truncated { needed: expected, found: bytes.len() });
        }
        let data = r.f64s(width * height * 3)?;
        Ok(Self { width, height, data })
    }

    /// Binary 8-bit PPM (P6).
    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Truncated { needed: pos + 1, found: bytes.len() });
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(Error::InvalidArgument("only 8-bit P6 PPM is supported".into()));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad PPM dimension {s:?}")))
        };
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let n = width * height * 3;
        if bytes.len() < pos + n {
            return Err(Error::Truncated { needed: pos + n, found: bytes.len() });
        }
        let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { width, height, data })
    }
}

const IMG_MAGIC: &[u8; 4] = b"G3DI";

/// Neumaier-compensated running sum. Image-wide reductions go through it so
/// that losses stay accurate to a few ulps, which finite-difference checks
/// with small steps rely on.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

pub fn mse(image: &Image, target: &Image) -> Result<f64> {
    image.same_shape(target)?;
    let sum: CompensatedSum = image.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(sum.total() / image.data.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(image: &Image, target: &Image) -> Result<f64> {
    let m = mse(image, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

pub fn mean_psnr<'a>(pairs: impl IntoIterator<Item = (&'a Image, &'a Image)>) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in pairs {
        total += psnr(a, b)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no views to evaluate".into()));
    }
    Ok(total / count as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable zero-padded "same" filtering of a single-channel plane.
fn blur(plane: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let xx = x as isize + k as isize - half;
                if xx >= 0 && (xx as usize) < width {
                    acc += wk * plane[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let yy = y as isize + k as isize - half;
                if yy >= 0 && (yy as usize) < height {
                    acc += wk * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels, and optionally its gradient with
/// respect to `image`.
pub fn ssim_with_grad(image: &Image, target: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    image.same_shape(target)?;
    let (w, h) = (image.width, image.height);
    let win = gaussian_window();
    let n = (w * h * 3) as f64;
    let mut total = CompensatedSum::default();
    let mut grad = want_grad.then(|| Image::new(w, h));
    for c in 0..3 {
        let x = channel(image, c);
        let y = channel(target, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mu1 = blur(&x, w, h, &win);
        let mu2 = blur(&y, w, h, &win);
        let s11 = blur(&xx, w, h, &win);
        let s22 = blur(&yy, w, h, &win);
        let s12 = blur(&xy, w, h, &win);
        let mut g_mu = vec![0.0; w * h];
        let mut g_s11 = vec![0.0; w * h];
        let mut g_s12 = vec![0.0; w * h];
        for p in 0..w * h {
            let (m1, m2) = (mu1[p], mu2[p]);
            let a1 = 2.0 * m1 * m2 + SSIM_C1;
            let a2 = 2.0 * (s12[p] - m1 * m2) + SSIM_C2;
            let b1 = m1 * m1 + m2 * m2 + SSIM_C1;
            let b2 = (s11[p] - m1 * m1) + (s22[p] - m2 * m2) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total.add(s);
            if want_grad {
                g_mu[p] = s * (2.0 * m2 / a1 - 2.0 * m2 / a2 - 2.0 * m1 / b1 + 2.0 * m1 / b2);
                g_s11[p] = -s / b2;
                g_s12[p] = 2.0 * s / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mu = blur(&g_mu, w, h, &win);
            let t_s11 = blur(&g_s11, w, h, &win);
            let t_s12 = blur(&g_s12, w, h, &win);
            for p in 0..w * h {
                g.data[3 * p + c] = (t_mu[p] + 2.0 * x[p] * t_s11[p] + y[p] * t_s12[p]) / n;
            }
        }
    }
    Ok((total.total() / n, grad))
}

pub fn ssim(image: &Image, target: &Image) -> Result<f64> {
    Ok(ssim_with_grad(image, target, false)?.0)
}
