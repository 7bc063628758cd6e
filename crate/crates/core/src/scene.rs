//! Gaussian scene data model, attribute layout and the `.g3d` scene file.
//!
//! A scene stores five attribute blocks per primitive: position, log-scale,
//! rotation quaternion (unnormalized), opacity logit and spherical-harmonic
//! coefficients laid out as `[N][(l+1)^2][3]` (band-major, channel-minor).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3};

pub const MAX_SH_DEGREE: usize = 3;

/// Members of the augmented attribute set, in quantizer/checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeClass {
    Means,
    Scales,
    Quats,
    Opacities,
    ShDc,
    ShAc,
}

impl AttributeClass {
    pub const ALL: [AttributeClass; 6] = [
        AttributeClass::Means,
        AttributeClass::Scales,
        AttributeClass::Quats,
        AttributeClass::Opacities,
        AttributeClass::ShDc,
        AttributeClass::ShAc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Scalars per Gaussian.
    pub fn dim(self, sh_degree: usize) -> usize {
        match self {
            AttributeClass::Means | AttributeClass::Scales | AttributeClass::ShDc => 3,
            AttributeClass::Quats => 4,
            AttributeClass::Opacities => 1,
            AttributeClass::ShAc => 3 * sh_degree * (sh_degree + 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeClass::Means => "means",
            AttributeClass::Scales => "scales",
            AttributeClass::Quats => "quats",
            AttributeClass::Opacities => "opacities",
            AttributeClass::ShDc => "sh_dc",
            AttributeClass::ShAc => "sh_ac",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

/// Number of SH coefficients per channel at degree `l`.
pub fn sh_coeff_count(sh_degree: usize) -> usize {
    (sh_degree + 1) * (sh_degree + 1)
}

/// Scalars per Gaussian row: `3 + 3 + 4 + 1 + 3(l+1)^2`.
pub fn row_dim(sh_degree: usize) -> usize {
    3 + 3 + 4 + 1 + 3 * sh_coeff_count(sh_degree)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub means: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub quats: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    /// `N * (l+1)^2 * 3` coefficients.
    pub sh_coeffs: Vec<f64>,
    pub sh_degree: usize,
    pub alive: Vec<bool>,
}

/// One Gaussian's attributes, used when building scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    pub quat: [f64; 4],
    pub opacity_logit: f64,
    pub sh: Vec<f64>,
}

impl GaussianScene {
    pub fn empty(sh_degree: usize) -> Self {
        assert!(sh_degree <= MAX_SH_DEGREE, "sh degree {sh_degree} > {MAX_SH_DEGREE}");
        Self {
            means: Vec::new(),
            log_scales: Vec::new(),
            quats: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            sh_degree,
            alive: Vec::new(),
        }
    }

    pub fn push(&mut self, g: Gaussian) {
        assert_eq!(g.sh.len(), self.sh_stride(), "sh coefficient count");
        self.means.push(g.mean);
        self.log_scales.push(g.log_scale);
        self.quats.push(g.quat);
        self.opacity_logits.push(g.opacity_logit);
        self.sh_coeffs.extend_from_slice(&g.sh);
        self.alive.push(true);
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    /// SH scalars per Gaussian.
    pub fn sh_stride(&self) -> usize {
        3 * sh_coeff_count(self.sh_degree)
    }

    pub fn row_dim(&self) -> usize {
        row_dim(self.sh_degree)
    }

    pub fn sh_row(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn sh_row_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sh_stride();
        &mut self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        Gaussian {
            mean: self.means[i],
            log_scale: self.log_scales[i],
            quat: self.quats[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh_row(i).to_vec(),
        }
    }

    /// Checks that every block agrees on N and that quaternions are usable.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let ok = self.log_scales.len() == n
            && self.quats.len() == n
            && self.opacity_logits.len() == n
            && self.alive.len() == n
            && self.sh_coeffs.len() == n * self.sh_stride();
        if !ok {
            return Err(Error::DimensionMismatch(
                "attribute blocks disagree on the number of gaussians".into(),
            ));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::DimensionMismatch(format!("sh degree {}", self.sh_degree)));
        }
        for (i, q) in self.quats.iter().enumerate() {
            if quat_norm(q) == 0.0 {
                return Err(Error::DegenerateRotation { index: i });
            }
        }
        Ok(())
    }

    /// Unit quaternion of Gaussian `i`.
    pub fn normalized_quat(&self, i: usize) -> Result<[f64; 4]> {
        let q = self.quats[i];
        let n = quat_norm(&q);
        if n == 0.0 {
            return Err(Error::DegenerateRotation { index: i });
        }
        Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
    }

    /// World-space covariance `R diag(exp(s))^2 R^T`.
    pub fn covariance(&self, i: usize) -> Result<Mat3> {
        let q = self.normalized_quat(i)?;
        Ok(covariance_from(&q, &self.log_scales[i]))
    }

    /// Drops dead rows from every block at once.
    pub fn compact(&self) -> GaussianScene {
        let mut out = GaussianScene::empty(self.sh_degree);
        for i in (0..self.len()).filter(|&i| self.alive[i]) {
            out.push(self.gaussian(i));
        }
        out
    }

    /// Row-major values of one attribute class over all rows (dead included).
    pub fn gather(&self, attr: AttributeClass) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * attr.dim(self.sh_degree));
        match attr {
            AttributeClass::Means => self.means.iter().for_each(|m| out.extend_from_slice(m)),
            AttributeClass::Scales => self.log_scales.iter().for_each(|s| out.extend_from_slice(s)),
            AttributeClass::Quats => self.quats.iter().for_each(|q| out.extend_from_slice(q)),
            AttributeClass::Opacities => out.extend_from_slice(&self.opacity_logits),
            AttributeClass::ShDc => (0..n).for_each(|i| out.extend_from_slice(&self.sh_row(i)[..3])),
            AttributeClass::ShAc => (0..n).for_each(|i| out.extend_from_slice(&self.sh_row(i)[3..])),
        }
        out
    }

    /// Inverse of [`GaussianScene::gather`].
    pub fn scatter(&mut self, attr: AttributeClass, values: &[f64]) {
        let d = attr.dim(self.sh_degree);
        assert_eq!(values.len(), self.len() * d, "scatter length for {}", attr.name());
        match attr {
            AttributeClass::Means => copy_rows(&mut self.means, values),
            AttributeClass::Scales => copy_rows(&mut self.log_scales, values),
            AttributeClass::Quats => copy_rows(&mut self.quats, values),
            AttributeClass::Opacities => self.opacity_logits.copy_from_slice(values),
            AttributeClass::ShDc | AttributeClass::ShAc => {
                let off = if attr == AttributeClass::ShDc { 0 } else { 3 };
                for (i, chunk) in values.chunks_exact(d.max(1)).enumerate().take(self.len()) {
                    self.sh_row_mut(i)[off..off + d].copy_from_slice(chunk);
                }
            }
        }
    }

    /// Total stored scalars, `N * D`.
    pub fn scalar_count(&self) -> usize {
        self.means.len() * 3
            + self.log_scales.len() * 3
            + self.quats.len() * 4
            + self.opacity_logits.len()
            + self.sh_coeffs.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Little-endian `.g3d` encoding: magic, version, N, degree, the five
    /// attribute blocks as f64 row-major, then the packed alive mask.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(13 + 8 * self.scalar_count() + n.div_ceil(8));
        out.extend_from_slice(SCENE_MAGIC);
        out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.push(self.sh_degree as u8);
        let blocks: [&[f64]; 5] = [
            self.means.as_flattened(),
            self.log_scales.as_flattened(),
            self.quats.as_flattened(),
            &self.opacity_logits,
            &self.sh_coeffs,
        ];
        for block in blocks {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut mask = vec![0u8; n.div_ceil(8)];
        for (i, &a) in self.alive.iter().enumerate() {
            if a {
                mask[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&mask);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>()?;
        if &magic != SCENE_MAGIC {
            return Err(Error::BadMagic { expected: *SCENE_MAGIC, found: magic });
        }
        let version = r.u32()?;
        if version != SCENE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let degree = r.u8()? as usize;
        if degree > MAX_SH_DEGREE {
            return Err(Error::DimensionMismatch(format!("sh degree {degree}")));
        }
        let expected = 13 + 8 * n * row_dim(degree) + n.div_ceil(8);
        if bytes.len() < expected {
            return Err(Error::Truncated { needed: expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes { expected, found: bytes.len() });
        }
        let mut scene = GaussianScene::empty(degree);
        scene.means = r.rows::<3>(n)?;
        scene.log_scales = r.rows::<3>(n)?;
        scene.quats = r.rows::<4>(n)?;
        scene.opacity_logits = r.f64s(n)?;
        scene.sh_coeffs = r.f64s(n * 3 * sh_coeff_count(degree))?;
        let mask = r.bytes(n.div_ceil(8))?;
        scene.alive = (0..n).map(|i| mask[i / 8] & (1 << (i % 8)) != 0).collect();
        scene.validate()?;
        Ok(scene)
    }
}

const SCENE_MAGIC: &[u8; 4] = b"G3DS";
const SCENE_VERSION: u32 = 1;

fn copy_rows<const D: usize>(rows: &mut [[f64; D]], values: &[f64]) {
    for (row, chunk) in rows.iter_mut().zip(values.chunks_exact(D)) {
        row.copy_from_slice(chunk);
    }
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Covariance from a unit quaternion and log-scales.
pub fn covariance_from(unit_quat: &[f64; 4], log_scale: &[f64; 3]) -> Mat3 {
    let r = linalg::quat_to_rotation(unit_quat);
    let s2 = log_scale.map(|s| (2.0 * s).exp());
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| r[i][k] * s2[k] * r[j][k]).sum();
        }
    }
    out
}

/// Cursor over a little-endian byte buffer.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated { needed: end, found: self.bytes.len() });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn rows<const D: usize>(&mut self, n: usize) -> Result<Vec<[f64; D]>> {
        (0..n)
            .map(|_| {
                let mut row = [0.0; D];
                for v in &mut row {
                    *v = self.f64()?;
                }
                Ok(row)
            })
            .collect()
    }
}

/// Pinhole camera with a world-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation, row-major.
    #[serde(rename = "R", with = "mat3_flat")]
    pub rotation: Mat3,
    #[serde(rename = "t")]
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

mod mat3_flat {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::linalg::Mat3;

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        m.as_flattened().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 9 {
            return Err(serde::de::Error::invalid_length(v.len(), &"9 floats"));
        }
        Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`. Camera axes follow the usual
    /// computer-vision convention: +x right, +y down, +z forward.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fov_x_deg: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = linalg::normalize3(&linalg::sub3(&target, &eye));
        let right = linalg::normalize3(&linalg::cross3(&forward, &up));
        let down = linalg::cross3(&forward, &right);
        let rotation = [right, down, forward];
        let translation = linalg::mat3_vec(&rotation, &eye).map(|v| -v);
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            rotation,
            translation,
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn position(&self) -> [f64; 3] {
        linalg::mat3_t_vec(&self.rotation, &self.translation).map(|v| -v)
    }

    pub fn world_to_camera(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = linalg::mat3_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn validate(&self) -> Result<()> {
        let rrt = linalg::mat3_mul(&self.rotation, &linalg::transpose3(&self.rotation));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rrt[i][j] - want).abs() > 1e-9 {
                    return Err(Error::InvalidCamera("rotation is not orthonormal".into()));
                }
            }
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidCamera(format!(
                "image {}x{} smaller than 8x8",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        Ok(())
    }
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(cameras)?)?;
    Ok(())
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let cams: Vec<Camera> = serde_json::from_slice(&fs::read(path)?)?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(n: usize, degree: usize) -> GaussianScene {
        let mut s = GaussianScene::empty(degree);
        for i in 0..n {
            let f = i as f64;
            s.push(Gaussian {
                mean: [f, -f, 0.5 * f],
                log_scale: [-1.0, -1.5, -2.0 + 0.1 * f],
                quat: [1.0, 0.1 * f, 0.0, -0.2],
                opacity_logit: 0.3 * f,
                sh: (0..3 * sh_coeff_count(degree)).map(|k| k as f64 * 0.01 + f).collect(),
            });
        }
        s
    }

    #[test]
    fn row_dim_matches_closed_form() {
        assert_eq!(row_dim(3), 59);
        assert_eq!(row_dim(0), 14);
        for l in 0..=3 {
            let total: usize = AttributeClass::ALL.iter().map(|a| a.dim(l)).sum();
            assert_eq!(total, row_dim(l));
        }
    }

    #[test]
    fn covariance_identity_and_axis_scale() {
        let mut s = GaussianScene::empty(0);
        s.push(Gaussian {
            mean: [0.0; 3],
            log_scale: [0.0; 3],
            quat: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            sh: vec![0.0; 3],
        });
        s.push(Gaussian {
            mean: [0.0; 3],
            log_scale: [2f64.ln(), 0.0, 0.0],
            quat: [3.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            sh: vec![0.0; 3],
        });
        let c0 = s.covariance(0).unwrap();
        let c1 = s.covariance(1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((c0[i][j] - id).abs() < 1e-15);
                let want = if i == j { if i == 0 { 4.0 } else { 1.0 } } else { 0.0 };
                assert!((c1[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        let mut s = scene_with(2, 1);
        s.quats[1] = [0.0; 4];
        assert!(matches!(s.covariance(1), Err(Error::DegenerateRotation { index: 1 })));
        assert!(matches!(
            GaussianScene::from_bytes(&s.to_bytes()),
            Err(Error::DegenerateRotation { index: 1 })
        ));
    }

    #[test]
    fn compact_removes_rows_in_order() {
        let s = scene_with(3, 3);
        assert_eq!(s.compact(), s);
        let mut m = s.clone();
        m.alive[0] = false;
        let c = m.compact();
        assert_eq!(c.len(), 2);
        assert_eq!(c.gaussian(0), s.gaussian(1));
        assert_eq!(c.gaussian(1), s.gaussian(2));
        assert_eq!(c.compact(), c);
    }

    #[test]
    fn gather_scatter_cover_every_scalar() {
        let s = scene_with(4, 3);
        let mut t = GaussianScene::empty(3);
        for _ in 0..4 {
            t.push(Gaussian {
                mean: [0.0; 3],
                log_scale: [0.0; 3],
                quat: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: 0.0,
                sh: vec![0.0; 48],
            });
        }
        let mut count = 0;
        for a in AttributeClass::ALL {
            let v = s.gather(a);
            count += v.len();
            t.scatter(a, &v);
        }
        assert_eq!(count, s.scalar_count());
        assert_eq!(t, s);
    }

    #[test]
    fn scene_file_roundtrip_and_errors() {
        let mut s = scene_with(5, 2);
        s.alive[3] = false;
        let bytes = s.to_bytes();
        assert_eq!(GaussianScene::from_bytes(&bytes).unwrap(), s);

        let empty = GaussianScene::empty(3);
        let eb = empty.to_bytes();
        assert_eq!(eb.len(), 13);
        assert_eq!(GaussianScene::from_bytes(&eb).unwrap(), empty);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(GaussianScene::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut badv = bytes.clone();
        badv[4] = 2;
        assert!(matches!(GaussianScene::from_bytes(&badv), Err(Error::UnsupportedVersion(2))));
        assert!(matches!(
            GaussianScene::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(GaussianScene::from_bytes(&long), Err(Error::TrailingBytes { .. })));
    }

    #[test]
    fn camera_look_at_is_orthonormal_and_centers_target() {
        let cam = Camera::look_at([1.0, -0.5, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 50.0, 64, 48);
        cam.validate().unwrap();
        let p = cam.world_to_camera(&[0.0; 3]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] > 0.0);
        let pos = cam.position();
        for k in 0..3 {
            assert!((pos[k] - [1.0, -0.5, -3.0][k]).abs() < 1e-12);
        }
        let json = serde_json::to_string(&cam).unwrap();
        assert!(json.contains("\"R\":["));
        let back: Camera = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn camera_validation_rejects_small_images() {
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 50.0, 4, 48);
        assert!(cam.validate().is_err());
    }
}
