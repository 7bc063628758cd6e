//! CPU splatting renderer: EWA projection, global depth sort per camera and
//! front-to-back alpha compositing, plus the analytic backward pass.
//!
//! Work is split into fixed bands of image rows. Bands may run on any number
//! of threads, but their per-Gaussian partial sums are always merged in band
//! order, so results do not depend on the thread count.

mod backward;

use rayon::prelude::*;

use crate::error::Result;
use crate::image::Image;
use crate::linalg::{self, Mat3};
use crate::quantizer::QuantizerBank;
use crate::scene::{Camera, GaussianScene, MAX_SH_DEGREE};
use crate::sh;

pub use backward::{
    backward, backward_quantized, backward_with, image_loss, BackwardOutput, LossConfig,
    QuantizedBackward, SceneGradients,
};

/// Added to the diagonal of every projected covariance (px^2).
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;
pub const NEAR_PLANE: f64 = 0.01;
/// Gaussian falloff below `exp(POWER_CUTOFF)` is treated as zero.
pub const POWER_CUTOFF: f64 = -30.0;
pub const DEFAULT_COVERAGE_EPSILON: f64 = 1e-3;

const ROWS_PER_BAND: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    /// SH bands above this degree are ignored.
    pub active_sh_degree: usize,
    /// Threshold on the splat opacity for the per-Gaussian pixel count.
    pub coverage_epsilon: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { active_sh_degree: MAX_SH_DEGREE, coverage_epsilon: DEFAULT_COVERAGE_EPSILON }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    /// Per Gaussian, the sum over pixels of `T_i * alpha_i`.
    pub per_gaussian_transmittance: Vec<f64>,
    /// Per Gaussian, pixels where its splat opacity exceeds the coverage epsilon.
    pub per_gaussian_pixel_count: Vec<u64>,
    /// Gaussian indices of the rasterized splats, front to back.
    pub blend_order: Vec<usize>,
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// Includes the low-pass floor.
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
}

/// Projects Gaussian `i`. Returns `None` when it lies behind the near plane.
pub fn project(scene: &GaussianScene, camera: &Camera, i: usize) -> Result<Option<Projection>> {
    let cov3d = scene.covariance(i)?;
    let p = camera.world_to_camera(&scene.means[i]);
    if p[2] <= NEAR_PLANE {
        return Ok(None);
    }
    let geo = project_geometry(camera, &p, &cov3d);
    Ok(Some(Projection { mean2d: geo.mean2d, cov2d: geo.cov2d, depth: p[2] }))
}

pub(crate) struct Geometry {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub jac: [[f64; 3]; 2],
    /// `W Sigma W^T`, the covariance in camera coordinates.
    pub cov_cam: Mat3,
}

pub(crate) fn project_geometry(camera: &Camera, p: &[f64; 3], cov3d: &Mat3) -> Geometry {
    let [x, y, z] = *p;
    let (fx, fy) = (camera.fx, camera.fy);
    let jac = [[fx / z, 0.0, -fx * x / (z * z)], [0.0, fy / z, -fy * y / (z * z)]];
    let w = &camera.rotation;
    let cov_cam = linalg::mat3_mul(&linalg::mat3_mul(w, cov3d), &linalg::transpose3(w));
    let mut cov2d = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    acc += jac[a][k] * cov_cam[k][l] * jac[b][l];
                }
            }
            cov2d[a][b] = acc;
        }
    }
    cov2d[0][0] += LOW_PASS;
    cov2d[1][1] += LOW_PASS;
    Geometry {
        mean2d: [fx * x / z + camera.cx, fy * y / z + camera.cy],
        cov2d,
        jac,
        cov_cam,
    }
}

/// A projected, view-shaded Gaussian ready for compositing.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub gaussian: usize,
    pub depth: f64,
    pub mean2d: [f64; 2],
    /// Inverse 2-D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub color_raw: [f64; 3],
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
    pub p_cam: [f64; 3],
    pub jac: [[f64; 3]; 2],
    pub cov_cam: Mat3,
    pub view_dir: [f64; 3],
    pub view_dist: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Projects, shades and depth-sorts every alive Gaussian in front of the camera.
pub(crate) fn prepare_splats(
    scene: &GaussianScene,
    camera: &Camera,
    opts: &RenderOptions,
) -> Result<Vec<Splat>> {
    let degree = opts.active_sh_degree.min(scene.sh_degree);
    let cam_pos = camera.position();
    let mut splats = Vec::with_capacity(scene.len());
    for i in 0..scene.len() {
        if !scene.alive[i] {
            continue;
        }
        let p = camera.world_to_camera(&scene.means[i]);
        if p[2] <= NEAR_PLANE {
            continue;
        }
        let cov3d = scene.covariance(i)?;
        let geo = project_geometry(camera, &p, &cov3d);
        let [[a, b], [_, c]] = geo.cov2d;
        let det = a * c - b * b;
        assert!(det > 0.0 && det.is_finite(), "non-invertible projected covariance for gaussian {i}");
        let conic = [c / det, -b / det, a / det];
        let radius = (2.0 * -POWER_CUTOFF * linalg::sym2_max_eigen(a, b, c)).sqrt();
        let [mx, my] = geo.mean2d;
        let Some(x_range) = pixel_span(mx, radius, camera.width) else { continue };
        let Some(y_range) = pixel_span(my, radius, camera.height) else { continue };

        let v = linalg::sub3(&scene.means[i], &cam_pos);
        let view_dist = linalg::norm3(&v);
        let view_dir = [v[0] / view_dist, v[1] / view_dist, v[2] / view_dist];
        let color_raw = sh::eval_color(degree, scene.sh_row(i), &view_dir);
        splats.push(Splat {
            gaussian: i,
            depth: p[2],
            mean2d: geo.mean2d,
            conic,
            opacity: sigmoid(scene.opacity_logits[i]),
            color: color_raw.map(|v| v.max(0.0)),
            color_raw,
            x_range,
            y_range,
            p_cam: p,
            jac: geo.jac,
            cov_cam: geo.cov_cam,
            view_dir,
            view_dist,
        });
    }
    splats.sort_by(|s, t| s.depth.total_cmp(&t.depth).then(s.gaussian.cmp(&t.gaussian)));
    Ok(splats)
}

/// Half-open pixel index range whose centres lie within `radius` of `center`.
fn pixel_span(center: f64, radius: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor() + 1.0;
    let hi = hi.min(size as f64);
    if !(lo < hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

/// One composited splat at a pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Hit {
    /// Index into the band's candidate list.
    pub cand: usize,
    pub alpha: f64,
    /// Transmittance just before this splat.
    pub trans: f64,
    pub falloff: f64,
    pub dx: f64,
    pub dy: f64,
    pub clamped: bool,
}

/// A band of rows and the splats whose footprint touches it, front to back.
pub(crate) struct Band<'a> {
    pub y0: usize,
    pub y1: usize,
    pub splats: &'a [Splat],
    pub cands: Vec<usize>,
}

impl Band<'_> {
    /// Composites pixel `(x, y)` into `hits` and returns the raw colour.
    /// When `coverage` is given, every candidate with splat opacity above
    /// `eps` at this pixel is counted, composited or not.
    pub fn composite(
        &self,
        x: usize,
        y: usize,
        hits: &mut Vec<Hit>,
        mut coverage: Option<(&mut [u64], f64)>,
    ) -> [f64; 3] {
        hits.clear();
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut trans = 1.0;
        let mut color = [0.0; 3];
        let mut done = false;
        for (ci, &si) in self.cands.iter().enumerate() {
            let s = &self.splats[si];
            if x < s.x_range.0 || x >= s.x_range.1 || y < s.y_range.0 || y >= s.y_range.1 {
                continue;
            }
            let dx = px - s.mean2d[0];
            let dy = py - s.mean2d[1];
            let [a, b, c] = s.conic;
            let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
            if power < POWER_CUTOFF {
                continue;
            }
            let falloff = power.exp();
            let raw_alpha = s.opacity * falloff;
            if let Some((counts, eps)) = coverage.as_mut() {
                if raw_alpha.min(ALPHA_MAX) > *eps {
                    counts[ci] += 1;
                }
            }
            if done {
                continue;
            }
            if trans < T_MIN {
                done = true;
                if coverage.is_none() {
                    break;
                }
                continue;
            }
            let clamped = raw_alpha > ALPHA_MAX;
            let alpha = if clamped { ALPHA_MAX } else { raw_alpha };
            let w = trans * alpha;
            for ch in 0..3 {
                color[ch] += w * s.color[ch];
            }
            hits.push(Hit { cand: ci, alpha, trans, falloff, dx, dy, clamped });
            trans *= 1.0 - alpha;
        }
        color
    }
}

/// Runs `f` over every band of rows and returns the results in band order.
pub(crate) fn for_each_band<R, F>(splats: &[Splat], height: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(&Band) -> R + Sync,
{
    let n_bands = height.div_ceil(ROWS_PER_BAND);
    (0..n_bands)
        .into_par_iter()
        .map(|b| {
            let y0 = b * ROWS_PER_BAND;
            let y1 = (y0 + ROWS_PER_BAND).min(height);
            let cands = splats
                .iter()
                .enumerate()
                .filter(|(_, s)| s.y_range.0 < y1 && s.y_range.1 > y0)
                .map(|(i, _)| i)
                .collect();
            f(&Band { y0, y1, splats, cands })
        })
        .collect()
}

struct BandImage {
    y0: usize,
    colors: Vec<f64>,
    trans: Vec<f64>,
    counts: Vec<u64>,
    cands: Vec<usize>,
}

/// Renders with full-precision attributes.
pub fn render(scene: &GaussianScene, camera: &Camera) -> Result<RenderOutput> {
    render_with(scene, camera, &RenderOptions::default())
}

/// Renders through the bank's fake quantizers when one is given.
pub fn render_quantized(
    scene: &GaussianScene,
    camera: &Camera,
    bank: Option<&QuantizerBank>,
) -> Result<RenderOutput> {
    match bank {
        Some(bank) => render_with(&bank.quantize_scene(scene), camera, &RenderOptions::default()),
        None => render(scene, camera),
    }
}

pub fn render_with(scene: &GaussianScene, camera: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    let splats = prepare_splats(scene, camera, opts)?;
    let (w, h) = (camera.width, camera.height);
    let eps = opts.coverage_epsilon;
    let bands = for_each_band(&splats, h, |band| {
        let mut hits = Vec::new();
        let mut colors = vec![0.0; (band.y1 - band.y0) * w * 3];
        let mut trans = vec![0.0; band.cands.len()];
        let mut counts = vec![0u64; band.cands.len()];
        for y in band.y0..band.y1 {
            for x in 0..w {
                let c = band.composite(x, y, &mut hits, Some((&mut counts, eps)));
                let o = 3 * ((y - band.y0) * w + x);
                for ch in 0..3 {
                    colors[o + ch] = c[ch].clamp(0.0, 1.0);
                }
                for hit in &hits {
                    trans[hit.cand] += hit.trans * hit.alpha;
                }
            }
        }
        BandImage { y0: band.y0, colors, trans, counts, cands: band.cands.clone() }
    });

    let mut image = Image::new(w, h);
    let mut per_gaussian_transmittance = vec![0.0; scene.len()];
    let mut per_gaussian_pixel_count = vec![0u64; scene.len()];
    for band in bands {
        let o = 3 * band.y0 * w;
        image.data[o..o + band.colors.len()].copy_from_slice(&band.colors);
        for (k, &si) in band.cands.iter().enumerate() {
            let g = splats[si].gaussian;
            per_gaussian_transmittance[g] += band.trans[k];
            per_gaussian_pixel_count[g] += band.counts[k];
        }
    }
    Ok(RenderOutput {
        image,
        per_gaussian_transmittance,
        per_gaussian_pixel_count,
        blend_order: splats.iter().map(|s| s.gaussian).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;

    fn camera(w: usize) -> Camera {
        Camera::look_at([0.0, 0.0, -1.0], [0.0; 3], [0.0, -1.0, 0.0], 60.0, w, w)
    }

    fn gaussian(mean: [f64; 3], log_scale: f64, logit: f64, rgb: [f64; 3]) -> Gaussian {
        let mut sh = vec![0.0; 48];
        for ch in 0..3 {
            sh[ch] = sh::rgb_to_dc(rgb[ch]);
        }
        Gaussian { mean, log_scale: [log_scale; 3], quat: [1.0, 0.0, 0.0, 0.0], opacity_logit: logit, sh }
    }

    #[test]
    fn on_axis_gaussian_projects_to_principal_point() {
        let mut s = GaussianScene::empty(3);
        s.push(gaussian([0.0, 0.0, 0.0], 0.1f64.ln(), 0.0, [0.5; 3]));
        let cam = camera(32);
        let p = project(&s, &cam, 0).unwrap().unwrap();
        assert_eq!(p.mean2d, [cam.cx, cam.cy]);
        assert!((p.depth - 1.0).abs() < 1e-15);
    }

    #[test]
    fn doubling_depth_halves_radius() {
        let mut s = GaussianScene::empty(3);
        s.push(gaussian([0.0, 0.0, 1.0], 0.2f64.ln(), 0.0, [0.5; 3]));
        s.push(gaussian([0.0, 0.0, 3.0], 0.2f64.ln(), 0.0, [0.5; 3]));
        let cam = camera(64);
        let r = |i| {
            let p = project(&s, &cam, i).unwrap().unwrap();
            (p.cov2d[0][0] - LOW_PASS).sqrt()
        };
        assert!((r(0) / r(1) - 2.0).abs() < 0.02);
    }

    #[test]
    fn behind_camera_is_culled() {
        let mut s = GaussianScene::empty(3);
        s.push(gaussian([0.0, 0.0, -2.0], -2.0, 3.0, [1.0; 3]));
        let cam = camera(16);
        assert!(project(&s, &cam, 0).unwrap().is_none());
        let out = render(&s, &cam).unwrap();
        assert!(out.image.data.iter().all(|v| *v == 0.0));
        assert_eq!(out.per_gaussian_transmittance, vec![0.0]);
        assert!(out.blend_order.is_empty());
    }

    #[test]
    fn empty_scene_is_black() {
        let out = render(&GaussianScene::empty(3), &camera(16)).unwrap();
        assert!(out.image.data.iter().all(|v| *v == 0.0));
        assert!(out.per_gaussian_transmittance.is_empty());
    }

    #[test]
    fn single_gaussian_pixel_value() {
        // Pixel centre (8.5, 8.5) sits exactly on the projected mean.
        let cam = Camera { cx: 8.5, cy: 8.5, ..camera(16) };
        let mut s = GaussianScene::empty(3);
        s.push(gaussian([0.0, 0.0, 0.0], 0.05f64.ln(), 1.0, [0.7, 0.4, 0.2]));
        let out = render(&s, &cam).unwrap();
        let alpha = sigmoid(1.0);
        let px = out.image.pixel(8, 8);
        for (ch, want) in [0.7, 0.4, 0.2].into_iter().enumerate() {
            assert!((px[ch] - alpha * want).abs() < 1e-12);
        }
    }

    #[test]
    fn blending_weights_are_sub_convex() {
        let mut s = GaussianScene::empty(3);
        for k in 0..6 {
            let f = k as f64;
            s.push(gaussian([0.05 * f - 0.1, 0.02 * f, 0.1 * f], -2.0, 2.0, [1.0; 3]));
        }
        let out = render(&s, &camera(24)).unwrap();
        // White colours make each pixel equal to its total blending weight.
        assert!(out.image.data.iter().all(|v| *v <= 1.0 + 1e-12));
        let total: f64 = out.per_gaussian_transmittance.iter().sum();
        let pixel_sum: f64 = out.image.data.iter().step_by(3).sum();
        assert!((total - pixel_sum).abs() < 1e-9);
    }

    #[test]
    fn dead_gaussians_have_zero_accumulators() {
        let mut s = GaussianScene::empty(3);
        s.push(gaussian([0.0; 3], -2.0, 2.0, [1.0; 3]));
        s.push(gaussian([0.1, 0.0, 0.0], -2.0, 2.0, [1.0; 3]));
        s.alive[1] = false;
        let out = render(&s, &camera(24)).unwrap();
        assert_eq!(out.per_gaussian_transmittance[1], 0.0);
        assert_eq!(out.per_gaussian_pixel_count[1], 0);
        assert!(out.per_gaussian_transmittance[0] > 0.0);
    }
}
