//! Deterministic synthetic scenes with ground-truth views.
//!
//! Every fixture yields a ground-truth scene, a ring of cameras, the
//! ground-truth renders, and a perturbed copy of the scene to start training
//! from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render;
use crate::scene::{sh_coeff_count, Camera, Gaussian, GaussianScene, MAX_SH_DEGREE};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Grid,
    RandomBlob,
    OcclusionPair,
}

impl Layout {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "grid" => Ok(Layout::Grid),
            "random-blob" => Ok(Layout::RandomBlob),
            "occlusion-pair" => Ok(Layout::OcclusionPair),
            other => Err(Error::UnknownLayout(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::Grid => "grid",
            Layout::RandomBlob => "random-blob",
            Layout::OcclusionPair => "occlusion-pair",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub camera_distance: f64,
    /// Angle between each camera's viewing axis and +z.
    pub cone_deg: Option<f64>,
    /// Scales the perturbation applied to build the training start.
    pub init_noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_cameras: 8,
            width: 64,
            height: 64,
            fov_deg: 50.0,
            camera_distance: 3.0,
            cone_deg: None,
            init_noise: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub ground_truth: GaussianScene,
    /// Perturbed copy of the ground truth used as the training start.
    pub initial: GaussianScene,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// `(front, rear)` indices for the occlusion-pair layout.
    pub occlusion_pair: Option<(usize, usize)>,
}

pub fn synthesize_scene(seed: u64, n_gaussians: usize, layout: Layout) -> Result<SynthScene> {
    synthesize_scene_with(seed, n_gaussians, layout, &SynthOptions::default())
}

pub fn synthesize_scene_with(
    seed: u64,
    n_gaussians: usize,
    layout: Layout,
    opts: &SynthOptions,
) -> Result<SynthScene> {
    if n_gaussians == 0 {
        return Err(Error::InvalidArgument("synthetic scenes need at least one gaussian".into()));
    }
    if opts.n_cameras == 0 {
        return Err(Error::InvalidArgument("synthetic scenes need at least one camera".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ground_truth, pair) = match layout {
        Layout::Grid => (grid(&mut rng, n_gaussians), None),
        Layout::RandomBlob => (random_blob(&mut rng, n_gaussians), None),
        Layout::OcclusionPair => {
            let s = occlusion_pair(&mut rng, n_gaussians);
            let pair = (n_gaussians >= 2).then_some((0, 1));
            (s, pair)
        }
    };
    let default_cone = if layout == Layout::OcclusionPair { 15.0 } else { 35.0 };
    let cameras = camera_ring(opts, opts.cone_deg.unwrap_or(default_cone));
    let images = cameras
        .iter()
        .map(|c| render::render(&ground_truth, c).map(|o| o.image))
        .collect::<Result<Vec<_>>>()?;
    let initial = perturb(&ground_truth, &mut rng, opts.init_noise, pair);
    Ok(SynthScene { ground_truth, initial, cameras, images, occlusion_pair: pair })
}

/// Cameras evenly spaced on a circle, all looking at the origin from the
/// `-z` side at `cone_deg` off the `+z` axis.
pub fn camera_ring(opts: &SynthOptions, cone_deg: f64) -> Vec<Camera> {
    let cone = cone_deg.to_radians();
    (0..opts.n_cameras)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / opts.n_cameras as f64;
            let r = opts.camera_distance;
            let eye = [r * cone.sin() * phi.cos(), r * cone.sin() * phi.sin(), -r * cone.cos()];
            Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], opts.fov_deg, opts.width, opts.height)
        })
        .collect()
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| n.sample(rng));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return q.map(|v| v / norm);
        }
    }
}

/// SH row with the given base colour and per-band AC amplitudes.
fn sh_row(rng: &mut ChaCha8Rng, rgb: [f64; 3], ac_amplitude: [f64; 3]) -> Vec<f64> {
    let mut sh = vec![0.0; 3 * sh_coeff_count(MAX_SH_DEGREE)];
    for ch in 0..3 {
        sh[ch] = sh::rgb_to_dc(rgb[ch]);
    }
    for l in 1..=MAX_SH_DEGREE {
        for k in l * l..(l + 1) * (l + 1) {
            for ch in 0..3 {
                sh[3 * k + ch] = ac_amplitude[l - 1] * rng.random_range(-1.0..1.0);
            }
        }
    }
    sh
}

fn random_sh_row(rng: &mut ChaCha8Rng, ac_amplitude: [f64; 3]) -> Vec<f64> {
    let rgb = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    sh_row(rng, rgb, ac_amplitude)
}

fn grid(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let m = (n as f64).cbrt().ceil() as usize;
    let spacing = 1.6 / m as f64;
    let mut scene = GaussianScene::empty(MAX_SH_DEGREE);
    for idx in 0..n {
        let (i, j, k) = (idx % m, (idx / m) % m, idx / (m * m));
        let coord = |c: usize| -0.8 + spacing * (c as f64 + 0.5);
        let sigma = (0.3 * spacing).min(0.25);
        scene.push(Gaussian {
            mean: [coord(i), coord(j), coord(k)],
            log_scale: [sigma.ln(); 3],
            quat: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: rng.random_range(0.5..2.5),
            sh: random_sh_row(rng, [0.1, 0.05, 0.02]),
        });
    }
    scene
}

fn random_blob(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let pos = Normal::new(0.0, 0.4).expect("valid sigma");
    let mut scene = GaussianScene::empty(MAX_SH_DEGREE);
    for idx in 0..n {
        let mean = std::array::from_fn(|_| f64::clamp(pos.sample(rng), -0.9, 0.9));
        let log_scale = std::array::from_fn(|_| rng.random_range(0.05f64..0.16).ln());
        // Every eighth Gaussian is faint.
        let opacity_logit =
            if idx % 8 == 7 { rng.random_range(-4.0..-2.5) } else { rng.random_range(0.0..3.0) };
        scene.push(Gaussian {
            mean,
            log_scale,
            quat: random_quat(rng),
            opacity_logit,
            sh: random_sh_row(rng, [0.35, 0.2, 0.1]),
        });
    }
    scene
}

/// Gaussian 0 sits at the origin and hides Gaussian 1 from every camera of
/// the frontal ring. The rear one has large parameter magnitudes but almost
/// no visible footprint. The rest fill an annulus around the pair.
fn occlusion_pair(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let mut scene = GaussianScene::empty(MAX_SH_DEGREE);
    scene.push(Gaussian {
        mean: [0.0; 3],
        log_scale: [0.0; 3],
        quat: [1.0, 0.0, 0.0, 0.0],
        opacity_logit: 8.0,
        sh: sh_row(rng, [0.5, 0.5, 0.5], [0.0; 3]),
    });
    if n >= 2 {
        scene.push(Gaussian {
            mean: [0.0, 0.0, 0.08],
            log_scale: [0.015f64.ln(); 3],
            quat: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 8.0,
            sh: sh_row(rng, [20.0, 16.0, 24.0], [1.5, 1.0, 0.6]),
        });
    }
    for _ in 2..n {
        let radius = rng.random_range(0.4..0.9);
        let phi = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        scene.push(Gaussian {
            mean: [radius * phi.cos(), radius * phi.sin(), rng.random_range(-0.7..-0.25)],
            log_scale: std::array::from_fn(|_| rng.random_range(0.04f64..0.1).ln()),
            quat: random_quat(rng),
            opacity_logit: rng.random_range(0.0..3.0),
            sh: random_sh_row(rng, [0.15, 0.08, 0.04]),
        });
    }
    scene
}

/// Applies bounded, deterministic noise to every attribute. In an
/// occlusion pair the rear Gaussian is kept exact so it stays hidden, and
/// the front one keeps its extent and view-dependent colour.
fn perturb(
    scene: &GaussianScene,
    rng: &mut ChaCha8Rng,
    amount: f64,
    pair: Option<(usize, usize)>,
) -> GaussianScene {
    let mut out = scene.clone();
    let mut jitter = |scale: f64| amount * scale * rng.random_range(-1.0..1.0);
    for i in 0..out.len() {
        if pair.is_some_and(|(_, rear)| rear == i) {
            continue;
        }
        let front = pair.is_some_and(|(front, _)| front == i);
        for k in 0..3 {
            out.means[i][k] += jitter(0.03);
            if !front {
                out.log_scales[i][k] += jitter(0.15);
            }
        }
        for k in 0..4 {
            out.quats[i][k] += jitter(0.05);
        }
        out.opacity_logits[i] += jitter(0.4);
        let n_sh = if front { 3 } else { out.sh_stride() };
        for v in &mut out.sh_row_mut(i)[..n_sh] {
            *v += jitter(0.08);
        }
    }
    out
}
