//! Analytic gradients of the image loss with respect to every Gaussian attribute.

use crate::error::Result;
use crate::image::{ssim_with_grad, CompensatedSum, Image};
use crate::linalg::{self, Mat3};
use crate::quantizer::{QuantizerBank, QuantizerGradients};
use crate::scene::{AttributeClass, Camera, GaussianScene};
use crate::sh;

use super::{for_each_band, prepare_splats, RenderOptions, Splat};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the `(1 - SSIM) / 2` term; the L1 term gets the rest.
    pub ssim_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { ssim_weight: 0.2 }
    }
}

impl LossConfig {
    pub fn l1_only() -> Self {
        Self { ssim_weight: 0.0 }
    }
}

/// Loss and its gradient with respect to the rendered image.
pub fn image_loss(image: &Image, target: &Image, cfg: &LossConfig) -> Result<(f64, Image)> {
    image.same_shape(target)?;
    let n = image.data.len() as f64;
    let w1 = 1.0 - cfg.ssim_weight;
    let mut grad = Image::new(image.width, image.height);
    let mut l1 = CompensatedSum::default();
    for ((g, a), b) in grad.data.iter_mut().zip(&image.data).zip(&target.data) {
        let d = a - b;
        l1.add(d.abs());
        *g = if d > 0.0 {
            w1 / n
        } else if d < 0.0 {
            -w1 / n
        } else {
            0.0
        };
    }
    let mut loss = w1 * l1.total() / n;
    if cfg.ssim_weight > 0.0 {
        let (s, sg) = ssim_with_grad(image, target, true)?;
        loss += cfg.ssim_weight * (1.0 - s) / 2.0;
        let k = -cfg.ssim_weight / 2.0;
        for (g, v) in grad.data.iter_mut().zip(&sg.expect("requested gradient").data) {
            *g += k * v;
        }
    }
    Ok((loss, grad))
}

/// Per-attribute gradient blocks laid out like [`GaussianScene::gather`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub sh_degree: usize,
    pub len: usize,
    pub blocks: [Vec<f64>; 6],
}

impl SceneGradients {
    pub fn zeros(len: usize, sh_degree: usize) -> Self {
        let blocks = AttributeClass::ALL.map(|a| vec![0.0; len * a.dim(sh_degree)]);
        Self { sh_degree, len, blocks }
    }

    pub fn zeros_like(scene: &GaussianScene) -> Self {
        Self::zeros(scene.len(), scene.sh_degree)
    }

    pub fn get(&self, attr: AttributeClass) -> &[f64] {
        &self.blocks[attr.index()]
    }

    pub fn get_mut(&mut self, attr: AttributeClass) -> &mut [f64] {
        &mut self.blocks[attr.index()]
    }

    pub fn row(&self, attr: AttributeClass, i: usize) -> &[f64] {
        let d = attr.dim(self.sh_degree);
        &self.blocks[attr.index()][i * d..(i + 1) * d]
    }

    pub fn add_assign(&mut self, other: &SceneGradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.blocks.iter_mut().flatten().for_each(|x| *x *= k);
    }

    /// First attribute class holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<AttributeClass> {
        AttributeClass::ALL.into_iter().find(|a| self.get(*a).iter().any(|v| !v.is_finite()))
    }

    /// Sum of all gradient entries belonging to Gaussian `i`.
    pub fn row_sum(&self, i: usize) -> f64 {
        AttributeClass::ALL.iter().map(|a| self.row(*a, i).iter().sum::<f64>()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub loss: f64,
    pub grads: SceneGradients,
    pub image: Image,
}

pub fn backward(
    scene: &GaussianScene,
    camera: &Camera,
    target: &Image,
    cfg: &LossConfig,
) -> Result<BackwardOutput> {
    backward_with(scene, camera, target, cfg, &RenderOptions::default())
}

#[derive(Debug, Clone)]
pub struct QuantizedBackward {
    pub loss: f64,
    pub scene_grads: SceneGradients,
    pub quant_grads: QuantizerGradients,
    pub image: Image,
}

/// Renders through the fake quantizers and returns gradients for both the
/// full-precision attributes (clipped straight-through) and the quantizer
/// parameters.
pub fn backward_quantized(
    scene: &GaussianScene,
    camera: &Camera,
    target: &Image,
    cfg: &LossConfig,
    bank: &QuantizerBank,
) -> Result<QuantizedBackward> {
    let quantized = bank.quantize_scene(scene);
    let out = backward(&quantized, camera, target, cfg)?;
    let (scene_grads, quant_grads) = bank.chain(scene, &out.grads);
    Ok(QuantizedBackward { loss: out.loss, scene_grads, quant_grads, image: out.image })
}

/// Per-splat partial derivatives accumulated over pixels.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

pub fn backward_with(
    scene: &GaussianScene,
    camera: &Camera,
    target: &Image,
    cfg: &LossConfig,
    opts: &RenderOptions,
) -> Result<BackwardOutput> {
    let splats = prepare_splats(scene, camera, opts)?;
    let (w, h) = (camera.width, camera.height);

    let raw_bands = for_each_band(&splats, h, |band| {
        let mut hits = Vec::new();
        let mut out = Vec::with_capacity((band.y1 - band.y0) * w * 3);
        for y in band.y0..band.y1 {
            for x in 0..w {
                out.extend_from_slice(&band.composite(x, y, &mut hits, None));
            }
        }
        out
    });
    let raw: Vec<f64> = raw_bands.concat();
    let mut image = Image::new(w, h);
    for (o, r) in image.data.iter_mut().zip(&raw) {
        *o = r.clamp(0.0, 1.0);
    }
    let (loss, mut dl_dimg) = image_loss(&image, target, cfg)?;
    for (g, r) in dl_dimg.data.iter_mut().zip(&raw) {
        if *r > 1.0 || *r < 0.0 {
            *g = 0.0;
        }
    }

    let bands = for_each_band(&splats, h, |band| {
        let mut hits = Vec::new();
        let mut acc = vec![SplatGrad::default(); band.cands.len()];
        for y in band.y0..band.y1 {
            for x in 0..w {
                band.composite(x, y, &mut hits, None);
                let o = 3 * (y * w + x);
                let g = [dl_dimg.data[o], dl_dimg.data[o + 1], dl_dimg.data[o + 2]];
                if g == [0.0; 3] {
                    continue;
                }
                let mut behind = [0.0; 3];
                for hit in hits.iter().rev() {
                    let s = &splats[band.cands[hit.cand]];
                    let a = &mut acc[hit.cand];
                    let weight = hit.trans * hit.alpha;
                    let mut dl_dalpha = 0.0;
                    for ch in 0..3 {
                        a.color[ch] += weight * g[ch];
                        dl_dalpha += g[ch] * (hit.trans * s.color[ch] - behind[ch] / (1.0 - hit.alpha));
                    }
                    for ch in 0..3 {
                        behind[ch] += weight * s.color[ch];
                    }
                    if hit.clamped {
                        continue;
                    }
                    a.opacity += dl_dalpha * hit.falloff;
                    let dl_dpower = dl_dalpha * hit.alpha;
                    let [ca, cb, cc] = s.conic;
                    let (dx, dy) = (hit.dx, hit.dy);
                    a.mean2d[0] += dl_dpower * (ca * dx + cb * dy);
                    a.mean2d[1] += dl_dpower * (cb * dx + cc * dy);
                    a.conic[0] += dl_dpower * -0.5 * dx * dx;
                    a.conic[1] += dl_dpower * -dx * dy;
                    a.conic[2] += dl_dpower * -0.5 * dy * dy;
                }
            }
        }
        (band.cands.clone(), acc)
    });

    let mut per_splat = vec![SplatGrad::default(); splats.len()];
    for (cands, acc) in bands {
        for (si, g) in cands.into_iter().zip(&acc) {
            per_splat[si].add(g);
        }
    }

    let mut grads = SceneGradients::zeros_like(scene);
    let degree = opts.active_sh_degree.min(scene.sh_degree);
    for (s, g) in splats.iter().zip(&per_splat) {
        chain_splat(scene, camera, s, g, degree, &mut grads)?;
    }
    Ok(BackwardOutput { loss, grads, image })
}

/// Pushes one splat's screen-space gradients back to its Gaussian's attributes.
fn chain_splat(
    scene: &GaussianScene,
    camera: &Camera,
    s: &Splat,
    g: &SplatGrad,
    degree: usize,
    out: &mut SceneGradients,
) -> Result<()> {
    let i = s.gaussian;
    let mut d_mean = [0.0; 3];

    // Colour: clamp at zero, SH coefficients, then the view direction.
    let gcol: [f64; 3] =
        std::array::from_fn(|ch| if s.color_raw[ch] > 0.0 { g.color[ch] } else { 0.0 });
    if gcol != [0.0; 3] {
        let basis = sh::basis(degree, &s.view_dir);
        let basis_grad = sh::basis_gradient(degree, &s.view_dir);
        let coeffs = scene.sh_row(i);
        let n_coeff = (degree + 1) * (degree + 1);
        let mut d_dir = [0.0; 3];
        let mut d_sh = vec![0.0; scene.sh_stride()];
        for k in 0..n_coeff {
            for ch in 0..3 {
                d_sh[3 * k + ch] = basis[k] * gcol[ch];
                for ax in 0..3 {
                    d_dir[ax] += gcol[ch] * coeffs[3 * k + ch] * basis_grad[k][ax];
                }
            }
        }
        let dot = linalg::dot3(&d_dir, &s.view_dir);
        for ax in 0..3 {
            d_mean[ax] += (d_dir[ax] - s.view_dir[ax] * dot) / s.view_dist;
        }
        let ac_dim = d_sh.len() - 3;
        add_row(out, AttributeClass::ShDc, i, &d_sh[..3]);
        if ac_dim > 0 {
            add_row(out, AttributeClass::ShAc, i, &d_sh[3..]);
        }
    }

    let o = super::sigmoid(scene.opacity_logits[i]);
    add_row(out, AttributeClass::Opacities, i, &[g.opacity * o * (1.0 - o)]);

    // Conic -> projected covariance: dL/dM = -Q G Q with symmetric G.
    let [ca, cb, cc] = s.conic;
    let q = [[ca, cb], [cb, cc]];
    let gq = [[g.conic[0], 0.5 * g.conic[1]], [0.5 * g.conic[1], g.conic[2]]];
    let qg = mul2(&q, &gq);
    let qgq = mul2(&qg, &q);
    let gm = [[-qgq[0][0], -qgq[0][1]], [-qgq[1][0], -qgq[1][1]]];

    // M = J V J^T.
    let jac = &s.jac;
    let mut gv = [[0.0; 3]; 3];
    for k in 0..3 {
        for l in 0..3 {
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    acc += jac[a][k] * gm[a][b] * jac[b][l];
                }
            }
            gv[k][l] = acc;
        }
    }
    let mut gj = [[0.0; 3]; 2];
    for a in 0..2 {
        for k in 0..3 {
            let mut acc = 0.0;
            for b in 0..2 {
                for l in 0..3 {
                    acc += gm[a][b] * jac[b][l] * s.cov_cam[l][k];
                }
            }
            gj[a][k] = 2.0 * acc;
        }
    }

    // Camera-space position through the projected mean and the Jacobian.
    let [x, y, z] = s.p_cam;
    let (fx, fy) = (camera.fx, camera.fy);
    let (z2, z3) = (z * z, z * z * z);
    let gm2 = g.mean2d;
    let gp = [
        gm2[0] * fx / z - gj[0][2] * fx / z2,
        gm2[1] * fy / z - gj[1][2] * fy / z2,
        -gm2[0] * fx * x / z2 - gm2[1] * fy * y / z2 - gj[0][0] * fx / z2
            + gj[0][2] * 2.0 * fx * x / z3
            - gj[1][1] * fy / z2
            + gj[1][2] * 2.0 * fy * y / z3,
    ];
    let w = &camera.rotation;
    let gmu = linalg::mat3_t_vec(w, &gp);
    for ax in 0..3 {
        d_mean[ax] += gmu[ax];
    }
    add_row(out, AttributeClass::Means, i, &d_mean);

    // V = W Sigma W^T, Sigma = (R S)(R S)^T.
    let gsigma = linalg::mat3_mul(&linalg::mat3_mul(&linalg::transpose3(w), &gv), w);
    let qn = scene.normalized_quat(i)?;
    let rot = linalg::quat_to_rotation(&qn);
    let scale = scene.log_scales[i].map(f64::exp);
    let mut rs: Mat3 = rot;
    for r in rs.iter_mut() {
        for j in 0..3 {
            r[j] *= scale[j];
        }
    }
    let gsym = sym3(&gsigma);
    let grs = linalg::mat3_mul(&gsym, &rs).map(|r| r.map(|v| 2.0 * v));
    let mut d_log_scale = [0.0; 3];
    let mut grot = [[0.0; 3]; 3];
    for r in 0..3 {
        for j in 0..3 {
            grot[r][j] = grs[r][j] * scale[j];
            d_log_scale[j] += grs[r][j] * rot[r][j] * scale[j];
        }
    }
    add_row(out, AttributeClass::Scales, i, &d_log_scale);

    let dr = linalg::quat_rotation_jacobian(&qn);
    let mut gqn = [0.0; 4];
    for k in 0..4 {
        for r in 0..3 {
            for j in 0..3 {
                gqn[k] += grot[r][j] * dr[k][r][j];
            }
        }
    }
    let norm = crate::scene::quat_norm(&scene.quats[i]);
    let dot: f64 = (0..4).map(|k| gqn[k] * qn[k]).sum();
    let gquat: [f64; 4] = std::array::from_fn(|k| (gqn[k] - qn[k] * dot) / norm);
    add_row(out, AttributeClass::Quats, i, &gquat);
    Ok(())
}

fn add_row(out: &mut SceneGradients, attr: AttributeClass, i: usize, v: &[f64]) {
    let d = v.len();
    for (o, x) in out.get_mut(attr)[i * d..(i + 1) * d].iter_mut().zip(v) {
        *o += x;
    }
}

fn mul2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][0] * b[0][c] + a[r][1] * b[1][c]))
}

fn sym3(m: &Mat3) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| 0.5 * (m[r][c] + m[c][r])))
}
