//! Real spherical harmonics up to degree 3, band-major, using the constants
//! of the reference 3DGS rasterizer.

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Colour offset added after SH evaluation.
pub const COLOR_OFFSET: f64 = 0.5;

/// Basis values at a unit direction; entries above `degree` are zero.
pub fn basis(degree: usize, d: &[f64; 3]) -> [f64; 16] {
    let [x, y, z] = *d;
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[9] = SH_C3[0] * y * (3.0 * xx - yy);
        b[10] = SH_C3[1] * x * y * z;
        b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        b[14] = SH_C3[5] * z * (xx - yy);
        b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    }
    b
}

/// `d basis[k] / d (x, y, z)`, treating the components as independent.
pub fn basis_gradient(degree: usize, d: &[f64; 3]) -> [[f64; 3]; 16] {
    let [x, y, z] = *d;
    let mut g = [[0.0; 3]; 16];
    if degree >= 1 {
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let c = SH_C2;
        g[4] = [c[0] * y, c[0] * x, 0.0];
        g[5] = [0.0, c[1] * z, c[1] * y];
        g[6] = [-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z];
        g[7] = [c[3] * z, 0.0, c[3] * x];
        g[8] = [2.0 * c[4] * x, -2.0 * c[4] * y, 0.0];
    }
    if degree >= 3 {
        let c = SH_C3;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g[9] = [6.0 * c[0] * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0];
        g[10] = [c[1] * y * z, c[1] * x * z, c[1] * x * y];
        g[11] = [-2.0 * c[2] * x * y, c[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * c[2] * y * z];
        g[12] = [-6.0 * c[3] * x * z, -6.0 * c[3] * y * z, c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)];
        g[13] = [c[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * c[4] * x * y, 8.0 * c[4] * x * z];
        g[14] = [2.0 * c[5] * x * z, -2.0 * c[5] * y * z, c[5] * (xx - yy)];
        g[15] = [c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * y, 0.0];
    }
    g
}

/// Evaluates RGB (before clamping) from a `[(l+1)^2][3]` coefficient row.
pub fn eval_color(degree: usize, coeffs: &[f64], dir: &[f64; 3]) -> [f64; 3] {
    let b = basis(degree, dir);
    let k = (degree + 1) * (degree + 1);
    let mut c = [COLOR_OFFSET; 3];
    for (basis_k, row) in b.iter().zip(coeffs.chunks_exact(3)).take(k) {
        for ch in 0..3 {
            c[ch] += basis_k * row[ch];
        }
    }
    c
}

/// Inverse of the DC colour mapping.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - COLOR_OFFSET) / SH_C0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let d = [0.3, -0.5, 0.81];
        let g = basis_gradient(3, &d);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = d;
            let mut m = d;
            p[axis] += h;
            m[axis] -= h;
            let (bp, bm) = (basis(3, &p), basis(3, &m));
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }

    #[test]
    fn degree_zero_is_view_independent() {
        let c = [rgb_to_dc(0.8), rgb_to_dc(0.2), rgb_to_dc(0.5)];
        for dir in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.6, 0.0, -0.8]] {
            let rgb = eval_color(0, &c, &dir);
            assert!((rgb[0] - 0.8).abs() < 1e-15);
            assert!((rgb[1] - 0.2).abs() < 1e-15);
            assert!((rgb[2] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn bands_are_orthonormal_under_quadrature() {
        // Fibonacci-sphere quadrature; checks the constants, not the code path.
        let n = 20000;
        let mut gram = [[0.0f64; 16]; 16];
        for i in 0..n {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let b = basis(3, &[r * phi.cos(), r * phi.sin(), z]);
            for a in 0..16 {
                for c in 0..16 {
                    gram[a][c] += b[a] * b[c];
                }
            }
        }
        let w = 4.0 * std::f64::consts::PI / n as f64;
        for a in 0..16 {
            for c in 0..16 {
                let want = if a == c { 1.0 } else { 0.0 };
                assert!((gram[a][c] * w - want).abs() < 2e-3, "({a},{c})");
            }
        }
    }
}
