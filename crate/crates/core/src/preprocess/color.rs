//! RGB ↔ lαβ conversion (Reinhard et al.) and RGB ↔ HSV.

pub type Mat3 = [[f64; 3]; 3];

pub const RGB_TO_LMS: Mat3 = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

/// LMS values are floored here before the logarithm so black stays finite.
pub const LMS_FLOOR: f64 = 1e-4;

fn mul(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn invert(m: &Mat3) -> Mat3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = cof[j][i] / det;
        }
    }
    inv
}

/// log-LMS → lαβ.
pub fn lms_to_lab_matrix() -> Mat3 {
    let s3 = 1.0 / 3f64.sqrt();
    let s6 = 1.0 / 6f64.sqrt();
    let s2 = 1.0 / 2f64.sqrt();
    let scale = [[s3, 0.0, 0.0], [0.0, s6, 0.0], [0.0, 0.0, s2]];
    matmul(&scale, &[[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]])
}

/// Forward and inverse transforms, precomputed.
#[derive(Debug, Clone)]
pub struct LabTransform {
    to_lab: Mat3,
    from_lab: Mat3,
    lms_to_rgb: Mat3,
}

impl Default for LabTransform {
    fn default() -> Self {
        let to_lab = lms_to_lab_matrix();
        Self { from_lab: invert(&to_lab), lms_to_rgb: invert(&RGB_TO_LMS), to_lab }
    }
}

impl LabTransform {
    /// `rgb` on the 0–255 scale.
    pub fn rgb_to_lab(&self, rgb: [f64; 3]) -> [f64; 3] {
        let lms = mul(&RGB_TO_LMS, rgb).map(|v| v.max(LMS_FLOOR).log10());
        mul(&self.to_lab, lms)
    }

    pub fn lab_to_rgb(&self, lab: [f64; 3]) -> [f64; 3] {
        let lms = mul(&self.from_lab, lab).map(|v| 10f64.powf(v));
        mul(&self.lms_to_rgb, lms)
    }
}

/// `rgb` in [0,1]; returns (hue degrees in [0,360), saturation, value).
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
