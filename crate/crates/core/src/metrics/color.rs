//! sRGB transfer curve, CIE Lab and CIEDE2000.

use serde::{Deserialize, Serialize};

/// sRGB-encoded value to linear light (IEC 61966-2-1).
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear light to sRGB encoding; inverse of [`srgb_to_linear`].
pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// CIE L*a*b* under D65.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }

    /// From an sRGB-encoded triple in `[0, 1]`.
    pub fn from_srgb(rgb: [f32; 3]) -> Self {
        Self::from_linear_rgb(rgb.map(|v| srgb_to_linear(v as f64)))
    }

    pub fn from_linear_rgb([r, g, b]: [f64; 3]) -> Self {
        let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
        let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
        let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
        // White point taken as the image of RGB (1, 1, 1), so white maps to
        // exactly L = 100, a = b = 0.
        let fx = lab_f(x / 0.9504700);
        let fy = lab_f(y / 1.0000001);
        let fz = lab_f(z / 1.0888300);
        Self {
            l: 116.0 * fy - 16.0,
            a: 500.0 * (fx - fy),
            b: 200.0 * (fy - fz),
        }
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// CIEDE2000 color difference with `kL = kC = kH = 1`.
pub fn delta_e_2000(x: LabColor, y: LabColor) -> f64 {
    use std::f64::consts::PI;
    let deg = |r: f64| r * 180.0 / PI;
    let rad = |d: f64| d * PI / 180.0;

    let c1 = x.a.hypot(x.b);
    let c2 = y.a.hypot(y.b);
    let c_bar7 = ((c1 + c2) / 2.0).powi(7);
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + 25f64.powi(7))).sqrt());
    let a1 = (1.0 + g) * x.a;
    let a2 = (1.0 + g) * y.a;
    let c1p = a1.hypot(x.b);
    let c2p = a2.hypot(y.b);
    let hue = |b: f64, a: f64| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            deg(b.atan2(a)).rem_euclid(360.0)
        }
    };
    let h1 = hue(x.b, a1);
    let h2 = hue(y.b, a2);

    let dl = y.l - x.l;
    let dc = c2p - c1p;
    let chroma_zero = c1p * c2p == 0.0;
    let dh = if chroma_zero {
        0.0
    } else {
        let d = h2 - h1;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh_big = 2.0 * (c1p * c2p).sqrt() * rad(dh / 2.0).sin();

    let l_bar = (x.l + y.l) / 2.0;
    let c_bar_p = (c1p + c2p) / 2.0;
    let h_bar = if chroma_zero {
        h1 + h2
    } else if (h1 - h2).abs() <= 180.0 {
        (h1 + h2) / 2.0
    } else if h1 + h2 < 360.0 {
        (h1 + h2 + 360.0) / 2.0
    } else {
        (h1 + h2 - 360.0) / 2.0
    };

    let t = 1.0 - 0.17 * rad(h_bar - 30.0).cos() + 0.24 * rad(2.0 * h_bar).cos() + 0.32 * rad(3.0 * h_bar + 6.0).cos()
        - 0.20 * rad(4.0 * h_bar - 63.0).cos();
    let d_theta = 30.0 * (-((h_bar - 275.0) / 25.0).powi(2)).exp();
    let c_bar_p7 = c_bar_p.powi(7);
    let rc = 2.0 * (c_bar_p7 / (c_bar_p7 + 25f64.powi(7))).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let sl = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let sc = 1.0 + 0.045 * c_bar_p;
    let sh = 1.0 + 0.015 * c_bar_p * t;
    let rt = -(rad(2.0 * d_theta)).sin() * rc;

    let (tl, tc, th) = (dl / sl, dc / sc, dh_big / sh);
    (tl * tl + tc * tc + th * th + rt * tc * th).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transfer_curve_fixed_points() {
        assert_eq!(srgb_to_linear(0.0), 0.0);
        assert!((srgb_to_linear(1.0) - 1.0).abs() < 1e-15);
        assert!((srgb_to_linear(0.04045) - 0.04045 / 12.92).abs() < 1e-15);
        assert!((srgb_to_linear(0.04045) - 0.003131).abs() < 1e-6);
        assert_eq!(linear_to_srgb(0.0), 0.0);
        assert!((linear_to_srgb(1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transfer_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let worst = (0..1000)
            .map(|_| {
                let v: f64 = rng.gen();
                (linear_to_srgb(srgb_to_linear(v)) - v).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn transfer_is_continuous_at_the_knee() {
        // The published constants leave a jump of about 2.3e-9 here.
        let lo = srgb_to_linear(0.04045);
        let hi = srgb_to_linear(0.04045 + 1e-12);
        assert!((hi - lo).abs() < 1e-8);
    }

    #[test]
    fn lab_reference_colors() {
        let white = LabColor::from_srgb([1.0; 3]);
        assert!((white.l - 100.0).abs() < 1e-4 && white.a.abs() < 1e-4 && white.b.abs() < 1e-4, "{white:?}");
        let black = LabColor::from_srgb([0.0; 3]);
        assert_eq!(black.l, 0.0);
        // Pure sRGB red, commonly tabulated as (53.24, 80.09, 67.20).
        let red = LabColor::from_srgb([1.0, 0.0, 0.0]);
        assert!((red.l - 53.24).abs() < 0.01 && (red.a - 80.09).abs() < 0.01 && (red.b - 67.20).abs() < 0.01, "{red:?}");
        let gray = LabColor::from_srgb([0.5; 3]);
        assert!(gray.a.abs() < 1e-4 && gray.b.abs() < 1e-4);
    }

    #[test]
    fn identical_colors_have_zero_difference() {
        let c = LabColor::new(41.0, -12.5, 30.0);
        assert_eq!(delta_e_2000(c, c), 0.0);
    }

    #[test]
    fn symmetric_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut lab = || LabColor::new(rng.gen_range(0.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
            let (x, y) = (lab(), lab());
            let (d1, d2) = (delta_e_2000(x, y), delta_e_2000(y, x));
            assert!(d1 > 0.0);
            assert!((d1 - d2).abs() < 1e-12, "{d1} vs {d2}");
        }
    }
}
