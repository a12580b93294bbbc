//! sRGB -> CIELAB conversion and the CIEDE2000 color difference.
//!
//! Inputs are 8-bit sRGB under D65 with the 2 degree observer. The CIEDE2000
//! parametric factors are fixed at `kL = kC = kH = 1`.

use serde::{Deserialize, Serialize};

/// 8-bit sRGB color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Rgb {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }

    pub fn to_array(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }
}

impl From<[u8; 3]> for Rgb {
    fn from(c: [u8; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }
}

/// CIELAB color.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }

    /// Chroma `C* = sqrt(a^2 + b^2)`.
    pub fn chroma(&self) -> f64 {
        self.a.hypot(self.b)
    }

    /// Hue angle in degrees, `[0, 360)`.
    pub fn hue_degrees(&self) -> f64 {
        let h = self.b.atan2(self.a).to_degrees();
        if h < 0.0 {
            h + 360.0
        } else {
            h
        }
    }
}

/// A CIEDE2000 difference value.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct ColorDifference(pub f64);

impl ColorDifference {
    pub fn value(self) -> f64 {
        self.0
    }
}

// sRGB (D65) to XYZ, IEC 61966-2-1.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

// Reference white: the image of sRGB white under the matrix above.
const WHITE: [f64; 3] = [
    0.4124564 + 0.3575761 + 0.1804375,
    0.2126729 + 0.7151522 + 0.0721750,
    0.0193339 + 0.1191920 + 0.9503041,
];

fn srgb_linearize(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

pub fn srgb_to_lab(c: Rgb) -> Lab {
    let lin = [
        srgb_linearize(c.r),
        srgb_linearize(c.g),
        srgb_linearize(c.b),
    ];
    let mut xyz = [0.0; 3];
    for (row, out) in SRGB_TO_XYZ.iter().zip(xyz.iter_mut()) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    Lab::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// CIEDE2000 color difference.
pub fn ciede2000(x: &Lab, y: &Lab) -> ColorDifference {
    const POW25_7: f64 = 6_103_515_625.0; // 25^7

    let c_bar = 0.5 * (x.chroma() + y.chroma());
    let c_bar7 = c_bar.powi(7);
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + POW25_7)).sqrt());

    let a1 = (1.0 + g) * x.a;
    let a2 = (1.0 + g) * y.a;
    let c1 = a1.hypot(x.b);
    let c2 = a2.hypot(y.b);
    let hue = |b: f64, a: f64| {
        if b == 0.0 && a == 0.0 {
            0.0
        } else {
            let h = b.atan2(a).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1 = hue(x.b, a1);
    let h2 = hue(y.b, a2);

    let dl = y.l - x.l;
    let dc = c2 - c1;
    let c_prod = c1 * c2;
    let dh_angle = if c_prod == 0.0 {
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
    let dh = 2.0 * c_prod.sqrt() * (dh_angle.to_radians() / 2.0).sin();

    let l_bar = 0.5 * (x.l + y.l);
    let c_bar_p = 0.5 * (c1 + c2);
    let h_bar = if c_prod == 0.0 {
        h1 + h2
    } else if (h1 - h2).abs() <= 180.0 {
        0.5 * (h1 + h2)
    } else if h1 + h2 < 360.0 {
        0.5 * (h1 + h2 + 360.0)
    } else {
        0.5 * (h1 + h2 - 360.0)
    };

    let t = 1.0 - 0.17 * (h_bar - 30.0).to_radians().cos()
        + 0.24 * (2.0 * h_bar).to_radians().cos()
        + 0.32 * (3.0 * h_bar + 6.0).to_radians().cos()
        - 0.20 * (4.0 * h_bar - 63.0).to_radians().cos();
    let d_theta = 30.0 * (-((h_bar - 275.0) / 25.0).powi(2)).exp();
    let c_bar_p7 = c_bar_p.powi(7);
    let r_c = 2.0 * (c_bar_p7 / (c_bar_p7 + POW25_7)).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let s_c = 1.0 + 0.045 * c_bar_p;
    let s_h = 1.0 + 0.015 * c_bar_p * t;
    let r_t = -(2.0 * d_theta).to_radians().sin() * r_c;

    let tl = dl / s_l;
    let tc = dc / s_c;
    let th = dh / s_h;
    ColorDifference((tl * tl + tc * tc + th * th + r_t * tc * th).sqrt())
}

pub fn color_difference_rgb(a: Rgb, b: Rgb) -> ColorDifference {
    ciede2000(&srgb_to_lab(a), &srgb_to_lab(b))
}
