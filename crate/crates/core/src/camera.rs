//! Pinhole camera with radial-tangential (Brown) distortion, and point
//! colorization from a paired RGB image.

use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::par;
use crate::se3::PoseSE3;

/// Points closer than this to the camera plane are not projected.
pub const DEFAULT_Z_MIN: f64 = 0.01;

/// A LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    /// Position in the LiDAR frame (meters).
    pub position: Vector3<f64>,
    pub intensity: f64,
    pub color: Option<Rgb>,
    /// Scan-level timestamp (nanoseconds).
    pub timestamp_ns: i64,
}

impl Point {
    pub fn new(position: Vector3<f64>, intensity: f64) -> Self {
        Self {
            position,
            intensity,
            color: None,
            timestamp_ns: 0,
        }
    }

    pub fn with_color(mut self, color: Rgb) -> Self {
        self.color = Some(color);
        self
    }

    pub fn range(&self) -> f64 {
        self.position.norm()
    }
}

/// An 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<Rgb>,
    pub timestamp_ns: i64,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>, timestamp_ns: i64) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidParameter(format!(
                "image buffer has {} pixels, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            timestamp_ns,
        })
    }

    pub fn filled(width: u32, height: u32, color: Rgb, timestamp_ns: i64) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width as usize * height as usize],
            timestamp_ns,
        }
    }

    pub fn pixel(&self, col: u32, row: u32) -> Rgb {
        self.pixels[row as usize * self.width as usize + col as usize]
    }

    /// Loads a PNG or binary PPM file.
    pub fn load(path: &Path, timestamp_ns: i64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::malformed("image", path, e.to_string()))?
            .to_rgb8();
        let (width, height) = img.dimensions();
        let pixels = img.pixels().map(|p| Rgb::new(p[0], p[1], p[2])).collect();
        Self::new(width, height, pixels, timestamp_ns)
    }

    /// Writes the image; the format follows the extension (`.png` or `.ppm`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().flat_map(|c| c.to_array()).collect();
        let buf = image::RgbImage::from_raw(self.width, self.height, raw)
            .ok_or_else(|| Error::InvalidParameter("image buffer size mismatch".into()))?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("png") => image::ImageFormat::Png,
            _ => image::ImageFormat::Pnm,
        };
        buf.save_with_format(path, format)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }
}

/// Intrinsics, distortion `(k1, k2, p1, p2, k3)` and the LiDAR-to-camera extrinsic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: [f64; 5],
    pub t_cl: PoseSE3,
    pub width: u32,
    pub height: u32,
    pub z_min: f64,
}

/// On-disk calibration layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CalibrationFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    distortion: [f64; 5],
    #[serde(rename = "T_CL")]
    t_cl: [f64; 16],
    width: u32,
    height: u32,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: [f64; 5],
        t_cl: PoseSE3,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let model = Self {
            fx,
            fy,
            cx,
            cy,
            distortion,
            t_cl,
            width,
            height,
            z_min: DEFAULT_Z_MIN,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter(
                "focal lengths must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter(
                "image size must be positive".into(),
            ));
        }
        if !self.t_cl.is_valid(1e-6) {
            return Err(Error::InvalidParameter(
                "T_CL is not a rigid transform".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CalibrationFile = serde_json::from_str(text)?;
        let m = Matrix4::from_row_slice(&f.t_cl);
        let t_cl = PoseSE3::from_matrix4(&m);
        if !t_cl.is_valid(1e-6) {
            return Err(Error::InvalidParameter(
                "T_CL is not a rigid transform".into(),
            ));
        }
        Self::new(
            f.fx,
            f.fy,
            f.cx,
            f.cy,
            f.distortion,
            t_cl.orthonormalized(),
            f.width,
            f.height,
        )
    }

    pub fn to_json(&self) -> String {
        let m = self.t_cl.to_matrix4();
        let mut t_cl = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                t_cl[r * 4 + c] = m[(r, c)];
            }
        }
        let f = CalibrationFile {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            distortion: self.distortion,
            t_cl,
            width: self.width,
            height: self.height,
        };
        serde_json::to_string_pretty(&f).expect("calibration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::malformed("calibration", path, j.to_string()),
            other => other,
        })
    }

    pub fn lidar_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.t_cl.transform_point(p)
    }

    /// Applies the distortion polynomial to normalized coordinates. The second
    /// value is false outside the region where the radial map is monotonic.
    pub fn distort(&self, x: f64, y: f64) -> ((f64, f64), bool) {
        let [k1, k2, p1, p2, k3] = self.distortion;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        let slope = 1.0 + r2 * (3.0 * k1 + r2 * (5.0 * k2 + r2 * 7.0 * k3));
        ((xd, yd), radial > 0.0 && slope > 0.0)
    }

    /// Inverts [`Self::distort`] by fixed-point iteration.
    pub fn undistort(&self, xd: f64, yd: f64) -> (f64, f64) {
        let [k1, k2, p1, p2, k3] = self.distortion;
        let (mut x, mut y) = (xd, yd);
        for _ in 0..50 {
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
            let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
            let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
            x = (xd - dx) / radial;
            y = (yd - dy) / radial;
        }
        (x, y)
    }

    /// Projects a camera-frame point to pixel coordinates, or `None` when it is
    /// behind/too close to the camera or lands outside the image.
    pub fn project(&self, cp: &Vector3<f64>) -> Option<(f64, f64)> {
        if !(cp.z > self.z_min) {
            return None;
        }
        let (x, y) = (cp.x / cp.z, cp.y / cp.z);
        let ((xd, yd), valid) = self.distort(x, y);
        if !valid {
            return None;
        }
        let u = self.fx * xd + self.cx;
        let v = self.fy * yd + self.cy;
        (u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64).then_some((u, v))
    }

    /// Nearest integer pixel of a projection, clamped into the image.
    pub fn nearest_pixel(&self, (u, v): (f64, f64)) -> (u32, u32) {
        let col = (u.round() as u32).min(self.width - 1);
        let row = (v.round() as u32).min(self.height - 1);
        (col, row)
    }

    /// Color of the pixel a LiDAR-frame point projects to.
    pub fn sample(&self, img: &Image, p: &Vector3<f64>) -> Option<Rgb> {
        let uv = self.project(&self.lidar_to_camera(p))?;
        let (col, row) = self.nearest_pixel(uv);
        (col < img.width && row < img.height).then(|| img.pixel(col, row))
    }

    /// Ray direction (camera frame, `z = 1`) through a pixel.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let (x, y) = self.undistort((u - self.cx) / self.fx, (v - self.cy) / self.fy);
        Vector3::new(x, y, 1.0)
    }
}

/// Colors a cloud from an image. Points that do not project into the image are
/// dropped; the order of retained points is preserved.
pub fn colorize(model: &CameraModel, img: &Image, cloud: &[Point]) -> Vec<Point> {
    par::filter_map(cloud, |p| {
        model.sample(img, &p.position).map(|c| p.with_color(c))
    })
}

/// Colors points in place, leaving `color = None` on points outside the image.
/// Returns the number of colored points.
pub fn assign_colors(model: &CameraModel, img: &Image, points: &mut [Point]) -> usize {
    let colors = par::map(points, |p| model.sample(img, &p.position));
    let mut n = 0;
    for (p, c) in points.iter_mut().zip(colors) {
        p.color = c;
        n += c.is_some() as usize;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{exp_se3, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(distortion: [f64; 5]) -> CameraModel {
        CameraModel::new(
            400.0,
            420.0,
            320.0,
            240.0,
            distortion,
            PoseSE3::identity(),
            640,
            480,
        )
        .unwrap()
    }

    // Standalone evaluation of the radial-tangential model.
    fn distortion_oracle(x: f64, y: f64, d: [f64; 5]) -> (f64, f64) {
        let (k1, k2, p1, p2, k3) = (d[0], d[1], d[2], d[3], d[4]);
        let r2 = x.powi(2) + y.powi(2);
        let r4 = r2.powi(2);
        let r6 = r2.powi(3);
        let rad = 1.0 + k1 * r2 + k2 * r4 + k3 * r6;
        (
            x * rad + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x.powi(2)),
            y * rad + p1 * (r2 + 2.0 * y.powi(2)) + 2.0 * p2 * x * y,
        )
    }

    #[test]
    fn rejects_invalid_models() {
        assert!(
            CameraModel::new(0.0, 1.0, 0.0, 0.0, [0.0; 5], PoseSE3::identity(), 10, 10).is_err()
        );
        assert!(
            CameraModel::new(1.0, 1.0, 0.0, 0.0, [0.0; 5], PoseSE3::identity(), 0, 10).is_err()
        );
        let mut bad = PoseSE3::identity();
        bad.rotation[(0, 0)] = 2.0;
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, [0.0; 5], bad, 10, 10).is_err());
    }

    #[test]
    fn lidar_to_camera_examples() {
        let mut m = model([0.0; 5]);
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(m.lidar_to_camera(&p), p);
        m.t_cl = PoseSE3::from_translation(Vector3::new(0.1, 0.0, 0.0));
        assert_eq!(
            m.lidar_to_camera(&Vector3::new(1.0, 0.0, 0.0)),
            Vector3::new(1.1, 0.0, 0.0)
        );

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let xi = Twist::new(
                Vector3::new(rng.random(), rng.random(), rng.random()),
                Vector3::new(rng.random(), rng.random(), rng.random()),
            );
            m.t_cl = exp_se3(&xi);
            let p = Vector3::new(rng.random(), rng.random(), rng.random());
            let h = m.t_cl.to_matrix4() * p.push(1.0);
            assert!((m.lidar_to_camera(&p) - h.xyz()).norm() < 1e-12);
        }
    }

    #[test]
    fn project_examples() {
        let m = model([0.0; 5]);
        assert_eq!(
            m.project(&Vector3::new(0.0, 0.0, 1.0)),
            Some((320.0, 240.0))
        );
        assert_eq!(m.project(&Vector3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(m.project(&Vector3::new(0.0, 0.0, 0.005)), None);
        assert_eq!(m.project(&Vector3::new(10.0, 0.0, 1.0)), None);

        let d = [-0.1, 0.0, 0.0, 0.0, 0.0];
        let m = model(d);
        let (xd, yd) = distortion_oracle(0.1, 0.2, d);
        let (u, v) = m.project(&Vector3::new(0.1, 0.2, 1.0)).unwrap();
        assert!((u - (400.0 * xd + 320.0)).abs() < 1e-9);
        assert!((v - (420.0 * yd + 240.0)).abs() < 1e-9);
    }

    #[test]
    fn project_matches_oracle_with_full_distortion() {
        let d = [-0.12, 0.03, 0.001, -0.002, -0.004];
        let m = model(d);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.5..5.0),
            );
            let (xd, yd) = distortion_oracle(p.x / p.z, p.y / p.z, d);
            if let Some((u, v)) = m.project(&p) {
                assert!((u - (400.0 * xd + 320.0)).abs() < 1e-9);
                assert!((v - (420.0 * yd + 240.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_distortion_is_plain_pinhole() {
        let m = model([0.0; 5]);
        for &(x, y, z) in &[(0.1, 0.1, 1.0), (-0.3, 0.2, 2.0), (0.5, -0.5, 4.0)] {
            let (u, v) = m.project(&Vector3::new(x, y, z)).unwrap();
            assert_eq!(u, 400.0 * (x / z) + 320.0);
            assert_eq!(v, 420.0 * (y / z) + 240.0);
        }
    }

    #[test]
    fn undistort_inverts_distort() {
        let m = model([-0.12, 0.03, 0.001, -0.002, 0.0]);
        for &(x, y) in &[(0.1, 0.2), (-0.4, 0.3), (0.0, 0.0), (0.6, -0.5)] {
            let ((xd, yd), ok) = m.distort(x, y);
            assert!(ok);
            let (ux, uy) = m.undistort(xd, yd);
            assert!((ux - x).abs() < 1e-10 && (uy - y).abs() < 1e-10);
        }
    }

    #[test]
    fn colorize_uniform_image() {
        let m = model([0.0; 5]);
        let img = Image::filled(640, 480, Rgb::new(255, 0, 0), 0);
        let cloud = vec![
            Point::new(Vector3::new(0.0, 0.0, 2.0), 1.0),
            Point::new(Vector3::new(0.0, 0.0, -2.0), 1.0),
            Point::new(Vector3::new(0.2, -0.1, 3.0), 1.0),
        ];
        let out = colorize(&m, &img, &cloud);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|p| p.color == Some(Rgb::new(255, 0, 0))));
        assert_eq!(out[0].position, cloud[0].position);
        assert_eq!(out[1].position, cloud[2].position);

        let mut pts = cloud.clone();
        assert_eq!(assign_colors(&m, &img, &mut pts), 2);
        assert_eq!(pts[1].color, None);
    }

    #[test]
    fn colored_points_reproject_inside() {
        let m = model([-0.1, 0.01, 0.0, 0.0, 0.0]);
        let img = Image::filled(640, 480, Rgb::new(1, 2, 3), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud: Vec<Point> = (0..2000)
            .map(|_| {
                Point::new(
                    Vector3::new(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-2.0..6.0),
                    ),
                    1.0,
                )
            })
            .collect();
        let out = colorize(&m, &img, &cloud);
        assert!(out.len() <= cloud.len() && !out.is_empty());
        for p in &out {
            let (u, v) = m.project(&p.position).unwrap();
            assert!((0.0..640.0).contains(&u) && (0.0..480.0).contains(&v));
        }
    }

    #[test]
    fn calibration_json_roundtrip() {
        let mut m = model([-0.1, 0.01, 0.001, 0.002, 0.0]);
        m.t_cl = exp_se3(&Twist::new(
            Vector3::new(0.1, -0.05, 0.02),
            Vector3::new(0.1, 0.2, -0.3),
        ));
        let back = CameraModel::from_json(&m.to_json()).unwrap();
        assert!((back.t_cl.rotation - m.t_cl.rotation).abs().max() < 1e-12);
        assert_eq!(back.distortion, m.distortion);
        assert_eq!((back.width, back.height), (640, 480));
        assert!(CameraModel::from_json("{\"fx\": 1}").is_err());
    }
}
