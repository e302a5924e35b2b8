//! Camera model, pixel/3D lifting, positional encoding, and depth-bin
//! quantization shared by the encoder, tracker, and evaluation code.
//!
//! All operations are pure functions on immutable inputs; geometry runs in
//! f64 throughout. There are no extrinsics anywhere: every frame lives in
//! its own camera coordinate frame.

pub mod io;

use ndarray::Array2;
use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid depth map: {0}")]
    InvalidDepth(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx},{cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Fallback when intrinsics are unknown: focal length equal to the
    /// image width, principal point at the image center.
    pub fn fallback(width: usize, height: usize) -> Self {
        CameraIntrinsics {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Metric depth in meters with a per-pixel validity mask.
#[derive(Debug, Clone)]
pub struct DepthMap {
    values: Array2<f64>,
    valid: Array2<bool>,
}

impl DepthMap {
    /// Build from raw values; entries that are non-finite or <= 0 are
    /// marked invalid regardless of `valid`.
    pub fn new(values: Array2<f64>, valid: Array2<bool>) -> Result<Self, GeometryError> {
        if values.dim() != valid.dim() {
            return Err(GeometryError::InvalidDepth(format!(
                "mask shape {:?} does not match values {:?}",
                valid.dim(),
                values.dim()
            )));
        }
        let mut valid = valid;
        ndarray::Zip::from(&mut valid).and(&values).for_each(|m, &z| {
            if !z.is_finite() || z <= 0.0 {
                *m = false;
            }
        });
        Ok(DepthMap { values, valid })
    }

    pub fn from_values(values: Array2<f64>) -> Result<Self, GeometryError> {
        let mask = Array2::from_elem(values.dim(), true);
        DepthMap::new(values, mask)
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn valid_mask(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[[y, x]]
    }

    pub fn at(&self, y: usize, x: usize) -> Option<f64> {
        if self.valid[[y, x]] {
            Some(self.values[[y, x]])
        } else {
            None
        }
    }

    /// Bilinear depth lookup at a (possibly non-integer) pixel, weighting
    /// over valid neighbors only. `None` when no valid neighbor exists or
    /// the pixel is out of bounds.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (h, w) = (self.height(), self.width());
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(w.saturating_sub(2));
        let y0 = (v.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let taps = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x1, (1.0 - fy) * fx),
            (y1, x0, fy * (1.0 - fx)),
            (y1, x1, fy * fx),
        ];
        let mut wsum = 0.0;
        let mut zsum = 0.0;
        for (y, x, wt) in taps {
            if wt > 0.0 && self.valid[[y, x]] {
                wsum += wt;
                zsum += wt * self.values[[y, x]];
            }
        }
        if wsum > 0.0 {
            Some(zsum / wsum)
        } else {
            None
        }
    }
}

/// 3D points in the camera frame with per-point validity flags produced
/// by unprojection.
#[derive(Debug, Clone, Default)]
pub struct PointSet3D {
    pub points: Vec<Point3>,
    pub valid: Vec<bool>,
}

impl PointSet3D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Unproject pixels through the depth map: `X=(u-cx)z/fx, Y=(v-cy)z/fy, Z=z`.
/// Pixels with no usable depth are flagged invalid, not dropped.
pub fn unproject(
    pixels: &[(f64, f64)],
    depth: &DepthMap,
    k: &CameraIntrinsics,
) -> PointSet3D {
    let mut out = PointSet3D {
        points: Vec::with_capacity(pixels.len()),
        valid: Vec::with_capacity(pixels.len()),
    };
    for &(u, v) in pixels {
        match depth.sample(u, v) {
            Some(z) => {
                let x = (u - k.cx) * z / k.fx;
                let y = (v - k.cy) * z / k.fy;
                out.points.push([x, y, z]);
                out.valid.push(true);
            }
            None => {
                out.points.push([0.0, 0.0, 0.0]);
                out.valid.push(false);
            }
        }
    }
    out
}

/// Project camera-frame points to pixels: `u=fx X/Z + cx, v=fy Y/Z + cy`.
/// Points with `Z <= 0` are behind the camera and map to `None`.
pub fn project(points: &[Point3], k: &CameraIntrinsics) -> Vec<Option<(f64, f64)>> {
    points
        .iter()
        .map(|p| {
            if p[2] > 0.0 && p.iter().all(|c| c.is_finite()) {
                Some((k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy))
            } else {
                None
            }
        })
        .collect()
}

/// Linear quantization of metric depth into `d` bins.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DepthBinning {
    pub z_min: f64,
    pub z_max: f64,
    pub d: usize,
}

impl DepthBinning {
    pub fn new(z_min: f64, z_max: f64, d: usize) -> Result<Self, GeometryError> {
        if !(z_min < z_max) || !z_min.is_finite() || !z_max.is_finite() {
            return Err(GeometryError::InvalidBinning(format!(
                "need z_min < z_max, got [{z_min}, {z_max}]"
            )));
        }
        if d < 2 {
            return Err(GeometryError::InvalidBinning(format!(
                "need at least 2 bins, got {d}"
            )));
        }
        Ok(DepthBinning { z_min, z_max, d })
    }

    /// Robust per-sequence bounds: 1st/99th percentile of valid depths.
    pub fn from_depths<I: IntoIterator<Item = f64>>(
        depths: I,
        d: usize,
    ) -> Result<Self, GeometryError> {
        let mut zs: Vec<f64> = depths
            .into_iter()
            .filter(|z| z.is_finite() && *z > 0.0)
            .collect();
        if zs.is_empty() {
            return Err(GeometryError::InvalidBinning(
                "no valid depths to derive bounds".into(),
            ));
        }
        zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |q: f64| zs[((zs.len() - 1) as f64 * q).round() as usize];
        let mut lo = pick(0.01);
        let mut hi = pick(0.99);
        if !(lo < hi) {
            // degenerate (near-constant) depth: widen symmetrically
            let pad = (lo.abs() * 0.05).max(1e-3);
            lo -= pad;
            hi += pad;
            lo = lo.max(1e-6);
        }
        DepthBinning::new(lo, hi, d)
    }

    /// Continuous bin coordinate in `[0, d-1]`, clamped.
    pub fn depth_to_bin(&self, z: f64) -> f64 {
        let b = (self.d - 1) as f64 * (z - self.z_min) / (self.z_max - self.z_min);
        b.clamp(0.0, (self.d - 1) as f64)
    }

    /// Inverse of [`Self::depth_to_bin`] on the un-clamped range.
    pub fn bin_to_depth(&self, b: f64) -> f64 {
        self.z_min + b / (self.d - 1) as f64 * (self.z_max - self.z_min)
    }

    pub fn bin_width(&self) -> f64 {
        (self.z_max - self.z_min) / (self.d - 1) as f64
    }
}

/// Sinusoidal Fourier positional encoding of 3D coordinates, normalized by
/// scene bounds. Output dimension is `6 * bands`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PositionalEncoder {
    pub bands: usize,
    pub center: [f64; 3],
    pub inv_scale: [f64; 3],
}

impl PositionalEncoder {
    /// Derive normalization from the camera frustum at `z_max` and the
    /// depth range, mapping each axis roughly to `[-1, 1]`.
    pub fn from_scene(k: &CameraIntrinsics, binning: &DepthBinning, bands: usize) -> Self {
        let half_x = (k.width as f64 / 2.0) * binning.z_max / k.fx;
        let half_y = (k.height as f64 / 2.0) * binning.z_max / k.fy;
        let half_z = (binning.z_max - binning.z_min) / 2.0;
        let center_z = (binning.z_max + binning.z_min) / 2.0;
        PositionalEncoder {
            bands,
            center: [0.0, 0.0, center_z],
            inv_scale: [1.0 / half_x, 1.0 / half_y, 1.0 / half_z],
        }
    }

    /// Encoder for displacement vectors: same scales, zero center.
    pub fn relative(&self) -> Self {
        PositionalEncoder {
            bands: self.bands,
            center: [0.0; 3],
            inv_scale: self.inv_scale,
        }
    }

    pub fn dim(&self) -> usize {
        6 * self.bands
    }

    /// Encode one point: per axis, `bands` sines then `bands` cosines of
    /// `2^k * pi * normalized coordinate`.
    pub fn encode(&self, p: Point3) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for a in 0..3 {
            let n = (p[a] - self.center[a]) * self.inv_scale[a];
            for k in 0..self.bands {
                out.push(((1u64 << k) as f64 * std::f64::consts::PI * n).sin());
            }
            for k in 0..self.bands {
                out.push(((1u64 << k) as f64 * std::f64::consts::PI * n).cos());
            }
        }
        out
    }
}

/// Standalone positional encoding with identity normalization (tests and
/// small call sites).
pub fn gamma_encode(p: Point3, bands: usize) -> Vec<f64> {
    PositionalEncoder {
        bands,
        center: [0.0; 3],
        inv_scale: [1.0; 3],
    }
    .encode(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let k = test_intrinsics();
        let depth = DepthMap::from_values(Array2::from_elem((100, 100), 2.0)).unwrap();
        let out = unproject(&[(k.cx, k.cy)], &depth, &k);
        assert!(out.valid[0]);
        assert_eq!(out.points[0], [0.0, 0.0, 2.0]);
    }

    #[test]
    fn unit_offset_ray() {
        let k = test_intrinsics();
        let depth = DepthMap::from_values(Array2::from_elem((100, 100), 1.0)).unwrap();
        // one focal length to the right of the principal point
        let out = unproject(&[(k.cx + k.fx * 0.49, k.cy)], &depth, &k);
        assert!(out.valid[0]);
        assert!((out.points[0][0] - 0.49).abs() < 1e-12);
        // the canonical variant (cx + fx) is out of this small image; widen
        let k2 = CameraIntrinsics::new(40.0, 40.0, 50.0, 50.0, 100, 100).unwrap();
        let out2 = unproject(&[(k2.cx + k2.fx, k2.cy)], &depth, &k2);
        assert_eq!(out2.points[0], [1.0, 0.0, 1.0]);
    }

    #[test]
    fn project_formula_examples() {
        let k = test_intrinsics();
        assert_eq!(project(&[[0.0, 0.0, 5.0]], &k)[0], Some((50.0, 50.0)));
        assert_eq!(project(&[[1.0, 0.0, 1.0]], &k)[0], Some((150.0, 50.0)));
        assert_eq!(project(&[[0.0, 0.0, -1.0]], &k)[0], None);
        assert_eq!(project(&[[0.0, 0.0, 0.0]], &k)[0], None);
    }

    #[test]
    fn project_unproject_roundtrip_1000_random_pixels() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let k = CameraIntrinsics::new(80.0, 90.0, 31.5, 35.1, 64, 72).unwrap();
        let depth_vals =
            Array2::from_shape_fn((72, 64), |(y, x)| 1.5 + 0.01 * ((x * 3 + y * 7) % 50) as f64);
        let depth = DepthMap::new(depth_vals, Array2::from_elem((72, 64), true)).unwrap();
        // integer pixels so the bilinear lookup is exact
        let pixels: Vec<(f64, f64)> = (0..1000)
            .map(|_| {
                (
                    rng.random_range(0..64) as f64,
                    rng.random_range(0..72) as f64,
                )
            })
            .collect();
        let pts = unproject(&pixels, &depth, &k);
        let back = project(&pts.points, &k);
        for (i, &(u, v)) in pixels.iter().enumerate() {
            assert!(pts.valid[i]);
            let (u2, v2) = back[i].expect("in front of camera");
            let err = ((u2 - u).powi(2) + (v2 - v).powi(2)).sqrt();
            assert!(err < 1e-6, "pixel {i} round-trip error {err}");
        }
    }

    #[test]
    fn invalid_depth_is_flagged_not_thrown() {
        let k = test_intrinsics();
        let values = Array2::from_elem((100, 100), 2.0);
        let mut mask = Array2::from_elem((100, 100), true);
        // a 4x4 invalid patch; sample well inside it
        for y in 10..14 {
            for x in 10..14 {
                mask[[y, x]] = false;
            }
        }
        let depth = DepthMap::new(values, mask).unwrap();
        let out = unproject(&[(11.5, 11.5), (40.0, 40.0)], &depth, &k);
        assert!(!out.valid[0]);
        assert!(out.valid[1]);
        // empty input -> empty output
        let empty = unproject(&[], &depth, &k);
        assert!(empty.is_empty());
    }

    #[test]
    fn bilinear_lookup_ignores_invalid_neighbors() {
        let k = test_intrinsics();
        let mut values = Array2::from_elem((100, 100), 2.0);
        values[[20, 20]] = 100.0; // bogus value, masked out below
        let mut mask = Array2::from_elem((100, 100), true);
        mask[[20, 20]] = false;
        let depth = DepthMap::new(values, mask).unwrap();
        // sample between (20,20) and neighbors: only valid taps contribute
        let z = depth.sample(20.5, 20.5).unwrap();
        assert!((z - 2.0).abs() < 1e-12);
        let out = unproject(&[(20.5, 20.5)], &depth, &k);
        assert!(out.valid[0]);
        assert!((out.points[0][2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_encode_zero_and_determinism() {
        let e = gamma_encode([0.0, 0.0, 0.0], 10);
        assert_eq!(e.len(), 60);
        for a in 0..3 {
            for k in 0..10 {
                assert_eq!(e[a * 20 + k], 0.0, "sin term");
                assert_eq!(e[a * 20 + 10 + k], 1.0, "cos term");
            }
        }
        let p = [0.3, -0.2, 1.7];
        let e1 = gamma_encode(p, 10);
        let e2 = gamma_encode(p, 10);
        assert_eq!(e1, e2);
    }

    #[test]
    fn gamma_encode_jacobian_matches_finite_differences() {
        let enc = PositionalEncoder {
            bands: 6,
            center: [0.1, -0.2, 2.0],
            inv_scale: [0.5, 0.4, 0.8],
        };
        let p = [0.37, -0.81, 2.45];
        let eps = 1e-6;
        for axis in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[axis] += eps;
            pm[axis] -= eps;
            let ep = enc.encode(pp);
            let em = enc.encode(pm);
            // analytic derivative of entry k wrt axis
            let n = (p[axis] - enc.center[axis]) * enc.inv_scale[axis];
            for k in 0..enc.bands {
                let freq = (1u64 << k) as f64 * std::f64::consts::PI;
                let idx_sin = axis * 2 * enc.bands + k;
                let idx_cos = idx_sin + enc.bands;
                let fd_sin = (ep[idx_sin] - em[idx_sin]) / (2.0 * eps);
                let fd_cos = (ep[idx_cos] - em[idx_cos]) / (2.0 * eps);
                let an_sin = freq * (freq * n).cos() * enc.inv_scale[axis];
                let an_cos = -freq * (freq * n).sin() * enc.inv_scale[axis];
                let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
                assert!(rel(fd_sin, an_sin) < 1e-4, "sin band {k} axis {axis}");
                assert!(rel(fd_cos, an_cos) < 1e-4, "cos band {k} axis {axis}");
            }
        }
    }

    #[test]
    fn depth_bins_linear_and_clamped() {
        let b = DepthBinning::new(1.0, 3.0, 256).unwrap();
        assert_eq!(b.depth_to_bin(1.0), 0.0);
        assert_eq!(b.depth_to_bin(3.0), 255.0);
        assert_eq!(b.depth_to_bin(2.0), 127.5);
        assert_eq!(b.depth_to_bin(0.0), 0.0);
        assert_eq!(b.depth_to_bin(10.0), 255.0);
        // monotone
        let mut prev = -1.0;
        for i in 0..100 {
            let z = 0.5 + i as f64 * 0.05;
            let bin = b.depth_to_bin(z);
            assert!(bin >= prev);
            prev = bin;
        }
        // inverse on the interior
        let z = 2.37;
        assert!((b.bin_to_depth(b.depth_to_bin(z)) - z).abs() < 1e-12);
    }

    #[test]
    fn binning_percentiles_are_robust_to_outliers() {
        let mut depths: Vec<f64> = (0..1000).map(|i| 2.0 + i as f64 * 0.001).collect();
        depths.push(500.0); // outlier
        let b = DepthBinning::from_depths(depths, 256).unwrap();
        assert!(b.z_max < 4.0, "z_max {} should exclude the outlier", b.z_max);
    }

    #[test]
    fn intrinsics_fallback_uses_width() {
        let k = CameraIntrinsics::fallback(64, 48);
        assert_eq!(k.fx, 64.0);
        assert_eq!(k.fy, 64.0);
        assert_eq!(k.cx, 32.0);
        assert_eq!(k.cy, 24.0);
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(-1.0, 1.0, 0.0, 0.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(10.0, 10.0, 20.0, 5.0, 10, 10).is_err());
    }

    #[test]
    fn depth_map_masks_nonpositive_values() {
        let values = arr2(&[[1.0, -2.0], [f64::NAN, 3.0]]);
        let d = DepthMap::from_values(values).unwrap();
        assert!(d.is_valid(0, 0));
        assert!(!d.is_valid(0, 1));
        assert!(!d.is_valid(1, 0));
        assert!(d.is_valid(1, 1));
    }
}
