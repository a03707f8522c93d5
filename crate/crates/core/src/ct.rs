//! CT volumes and digitally reconstructed radiographs.
//!
//! Attenuation follows `mu = mu_water (1 + HU / 1000)` and intensities follow
//! Beer-Lambert, `I = I0 exp(-integral mu ds)`, integrated with the midpoint
//! rule between the ray's entry and exit of the volume box.
//!
//! On disk a volume is a text header of `key=value` lines
//!
//! ```text
//! dims=64 64 64
//! spacing=1 1 1
//! origin=-31.5 -31.5 -31.5
//! data=phantom.raw
//! dtype=int16le
//! ```
//!
//! next to a raw file of `2 * nx * ny * nz` bytes, x fastest.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Ray;
use crate::error::{argument, Error, Result};
use crate::image::{ImageBuffer, ImageKind};
use crate::scene::Vec3;

/// HU returned for points outside the volume.
pub const AIR_HU: f64 = -1000.0;
pub const MIN_HU: f64 = -1024.0;

/// Linear attenuation for a Hounsfield value, clamped at zero.
#[inline]
pub fn hu_to_mu(h: f64, mu_water: f64) -> f64 {
    (mu_water * (1.0 + h / 1000.0)).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub dims: [usize; 3],
    /// mm per voxel.
    pub spacing: Vec3,
    /// World position (mm) of the center of voxel (0, 0, 0).
    pub origin: Vec3,
    /// Hounsfield units, x fastest.
    pub hu: Vec<f64>,
}

impl VoxelVolume {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3, hu: Vec<f64>) -> Result<Self> {
        let vol = Self { dims, spacing, origin, hu };
        vol.validate()?;
        Ok(vol)
    }

    pub fn filled(dims: [usize; 3], spacing: Vec3, origin: Vec3, value: f64) -> Result<Self> {
        Self::new(dims, spacing, origin, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Volume of `dims` voxels centered on `center`.
    pub fn centered(dims: [usize; 3], spacing: Vec3, center: Vec3, value: f64) -> Result<Self> {
        let half = Vec3::new(
            (dims[0] as f64 - 1.0) * 0.5 * spacing.x,
            (dims[1] as f64 - 1.0) * 0.5 * spacing.y,
            (dims[2] as f64 - 1.0) * 0.5 * spacing.z,
        );
        Self::filled(dims, spacing, center - half, value)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(argument("volume dims must be >= 1"));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(argument("volume spacing must be positive"));
        }
        let n = self.dims.iter().product::<usize>();
        if self.hu.len() != n {
            return Err(argument(format!("volume has {} values, dims need {n}", self.hu.len())));
        }
        if let Some(bad) = self.hu.iter().find(|v| !(v.is_finite() && **v >= MIN_HU)) {
            return Err(argument(format!("HU value {bad} not finite or below {MIN_HU}")));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64).component_mul(&self.spacing)
    }

    /// Box enclosing every voxel (half a voxel beyond the outer centers).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let n = Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64);
        let lo = self.origin - self.spacing * 0.5;
        let hi = self.origin + (n - Vec3::repeat(0.5)).component_mul(&self.spacing);
        (lo, hi)
    }

    pub fn center(&self) -> Vec3 {
        let (lo, hi) = self.bounds();
        (lo + hi) * 0.5
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.min()
    }

    /// Loads a volume header and its raw int16le payload.
    pub fn load(header_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(header_path)?;
        let header = VolumeHeader::parse(&text)?;
        let raw_path = header_path.parent().unwrap_or(Path::new(".")).join(&header.data);
        let bytes = std::fs::read(&raw_path)?;
        let expected = 2 * header.dims.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "{}: expected {expected} bytes for dims {:?}, found {}",
                raw_path.display(),
                header.dims,
                bytes.len()
            )));
        }
        let hu = bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64)
            .collect();
        VoxelVolume::new(header.dims, header.spacing, header.origin, hu)
            .map_err(|e| Error::Format(format!("{}: {e}", header_path.display())))
    }

    /// Writes `header_path` plus a raw file named `raw_name` beside it.
    /// HU values are rounded to the nearest int16.
    pub fn save(&self, header_path: &Path, raw_name: &str) -> Result<()> {
        let header = VolumeHeader {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: raw_name.to_string(),
        };
        let raw_path = header_path.parent().unwrap_or(Path::new(".")).join(raw_name);
        let mut bytes = Vec::with_capacity(self.hu.len() * 2);
        for &h in &self.hu {
            let q = h.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            bytes.extend_from_slice(&q.to_le_bytes());
        }
        std::fs::write(raw_path, bytes)?;
        std::fs::write(header_path, header.render())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
    pub data: String,
}

impl VolumeHeader {
    pub fn parse(text: &str) -> Result<Self> {
        let (mut dims, mut spacing, mut origin, mut data, mut dtype) = (None, None, None, None, None);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Format(format!("volume header line {}: {msg}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let floats = |n: usize| -> Result<Vec<f64>> {
                let v: Vec<f64> = value
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|e| err(format!("{key}: {e}"))))
                    .collect::<Result<_>>()?;
                if v.len() != n {
                    return Err(err(format!("{key} needs {n} values, got {}", v.len())));
                }
                Ok(v)
            };
            match key {
                "dims" => {
                    let v: Vec<usize> = value
                        .split_whitespace()
                        .map(|s| s.parse::<usize>().map_err(|e| err(format!("dims: {e}"))))
                        .collect::<Result<_>>()?;
                    if v.len() != 3 {
                        return Err(err("dims needs 3 values".into()));
                    }
                    dims = Some([v[0], v[1], v[2]]);
                }
                "spacing" => spacing = Some(Vec3::from_vec(floats(3)?)),
                "origin" => origin = Some(Vec3::from_vec(floats(3)?)),
                "data" => data = Some(value.to_string()),
                "dtype" => {
                    if value != "int16le" {
                        return Err(err(format!("unsupported dtype {value:?}, expected int16le")));
                    }
                    dtype = Some(());
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::Format(format!("volume header missing `{k}`"));
        dtype.ok_or_else(|| missing("dtype"))?;
        Ok(Self {
            dims: dims.ok_or_else(|| missing("dims"))?,
            spacing: spacing.ok_or_else(|| missing("spacing"))?,
            origin: origin.ok_or_else(|| missing("origin"))?,
            data: data.ok_or_else(|| missing("data"))?,
        })
    }

    pub fn render(&self) -> String {
        format!(
            "dims={} {} {}\nspacing={} {} {}\norigin={} {} {}\ndata={}\ndtype=int16le\n",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.spacing.x,
            self.spacing.y,
            self.spacing.z,
            self.origin.x,
            self.origin.y,
            self.origin.z,
            self.data
        )
    }
}

/// Trilinear HU at world point `x`; air outside the volume box.
pub fn sample_hu(vol: &VoxelVolume, x: &Vec3) -> f64 {
    let (lo, hi) = vol.bounds();
    if (0..3).any(|a| x[a] < lo[a] || x[a] > hi[a]) {
        return AIR_HU;
    }
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let n = vol.dims[a];
        let u = ((x[a] - vol.origin[a]) / vol.spacing[a]).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n.saturating_sub(2));
        base[a] = i;
        frac[a] = if n == 1 { 0.0 } else { u - i as f64 };
    }
    // nested lerps stay exact where neighbouring voxels agree
    let at = |di: usize, dj: usize, dk: usize| {
        let i = (base[0] + di).min(vol.dims[0] - 1);
        let j = (base[1] + dj).min(vol.dims[1] - 1);
        let k = (base[2] + dk).min(vol.dims[2] - 1);
        vol.hu[vol.index(i, j, k)]
    };
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + t * (b - a) };
    let x00 = lerp(at(0, 0, 0), at(1, 0, 0), frac[0]);
    let x10 = lerp(at(0, 1, 0), at(1, 1, 0), frac[0]);
    let x01 = lerp(at(0, 0, 1), at(1, 0, 1), frac[0]);
    let x11 = lerp(at(0, 1, 1), at(1, 1, 1), frac[0]);
    lerp(lerp(x00, x10, frac[1]), lerp(x01, x11, frac[1]), frac[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrrOutput {
    Intensity,
    LineIntegral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrrConfig {
    /// 1/mm.
    pub mu_water: f64,
    pub i0: f64,
    /// Ray-march step in mm; `None` means a quarter of the smallest spacing.
    pub step_mm: Option<f64>,
    pub output: DrrOutput,
}

impl Default for DrrConfig {
    fn default() -> Self {
        Self { mu_water: 0.02, i0: 1.0, step_mm: None, output: DrrOutput::Intensity }
    }
}

impl DrrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_water > 0.0 && self.i0 > 0.0) {
            return Err(argument("mu_water and i0 must be positive"));
        }
        if let Some(s) = self.step_mm {
            if !(s > 0.0) {
                return Err(argument("step_mm must be positive"));
            }
        }
        Ok(())
    }

    pub fn step_for(&self, vol: &VoxelVolume) -> f64 {
        self.step_mm.unwrap_or(vol.min_spacing() / 4.0)
    }
}

/// Parameter interval `[t0, t1]` (with `t0 >= 0`) where the ray is inside the box.
pub fn clip_to_box(ray: &Ray, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.dir[a]);
        if d == 0.0 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o) / d, (hi[a] - o) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Midpoint-rule integral of `mu` over `[t0, t1]` split into `steps` equal steps.
pub fn integrate_segment(
    vol: &VoxelVolume,
    ray: &Ray,
    t0: f64,
    t1: f64,
    steps: usize,
    mu_water: f64,
) -> f64 {
    if steps == 0 || t1 <= t0 {
        return 0.0;
    }
    let ds = (t1 - t0) / steps as f64;
    (0..steps)
        .map(|k| hu_to_mu(sample_hu(vol, &ray.at(t0 + (k as f64 + 0.5) * ds)), mu_water) * ds)
        .sum()
}

/// `(intensity, line_integral)` along one ray.
pub fn beer_lambert_ray(vol: &VoxelVolume, ray: &Ray, cfg: &DrrConfig) -> (f64, f64) {
    let (lo, hi) = vol.bounds();
    let Some((t0, t1)) = clip_to_box(ray, &lo, &hi) else {
        return (cfg.i0, 0.0);
    };
    let steps = ((t1 - t0) / cfg.step_for(vol)).ceil().max(1.0) as usize;
    let li = integrate_segment(vol, ray, t0, t1, steps, cfg.mu_water);
    (cfg.i0 * (-li).exp(), li)
}

/// Point source and a flat detector; `detector_u`/`detector_v` are the
/// world-space extents of one pixel along columns/rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGeometry {
    pub source: Vec3,
    pub detector_center: Vec3,
    pub detector_u: Vec3,
    pub detector_v: Vec3,
    pub det_width: usize,
    pub det_height: usize,
}

impl ProjectionGeometry {
    /// Source and detector on the z axis through `center`, detector rows
    /// running towards -y.
    pub fn cone_beam_z(
        center: Vec3,
        source_distance: f64,
        detector_distance: f64,
        det_width: usize,
        det_height: usize,
        pixel_mm: f64,
    ) -> Self {
        Self {
            source: center - Vec3::z() * source_distance,
            detector_center: center + Vec3::z() * detector_distance,
            detector_u: Vec3::x() * pixel_mm,
            detector_v: -Vec3::y() * pixel_mm,
            det_width,
            det_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (u, v) = (&self.detector_u, &self.detector_v);
        if u.norm() == 0.0 || v.norm() == 0.0 {
            return Err(argument("detector axes must be non-zero"));
        }
        if u.dot(v).abs() > 1e-9 * u.norm() * v.norm() {
            return Err(argument("detector_u and detector_v must be orthogonal"));
        }
        let n = u.cross(v).normalize();
        if (self.source - self.detector_center).dot(&n).abs() <= 1e-9 {
            return Err(argument("source lies on the detector plane"));
        }
        if self.det_width == 0 || self.det_height == 0 {
            return Err(argument("detector has zero pixels"));
        }
        Ok(())
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> Vec3 {
        let du = col as f64 + 0.5 - self.det_width as f64 * 0.5;
        let dv = row as f64 + 0.5 - self.det_height as f64 * 0.5;
        self.detector_center + self.detector_u * du + self.detector_v * dv
    }

    pub fn pixel_ray(&self, row: usize, col: usize) -> Ray {
        Ray::new(self.source, self.pixel_center(row, col) - self.source)
    }
}

/// One Beer-Lambert ray per detector pixel. Parallel over rows.
pub fn render_drr(vol: &VoxelVolume, geom: &ProjectionGeometry, cfg: &DrrConfig) -> Result<ImageBuffer> {
    geom.validate()?;
    cfg.validate()?;
    let (w, h) = (geom.det_width, geom.det_height);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let (i, li) = beer_lambert_ray(vol, &geom.pixel_ray(row, col), cfg);
                    match cfg.output {
                        DrrOutput::Intensity => i,
                        DrrOutput::LineIntegral => li,
                    }
                })
                .collect()
        })
        .collect();
    let kind = match cfg.output {
        DrrOutput::Intensity => ImageKind::Transmittance,
        DrrOutput::LineIntegral => ImageKind::LineIntegral,
    };
    ImageBuffer::from_data(w, h, 1, kind, rows.concat())
}

/// Water sphere of `radius` mm in air, centered in an `n^3` grid. Boundary
/// voxels carry their partial-volume water fraction (4^3 supersamples).
pub fn water_sphere_phantom(n: usize, spacing: f64, radius: f64) -> Result<VoxelVolume> {
    let mut vol = VoxelVolume::centered([n; 3], Vec3::repeat(spacing), Vec3::zeros(), AIR_HU)?;
    const SUB: usize = 4;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let c = vol.voxel_center(i, j, k);
                let reach = radius + spacing;
                if c.norm() > reach {
                    continue;
                }
                let mut inside = 0;
                for s in 0..SUB * SUB * SUB {
                    let off = Vec3::new(
                        ((s % SUB) as f64 + 0.5) / SUB as f64 - 0.5,
                        ((s / SUB % SUB) as f64 + 0.5) / SUB as f64 - 0.5,
                        ((s / (SUB * SUB)) as f64 + 0.5) / SUB as f64 - 0.5,
                    );
                    if (c + off * spacing).norm() <= radius {
                        inside += 1;
                    }
                }
                let frac = inside as f64 / (SUB * SUB * SUB) as f64;
                let idx = vol.index(i, j, k);
                vol.hu[idx] = AIR_HU * (1.0 - frac);
            }
        }
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hu_conversion_points() {
        assert_eq!(hu_to_mu(0.0, 0.02), 0.02);
        assert_eq!(hu_to_mu(-1000.0, 0.02), 0.0);
        assert_eq!(hu_to_mu(1000.0, 0.02), 0.04);
        assert_eq!(hu_to_mu(-1024.0, 0.02), 0.0);
    }

    fn two_voxel() -> VoxelVolume {
        VoxelVolume::new([2, 1, 1], Vec3::repeat(1.0), Vec3::zeros(), vec![0.0, 100.0]).unwrap()
    }

    #[test]
    fn trilinear_nodes_and_midpoint() {
        let v = two_voxel();
        assert_eq!(sample_hu(&v, &Vec3::zeros()), 0.0);
        assert_eq!(sample_hu(&v, &Vec3::x()), 100.0);
        assert_eq!(sample_hu(&v, &Vec3::new(0.5, 0.0, 0.0)), 50.0);
        assert_eq!(sample_hu(&v, &Vec3::new(5.0, 0.0, 0.0)), AIR_HU);
        assert_eq!(sample_hu(&v, &Vec3::new(0.5, 0.6, 0.0)), AIR_HU);
    }

    #[test]
    fn air_volume_passes_everything() {
        let v = VoxelVolume::centered([8; 3], Vec3::repeat(1.0), Vec3::zeros(), AIR_HU).unwrap();
        let r = Ray::new(Vec3::new(0.0, 0.0, -50.0), Vec3::z());
        assert_eq!(beer_lambert_ray(&v, &r, &DrrConfig::default()), (1.0, 0.0));
    }

    #[test]
    fn missing_ray_is_unattenuated() {
        let v = VoxelVolume::centered([8; 3], Vec3::repeat(1.0), Vec3::zeros(), 0.0).unwrap();
        let r = Ray::new(Vec3::new(100.0, 0.0, -50.0), Vec3::z());
        let cfg = DrrConfig { i0: 3.0, ..Default::default() };
        assert_eq!(beer_lambert_ray(&v, &r, &cfg), (3.0, 0.0));
    }

    #[test]
    fn header_round_trip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let v = VoxelVolume::new([3, 2, 2], Vec3::new(1.0, 2.0, 0.5), Vec3::new(-1.0, 0.0, 2.5), (0..12).map(|i| i as f64 * 10.0 - 50.0).collect()).unwrap();
        let hdr = dir.path().join("v.hdr");
        v.save(&hdr, "v.raw").unwrap();
        assert_eq!(VoxelVolume::load(&hdr).unwrap(), v);

        std::fs::write(dir.path().join("v.raw"), [0u8; 10]).unwrap();
        let err = VoxelVolume::load(&hdr).unwrap_err().to_string();
        assert!(err.contains("expected 24 bytes") && err.contains("found 10"), "{err}");
    }

    #[test]
    fn header_rejects_unknown_key() {
        let e = VolumeHeader::parse("dims=1 1 1\nspacing=1 1 1\norigin=0 0 0\ndata=x\ndtype=int16le\nfoo=1\n");
        assert!(e.is_err());
    }

    #[test]
    fn geometry_validation() {
        let mut g = ProjectionGeometry::cone_beam_z(Vec3::zeros(), 100.0, 100.0, 4, 4, 1.0);
        assert!(g.validate().is_ok());
        g.detector_v = Vec3::new(0.1, 1.0, 0.0);
        assert!(g.validate().is_err());
        let mut g = ProjectionGeometry::cone_beam_z(Vec3::zeros(), 100.0, 100.0, 4, 4, 1.0);
        g.source = g.detector_center + Vec3::x();
        assert!(g.validate().is_err());
    }
}
