//! Voxel density field, trilinear sampling and the structure penalty.
//!
//! Binary layout (little-endian): magic `DGRD`, version `u32`, dims `3×u32`,
//! origin `3×f64`, voxel size `f64`, then `nx·ny·nz` `f32` densities with x
//! varying fastest.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::optim::{geman_mcclure, geman_mcclure_derivative};

pub const GRID_MAGIC: &[u8; 4] = b"DGRD";
pub const GRID_VERSION: u32 = 1;
pub const GRID_HEADER_LEN: usize = 4 + 4 + 3 * 4 + 3 * 8 + 8;

/// Axis-aligned box, used to rasterize furniture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub origin: Point3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub values: Vec<f32>,
}

/// Optional JSON description stored next to a grid file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: f64,
}

impl DensityGrid {
    pub fn new(origin: Point3, voxel_size: f64, dims: [usize; 3], values: Vec<f32>) -> Result<Self> {
        let grid = DensityGrid {
            origin,
            voxel_size,
            dims,
            values,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn zeros(origin: Point3, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        Self::new(origin, voxel_size, dims, vec![0.0; dims.iter().product()])
    }

    /// Grid whose nodes inside any of `boxes` hold `density`, all others 0.
    pub fn from_boxes(origin: Point3, voxel_size: f64, dims: [usize; 3], boxes: &[Aabb], density: f32) -> Result<Self> {
        let mut grid = Self::zeros(origin, voxel_size, dims)?;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = grid.node_position(i, j, k);
                    if boxes.iter().any(|b| b.contains(&p)) {
                        let idx = grid.index(i, j, k);
                        grid.values[idx] = density;
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::GridFormat("voxel size must be positive".into()));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::GridFormat("every grid dimension must be at least 2".into()));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::GridFormat("grid origin must be finite".into()));
        }
        let expected: usize = self.dims.iter().product();
        if self.values.len() != expected {
            return Err(Error::GridFormat(format!(
                "expected {expected} values, found {}",
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::GridFormat(format!(
                "density at index {i} is negative or non-finite"
            )));
        }
        Ok(())
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Point3 {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    pub fn upper_corner(&self) -> Point3 {
        self.node_position(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    /// Trilinear density at `point`; zero outside the grid bounds.
    pub fn sample(&self, point: &Point3) -> f64 {
        self.sample_with_gradient(point).0
    }

    /// Density and its spatial gradient. Inside a cell the gradient is the
    /// derivative of the trilinear interpolant.
    pub fn sample_with_gradient(&self, point: &Point3) -> (f64, Vector3<f64>) {
        let local = (point - self.origin) / self.voxel_size;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let x = local[a];
            let top = (self.dims[a] - 1) as f64;
            if !(x >= 0.0 && x <= top) {
                return (0.0, Vector3::zeros());
            }
            let i = (x.floor() as usize).min(self.dims[a] - 2);
            base[a] = i;
            frac[a] = x - i as f64;
        }
        let mut value = 0.0;
        let mut grad = Vector3::zeros();
        for corner in 0..8 {
            let offs = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let v = self.values[self.index(base[0] + offs[0], base[1] + offs[1], base[2] + offs[2])] as f64;
            if v == 0.0 {
                continue;
            }
            let w: [f64; 3] = std::array::from_fn(|a| if offs[a] == 1 { frac[a] } else { 1.0 - frac[a] });
            let dw: [f64; 3] = std::array::from_fn(|a| if offs[a] == 1 { 1.0 } else { -1.0 });
            value += v * w[0] * w[1] * w[2];
            grad.x += v * dw[0] * w[1] * w[2];
            grad.y += v * w[0] * dw[1] * w[2];
            grad.z += v * w[0] * w[1] * dw[2];
        }
        (value, grad / self.voxel_size)
    }

    /// Median of the strictly positive densities, if any.
    pub fn median_nonzero(&self) -> Option<f64> {
        let mut nz: Vec<f32> = self.values.iter().copied().filter(|v| *v > 0.0).collect();
        if nz.is_empty() {
            return None;
        }
        nz.sort_by(f32::total_cmp);
        let n = nz.len();
        Some(if n % 2 == 1 {
            nz[n / 2] as f64
        } else {
            0.5 * (nz[n / 2 - 1] as f64 + nz[n / 2] as f64)
        })
    }

    /// Default Geman-McClure scale: ten times the median nonzero density
    /// times the number of surface samples (unit density for an empty grid).
    pub fn default_robust_scale(&self, sample_count: usize) -> f64 {
        10.0 * self.median_nonzero().unwrap_or(1.0) * sample_count.max(1) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(GRID_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for c in self.origin.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.voxel_size.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < GRID_HEADER_LEN {
            return Err(Error::GridFormat("file shorter than the grid header".into()));
        }
        if &bytes[..4] != GRID_MAGIC {
            return Err(Error::GridFormat("bad magic, expected DGRD".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != GRID_VERSION {
            return Err(Error::GridFormat(format!("unsupported version {version}")));
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let origin = Point3::new(f64_at(20), f64_at(28), f64_at(36));
        let voxel_size = f64_at(44);
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::GridFormat("grid dimensions overflow".into()))?;
        let body = &bytes[GRID_HEADER_LEN..];
        if body.len() != count * 4 {
            return Err(Error::GridFormat(format!(
                "expected {} bytes of densities, found {}",
                count * 4,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(origin, voxel_size, dims, values)
    }

    pub fn sidecar(&self) -> GridSidecar {
        GridSidecar {
            dims: self.dims,
            origin: [self.origin.x, self.origin.y, self.origin.z],
            voxel_size: self.voxel_size,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a grid file. A `.json` sidecar next to it, when present, must
    /// agree with the header dimensions.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let grid = Self::from_bytes(&bytes)?;
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let meta: GridSidecar =
                serde_json::from_str(&text).map_err(|e| Error::GridFormat(format!("{}: {e}", sidecar.display())))?;
            if meta.dims != grid.dims {
                return Err(Error::GridFormat(format!(
                    "sidecar dims {:?} disagree with header dims {:?}",
                    meta.dims, grid.dims
                )));
            }
        }
        Ok(grid)
    }
}

pub fn sidecar_path(grid_path: &Path) -> PathBuf {
    grid_path.with_extension("json")
}

/// Total density under a set of world-frame samples.
pub fn density_sum(grid: &DensityGrid, samples: &[Point3]) -> f64 {
    samples.iter().map(|p| grid.sample(p)).sum()
}

/// Robustified density penalty `ρ(Σ σ̃(v))`; the robustifier wraps the sum.
pub fn structure_energy(grid: &DensityGrid, samples: &[Point3], robust_scale: f64) -> f64 {
    geman_mcclure(density_sum(grid, samples), robust_scale)
}

/// Gradient of [`structure_energy`] with respect to each sample position.
pub fn structure_energy_gradient(grid: &DensityGrid, samples: &[Point3], robust_scale: f64) -> Vec<Vector3<f64>> {
    let sampled: Vec<_> = samples.iter().map(|p| grid.sample_with_gradient(p)).collect();
    let total: f64 = sampled.iter().map(|(v, _)| v).sum();
    let outer = geman_mcclure_derivative(total, robust_scale);
    sampled.into_iter().map(|(_, g)| g * outer).collect()
}

/// Number of samples with strictly positive interpolated density.
pub fn penetration_count(grid: &DensityGrid, samples: &[Point3]) -> usize {
    samples.iter().filter(|p| grid.sample(p) > 0.0).count()
}
