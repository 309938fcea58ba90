use crate::error::{invalid_arg, Result};

/// Cubic scalar field on an align-corners grid: voxel `k` along an axis sits at
/// `2k / (R - 1) - 1`, so the grid spans exactly `[-1, 1]^3`. Storage is
/// x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    resolution: usize,
    values: Vec<f32>,
}

impl VolumeGrid {
    pub fn zeros(resolution: usize) -> Result<Self> {
        Self::from_values(resolution, vec![0.0; resolution.pow(3)])
    }

    /// Values are clamped into `[0, 1]`.
    pub fn from_values(resolution: usize, mut values: Vec<f32>) -> Result<Self> {
        if resolution < 2 {
            return Err(invalid_arg!("volume resolution must be >= 2, got {resolution}"));
        }
        if values.len() != resolution.pow(3) {
            return Err(invalid_arg!(
                "volume of resolution {resolution} needs {} values, got {}",
                resolution.pow(3),
                values.len()
            ));
        }
        for v in values.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { resolution, values })
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    /// Normalized coordinate of voxel index `k`.
    #[inline]
    pub fn coord(&self, k: usize) -> f64 {
        voxel_coord(k, self.resolution)
    }

    /// Axial slice `z` as a row-major `R x R` image (rows are y).
    pub fn axial_slice(&self, z: usize) -> &[f32] {
        let n = self.resolution * self.resolution;
        &self.values[z * n..(z + 1) * n]
    }
}

#[inline]
pub fn voxel_coord(k: usize, resolution: usize) -> f64 {
    2.0 * k as f64 / (resolution as f64 - 1.0) - 1.0
}

/// Normalized coordinates of every voxel center, x-fastest.
pub fn voxel_centers(resolution: usize) -> Vec<[f64; 3]> {
    let c: Vec<f64> = (0..resolution).map(|k| voxel_coord(k, resolution)).collect();
    let mut out = Vec::with_capacity(resolution.pow(3));
    for &z in &c {
        for &y in &c {
            for &x in &c {
                out.push([x, y, z]);
            }
        }
    }
    out
}
