//! Synthetic phantoms built from ellipsoids and boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::Vec3;
use crate::volume::{voxel_coord, VolumeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Ellipsoid,
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub semi_axes: Vec3,
    /// Z-Y-X Euler angles in radians.
    pub rotation: Vec3,
    pub density_delta: f64,
}

impl Primitive {
    pub fn ellipsoid(center: Vec3, semi_axes: Vec3, density_delta: f64) -> Self {
        Self {
            shape: Shape::Ellipsoid,
            center,
            semi_axes,
            rotation: [0.0; 3],
            density_delta,
        }
    }

    pub fn cuboid(center: Vec3, semi_axes: Vec3, density_delta: f64) -> Self {
        Self {
            shape: Shape::Box,
            ..Self::ellipsoid(center, semi_axes, density_delta)
        }
    }

    /// Rows of the world-to-local rotation.
    fn local_frame(&self) -> [Vec3; 3] {
        let [yaw, pitch, roll] = self.rotation;
        let (sz, cz) = yaw.sin_cos();
        let (sy, cy) = pitch.sin_cos();
        let (sx, cx) = roll.sin_cos();
        // R = Rz * Ry * Rx; local = R^T (p - c), so the rows of R^T are the columns of R.
        let r = [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ];
        [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ]
    }

    fn contains_with(&self, frame: &[Vec3; 3], p: Vec3) -> bool {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let q = frame.map(|row| row[0] * d[0] + row[1] * d[1] + row[2] * d[2]);
        match self.shape {
            Shape::Ellipsoid => {
                q.iter()
                    .zip(&self.semi_axes)
                    .map(|(x, a)| (x / a) * (x / a))
                    .sum::<f64>()
                    <= 1.0
            }
            Shape::Box => q.iter().zip(&self.semi_axes).all(|(x, a)| x.abs() <= *a),
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.contains_with(&self.local_frame(), p)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub primitives: Vec<Primitive>,
    pub background: f64,
}

impl PhantomSpec {
    /// One enclosing body ellipsoid plus 3-8 inner ellipsoids; every region's
    /// nominal density lies in `[0.1, 0.9]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut primitives = Vec::new();
        let body_density = rng.random_range(0.1..0.4);
        let body_axes = [
            rng.random_range(0.55..0.85),
            rng.random_range(0.45..0.75),
            rng.random_range(0.6..0.9),
        ];
        primitives.push(Primitive {
            shape: Shape::Ellipsoid,
            center: [
                rng.random_range(-0.08..0.08),
                rng.random_range(-0.08..0.08),
                rng.random_range(-0.05..0.05),
            ],
            semi_axes: body_axes,
            rotation: [rng.random_range(-0.5..0.5), 0.0, 0.0],
            density_delta: body_density,
        });
        let n_inner = rng.random_range(3..=8);
        for _ in 0..n_inner {
            let semi_axes = [
                rng.random_range(0.12..0.35),
                rng.random_range(0.12..0.35),
                rng.random_range(0.12..0.35),
            ];
            // Keep centers well inside the body.
            let center = [
                rng.random_range(-0.5..0.5) * body_axes[0],
                rng.random_range(-0.5..0.5) * body_axes[1],
                rng.random_range(-0.5..0.5) * body_axes[2],
            ];
            let target = rng.random_range(0.1..0.9);
            primitives.push(Primitive {
                shape: Shape::Ellipsoid,
                center,
                semi_axes,
                rotation: [
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-0.7..0.7),
                    rng.random_range(-0.7..0.7),
                ],
                density_delta: target - body_density,
            });
        }
        Self {
            primitives,
            background: 0.0,
        }
    }
}

/// Background plus the sum of deltas of every primitive containing the voxel
/// center, clamped to `[0, 1]`.
pub fn rasterize_phantom(spec: &PhantomSpec, resolution: usize) -> Result<VolumeGrid> {
    let frames: Vec<_> = spec.primitives.iter().map(|p| p.local_frame()).collect();
    let coords: Vec<f64> = (0..resolution.max(2))
        .map(|k| voxel_coord(k, resolution))
        .collect();
    let mut values = Vec::with_capacity(resolution.pow(3));
    for &z in &coords {
        for &y in &coords {
            for &x in &coords {
                let mut v = spec.background;
                for (prim, frame) in spec.primitives.iter().zip(&frames) {
                    if prim.contains_with(frame, [x, y, z]) {
                        v += prim.density_delta;
                    }
                }
                values.push(v as f32);
            }
        }
    }
    VolumeGrid::from_values(resolution, values)
}
