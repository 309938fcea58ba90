//! Benchmark fixtures shared by the criterion targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlrm_core::geometry::{make_circular_geometry, ScannerGeometry};
use xlrm_core::phantom::{rasterize_phantom, PhantomSpec};
use xlrm_core::projector::{acquire, ProjectionSet};
use xlrm_core::trainer::TrainSample;
use xlrm_core::volume::VolumeGrid;

pub fn phantom(resolution: usize, seed: u64) -> VolumeGrid {
    let spec = PhantomSpec::random(&mut ChaCha8Rng::seed_from_u64(seed));
    rasterize_phantom(&spec, resolution).expect("valid phantom")
}

/// Noiseless desk-scale acquisition of a random phantom.
pub fn desk_projections(views: usize, seed: u64) -> ProjectionSet {
    let geom = make_circular_geometry(views, &ScannerGeometry::desk()).expect("valid geometry");
    acquire(&phantom(32, seed), &geom, None).expect("acquisition")
}

/// Desk-scale training samples rendered at `view_counts`.
pub fn desk_samples(n: usize, view_counts: &[usize]) -> Vec<TrainSample> {
    (0..n)
        .map(|i| {
            TrainSample::render(phantom(32, i as u64), &ScannerGeometry::desk(), None, view_counts)
                .expect("render")
        })
        .collect()
}
