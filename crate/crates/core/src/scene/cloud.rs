//! Seeded generator for spatially uneven triangle clouds.
//!
//! Stands in for simulation output whose elements are clustered unevenly in space: a
//! mixture of Gaussian blobs with unequal weights and widths inside the unit cube. Each
//! triangle's source rank is the blob it was drawn from.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Light, Material, SceneDesc};
use crate::geom::{Triangle, Vec3};

pub const CLOUD_SIGMA_MIN: f64 = 0.02;
/// Largest blob standard deviation; samples are truncated at four of these.
pub const CLOUD_SIGMA_MAX: f64 = 0.12;
const TRIANGLE_HALF_SIZE: f64 = 0.012;

struct Blob {
    center: Vec3,
    sigma: f64,
    weight: f64,
}

pub fn generate_uneven_cloud(seed: u64, n: usize, clusters: usize) -> SceneDesc {
    assert!(clusters >= 1, "need at least one cluster");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut blobs: Vec<Blob> = (0..clusters)
        .map(|_| {
            let center = Vec3::new(rng.random(), rng.random(), rng.random());
            let sigma = rng.random_range(CLOUD_SIGMA_MIN..CLOUD_SIGMA_MAX);
            let w: f64 = rng.random_range(0.15..1.0);
            Blob {
                center,
                sigma,
                weight: w * w * w,
            }
        })
        .collect();
    let total: f64 = blobs.iter().map(|b| b.weight).sum();
    let mut acc = 0.0;
    for b in &mut blobs {
        acc += b.weight / total;
        b.weight = acc;
    }

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let truncated = |rng: &mut ChaCha8Rng| loop {
        let x: f64 = unit.sample(rng);
        if x.abs() <= 4.0 {
            return x;
        }
    };

    let mut triangles = Vec::with_capacity(n);
    let mut material_of_prim = Vec::with_capacity(n);
    let mut rank_of_prim = Vec::with_capacity(n);
    for id in 0..n {
        let pick: f64 = rng.random();
        let k = blobs
            .iter()
            .position(|b| pick < b.weight)
            .unwrap_or(clusters - 1);
        let b = &blobs[k];
        let c = b.center
            + Vec3::new(
                truncated(&mut rng),
                truncated(&mut rng),
                truncated(&mut rng),
            ) * b.sigma;
        let mut edge = || {
            Vec3::new(
                rng.random_range(-TRIANGLE_HALF_SIZE..TRIANGLE_HALF_SIZE),
                rng.random_range(-TRIANGLE_HALF_SIZE..TRIANGLE_HALF_SIZE),
                rng.random_range(-TRIANGLE_HALF_SIZE..TRIANGLE_HALF_SIZE),
            )
        };
        let a = edge();
        let d = edge();
        triangles.push(Triangle::new(c + a, c + d, c - a - d, id as u64));
        material_of_prim.push((k % 4) as u32);
        rank_of_prim.push(k as u32);
    }

    SceneDesc {
        triangles,
        material_of_prim,
        materials: vec![
            Material::diffuse(Vec3::new(0.85, 0.35, 0.25)),
            Material::diffuse(Vec3::new(0.3, 0.75, 0.4)),
            Material::diffuse(Vec3::new(0.3, 0.45, 0.9)),
            Material {
                albedo: Vec3::new(0.6, 0.6, 0.6),
                mirror: Vec3::new(0.5, 0.5, 0.5),
            },
        ],
        lights: vec![
            Light::directional(Vec3::new(-0.4, -1.0, -0.3), Vec3::new(0.8, 0.8, 0.75)),
            Light::point(Vec3::new(0.5, 2.0, 1.5), Vec3::new(0.45, 0.4, 0.35)),
        ],
        background: Vec3::new(0.1, 0.12, 0.18),
        ambient: Vec3::new(0.08, 0.08, 0.08),
        rank_of_prim: Some(rank_of_prim),
        time_steps: Vec::new(),
        camera: None,
    }
}
