//! Whole-scene brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use dprt_core::accel::HitKey;
use dprt_core::geom::{
    camera_primary_ray, ray_triangle_intersect, CameraSpec, Ray, Triangle, Vec3,
};
use dprt_core::image::FloatImage;
use dprt_core::scene::{Light, LightKind, Material, SceneDesc};

pub fn brute_nearest(tris: &[Triangle], ray: &Ray) -> HitKey {
    let mut best = HitKey::MISS;
    for t in tris {
        if let Some(h) = ray_triangle_intersect(ray, t) {
            if h.t < best.t || (h.t == best.t && t.global_id < best.global_id) {
                best = HitKey::new(h.t, t.global_id);
            }
        }
    }
    best
}

pub fn brute_any(tris: &[Triangle], ray: &Ray) -> bool {
    tris.iter()
        .any(|t| ray_triangle_intersect(ray, t).is_some_and(|h| h.t > ray.tmin && h.t < ray.tmax))
}

/// Straight per-pixel recursive tracer over the whole scene, no BVH and no batches.
pub fn reference_render(
    scene: &SceneDesc,
    cam: &CameraSpec,
    w: u32,
    h: u32,
    max_depth: u32,
) -> FloatImage {
    let b = scene.bounds();
    let eps = if b.is_empty() {
        1e-4
    } else {
        1e-4 * b.diagonal()
    };
    let mut img = FloatImage::new(w, h);
    for py in 0..h {
        for px in 0..w {
            let ray = camera_primary_ray(cam, px, py, w, h).unwrap();
            let mut acc = Vec3::ZERO;
            trace(scene, eps, &ray, Vec3::ONE, 0, max_depth, &mut acc);
            img.pixels[(py * w + px) as usize] = acc;
        }
    }
    img
}

fn trace(
    scene: &SceneDesc,
    eps: f64,
    ray: &Ray,
    thr: Vec3,
    depth: u32,
    max_depth: u32,
    acc: &mut Vec3,
) {
    let hit = brute_nearest(&scene.triangles, ray);
    if hit.is_miss() {
        *acc = *acc + thr.mul_elem(scene.background);
        return;
    }
    let pos = scene
        .triangles
        .iter()
        .position(|t| t.global_id == hit.global_id)
        .unwrap();
    let tri = scene.triangles[pos];
    let Material { albedo, mirror } = *scene.material_of(pos);
    let n = tri.normal().unwrap_or(Vec3::ZERO);
    let d = ray.direction;
    let p = ray.at(hit.t);
    let facing = if n.dot(d) > 0.0 { -n } else { n };
    *acc = *acc + thr.mul_elem(scene.ambient).mul_elem(albedo);
    for light in &scene.lights {
        let (shadow, pending) = shadow_ray(light, p, n, facing, eps, thr.mul_elem(albedo));
        if !brute_any(&scene.triangles, &shadow) {
            *acc = *acc + pending;
        }
    }
    if (mirror.x > 0.0 || mirror.y > 0.0 || mirror.z > 0.0) && depth < max_depth {
        let r = d - n * (2.0 * d.dot(n));
        trace(
            scene,
            eps,
            &Ray::new(p + facing * eps, r),
            thr.mul_elem(mirror),
            depth + 1,
            max_depth,
            acc,
        );
    }
}

fn shadow_ray(
    light: &Light,
    p: Vec3,
    n: Vec3,
    facing: Vec3,
    eps: f64,
    weight: Vec3,
) -> (Ray, Vec3) {
    let toward = match light.kind {
        LightKind::Point { position } => position - p,
        LightKind::Directional { direction } => -direction,
    };
    let origin = p + if n.dot(toward) >= 0.0 { n } else { -n } * eps;
    let (dir, tmax) = match light.kind {
        LightKind::Point { position } => {
            let v = position - origin;
            (v / v.length(), v.length())
        }
        LightKind::Directional { direction } => (-direction, f64::INFINITY),
    };
    let cos = facing.dot(dir).max(0.0);
    (
        Ray::with_range(origin, dir, 0.0, tmax),
        weight.mul_elem(light.intensity) * cos,
    )
}

pub fn quad(lo: Vec3, du: Vec3, dv: Vec3, first_id: u64) -> [Triangle; 2] {
    [
        Triangle::new(lo, lo + du, lo + du + dv, first_id),
        Triangle::new(lo, lo + du + dv, lo + dv, first_id + 1),
    ]
}

/// Receiver on rank 0, occluder on rank 1, light coming in at 45 degrees over the
/// occluder. Pixel (16, 10) of a 33x33 view from above sits in the occluder's shadow.
pub struct RemoteOccluder {
    pub scene: SceneDesc,
    pub rank_of_prim: Vec<u32>,
    pub cam: CameraSpec,
    pub size: u32,
    pub shadowed: (u32, u32),
    pub lit: (u32, u32),
    pub albedo: f64,
}

pub fn remote_occluder() -> RemoteOccluder {
    let mut scene = SceneDesc::default();
    let albedo = 0.8;
    scene.triangles.extend(quad(
        Vec3::new(-2.0, -2.0, 0.0),
        Vec3::new(4.0, 0.0, 0.0),
        Vec3::new(0.0, 4.0, 0.0),
        0,
    ));
    scene.triangles.extend(quad(
        Vec3::new(0.5, 0.5, 1.0),
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        2,
    ));
    scene.material_of_prim = vec![0; 4];
    scene.materials.push(Material::diffuse(Vec3::splat(albedo)));
    scene
        .lights
        .push(Light::directional(Vec3::new(-1.0, 0.0, -1.0), Vec3::ONE));
    let cam = CameraSpec::look_at(
        Vec3::new(0.0, 0.0, 5.0),
        Vec3::ZERO,
        Vec3::new(0.0, 1.0, 0.0),
        60.0,
        1.0,
    );
    RemoteOccluder {
        scene,
        rank_of_prim: vec![0, 0, 1, 1],
        cam,
        size: 33,
        shadowed: (16, 10),
        lit: (16, 6),
        albedo,
    }
}
