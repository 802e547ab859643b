//! Geometric primitives: vectors, rays, boxes, triangles and the pinhole camera.
//!
//! Everything here is pure `f64` math. Results must be bit-identical for identical
//! inputs because the multi-rank renderer relies on every rank computing exactly the
//! same hit distances for the same triangle.

use std::ops::{Add, Div, Index, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("pixel ({px}, {py}) outside {width}x{height} film")]
    PixelOutOfRange {
        px: u32,
        py: u32,
        width: u32,
        height: u32,
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };
    pub const ONE: Vec3 = Vec3 {
        x: 1.0,
        y: 1.0,
        z: 1.0,
    };

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3 { x, y, z }
    }

    #[inline]
    pub fn splat(v: f64) -> Vec3 {
        Vec3::new(v, v, v)
    }

    #[inline]
    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn length(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns the unit vector, or `None` for zero or non-finite input.
    pub fn try_normalize(self) -> Option<Vec3> {
        let len = self.length();
        if len > 0.0 && len.is_finite() {
            Some(self / len)
        } else {
            None
        }
    }

    #[inline]
    pub fn normalize(self) -> Vec3 {
        self / self.length()
    }

    /// Componentwise product.
    #[inline]
    pub fn mul_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    #[inline]
    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Index (0, 1, 2) of the largest component.
    pub fn max_axis(self) -> usize {
        if self.x >= self.y && self.x >= self.z {
            0
        } else if self.y >= self.z {
            1
        } else {
            2
        }
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    #[inline]
    fn index(&self, axis: usize) -> &f64 {
        match axis {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("axis {axis} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub tmin: f64,
    pub tmax: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Ray {
        Ray {
            origin,
            direction,
            tmin: 0.0,
            tmax: f64::INFINITY,
        }
    }

    pub fn with_range(origin: Vec3, direction: Vec3, tmin: f64, tmax: f64) -> Ray {
        Ray {
            origin,
            direction,
            tmin,
            tmax,
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned bounding box. The empty box has `lo = +inf`, `hi = -inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Default for Aabb {
    fn default() -> Self {
        Aabb::EMPTY
    }
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        lo: Vec3 {
            x: f64::INFINITY,
            y: f64::INFINITY,
            z: f64::INFINITY,
        },
        hi: Vec3 {
            x: f64::NEG_INFINITY,
            y: f64::NEG_INFINITY,
            z: f64::NEG_INFINITY,
        },
    };

    pub fn new(lo: Vec3, hi: Vec3) -> Aabb {
        Aabb { lo, hi }
    }

    pub fn is_empty(&self) -> bool {
        self.lo.x > self.hi.x || self.lo.y > self.hi.y || self.lo.z > self.hi.z
    }

    pub fn grow(&mut self, p: Vec3) {
        self.lo = self.lo.min(p);
        self.hi = self.hi.max(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            lo: self.lo.min(o.lo),
            hi: self.hi.max(o.hi),
        }
    }

    pub fn contains_box(&self, o: &Aabb) -> bool {
        o.is_empty()
            || (self.lo.x <= o.lo.x
                && self.lo.y <= o.lo.y
                && self.lo.z <= o.lo.z
                && self.hi.x >= o.hi.x
                && self.hi.y >= o.hi.y
                && self.hi.z >= o.hi.z)
    }

    pub fn extent(&self) -> Vec3 {
        if self.is_empty() {
            Vec3::ZERO
        } else {
            self.hi - self.lo
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().length()
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn center(&self) -> Vec3 {
        (self.lo + self.hi) * 0.5
    }
}

/// Raw slab interval of `ray` against `aabb`, ignoring the ray's own `[tmin, tmax]`.
///
/// Zero direction components divide to `±inf`, so a ray parallel to a slab either
/// spans it entirely or misses it. The caller treats the result as a hit iff
/// `t1 >= max(t0, ray.tmin) && t0 <= ray.tmax`.
pub fn ray_aabb_intersect(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    if aabb.is_empty() {
        return None;
    }
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let inv = 1.0 / ray.direction[axis];
        let mut near = (aabb.lo[axis] - ray.origin[axis]) * inv;
        let mut far = (aabb.hi[axis] - ray.origin[axis]) * inv;
        // origin exactly on a slab plane with a zero direction component gives 0 * inf
        if near.is_nan() {
            near = f64::NEG_INFINITY;
        }
        if far.is_nan() {
            far = f64::INFINITY;
        }
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        t0 = t0.max(near);
        t1 = t1.min(far);
    }
    if t0 <= t1 {
        Some((t0, t1))
    } else {
        None
    }
}

/// A triangle with an id that is unique across the whole distributed scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v0: Vec3,
    pub v1: Vec3,
    pub v2: Vec3,
    pub global_id: u64,
}

impl Triangle {
    pub fn new(v0: Vec3, v1: Vec3, v2: Vec3, global_id: u64) -> Triangle {
        Triangle {
            v0,
            v1,
            v2,
            global_id,
        }
    }

    pub fn bounds(&self) -> Aabb {
        Aabb {
            lo: self.v0.min(self.v1).min(self.v2),
            hi: self.v0.max(self.v1).max(self.v2),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        (self.v0 + self.v1 + self.v2) / 3.0
    }

    /// Unnormalized geometric normal, `(v1 - v0) x (v2 - v0)`.
    pub fn normal_raw(&self) -> Vec3 {
        (self.v1 - self.v0).cross(self.v2 - self.v0)
    }

    /// Unit geometric normal; `None` for degenerate triangles.
    pub fn normal(&self) -> Option<Vec3> {
        self.normal_raw().try_normalize()
    }

    pub fn vertices(&self) -> [f64; 9] {
        [
            self.v0.x, self.v0.y, self.v0.z, self.v1.x, self.v1.y, self.v1.z, self.v2.x, self.v2.y,
            self.v2.z,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleHit {
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

/// Double-sided Möller–Trumbore. Degenerate triangles never report a hit.
#[inline]
pub fn ray_triangle_intersect(ray: &Ray, tri: &Triangle) -> Option<TriangleHit> {
    let e1 = tri.v1 - tri.v0;
    let e2 = tri.v2 - tri.v0;
    let p = ray.direction.cross(e2);
    let det = e1.dot(p);
    // exact zero covers degenerate triangles and rays lying in the triangle plane
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = ray.origin - tri.v0;
    let u = s.dot(p) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.direction.dot(q) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv_det;
    if t < ray.tmin || t > ray.tmax || t.is_nan() {
        return None;
    }
    Some(TriangleHit { t, u, v })
}

/// Pinhole camera. Film plane at distance 1 along `view_dir`; image y grows downward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub position: Vec3,
    pub view_dir: Vec3,
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    /// Film width / height.
    pub aspect: f64,
}

impl CameraSpec {
    pub fn look_at(position: Vec3, target: Vec3, up: Vec3, fov_y: f64, aspect: f64) -> CameraSpec {
        CameraSpec {
            position,
            view_dir: (target - position).normalize(),
            up,
            fov_y,
            aspect,
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !self.position.is_finite() || !self.view_dir.is_finite() || !self.up.is_finite() {
            return Err(GeomError::InvalidCamera("non-finite vector"));
        }
        if self.view_dir.try_normalize().is_none() {
            return Err(GeomError::InvalidCamera("zero view direction"));
        }
        if self.view_dir.cross(self.up).try_normalize().is_none() {
            return Err(GeomError::InvalidCamera("view direction parallel to up"));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(GeomError::InvalidCamera("fovY must lie in (0, 180)"));
        }
        if !(self.aspect > 0.0 && self.aspect.is_finite()) {
            return Err(GeomError::InvalidCamera("aspect must be positive"));
        }
        Ok(())
    }

    /// Orthonormal (right, up, forward) basis of the film.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = self.view_dir.normalize();
        let right = forward.cross(self.up).normalize();
        let up = right.cross(forward);
        (right, up, forward)
    }
}

/// Ray through the center of pixel `(px, py)`.
pub fn camera_primary_ray(
    cam: &CameraSpec,
    px: u32,
    py: u32,
    width: u32,
    height: u32,
) -> Result<Ray, GeomError> {
    if px >= width || py >= height {
        return Err(GeomError::PixelOutOfRange {
            px,
            py,
            width,
            height,
        });
    }
    let (right, up, forward) = cam.basis();
    let half_h = (cam.fov_y.to_radians() * 0.5).tan();
    let half_w = half_h * cam.aspect;
    let sx = (2.0 * (px as f64 + 0.5) / width as f64 - 1.0) * half_w;
    let sy = (1.0 - 2.0 * (py as f64 + 0.5) / height as f64) * half_h;
    let dir = (forward + right * sx + up * sy).normalize();
    Ok(Ray::new(cam.position, dir))
}
