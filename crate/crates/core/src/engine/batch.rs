//! Rays in flight and their fixed-width little-endian encoding.

use crate::accel::HitKey;
use crate::geom::{Ray, Vec3};

use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RayKind {
    Primary = 0,
    Shadow = 1,
    Reflection = 2,
}

impl RayKind {
    fn from_u8(b: u8) -> Option<RayKind> {
        match b {
            0 => Some(RayKind::Primary),
            1 => Some(RayKind::Shadow),
            2 => Some(RayKind::Reflection),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayState {
    pub ray: Ray,
    /// Flat row-major pixel index.
    pub pixel: u32,
    pub owner_rank: u32,
    pub kind: RayKind,
    pub best_hit: HitKey,
    pub occluded: bool,
    /// Path weight. Shadow rays carry their pending direct-light contribution here.
    pub throughput: Vec3,
    pub light_index: u32,
    pub depth: u32,
    /// Ranks this ray has been traced on.
    pub rounds: u32,
}

impl RayState {
    pub fn new(
        kind: RayKind,
        ray: Ray,
        pixel: u32,
        owner_rank: u32,
        throughput: Vec3,
        depth: u32,
    ) -> RayState {
        RayState {
            ray,
            pixel,
            owner_rank,
            kind,
            best_hit: HitKey::MISS,
            occluded: false,
            throughput,
            light_index: 0,
            depth,
            rounds: 0,
        }
    }
}

pub const RAY_RECORD_LEN: usize = 126;
const BATCH_HEADER_LEN: usize = 9;

/// Kind-homogeneous, order-preserving collection of rays exchanged as one message.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub kind: RayKind,
    pub rays: Vec<RayState>,
    pub rounds_completed: u32,
}

impl RayBatch {
    pub fn new(kind: RayKind) -> RayBatch {
        RayBatch {
            kind,
            rays: Vec::new(),
            rounds_completed: 0,
        }
    }

    pub fn push(&mut self, ray: RayState) {
        debug_assert_eq!(ray.kind, self.kind);
        self.rays.push(ray);
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BATCH_HEADER_LEN + self.rays.len() * RAY_RECORD_LEN);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.rounds_completed.to_le_bytes());
        out.extend_from_slice(&(self.rays.len() as u32).to_le_bytes());
        for r in &self.rays {
            put_vec(&mut out, r.ray.origin);
            put_vec(&mut out, r.ray.direction);
            out.extend_from_slice(&r.ray.tmin.to_le_bytes());
            out.extend_from_slice(&r.ray.tmax.to_le_bytes());
            out.extend_from_slice(&r.pixel.to_le_bytes());
            out.extend_from_slice(&r.owner_rank.to_le_bytes());
            out.push(r.kind as u8);
            out.extend_from_slice(&r.best_hit.t.to_le_bytes());
            out.extend_from_slice(&r.best_hit.global_id.to_le_bytes());
            out.push(r.occluded as u8);
            put_vec(&mut out, r.throughput);
            out.extend_from_slice(&r.light_index.to_le_bytes());
            out.extend_from_slice(&r.depth.to_le_bytes());
            out.extend_from_slice(&r.rounds.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<RayBatch, EngineError> {
        let malformed = |m: String| EngineError::Malformed(m);
        if bytes.len() < BATCH_HEADER_LEN {
            return Err(malformed(format!(
                "ray batch of {} bytes has no header",
                bytes.len()
            )));
        }
        let kind = RayKind::from_u8(bytes[0])
            .ok_or_else(|| malformed(format!("unknown ray kind {}", bytes[0])))?;
        let rounds_completed = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes"));
        let count = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[BATCH_HEADER_LEN..];
        if body.len() != count * RAY_RECORD_LEN {
            return Err(malformed(format!(
                "ray batch claims {count} rays but carries {} bytes",
                body.len()
            )));
        }
        let mut rays = Vec::with_capacity(count);
        for (i, rec) in body.chunks_exact(RAY_RECORD_LEN).enumerate() {
            let mut c = Cursor { bytes: rec, at: 0 };
            let origin = c.vec();
            let direction = c.vec();
            let tmin = c.f64();
            let tmax = c.f64();
            let pixel = c.u32();
            let owner_rank = c.u32();
            let rk = c.u8();
            let ray_kind = RayKind::from_u8(rk)
                .ok_or_else(|| malformed(format!("ray {i}: unknown kind {rk}")))?;
            if ray_kind != kind {
                return Err(malformed(format!(
                    "ray {i} is {ray_kind:?} inside a {kind:?} batch"
                )));
            }
            let best_hit = HitKey {
                t: c.f64(),
                global_id: c.u64(),
            };
            let occluded = c.u8() != 0;
            let throughput = c.vec();
            let light_index = c.u32();
            let depth = c.u32();
            let rounds = c.u32();
            rays.push(RayState {
                ray: Ray {
                    origin,
                    direction,
                    tmin,
                    tmax,
                },
                pixel,
                owner_rank,
                kind,
                best_hit,
                occluded,
                throughput,
                light_index,
                depth,
                rounds,
            });
        }
        Ok(RayBatch {
            kind,
            rays,
            rounds_completed,
        })
    }
}

fn put_vec(out: &mut Vec<u8>, v: Vec3) {
    out.extend_from_slice(&v.x.to_le_bytes());
    out.extend_from_slice(&v.y.to_le_bytes());
    out.extend_from_slice(&v.z.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.at..self.at + N]
            .try_into()
            .expect("record length checked");
        self.at += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    fn vec(&mut self) -> Vec3 {
        Vec3::new(self.f64(), self.f64(), self.f64())
    }
}
