//! Owner-rank shading: resolves hits through the replicated shading table and spawns the
//! next generation of rays.

use std::sync::Arc;

use crate::accel::LocalGeometry;
use crate::geom::{Aabb, Ray, Triangle, Vec3};
use crate::scene::{Light, LightKind, Material, Partition, SceneDesc};

use super::batch::{RayBatch, RayKind, RayState};
use super::{EngineError, RenderOptions, ShadeMode};

/// Per-primitive data needed to shade a hit, wherever the hit geometry lives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadeRecord {
    /// Unit geometric normal in vertex winding order (zero for degenerate triangles).
    pub normal: Vec3,
    pub material: Material,
    pub rank: u32,
}

const SHADE_RECORD_LEN: usize = 8 + 9 * 8 + 4;

/// Replicated map from global id to shading data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShadingTable {
    /// Sorted by id.
    entries: Vec<(u64, ShadeRecord)>,
}

impl ShadingTable {
    pub fn from_scene(scene: &SceneDesc, partition: &Partition) -> ShadingTable {
        let records = scene.triangles.iter().enumerate().map(|(i, t)| {
            (
                t.global_id,
                record_for(t, *scene.material_of(i), partition.rank_of_prim[i]),
            )
        });
        ShadingTable::from_records(records.collect())
    }

    pub fn from_records(mut entries: Vec<(u64, ShadeRecord)>) -> ShadingTable {
        entries.sort_by_key(|e| e.0);
        entries.dedup_by_key(|e| e.0);
        ShadingTable { entries }
    }

    pub fn get(&self, global_id: u64) -> Option<&ShadeRecord> {
        self.entries
            .binary_search_by_key(&global_id, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes a rank's fragment for replication.
    pub fn encode_records(records: &[(u64, ShadeRecord)]) -> Vec<u8> {
        let mut out = Vec::with_capacity(records.len() * SHADE_RECORD_LEN);
        for (id, r) in records {
            out.extend_from_slice(&id.to_le_bytes());
            for v in [r.normal, r.material.albedo, r.material.mirror] {
                for c in v.to_array() {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
            out.extend_from_slice(&r.rank.to_le_bytes());
        }
        out
    }

    pub fn decode_records(bytes: &[u8]) -> Result<Vec<(u64, ShadeRecord)>, EngineError> {
        if !bytes.len().is_multiple_of(SHADE_RECORD_LEN) {
            return Err(EngineError::Malformed(format!(
                "shading fragment of {} bytes",
                bytes.len()
            )));
        }
        let f = |b: &[u8], i: usize| {
            f64::from_le_bytes(b[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"))
        };
        Ok(bytes
            .chunks_exact(SHADE_RECORD_LEN)
            .map(|b| {
                let id = u64::from_le_bytes(b[..8].try_into().expect("8 bytes"));
                let v = |k: usize| Vec3::new(f(b, 3 * k), f(b, 3 * k + 1), f(b, 3 * k + 2));
                let rank = u32::from_le_bytes(b[80..84].try_into().expect("4 bytes"));
                (
                    id,
                    ShadeRecord {
                        normal: v(0),
                        material: Material {
                            albedo: v(1),
                            mirror: v(2),
                        },
                        rank,
                    },
                )
            })
            .collect())
    }
}

pub fn record_for(tri: &Triangle, material: Material, rank: u32) -> ShadeRecord {
    ShadeRecord {
        normal: tri.normal().unwrap_or(Vec3::ZERO),
        material,
        rank,
    }
}

/// Everything one rank needs to take part in a frame.
#[derive(Debug, Clone)]
pub struct RankScene {
    pub geometry: Arc<LocalGeometry>,
    pub shading: Arc<ShadingTable>,
    pub lights: Vec<Light>,
    pub background: Vec3,
    pub ambient: Vec3,
    /// Bounds of the whole scene, identical on every rank.
    pub scene_bounds: Aabb,
}

impl RankScene {
    pub fn from_partition(
        scene: &SceneDesc,
        partition: &Partition,
        rank: usize,
        shading: Arc<ShadingTable>,
    ) -> RankScene {
        let prims = partition.local_sets[rank]
            .iter()
            .map(|&i| scene.triangles[i as usize])
            .collect();
        RankScene {
            geometry: Arc::new(LocalGeometry::new(prims)),
            shading,
            lights: scene.lights.clone(),
            background: scene.background,
            ambient: scene.ambient,
            scene_bounds: scene.bounds(),
        }
    }

    /// One `RankScene` per rank sharing a single shading table.
    pub fn split(scene: &SceneDesc, partition: &Partition) -> Vec<RankScene> {
        let table = Arc::new(ShadingTable::from_scene(scene, partition));
        (0..partition.ranks())
            .map(|r| RankScene::from_partition(scene, partition, r, table.clone()))
            .collect()
    }

    /// Self-intersection offset for secondary ray origins.
    pub fn epsilon(&self) -> f64 {
        if self.scene_bounds.is_empty() {
            1e-4
        } else {
            1e-4 * self.scene_bounds.diagonal()
        }
    }
}

pub const RANK_PALETTE: [Vec3; 12] = [
    Vec3::new(0.90, 0.30, 0.25),
    Vec3::new(0.25, 0.60, 0.90),
    Vec3::new(0.35, 0.80, 0.35),
    Vec3::new(0.95, 0.75, 0.20),
    Vec3::new(0.65, 0.40, 0.85),
    Vec3::new(0.95, 0.55, 0.75),
    Vec3::new(0.35, 0.85, 0.80),
    Vec3::new(0.60, 0.45, 0.30),
    Vec3::new(0.75, 0.85, 0.30),
    Vec3::new(0.30, 0.35, 0.70),
    Vec3::new(0.85, 0.50, 0.20),
    Vec3::new(0.55, 0.55, 0.55),
];

pub fn rank_color(rank: u32) -> Vec3 {
    RANK_PALETTE[rank as usize % RANK_PALETTE.len()]
}

/// Output of shading one fully cycled primary or reflection batch.
#[derive(Debug, Clone)]
pub struct Shaded {
    /// `(pixel, color)` in batch order.
    pub contributions: Vec<(u32, Vec3)>,
    pub shadows: RayBatch,
    pub reflections: RayBatch,
}

/// Shades every ray of a cycled primary/reflection batch on its owner rank.
///
/// Arithmetic order is fixed: ambient = `(throughput ⊙ ambient) ⊙ albedo`, pending direct
/// term = `((throughput ⊙ albedo) ⊙ intensity) · cos`.
pub fn shade_and_spawn(
    batch: &RayBatch,
    scene: &RankScene,
    opts: &RenderOptions,
) -> Result<Shaded, EngineError> {
    debug_assert_ne!(batch.kind, RayKind::Shadow);
    let eps = scene.epsilon();
    let mut out = Shaded {
        contributions: Vec::with_capacity(batch.len()),
        shadows: RayBatch::new(RayKind::Shadow),
        reflections: RayBatch::new(RayKind::Reflection),
    };
    for rs in &batch.rays {
        if rs.best_hit.is_miss() {
            out.contributions
                .push((rs.pixel, rs.throughput.mul_elem(scene.background)));
            continue;
        }
        let rec = scene.shading.get(rs.best_hit.global_id).ok_or_else(|| {
            EngineError::Malformed(format!(
                "hit on unknown global id {}",
                rs.best_hit.global_id
            ))
        })?;
        if opts.mode == ShadeMode::RankColor {
            out.contributions.push((rs.pixel, rank_color(rec.rank)));
            continue;
        }
        let d = rs.ray.direction;
        let p = rs.ray.at(rs.best_hit.t);
        let n = rec.normal;
        let n_view = if n.dot(d) > 0.0 { -n } else { n };
        let albedo = rec.material.albedo;
        out.contributions.push((
            rs.pixel,
            rs.throughput.mul_elem(scene.ambient).mul_elem(albedo),
        ));

        for (li, light) in scene.lights.iter().enumerate() {
            let to_light = match light.kind {
                LightKind::Point { position } => position - p,
                LightKind::Directional { direction } => -direction,
            };
            let side = if n.dot(to_light) >= 0.0 { n } else { -n };
            let origin = p + side * eps;
            let (dir, tmax) = match light.kind {
                LightKind::Point { position } => {
                    let v = position - origin;
                    let dist = v.length();
                    (v / dist, dist)
                }
                LightKind::Directional { direction } => (-direction, f64::INFINITY),
            };
            let cos = n_view.dot(dir).max(0.0);
            let pending = rs.throughput.mul_elem(albedo).mul_elem(light.intensity) * cos;
            let mut s = RayState::new(
                RayKind::Shadow,
                Ray::with_range(origin, dir, 0.0, tmax),
                rs.pixel,
                rs.owner_rank,
                pending,
                rs.depth,
            );
            s.light_index = li as u32;
            out.shadows.push(s);
        }

        if rec.material.is_mirror() && rs.depth < opts.max_depth {
            let r = d - n * (2.0 * d.dot(n));
            let origin = p + n_view * eps;
            out.reflections.push(RayState::new(
                RayKind::Reflection,
                Ray::new(origin, r),
                rs.pixel,
                rs.owner_rank,
                rs.throughput.mul_elem(rec.material.mirror),
                rs.depth + 1,
            ));
        }
    }
    Ok(out)
}

/// Pending direct terms of unoccluded shadow rays, in batch order.
pub fn resolve_shadows(batch: &RayBatch) -> Vec<(u32, Vec3)> {
    batch
        .rays
        .iter()
        .filter(|s| !s.occluded)
        .map(|s| (s.pixel, s.throughput))
        .collect()
}
