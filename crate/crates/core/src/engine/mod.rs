//! Wavefront renderer built on ray queue cycling.
//!
//! Every rank owns a block of image rows. A wave of rays (primary, shadow or reflection)
//! is traced against the local geometry, then handed to the next rank in the ring until
//! each batch has seen every rank and is back with its owner. Hits reduce on the
//! `(t, global_id)` key, so the result does not depend on how triangles are distributed.

mod batch;
mod shade;

use std::fmt;
use std::thread;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::{camera_primary_ray, Aabb, CameraSpec, GeomError, Ray, Vec3};
use crate::image::FloatImage;
use crate::scene::{partition_scene, Light, LightKind, PartitionStrategy, SceneDesc, SceneError};
use crate::transport::{init_ranks, Backend, RankEndpoint, TransportConfig, TransportError};

pub use batch::{RayBatch, RayKind, RayState, RAY_RECORD_LEN};
pub use shade::{
    rank_color, record_for, resolve_shadows, shade_and_spawn, RankScene, ShadeRecord, Shaded,
    ShadingTable, RANK_PALETTE,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(
        "collective contract violated: ranks {ranks:?} disagree with rank 0 on frame parameters"
    )]
    ContractMismatch { ranks: Vec<usize> },
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ShadeMode {
    #[default]
    Shaded,
    /// Flat color per owning rank of the hit triangle.
    RankColor,
}

impl std::str::FromStr for ShadeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "shaded" => Ok(ShadeMode::Shaded),
            "rankcolor" => Ok(ShadeMode::RankColor),
            other => Err(format!(
                "unknown mode {other:?} (expected shaded or rankcolor)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderOptions {
    /// Reflection bounces after the primary hit.
    pub max_depth: u32,
    pub mode: ShadeMode,
    /// Debug: trace each wave on its origin rank only.
    pub disable_cycling: bool,
    /// Debug: keep every resolved shadow ray in [`FrameOutput::shadow_log`]. Rank-local.
    pub record_shadows: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            max_depth: 1,
            mode: ShadeMode::Shaded,
            disable_cycling: false,
            record_shadows: false,
        }
    }
}

/// Rows `[start, end)` owned by each rank.
pub fn assign_pixels(height: u32, ranks: usize) -> Vec<(u32, u32)> {
    assert!(ranks >= 1, "at least one rank");
    let h = height as u64;
    let r = ranks as u64;
    (0..r)
        .map(|i| ((i * h / r) as u32, ((i + 1) * h / r) as u32))
        .collect()
}

/// One primary ray per owned pixel, row-major.
pub fn gen_primary_batch(
    rank: usize,
    ranks: usize,
    cam: &CameraSpec,
    width: u32,
    height: u32,
) -> Result<RayBatch, EngineError> {
    let (y0, y1) = assign_pixels(height, ranks)[rank];
    let mut batch = RayBatch::new(RayKind::Primary);
    batch.rays.reserve((y1 - y0) as usize * width as usize);
    for py in y0..y1 {
        for px in 0..width {
            let ray = camera_primary_ray(cam, px, py, width, height)?;
            batch.push(RayState::new(
                RayKind::Primary,
                ray,
                py * width + px,
                rank as u32,
                Vec3::ONE,
                0,
            ));
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceCounts {
    pub nearest_calls: u64,
    pub any_calls: u64,
}

/// Tests every ray of the batch against this rank's geometry, in place.
pub fn trace_local_round(batch: &mut RayBatch, scene: &RankScene) -> TraceCounts {
    let geom = &scene.geometry;
    let counts = match batch.kind {
        RayKind::Shadow => {
            let live = batch.rays.iter().filter(|r| !r.occluded).count() as u64;
            batch.rays.par_iter_mut().with_min_len(256).for_each(|r| {
                if !r.occluded && geom.any(&r.ray) {
                    r.occluded = true;
                }
                r.rounds += 1;
            });
            TraceCounts {
                nearest_calls: 0,
                any_calls: live,
            }
        }
        RayKind::Primary | RayKind::Reflection => {
            batch.rays.par_iter_mut().with_min_len(256).for_each(|r| {
                r.best_hit = r.best_hit.min(geom.nearest(&r.ray));
                r.rounds += 1;
            });
            TraceCounts {
                nearest_calls: batch.len() as u64,
                any_calls: 0,
            }
        }
    };
    batch.rounds_completed += 1;
    counts
}

/// Per-round record of one rank's work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub wave: u32,
    pub kind: RayKind,
    pub round: u32,
    pub rays_traced: u64,
    pub nearest_calls: u64,
    pub any_calls: u64,
    /// Payload bytes this rank sent in the round's ring exchange.
    pub bytes_exchanged: u64,
    pub micros: u64,
}

impl RoundRecord {
    /// Line-delimited text record.
    pub fn to_line(&self, frame: u64, rank: usize) -> String {
        format!(
            "frame={frame} rank={rank} wave={} kind={} round={} raysTraced={} bytesExchanged={} millis={:.3}",
            self.wave,
            kind_name(self.kind),
            self.round,
            self.rays_traced,
            self.bytes_exchanged,
            self.micros as f64 / 1000.0
        )
    }
}

fn kind_name(k: RayKind) -> &'static str {
    match k {
        RayKind::Primary => "primary",
        RayKind::Shadow => "shadow",
        RayKind::Reflection => "reflection",
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub rounds: Vec<RoundRecord>,
    pub total_micros: u64,
}

impl RenderStats {
    pub fn primary_nearest_calls(&self) -> u64 {
        self.rounds
            .iter()
            .filter(|r| r.kind == RayKind::Primary)
            .map(|r| r.nearest_calls)
            .sum()
    }

    pub fn rays_traced(&self) -> u64 {
        self.rounds.iter().map(|r| r.rays_traced).sum()
    }

    pub fn bytes_exchanged(&self) -> u64 {
        self.rounds.iter().map(|r| r.bytes_exchanged).sum()
    }
}

impl fmt::Display for RenderStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} rounds, {} rays traced, {} bytes exchanged, {:.3} ms",
            self.rounds.len(),
            self.rays_traced(),
            self.bytes_exchanged(),
            self.total_micros as f64 / 1000.0
        )
    }
}

/// Traces `batch` on every rank of the ring and returns it to its origin.
///
/// With `R > 1` this is `R` trace rounds and `R` ring exchanges; the last exchange is the
/// hop that brings the batch home.
pub fn cycle_batch(
    ep: &mut RankEndpoint,
    mut batch: RayBatch,
    scene: &RankScene,
    opts: &RenderOptions,
    wave: u32,
    stats: &mut RenderStats,
) -> Result<RayBatch, EngineError> {
    let ranks = ep.size();
    let rounds = if opts.disable_cycling { 1 } else { ranks };
    for round in 0..rounds {
        let start = Instant::now();
        let rays_traced = batch.len() as u64;
        let counts = trace_local_round(&mut batch, scene);
        let mut bytes_exchanged = 0;
        if rounds > 1 {
            let bytes = batch.encode();
            bytes_exchanged = bytes.len() as u64;
            batch = RayBatch::decode(&ep.ring_exchange(bytes)?)?;
        }
        stats.rounds.push(RoundRecord {
            wave,
            kind: batch.kind,
            round: round as u32,
            rays_traced,
            nearest_calls: counts.nearest_calls,
            any_calls: counts.any_calls,
            bytes_exchanged,
            micros: start.elapsed().as_micros() as u64,
        });
    }
    let me = ep.rank() as u32;
    if let Some(bad) = batch
        .rays
        .iter()
        .find(|r| r.owner_rank != me || r.rounds != rounds as u32)
    {
        return Err(EngineError::Malformed(format!(
            "ray for pixel {} (owner {}, {} rounds) ended on rank {me} after {rounds} rounds",
            bad.pixel, bad.owner_rank, bad.rounds
        )));
    }
    Ok(batch)
}

/// Accumulated color of one rank's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBufferTile {
    pub owner_rank: u32,
    pub row_start: u32,
    pub row_end: u32,
    pub width: u32,
    pub accum: Vec<Vec3>,
}

impl FrameBufferTile {
    pub fn new(owner_rank: u32, (row_start, row_end): (u32, u32), width: u32) -> FrameBufferTile {
        let n = (row_end - row_start) as usize * width as usize;
        FrameBufferTile {
            owner_rank,
            row_start,
            row_end,
            width,
            accum: vec![Vec3::ZERO; n],
        }
    }

    pub fn add(&mut self, pixel: u32, c: Vec3) {
        let i = (pixel - self.row_start * self.width) as usize;
        self.accum[i] = self.accum[i] + c;
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.accum.len() * 24);
        for v in [self.owner_rank, self.row_start, self.row_end, self.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.accum {
            for c in p.to_array() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<FrameBufferTile, EngineError> {
        if bytes.len() < 16 {
            return Err(EngineError::Malformed("tile without header".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        let mut tile = FrameBufferTile::new(u(0), (u(1), u(2)), u(3));
        if u(2) < u(1) || bytes.len() != 16 + tile.accum.len() * 24 {
            return Err(EngineError::Malformed(format!(
                "tile rows {}..{} with {} bytes",
                u(1),
                u(2),
                bytes.len()
            )));
        }
        for (p, b) in tile.accum.iter_mut().zip(bytes[16..].chunks_exact(24)) {
            let f = |i: usize| f64::from_le_bytes(b[8 * i..8 * i + 8].try_into().expect("8 bytes"));
            *p = Vec3::new(f(0), f(1), f(2));
        }
        Ok(tile)
    }
}

/// A shadow ray after its full cycle, as seen by the owner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowSample {
    pub pixel: u32,
    pub light_index: u32,
    pub depth: u32,
    pub ray: Ray,
    pub occluded: bool,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    /// Assembled image; root only.
    pub image: Option<FloatImage>,
    pub stats: RenderStats,
    pub shadow_log: Vec<ShadowSample>,
}

/// Content digest of everything that must agree across ranks for a frame.
pub fn frame_digest(
    scene: &RankScene,
    cam: &CameraSpec,
    width: u32,
    height: u32,
    opts: &RenderOptions,
) -> [u8; 32] {
    parameter_digest(
        cam,
        width,
        height,
        opts,
        scene.background,
        scene.ambient,
        &scene.lights,
        Some(&scene.scene_bounds),
    )
}

/// SHA-256 over the bit patterns of the frame parameters.
#[allow(clippy::too_many_arguments)]
pub fn parameter_digest(
    cam: &CameraSpec,
    width: u32,
    height: u32,
    opts: &RenderOptions,
    background: Vec3,
    ambient: Vec3,
    lights: &[Light],
    bounds: Option<&Aabb>,
) -> [u8; 32] {
    let mut vals: Vec<f64> = Vec::new();
    for v in [cam.position, cam.view_dir, cam.up, background, ambient] {
        vals.extend(v.to_array());
    }
    vals.extend([cam.fov_y, cam.aspect]);
    if let Some(b) = bounds {
        vals.extend(b.lo.to_array());
        vals.extend(b.hi.to_array());
    }
    for l in lights {
        let (tag, v) = match l.kind {
            LightKind::Point { position } => (0.0, position),
            LightKind::Directional { direction } => (1.0, direction),
        };
        vals.push(tag);
        vals.extend(v.to_array());
        vals.extend(l.intensity.to_array());
    }
    let mut h = Sha256::new();
    for v in vals {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update(width.to_le_bytes());
    h.update(height.to_le_bytes());
    h.update(opts.max_depth.to_le_bytes());
    h.update([
        opts.mode as u8,
        opts.disable_cycling as u8,
        bounds.is_some() as u8,
    ]);
    h.update((lights.len() as u64).to_le_bytes());
    h.finalize().into()
}

/// Collective agreement check. Every rank sends `digest` and a local flag to root; root
/// lists the ranks whose digest differs from its own and broadcasts the verdict.
///
/// Returns the OR of all flags, or [`EngineError::ContractMismatch`] on every rank.
pub fn verify_collective(
    ep: &mut RankEndpoint,
    digest: [u8; 32],
    flag: bool,
) -> Result<bool, EngineError> {
    let mut mine = digest.to_vec();
    mine.push(flag as u8);
    let verdict = match ep.gather_to_root(mine)? {
        Some(all) => {
            let reference = &all[0][..32];
            let bad: Vec<u32> = all
                .iter()
                .enumerate()
                .filter(|(_, d)| d.len() != 33 || &d[..32] != reference)
                .map(|(r, _)| r as u32)
                .collect();
            let any_flag = all.iter().any(|d| d.last() == Some(&1));
            let mut v = vec![any_flag as u8];
            for r in bad {
                v.extend_from_slice(&r.to_le_bytes());
            }
            ep.broadcast(Some(v))?
        }
        None => ep.broadcast(None)?,
    };
    let Some((&any_flag, rest)) = verdict.split_first() else {
        return Err(EngineError::Malformed("empty collective verdict".into()));
    };
    if !rest.is_empty() {
        let ranks = rest
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        return Err(EngineError::ContractMismatch { ranks });
    }
    Ok(any_flag == 1)
}

/// Collective frame render. All ranks must call this with equal camera, size and options.
pub fn render_frame(
    ep: &mut RankEndpoint,
    scene: &RankScene,
    cam: &CameraSpec,
    width: u32,
    height: u32,
    opts: &RenderOptions,
) -> Result<FrameOutput, EngineError> {
    let start = Instant::now();
    verify_collective(ep, frame_digest(scene, cam, width, height, opts), false)?;
    cam.validate()?;

    let rank = ep.rank();
    let rows = assign_pixels(height, ep.size())[rank];
    let mut tile = FrameBufferTile::new(rank as u32, rows, width);
    let mut stats = RenderStats::default();
    let mut shadow_log = Vec::new();
    let mut wave = 0;

    // static schedule: every rank runs the same waves, even with empty batches
    let mut pending = gen_primary_batch(rank, ep.size(), cam, width, height)?;
    for _depth in 0..=opts.max_depth {
        let traced = cycle_batch(ep, pending, scene, opts, wave, &mut stats)?;
        wave += 1;
        let shaded = shade_and_spawn(&traced, scene, opts)?;
        for (p, c) in shaded.contributions {
            tile.add(p, c);
        }
        if opts.mode == ShadeMode::RankColor {
            break;
        }
        let shadows = cycle_batch(ep, shaded.shadows, scene, opts, wave, &mut stats)?;
        wave += 1;
        for (p, c) in resolve_shadows(&shadows) {
            tile.add(p, c);
        }
        if opts.record_shadows {
            shadow_log.extend(shadows.rays.iter().map(|s| ShadowSample {
                pixel: s.pixel,
                light_index: s.light_index,
                depth: s.depth,
                ray: s.ray,
                occluded: s.occluded,
            }));
        }
        pending = shaded.reflections;
    }

    let image = match ep.gather_to_root(tile.encode())? {
        Some(tiles) => {
            let mut img = FloatImage::new(width, height);
            for t in tiles {
                let t = FrameBufferTile::decode(&t)?;
                let offset = (t.row_start * width) as usize;
                img.pixels[offset..offset + t.accum.len()].copy_from_slice(&t.accum);
            }
            Some(img)
        }
        None => None,
    };
    stats.total_micros = start.elapsed().as_micros() as u64;
    Ok(FrameOutput {
        image,
        stats,
        shadow_log,
    })
}

/// Runs one collective frame with a thread per endpoint. Returns every rank's output in
/// rank order, or the error of the lowest failing rank.
pub fn render_on_ranks(
    endpoints: Vec<RankEndpoint>,
    scenes: &[RankScene],
    cam: &CameraSpec,
    width: u32,
    height: u32,
    opts: &RenderOptions,
) -> Result<(Vec<FrameOutput>, Vec<RankEndpoint>), EngineError> {
    assert_eq!(endpoints.len(), scenes.len(), "one scene per rank");
    let results: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .zip(scenes)
            .map(|(mut ep, scene)| {
                s.spawn(move || {
                    let out = render_frame(&mut ep, scene, cam, width, height, opts);
                    (out, ep)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    });
    let mut outs = Vec::with_capacity(results.len());
    let mut eps = Vec::with_capacity(results.len());
    let mut first_err = None;
    for (out, ep) in results {
        eps.push(ep);
        match out {
            Ok(o) => outs.push(o),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok((outs, eps)),
    }
}

/// Partitions `scene`, starts `ranks` endpoints and renders one frame. Rank 0's output
/// comes first and carries the image.
#[allow(clippy::too_many_arguments)]
pub fn render_scene(
    scene: &SceneDesc,
    ranks: usize,
    backend: Backend,
    strategy: PartitionStrategy,
    config: &TransportConfig,
    cam: &CameraSpec,
    width: u32,
    height: u32,
    opts: &RenderOptions,
) -> Result<Vec<FrameOutput>, EngineError> {
    let partition = partition_scene(scene, ranks, strategy)?;
    let scenes = RankScene::split(scene, &partition);
    let endpoints = init_ranks(ranks, backend, config)?;
    let (outs, _) = render_on_ranks(endpoints, &scenes, cam, width, height, opts)?;
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_blocks() {
        assert_eq!(assign_pixels(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(assign_pixels(5, 2), vec![(0, 2), (2, 5)]);
        assert_eq!(assign_pixels(7, 1), vec![(0, 7)]);
        let blocks = assign_pixels(3, 5);
        assert_eq!(blocks.iter().map(|(a, b)| b - a).sum::<u32>(), 3);
        assert!(blocks.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn primary_batches_follow_camera() {
        let cam = CameraSpec::look_at(
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
            60.0,
            1.0,
        );
        for r in 0..2 {
            let b = gen_primary_batch(r, 2, &cam, 4, 4).unwrap();
            assert_eq!(b.len(), 8);
            for rs in &b.rays {
                let (px, py) = (rs.pixel % 4, rs.pixel / 4);
                assert_eq!(rs.ray, camera_primary_ray(&cam, px, py, 4, 4).unwrap());
                assert_eq!(rs.owner_rank, r as u32);
                assert!(rs.best_hit.is_miss());
                assert_eq!(rs.throughput, Vec3::ONE);
            }
        }
        let all = gen_primary_batch(0, 1, &cam, 4, 4).unwrap();
        assert_eq!(
            all.rays.iter().map(|r| r.pixel).collect::<Vec<_>>(),
            (0..16).collect::<Vec<_>>()
        );
    }

    #[test]
    fn tile_round_trip() {
        let mut t = FrameBufferTile::new(1, (2, 4), 3);
        t.add(7, Vec3::new(0.5, 0.25, 1.0));
        t.add(7, Vec3::new(0.5, 0.25, 1.0));
        assert_eq!(t.accum[1], Vec3::new(1.0, 0.5, 2.0));
        assert_eq!(FrameBufferTile::decode(&t.encode()).unwrap(), t);
        assert!(FrameBufferTile::decode(&t.encode()[..20]).is_err());
    }
}
