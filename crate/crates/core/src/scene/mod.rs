//! Scene content and its distribution onto ranks.

mod cloud;
mod format;
mod partition;
pub mod refcount;
mod timestep;

use std::path::PathBuf;

use thiserror::Error;

use crate::geom::{Aabb, CameraSpec, Triangle, Vec3};

pub use cloud::{generate_uneven_cloud, CLOUD_SIGMA_MAX};
pub use format::{
    parse_scene, parse_scene_file, parse_scene_with_base, serialize_scene, write_binary_triangles,
};
pub use partition::{partition_scene, Partition, PartitionStrategy};
pub use refcount::{Handle, RefError, RefTable};
pub use timestep::{CacheStats, FileStepLoader, FnStepLoader, StepLoader, TimestepCache};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("malformed scene document: {0}")]
    Syntax(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("partition strategy fromFile requires a rankOfPrim assignment")]
    MissingAssignment,
    #[error("rank count must be at least 1")]
    NoRanks,
    #[error("time step {step} out of range (scene has {count})")]
    InvalidStep { step: usize, count: usize },
}

impl SceneError {
    pub(crate) fn field(field: impl Into<String>, message: impl Into<String>) -> SceneError {
        SceneError::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub albedo: Vec3,
    /// Mirror reflectance; zero is purely diffuse.
    pub mirror: Vec3,
}

impl Material {
    pub fn diffuse(albedo: Vec3) -> Material {
        Material {
            albedo,
            mirror: Vec3::ZERO,
        }
    }

    pub fn is_mirror(&self) -> bool {
        self.mirror.x > 0.0 || self.mirror.y > 0.0 || self.mirror.z > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LightKind {
    Point {
        position: Vec3,
    },
    /// `direction` is the unit direction light travels in.
    Directional {
        direction: Vec3,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    pub kind: LightKind,
    pub intensity: Vec3,
}

impl Light {
    pub fn point(position: Vec3, intensity: Vec3) -> Light {
        Light {
            kind: LightKind::Point { position },
            intensity,
        }
    }

    pub fn directional(direction: Vec3, intensity: Vec3) -> Light {
        Light {
            kind: LightKind::Directional {
                direction: direction.normalize(),
            },
            intensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDesc {
    pub triangles: Vec<Triangle>,
    pub material_of_prim: Vec<u32>,
    pub materials: Vec<Material>,
    pub lights: Vec<Light>,
    pub background: Vec3,
    pub ambient: Vec3,
    /// Source rank of each triangle (by position), as the producing code distributed it.
    pub rank_of_prim: Option<Vec<u32>>,
    pub time_steps: Vec<PathBuf>,
    pub camera: Option<CameraSpec>,
}

impl Default for SceneDesc {
    fn default() -> Self {
        SceneDesc {
            triangles: Vec::new(),
            material_of_prim: Vec::new(),
            materials: Vec::new(),
            lights: Vec::new(),
            background: Vec3::ZERO,
            ambient: Vec3::ZERO,
            rank_of_prim: None,
            time_steps: Vec::new(),
            camera: None,
        }
    }
}

impl SceneDesc {
    pub fn bounds(&self) -> Aabb {
        self.triangles
            .iter()
            .fold(Aabb::EMPTY, |b, t| b.union(&t.bounds()))
    }

    pub fn material_of(&self, position: usize) -> &Material {
        &self.materials[self.material_of_prim[position] as usize]
    }

    /// A camera framing the whole scene from the front-right-above.
    pub fn default_camera(&self, aspect: f64) -> CameraSpec {
        if let Some(mut cam) = self.camera {
            cam.aspect = aspect;
            return cam;
        }
        let b = self.bounds();
        let (center, diag) = if b.is_empty() {
            (Vec3::ZERO, 1.0)
        } else {
            (b.center(), b.diagonal())
        };
        let eye = center + Vec3::new(0.35, 0.3, 1.0).normalize() * (diag * 1.25);
        CameraSpec::look_at(eye, center, Vec3::new(0.0, 1.0, 0.0), 45.0, aspect)
    }
}
