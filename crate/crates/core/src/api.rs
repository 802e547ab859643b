//! ANARI-flavoured object model on top of the engine.
//!
//! Each rank owns a [`Device`]. Objects are created, parameterized and committed locally
//! with no communication; only [`Device::render_frame_collective`] talks to other ranks.
//! Parameters are staged by `set_param` and become visible to rendering only on `commit`.
//!
//! The scene graph is at most two levels deep: a World lists Instances, an Instance
//! names one Group, and a Group lists Surfaces (triangles plus material).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::accel::LocalGeometry;
use crate::engine::{
    parameter_digest, record_for, render_frame, verify_collective, EngineError, RankScene,
    RenderOptions, RenderStats, ShadeMode, ShadeRecord, ShadingTable,
};
use crate::geom::{Aabb, CameraSpec, Triangle, Vec3};
use crate::scene::{Handle, Light, Material, RefError, RefTable};
use crate::transport::RankEndpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectKind {
    World,
    Surface,
    Group,
    Instance,
    Light,
    Camera,
    Renderer,
    Frame,
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Float(f64),
    Int(i64),
    Bool(bool),
    Vec3(Vec3),
    Str(String),
    Triangles(Arc<Vec<Triangle>>),
    Object(Handle),
    Objects(Vec<Handle>),
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}
impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}
impl From<i32> for Value {
    fn from(v: i32) -> Self {
        Value::Int(v.into())
    }
}
impl From<u32> for Value {
    fn from(v: u32) -> Self {
        Value::Int(v.into())
    }
}
impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}
impl From<Vec3> for Value {
    fn from(v: Vec3) -> Self {
        Value::Vec3(v)
    }
}
impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_owned())
    }
}
impl From<Vec<Triangle>> for Value {
    fn from(v: Vec<Triangle>) -> Self {
        Value::Triangles(Arc::new(v))
    }
}
impl From<Handle> for Value {
    fn from(v: Handle) -> Self {
        Value::Object(v)
    }
}
impl From<Vec<Handle>> for Value {
    fn from(v: Vec<Handle>) -> Self {
        Value::Objects(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamType {
    Float,
    Int,
    Bool,
    Vec3,
    Str,
    Triangles,
    Object(ObjectKind),
    Objects(ObjectKind),
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamType::Float => f.write_str("float"),
            ParamType::Int => f.write_str("int"),
            ParamType::Bool => f.write_str("bool"),
            ParamType::Vec3 => f.write_str("vec3"),
            ParamType::Str => f.write_str("string"),
            ParamType::Triangles => f.write_str("triangles"),
            ParamType::Object(k) => write!(f, "{k} handle"),
            ParamType::Objects(k) => write!(f, "list of {k} handles"),
        }
    }
}

fn schema(kind: ObjectKind) -> &'static [(&'static str, ParamType)] {
    use ParamType as P;
    match kind {
        ObjectKind::World => &[
            ("instances", P::Objects(ObjectKind::Instance)),
            ("lights", P::Objects(ObjectKind::Light)),
        ],
        ObjectKind::Surface => &[
            ("triangles", P::Triangles),
            ("albedo", P::Vec3),
            ("mirror", P::Vec3),
        ],
        ObjectKind::Group => &[("surfaces", P::Objects(ObjectKind::Surface))],
        ObjectKind::Instance => &[("group", P::Object(ObjectKind::Group))],
        ObjectKind::Light => &[
            ("type", P::Str),
            ("position", P::Vec3),
            ("direction", P::Vec3),
            ("intensity", P::Vec3),
        ],
        ObjectKind::Camera => &[
            ("position", P::Vec3),
            ("direction", P::Vec3),
            ("up", P::Vec3),
            ("fovY", P::Float),
            ("aspect", P::Float),
        ],
        ObjectKind::Renderer => &[
            ("maxDepth", P::Int),
            ("mode", P::Str),
            ("disableCycling", P::Bool),
            ("background", P::Vec3),
            ("ambient", P::Vec3),
        ],
        ObjectKind::Frame => &[
            ("world", P::Object(ObjectKind::World)),
            ("camera", P::Object(ObjectKind::Camera)),
            ("renderer", P::Object(ObjectKind::Renderer)),
            ("width", P::Int),
            ("height", P::Int),
        ],
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error(transparent)]
    Ref(#[from] RefError),
    #[error("unknown parameter {name:?} for {kind} (valid: {valid})")]
    UnknownParam {
        kind: ObjectKind,
        name: String,
        valid: String,
    },
    #[error("parameter {name:?} of {kind} expects {expected}")]
    ParamType {
        kind: ObjectKind,
        name: String,
        expected: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl ApiError {
    pub fn is_contract_violation(&self) -> bool {
        matches!(self, ApiError::Engine(EngineError::ContractMismatch { .. }))
    }
}

/// Rank 0's copy of a finished frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameResult {
    pub width: u32,
    pub height: u32,
    /// `width * height * 3` bytes, row-major, top row first.
    pub pixels: Vec<u8>,
    pub sequence: u64,
}

#[derive(Debug)]
pub enum Mapped<'a> {
    Root(&'a FrameResult),
    NotRoot,
}

/// Flattened, immutable result of committing a World.
#[derive(Debug)]
struct WorldState {
    epoch: u64,
    geometry: Arc<LocalGeometry>,
    records: Vec<(u64, ShadeRecord)>,
    lights: Vec<Light>,
}

#[derive(Debug, Default)]
struct FrameState {
    result: Option<FrameResult>,
    stats: Option<RenderStats>,
    rendered: bool,
}

#[derive(Debug)]
struct ApiObject {
    kind: ObjectKind,
    staged: BTreeMap<String, Value>,
    committed: BTreeMap<String, Value>,
    committed_once: bool,
    world: Option<Arc<WorldState>>,
    frame: FrameState,
}

struct Replica {
    epoch: u64,
    table: Arc<ShadingTable>,
    bounds: Aabb,
}

pub struct Device {
    ep: RankEndpoint,
    objects: RefTable<ApiObject>,
    next_epoch: u64,
    sequence: u64,
    replicas: HashMap<Handle, Replica>,
}

impl Device {
    pub fn new(ep: RankEndpoint) -> Device {
        Device {
            ep,
            objects: RefTable::new(),
            next_epoch: 1,
            sequence: 0,
            replicas: HashMap::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.ep.rank()
    }

    pub fn endpoint(&self) -> &RankEndpoint {
        &self.ep
    }

    pub fn endpoint_mut(&mut self) -> &mut RankEndpoint {
        &mut self.ep
    }

    pub fn into_endpoint(self) -> RankEndpoint {
        self.ep
    }

    pub fn create(&mut self, kind: ObjectKind) -> Handle {
        self.objects.create(ApiObject {
            kind,
            staged: BTreeMap::new(),
            committed: BTreeMap::new(),
            committed_once: false,
            world: None,
            frame: FrameState::default(),
        })
    }

    pub fn kind(&self, h: Handle) -> Result<ObjectKind, ApiError> {
        Ok(self.objects.get(h)?.kind)
    }

    pub fn retain(&mut self, h: Handle) -> Result<u32, ApiError> {
        Ok(self.objects.retain(h)?)
    }

    /// Drops the application's reference. Objects still listed by a parent stay alive.
    pub fn release(&mut self, h: Handle) -> Result<u32, ApiError> {
        let left = self.objects.release(h)?;
        if left == 0 {
            self.replicas.remove(&h);
        }
        Ok(left)
    }

    pub fn refcount(&self, h: Handle) -> Result<u32, ApiError> {
        Ok(self.objects.count(h)?)
    }

    pub fn is_alive(&self, h: Handle) -> bool {
        self.objects.is_alive(h)
    }

    pub fn live_objects(&self) -> usize {
        self.objects.live_count()
    }

    pub fn set_param(
        &mut self,
        h: Handle,
        name: &str,
        value: impl Into<Value>,
    ) -> Result<(), ApiError> {
        let kind = self.objects.get(h)?.kind;
        let ty = param_type(kind, name)?;
        let value = coerce(value.into(), ty).ok_or_else(|| ApiError::ParamType {
            kind,
            name: name.to_owned(),
            expected: ty.to_string(),
        })?;
        for child in handles_of(&value) {
            let ck = self.objects.get(child)?.kind;
            let want = match ty {
                ParamType::Object(k) | ParamType::Objects(k) => k,
                _ => unreachable!("only object params carry handles"),
            };
            if ck != want {
                return Err(ApiError::Validation(format!(
                    "{kind}.{name} must reference {want} objects, got a {ck}"
                )));
            }
        }
        self.objects
            .get_mut(h)?
            .staged
            .insert(name.to_owned(), value);
        self.sync_children(h)
    }

    pub fn unset_param(&mut self, h: Handle, name: &str) -> Result<(), ApiError> {
        let kind = self.objects.get(h)?.kind;
        param_type(kind, name)?;
        self.objects.get_mut(h)?.staged.remove(name);
        self.sync_children(h)
    }

    /// Publishes staged parameters. Committing a World flattens its committed instances
    /// into this rank's local geometry. No communication happens here.
    pub fn commit(&mut self, h: Handle) -> Result<(), ApiError> {
        let obj = self.objects.get(h)?;
        let kind = obj.kind;
        let staged = obj.staged.clone();
        match kind {
            ObjectKind::Frame => {
                for key in ["world", "camera", "renderer"] {
                    if !staged.contains_key(key) {
                        return Err(ApiError::Validation(format!("frame {h} has no {key}")));
                    }
                }
                let (w, hgt) = (
                    int_or(&staged, "width", 256),
                    int_or(&staged, "height", 256),
                );
                if !(1..=16384).contains(&w) || !(1..=16384).contains(&hgt) {
                    return Err(ApiError::Validation(format!(
                        "frame size {w}x{hgt} out of range"
                    )));
                }
            }
            ObjectKind::Light => {
                if let Some(Value::Str(t)) = staged.get("type") {
                    if t != "point" && t != "directional" {
                        return Err(ApiError::Validation(format!(
                            "light type {t:?} (expected point or directional)"
                        )));
                    }
                }
            }
            ObjectKind::Renderer => {
                if let Some(Value::Str(m)) = staged.get("mode") {
                    m.parse::<ShadeMode>().map_err(ApiError::Validation)?;
                }
                if int_or(&staged, "maxDepth", 1) < 0 {
                    return Err(ApiError::Validation("maxDepth must be non-negative".into()));
                }
            }
            _ => {}
        }
        let world = if kind == ObjectKind::World {
            let epoch = self.next_epoch;
            self.next_epoch += 1;
            Some(Arc::new(self.flatten_world(&staged, epoch)?))
        } else {
            None
        };
        let obj = self.objects.get_mut(h)?;
        obj.committed = staged;
        obj.committed_once = true;
        if world.is_some() {
            obj.world = world;
        }
        self.sync_children(h)
    }

    /// Renders `frame` on every rank. All ranks must call this together with frames whose
    /// committed camera, renderer, size and lights agree.
    pub fn render_frame_collective(&mut self, frame: Handle) -> Result<(), ApiError> {
        let f = self.objects.get(frame)?;
        if f.kind != ObjectKind::Frame {
            return Err(ApiError::Usage(format!(
                "{frame} is a {}, not a Frame",
                f.kind
            )));
        }
        if !f.committed_once {
            return Err(ApiError::Validation(format!(
                "frame {frame} has never been committed"
            )));
        }
        let params = f.committed.clone();
        let world_h = object_param(&params, "world");
        let camera_h = object_param(&params, "camera");
        let renderer_h = object_param(&params, "renderer");
        let width = int_or(&params, "width", 256) as u32;
        let height = int_or(&params, "height", 256) as u32;

        let world = self
            .committed_object(world_h, "world")?
            .world
            .clone()
            .expect("committed world is flattened");
        let cam_params = &self.committed_object(camera_h, "camera")?.committed;
        let cam = CameraSpec {
            position: vec_or(cam_params, "position", Vec3::ZERO),
            view_dir: vec_or(cam_params, "direction", Vec3::new(0.0, 0.0, -1.0)),
            up: vec_or(cam_params, "up", Vec3::new(0.0, 1.0, 0.0)),
            fov_y: float_or(cam_params, "fovY", 60.0),
            aspect: float_or(cam_params, "aspect", width as f64 / height as f64),
        };
        let r_params = &self.committed_object(renderer_h, "renderer")?.committed;
        let opts = RenderOptions {
            max_depth: int_or(r_params, "maxDepth", 1) as u32,
            mode: match r_params.get("mode") {
                Some(Value::Str(m)) => m.parse().map_err(ApiError::Validation)?,
                _ => ShadeMode::Shaded,
            },
            disable_cycling: matches!(r_params.get("disableCycling"), Some(Value::Bool(true))),
            record_shadows: false,
        };
        let background = vec_or(r_params, "background", Vec3::ZERO);
        let ambient = vec_or(r_params, "ambient", Vec3::ZERO);

        // agree on parameters and on whether any rank's world changed, before any tracing
        let digest = parameter_digest(
            &cam,
            width,
            height,
            &opts,
            background,
            ambient,
            &world.lights,
            None,
        );
        let stale = self
            .replicas
            .get(&world_h)
            .is_none_or(|r| r.epoch != world.epoch);
        if verify_collective(&mut self.ep, digest, stale)? {
            let replica = self.replicate(&world)?;
            self.replicas.insert(world_h, replica);
        }
        let replica = self.replicas.get(&world_h).expect("replicated above");
        let scene = RankScene {
            geometry: world.geometry.clone(),
            shading: replica.table.clone(),
            lights: world.lights.clone(),
            background,
            ambient,
            scene_bounds: replica.bounds,
        };
        let out = render_frame(&mut self.ep, &scene, &cam, width, height, &opts)?;

        self.sequence += 1;
        let sequence = self.sequence;
        let state = &mut self.objects.get_mut(frame)?.frame;
        state.result = out.image.map(|img| {
            let rgb = img.to_rgb8();
            FrameResult {
                width,
                height,
                pixels: rgb.data,
                sequence,
            }
        });
        state.stats = Some(out.stats);
        state.rendered = true;
        Ok(())
    }

    /// Frames complete inside [`Device::render_frame_collective`]; this only checks that one has.
    pub fn wait_frame(&self, frame: Handle) -> Result<(), ApiError> {
        if self.objects.get(frame)?.frame.rendered {
            Ok(())
        } else {
            Err(ApiError::Usage(format!(
                "frame {frame} has not been rendered"
            )))
        }
    }

    /// Rank 0 borrows the pixels of the latest render; the borrow ends before the next one.
    pub fn map_frame(&self, frame: Handle) -> Result<Mapped<'_>, ApiError> {
        let state = &self.objects.get(frame)?.frame;
        if !state.rendered {
            return Err(ApiError::Usage(format!(
                "map of frame {frame} before any render"
            )));
        }
        Ok(match &state.result {
            Some(r) => Mapped::Root(r),
            None => Mapped::NotRoot,
        })
    }

    pub fn frame_stats(&self, frame: Handle) -> Option<&RenderStats> {
        self.objects.get(frame).ok()?.frame.stats.as_ref()
    }

    fn committed_object(&self, h: Handle, role: &str) -> Result<&ApiObject, ApiError> {
        let obj = self.objects.get(h)?;
        if !obj.committed_once {
            return Err(ApiError::Validation(format!(
                "frame references uncommitted {role} {h}"
            )));
        }
        Ok(obj)
    }

    fn flatten_world(
        &self,
        params: &BTreeMap<String, Value>,
        epoch: u64,
    ) -> Result<WorldState, ApiError> {
        let mut prims = Vec::new();
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let rank = self.ep.rank() as u32;
        for inst in handles_param(params, "instances") {
            let inst = self.committed_object(inst, "instance")?;
            let Some(Value::Object(group)) = inst.committed.get("group") else {
                continue;
            };
            for surf in handles_param(
                &self.committed_object(*group, "group")?.committed,
                "surfaces",
            ) {
                let s = &self.committed_object(surf, "surface")?.committed;
                let material = Material {
                    albedo: vec_or(s, "albedo", Vec3::splat(0.8)),
                    mirror: vec_or(s, "mirror", Vec3::ZERO),
                };
                if let Some(Value::Triangles(tris)) = s.get("triangles") {
                    for t in tris.iter() {
                        if !seen.insert(t.global_id) {
                            return Err(ApiError::Validation(format!(
                                "global id {} appears twice in the world",
                                t.global_id
                            )));
                        }
                        prims.push(*t);
                        records.push((t.global_id, record_for(t, material, rank)));
                    }
                }
            }
        }
        let mut lights = Vec::new();
        for lh in handles_param(params, "lights") {
            let l = &self.committed_object(lh, "light")?.committed;
            let intensity = vec_or(l, "intensity", Vec3::ONE);
            let light = match l.get("type") {
                Some(Value::Str(t)) if t == "point" => {
                    Light::point(vec_or(l, "position", Vec3::ZERO), intensity)
                }
                _ => {
                    let d = vec_or(l, "direction", Vec3::new(0.0, 0.0, -1.0));
                    if d.try_normalize().is_none() {
                        return Err(ApiError::Validation(
                            "directional light needs a non-zero direction".into(),
                        ));
                    }
                    Light::directional(d, intensity)
                }
            };
            lights.push(light);
        }
        Ok(WorldState {
            epoch,
            geometry: Arc::new(LocalGeometry::new(prims)),
            records,
            lights,
        })
    }

    /// Collective: every rank contributes its shading records and local bounds.
    fn replicate(&mut self, world: &WorldState) -> Result<Replica, ApiError> {
        let mut mine = Vec::with_capacity(48 + world.records.len() * 84);
        let b = world.geometry.bounds();
        for v in [b.lo, b.hi] {
            for c in v.to_array() {
                mine.extend_from_slice(&c.to_le_bytes());
            }
        }
        mine.extend(ShadingTable::encode_records(&world.records));
        let mut bounds = Aabb::EMPTY;
        let mut all = Vec::new();
        for frag in self.ep.all_gather(mine).map_err(EngineError::from)? {
            if frag.len() < 48 {
                return Err(EngineError::Malformed("short shading fragment".into()).into());
            }
            let f =
                |i: usize| f64::from_le_bytes(frag[8 * i..8 * i + 8].try_into().expect("8 bytes"));
            let rb = Aabb::new(Vec3::new(f(0), f(1), f(2)), Vec3::new(f(3), f(4), f(5)));
            if !rb.is_empty() {
                bounds = bounds.union(&rb);
            }
            all.extend(ShadingTable::decode_records(&frag[48..])?);
        }
        let total = all.len();
        let table = ShadingTable::from_records(all);
        if table.len() != total {
            return Err(ApiError::Validation(
                "a global id is defined on more than one rank".into(),
            ));
        }
        Ok(Replica {
            epoch: world.epoch,
            table: Arc::new(table),
            bounds,
        })
    }

    /// Makes the object's child references match the handles named by its staged and
    /// committed parameters.
    fn sync_children(&mut self, h: Handle) -> Result<(), ApiError> {
        let obj = self.objects.get(h)?;
        let mut want: Vec<Handle> = obj
            .staged
            .values()
            .chain(obj.committed.values())
            .flat_map(handles_of)
            .collect();
        let mut have = self.objects.children(h)?.to_vec();
        want.sort();
        have.sort();
        let (mut i, mut j) = (0, 0);
        let mut add = Vec::new();
        let mut drop = Vec::new();
        while i < want.len() || j < have.len() {
            match (want.get(i), have.get(j)) {
                (Some(a), Some(b)) if a == b => {
                    i += 1;
                    j += 1;
                }
                (Some(a), Some(b)) if a < b => {
                    add.push(*a);
                    i += 1;
                }
                (Some(a), None) => {
                    add.push(*a);
                    i += 1;
                }
                (_, Some(b)) => {
                    drop.push(*b);
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        for c in add {
            self.objects.add_child(h, c)?;
        }
        for c in drop {
            self.objects.remove_child(h, c)?;
        }
        Ok(())
    }
}

fn param_type(kind: ObjectKind, name: &str) -> Result<ParamType, ApiError> {
    let s = schema(kind);
    s.iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let mut names: Vec<_> = s.iter().map(|(n, _)| *n).collect();
            names.sort_unstable();
            ApiError::UnknownParam {
                kind,
                name: name.to_owned(),
                valid: names.join(", "),
            }
        })
}

fn coerce(v: Value, ty: ParamType) -> Option<Value> {
    Some(match (ty, v) {
        (ParamType::Float, Value::Float(x)) => Value::Float(x),
        (ParamType::Float, Value::Int(x)) => Value::Float(x as f64),
        (ParamType::Int, Value::Int(x)) => Value::Int(x),
        (ParamType::Bool, Value::Bool(x)) => Value::Bool(x),
        (ParamType::Vec3, Value::Vec3(x)) => Value::Vec3(x),
        (ParamType::Str, Value::Str(x)) => Value::Str(x),
        (ParamType::Triangles, Value::Triangles(x)) => Value::Triangles(x),
        (ParamType::Object(_), Value::Object(x)) => Value::Object(x),
        (ParamType::Objects(_), Value::Objects(x)) => Value::Objects(x),
        (ParamType::Objects(_), Value::Object(x)) => Value::Objects(vec![x]),
        _ => return None,
    })
}

fn handles_of(v: &Value) -> Vec<Handle> {
    match v {
        Value::Object(h) => vec![*h],
        Value::Objects(hs) => hs.clone(),
        _ => Vec::new(),
    }
}

fn handles_param(p: &BTreeMap<String, Value>, name: &str) -> Vec<Handle> {
    p.get(name).map(handles_of).unwrap_or_default()
}

fn object_param(p: &BTreeMap<String, Value>, name: &str) -> Handle {
    match p.get(name) {
        Some(Value::Object(h)) => *h,
        _ => unreachable!("frame commit checks {name}"),
    }
}

fn int_or(p: &BTreeMap<String, Value>, name: &str, d: i64) -> i64 {
    match p.get(name) {
        Some(Value::Int(v)) => *v,
        _ => d,
    }
}

fn float_or(p: &BTreeMap<String, Value>, name: &str, d: f64) -> f64 {
    match p.get(name) {
        Some(Value::Float(v)) => *v,
        _ => d,
    }
}

fn vec_or(p: &BTreeMap<String, Value>, name: &str, d: Vec3) -> Vec3 {
    match p.get(name) {
        Some(Value::Vec3(v)) => *v,
        _ => d,
    }
}
