//! JSON scene documents.
//!
//! ```text
//! {
//!   "triangles": [[x0,y0,z0, x1,y1,z1, x2,y2,z2], ...] | {"binary": "tris.bin", "count": n},
//!   "globalIds": [..],            optional, defaults to 0..n-1
//!   "materialOfPrim": [..],
//!   "materials": [{"albedo": [r,g,b], "mirror": [r,g,b]}, ...],
//!   "lights": [{"kind": "point", "position": [..], "intensity": [..]}
//!            | {"kind": "directional", "direction": [..], "intensity": [..]}],
//!   "background": [r,g,b],
//!   "ambient": [r,g,b],           optional
//!   "rankOfPrim": [..],           optional
//!   "timeSteps": ["step0.json", ...],  optional
//!   "camera": {"position": [..], "direction": [..], "up": [..], "fovy": deg}  optional
//! }
//! ```
//!
//! The binary triangle file is a flat little-endian `f64` array, nine values per triangle.
//! Relative paths resolve against the document's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::{Light, LightKind, Material, SceneDesc, SceneError};
use crate::geom::{CameraSpec, Triangle, Vec3};

const TOP_LEVEL_KEYS: &[&str] = &[
    "triangles",
    "globalIds",
    "materialOfPrim",
    "materials",
    "lights",
    "background",
    "ambient",
    "rankOfPrim",
    "timeSteps",
    "camera",
];

pub fn parse_scene(document: &[u8]) -> Result<SceneDesc, SceneError> {
    parse_scene_with_base(document, Path::new("."))
}

pub fn parse_scene_file(path: &Path) -> Result<SceneDesc, SceneError> {
    let bytes = std::fs::read(path).map_err(|source| SceneError::Io {
        path: path.to_owned(),
        source,
    })?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_scene_with_base(&bytes, &base)
}

pub fn parse_scene_with_base(document: &[u8], base: &Path) -> Result<SceneDesc, SceneError> {
    let root: Value =
        serde_json::from_slice(document).map_err(|e| SceneError::Syntax(e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| SceneError::field("<root>", "expected an object"))?;
    if let Some(k) = obj.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(SceneError::field(k.as_str(), "unknown key"));
    }

    let vertices = match obj.get("triangles") {
        None => return Err(SceneError::field("triangles", "missing")),
        Some(Value::Array(list)) => {
            let mut out = Vec::with_capacity(list.len());
            for (i, item) in list.iter().enumerate() {
                out.push(number_array::<9>(item, &format!("triangles[{i}]"))?);
            }
            out
        }
        Some(Value::Object(b)) => read_binary_reference(b, base)?,
        Some(_) => {
            return Err(SceneError::field(
                "triangles",
                "expected an array or a binary reference",
            ))
        }
    };
    let n = vertices.len();

    let global_ids: Vec<u64> = match obj.get("globalIds") {
        None => (0..n as u64).collect(),
        Some(v) => {
            let ids = uint_array(v, "globalIds")?;
            if ids.len() != n {
                return Err(SceneError::field(
                    "globalIds",
                    format!("expected {n} entries, found {}", ids.len()),
                ));
            }
            let mut seen = HashSet::with_capacity(n);
            for (i, id) in ids.iter().enumerate() {
                if *id == u64::MAX || !seen.insert(*id) {
                    return Err(SceneError::field(
                        format!("globalIds[{i}]"),
                        "duplicate or reserved id",
                    ));
                }
            }
            ids
        }
    };

    let triangles: Vec<Triangle> = vertices
        .iter()
        .zip(&global_ids)
        .map(|(v, &id)| {
            Triangle::new(
                Vec3::new(v[0], v[1], v[2]),
                Vec3::new(v[3], v[4], v[5]),
                Vec3::new(v[6], v[7], v[8]),
                id,
            )
        })
        .collect();

    let materials = match obj.get("materials") {
        None => return Err(SceneError::field("materials", "missing")),
        Some(Value::Array(list)) => list
            .iter()
            .enumerate()
            .map(|(i, m)| parse_material(m, &format!("materials[{i}]")))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(SceneError::field("materials", "expected an array")),
    };

    let material_of_prim: Vec<u32> = match obj.get("materialOfPrim") {
        Some(v) => uint_array(v, "materialOfPrim")?
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                u32::try_from(m).map_err(|_| {
                    SceneError::field(
                        format!("materialOfPrim[{i}]"),
                        "material index out of range",
                    )
                })
            })
            .collect::<Result<_, _>>()?,
        None if n == 0 || materials.len() == 1 => vec![0; n],
        None => return Err(SceneError::field("materialOfPrim", "missing")),
    };
    if material_of_prim.len() != n {
        return Err(SceneError::field(
            "materialOfPrim",
            format!("expected {n} entries, found {}", material_of_prim.len()),
        ));
    }
    for (i, &m) in material_of_prim.iter().enumerate() {
        if m as usize >= materials.len() {
            return Err(SceneError::field(
                format!("materialOfPrim[{i}]"),
                "material index out of range",
            ));
        }
    }

    let lights = match obj.get("lights") {
        None => Vec::new(),
        Some(Value::Array(list)) => list
            .iter()
            .enumerate()
            .map(|(i, l)| parse_light(l, &format!("lights[{i}]")))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(SceneError::field("lights", "expected an array")),
    };

    let background = match obj.get("background") {
        Some(v) => rgb(v, "background")?,
        None => Vec3::ZERO,
    };
    let ambient = match obj.get("ambient") {
        Some(v) => rgb(v, "ambient")?,
        None => Vec3::ZERO,
    };

    let rank_of_prim = match obj.get("rankOfPrim") {
        None => None,
        Some(v) => {
            let ranks = uint_array(v, "rankOfPrim")?;
            if ranks.len() != n {
                return Err(SceneError::field(
                    "rankOfPrim",
                    format!("expected {n} entries, found {}", ranks.len()),
                ));
            }
            Some(
                ranks
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| {
                        u32::try_from(r).map_err(|_| {
                            SceneError::field(format!("rankOfPrim[{i}]"), "rank out of range")
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            )
        }
    };

    let time_steps = match obj.get("timeSteps") {
        None => Vec::new(),
        Some(Value::Array(list)) => list
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.as_str().map(|s| resolve(base, s)).ok_or_else(|| {
                    SceneError::field(format!("timeSteps[{i}]"), "expected a path string")
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(SceneError::field("timeSteps", "expected an array")),
    };

    let camera = obj.get("camera").map(parse_camera).transpose()?;

    Ok(SceneDesc {
        triangles,
        material_of_prim,
        materials,
        lights,
        background,
        ambient,
        rank_of_prim,
        time_steps,
        camera,
    })
}

/// Serializes with inline triangles; always parses back to an equal [`SceneDesc`].
pub fn serialize_scene(scene: &SceneDesc) -> Vec<u8> {
    let mut root = Map::new();
    root.insert(
        "triangles".into(),
        Value::Array(
            scene
                .triangles
                .iter()
                .map(|t| json!(t.vertices()))
                .collect(),
        ),
    );
    let positional = scene
        .triangles
        .iter()
        .enumerate()
        .all(|(i, t)| t.global_id == i as u64);
    if !positional {
        root.insert(
            "globalIds".into(),
            json!(scene
                .triangles
                .iter()
                .map(|t| t.global_id)
                .collect::<Vec<_>>()),
        );
    }
    root.insert("materialOfPrim".into(), json!(scene.material_of_prim));
    root.insert(
        "materials".into(),
        Value::Array(
            scene
                .materials
                .iter()
                .map(|m| json!({"albedo": m.albedo.to_array(), "mirror": m.mirror.to_array()}))
                .collect(),
        ),
    );
    root.insert(
        "lights".into(),
        Value::Array(
            scene
                .lights
                .iter()
                .map(|l| match l.kind {
                    LightKind::Point { position } => json!({
                        "kind": "point", "position": position.to_array(), "intensity": l.intensity.to_array()
                    }),
                    LightKind::Directional { direction } => json!({
                        "kind": "directional", "direction": direction.to_array(), "intensity": l.intensity.to_array()
                    }),
                })
                .collect(),
        ),
    );
    root.insert("background".into(), json!(scene.background.to_array()));
    root.insert("ambient".into(), json!(scene.ambient.to_array()));
    if let Some(r) = &scene.rank_of_prim {
        root.insert("rankOfPrim".into(), json!(r));
    }
    if !scene.time_steps.is_empty() {
        root.insert(
            "timeSteps".into(),
            json!(scene
                .time_steps
                .iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect::<Vec<_>>()),
        );
    }
    if let Some(c) = &scene.camera {
        root.insert(
            "camera".into(),
            json!({
                "position": c.position.to_array(),
                "direction": c.view_dir.to_array(),
                "up": c.up.to_array(),
                "fovy": c.fov_y,
                "aspect": c.aspect,
            }),
        );
    }
    serde_json::to_vec(&Value::Object(root)).expect("scene values are finite")
}

/// Writes the flat little-endian vertex file referenced by `{"binary": .., "count": ..}`.
pub fn write_binary_triangles(path: &Path, triangles: &[Triangle]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(triangles.len() * 72);
    for t in triangles {
        for v in t.vertices() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() || base == Path::new(".") {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_binary_reference(b: &Map<String, Value>, base: &Path) -> Result<Vec<[f64; 9]>, SceneError> {
    let rel = b
        .get("binary")
        .and_then(Value::as_str)
        .ok_or_else(|| SceneError::field("triangles.binary", "expected a path string"))?;
    let count =
        b.get("count").and_then(Value::as_u64).ok_or_else(|| {
            SceneError::field("triangles.count", "expected a non-negative integer")
        })? as usize;
    let path = resolve(base, rel);
    let bytes = std::fs::read(&path).map_err(|source| SceneError::Io {
        path: path.clone(),
        source,
    })?;
    if bytes.len() != count * 72 {
        return Err(SceneError::field(
            "triangles.count",
            format!(
                "binary file holds {} bytes, expected {}",
                bytes.len(),
                count * 72
            ),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for (i, chunk) in bytes.chunks_exact(72).enumerate() {
        let mut tri = [0.0; 9];
        for (k, word) in chunk.chunks_exact(8).enumerate() {
            tri[k] = f64::from_le_bytes(word.try_into().expect("8-byte chunk"));
            if !tri[k].is_finite() {
                return Err(SceneError::field(
                    format!("triangles.binary[{i}]"),
                    "non-finite coordinate",
                ));
            }
        }
        out.push(tri);
    }
    Ok(out)
}

fn number_array<const N: usize>(v: &Value, field: &str) -> Result<[f64; N], SceneError> {
    let list = v
        .as_array()
        .filter(|a| a.len() == N)
        .ok_or_else(|| SceneError::field(field, format!("expected an array of {N} numbers")))?;
    let mut out = [0.0; N];
    for (slot, item) in out.iter_mut().zip(list) {
        *slot = item
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| SceneError::field(field, "expected finite numbers"))?;
    }
    Ok(out)
}

fn uint_array(v: &Value, field: &str) -> Result<Vec<u64>, SceneError> {
    let list = v
        .as_array()
        .ok_or_else(|| SceneError::field(field, "expected an array"))?;
    list.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_u64().ok_or_else(|| {
                SceneError::field(format!("{field}[{i}]"), "expected a non-negative integer")
            })
        })
        .collect()
}

fn vec3(v: &Value, field: &str) -> Result<Vec3, SceneError> {
    number_array::<3>(v, field).map(Vec3::from_array)
}

fn rgb(v: &Value, field: &str) -> Result<Vec3, SceneError> {
    let c = vec3(v, field)?;
    if c.x < 0.0 || c.y < 0.0 || c.z < 0.0 {
        return Err(SceneError::field(
            field,
            "color components must be non-negative",
        ));
    }
    Ok(c)
}

fn unit_rgb(v: &Value, field: &str) -> Result<Vec3, SceneError> {
    let c = rgb(v, field)?;
    if c.x > 1.0 || c.y > 1.0 || c.z > 1.0 {
        return Err(SceneError::field(field, "components must lie in [0, 1]"));
    }
    Ok(c)
}

fn parse_material(v: &Value, field: &str) -> Result<Material, SceneError> {
    let obj = v
        .as_object()
        .ok_or_else(|| SceneError::field(field, "expected an object"))?;
    let albedo = match obj.get("albedo") {
        Some(a) => unit_rgb(a, &format!("{field}.albedo"))?,
        None => return Err(SceneError::field(format!("{field}.albedo"), "missing")),
    };
    let mirror = match obj.get("mirror") {
        Some(m) => unit_rgb(m, &format!("{field}.mirror"))?,
        None => Vec3::ZERO,
    };
    Ok(Material { albedo, mirror })
}

fn parse_light(v: &Value, field: &str) -> Result<Light, SceneError> {
    let obj = v
        .as_object()
        .ok_or_else(|| SceneError::field(field, "expected an object"))?;
    let intensity = match obj.get("intensity") {
        Some(i) => rgb(i, &format!("{field}.intensity"))?,
        None => return Err(SceneError::field(format!("{field}.intensity"), "missing")),
    };
    let kind = obj.get("kind").and_then(Value::as_str);
    let kind = match kind {
        Some("point") => {
            let p = obj
                .get("position")
                .ok_or_else(|| SceneError::field(format!("{field}.position"), "missing"))?;
            LightKind::Point {
                position: vec3(p, &format!("{field}.position"))?,
            }
        }
        Some("directional") => {
            let d = obj
                .get("direction")
                .ok_or_else(|| SceneError::field(format!("{field}.direction"), "missing"))?;
            let d = vec3(d, &format!("{field}.direction"))?;
            let direction = d.try_normalize().ok_or_else(|| {
                SceneError::field(format!("{field}.direction"), "must be nonzero")
            })?;
            // keep already-normalized input bit-identical so documents round-trip
            let direction = if (d.length() - 1.0).abs() <= 1e-12 {
                d
            } else {
                direction
            };
            LightKind::Directional { direction }
        }
        _ => {
            return Err(SceneError::field(
                format!("{field}.kind"),
                "expected \"point\" or \"directional\"",
            ))
        }
    };
    Ok(Light { kind, intensity })
}

fn parse_camera(v: &Value) -> Result<CameraSpec, SceneError> {
    let obj = v
        .as_object()
        .ok_or_else(|| SceneError::field("camera", "expected an object"))?;
    let get = |k: &str| {
        obj.get(k)
            .ok_or_else(|| SceneError::field(format!("camera.{k}"), "missing"))
    };
    let position = vec3(get("position")?, "camera.position")?;
    let view_dir = vec3(get("direction")?, "camera.direction")?;
    let up = match obj.get("up") {
        Some(u) => vec3(u, "camera.up")?,
        None => Vec3::new(0.0, 1.0, 0.0),
    };
    let fov_y = get("fovy")?
        .as_f64()
        .ok_or_else(|| SceneError::field("camera.fovy", "expected a number"))?;
    let aspect = match obj.get("aspect") {
        Some(a) => a
            .as_f64()
            .ok_or_else(|| SceneError::field("camera.aspect", "expected a number"))?,
        None => 1.0,
    };
    let cam = CameraSpec {
        position,
        view_dir,
        up,
        fov_y,
        aspect,
    };
    cam.validate()
        .map_err(|e| SceneError::field("camera", e.to_string()))?;
    Ok(cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_uneven_cloud;

    const MINIMAL: &str = r#"{
        "triangles": [[0,0,0, 1,0,0, 0,1,0]],
        "materialOfPrim": [0],
        "materials": [{"albedo": [0.8, 0.2, 0.2], "mirror": [0, 0, 0]}],
        "lights": [{"kind": "directional", "direction": [0, 0, -1], "intensity": [1, 1, 1]}],
        "background": [0.1, 0.1, 0.1]
    }"#;

    #[test]
    fn minimal_document() {
        let s = parse_scene(MINIMAL.as_bytes()).unwrap();
        assert_eq!(
            (s.triangles.len(), s.materials.len(), s.lights.len()),
            (1, 1, 1)
        );
        assert_eq!(s.triangles[0].global_id, 0);
        assert_eq!(s.background, Vec3::splat(0.1));
    }

    #[test]
    fn material_index_out_of_range() {
        let doc = r#"{
            "triangles": [[0,0,0, 1,0,0, 0,1,0]],
            "materialOfPrim": [5],
            "materials": [{"albedo": [1,1,1]}, {"albedo": [0,0,0]}],
            "background": [0,0,0]
        }"#;
        let err = parse_scene(doc.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("material index out of range"), "{err}");
        assert!(err.contains("materialOfPrim[0]"), "{err}");
    }

    #[test]
    fn errors_name_the_field() {
        let doc = MINIMAL.replace("[0,0,0, 1,0,0, 0,1,0]", "[0,0,0, 1,0,0]");
        let err = parse_scene(doc.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("triangles[0]"), "{err}");

        let doc = MINIMAL.replace("\"directional\"", "\"spot\"");
        let err = parse_scene(doc.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("lights[0].kind"), "{err}");

        let doc = MINIMAL.replace("\"background\"", "\"backdrop\"");
        let err = parse_scene(doc.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("backdrop"), "{err}");

        assert!(matches!(
            parse_scene(b"{not json"),
            Err(SceneError::Syntax(_))
        ));
    }

    #[test]
    fn bad_rank_assignment_length() {
        let doc = MINIMAL.replace("\"background\"", "\"rankOfPrim\": [0, 1], \"background\"");
        let err = parse_scene(doc.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("rankOfPrim"), "{err}");
    }

    #[test]
    fn binary_triangle_reference() {
        let dir = tempfile::tempdir().unwrap();
        let tris = generate_uneven_cloud(7, 12, 2).triangles;
        write_binary_triangles(&dir.path().join("tris.bin"), &tris).unwrap();
        let doc = r#"{
            "triangles": {"binary": "tris.bin", "count": 12},
            "materials": [{"albedo": [0.5, 0.5, 0.5]}],
            "background": [0, 0, 0]
        }"#;
        std::fs::write(dir.path().join("scene.json"), doc).unwrap();
        let s = parse_scene_file(&dir.path().join("scene.json")).unwrap();
        assert_eq!(s.triangles, tris);
        assert_eq!(s.material_of_prim, vec![0; 12]);

        let bad = doc.replace("\"count\": 12", "\"count\": 13");
        std::fs::write(dir.path().join("bad.json"), bad).unwrap();
        let err = parse_scene_file(&dir.path().join("bad.json"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("triangles.count"), "{err}");
    }

    #[test]
    fn round_trip_generated_scene() {
        let mut s = generate_uneven_cloud(3, 250, 3);
        s.camera = Some(s.default_camera(1.5));
        s.triangles.swap(0, 5);
        let back = parse_scene(&serialize_scene(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn duplicate_global_ids_rejected() {
        let doc = r#"{
            "triangles": [[0,0,0, 1,0,0, 0,1,0], [0,0,1, 1,0,1, 0,1,1]],
            "globalIds": [4, 4],
            "materials": [{"albedo": [1,1,1]}],
            "background": [0,0,0]
        }"#;
        let err = parse_scene(doc.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("globalIds[1]"), "{err}");
    }
}
