use std::thread;

use dprt_core::api::{ApiError, Device, Mapped, ObjectKind, Value};
use dprt_core::engine::{render_scene, RenderOptions};
use dprt_core::geom::{Triangle, Vec3};
use dprt_core::scene::{
    generate_uneven_cloud, partition_scene, LightKind, PartitionStrategy, SceneDesc,
};
use dprt_core::transport::{init_ranks, wire::MsgKind, Backend, TransportConfig};

fn run<T: Send>(ranks: usize, f: impl Fn(&mut Device) -> T + Sync) -> Vec<T> {
    let eps = init_ranks(ranks, Backend::Inproc, &TransportConfig::default()).unwrap();
    thread::scope(|s| {
        let f = &f;
        let hs: Vec<_> = eps
            .into_iter()
            .map(|ep| s.spawn(move || f(&mut Device::new(ep))))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

struct Handles {
    world: dprt_core::scene::Handle,
    camera: dprt_core::scene::Handle,
    frame: dprt_core::scene::Handle,
}

/// Builds this rank's share of `scene` (partitioned round-robin over `ranks`).
fn build(dev: &mut Device, scene: &SceneDesc, ranks: usize, w: u32, h: u32) -> Handles {
    let part = partition_scene(scene, ranks, PartitionStrategy::RoundRobin).unwrap();
    let mut instances = Vec::new();
    for (mi, mat) in scene.materials.iter().enumerate() {
        let tris: Vec<Triangle> = part.local_sets[dev.rank()]
            .iter()
            .filter(|&&i| scene.material_of_prim[i as usize] as usize == mi)
            .map(|&i| scene.triangles[i as usize])
            .collect();
        let surf = dev.create(ObjectKind::Surface);
        dev.set_param(surf, "triangles", tris).unwrap();
        dev.set_param(surf, "albedo", mat.albedo).unwrap();
        dev.set_param(surf, "mirror", mat.mirror).unwrap();
        dev.commit(surf).unwrap();
        let group = dev.create(ObjectKind::Group);
        dev.set_param(group, "surfaces", vec![surf]).unwrap();
        dev.commit(group).unwrap();
        let inst = dev.create(ObjectKind::Instance);
        dev.set_param(inst, "group", group).unwrap();
        dev.commit(inst).unwrap();
        instances.push(inst);
        for o in [surf, group] {
            dev.release(o).unwrap();
        }
    }
    let mut lights = Vec::new();
    for l in &scene.lights {
        let lh = dev.create(ObjectKind::Light);
        match l.kind {
            LightKind::Point { position } => {
                dev.set_param(lh, "type", "point").unwrap();
                dev.set_param(lh, "position", position).unwrap();
            }
            LightKind::Directional { direction } => {
                dev.set_param(lh, "type", "directional").unwrap();
                dev.set_param(lh, "direction", direction).unwrap();
            }
        }
        dev.set_param(lh, "intensity", l.intensity).unwrap();
        dev.commit(lh).unwrap();
        lights.push(lh);
    }
    let world = dev.create(ObjectKind::World);
    dev.set_param(world, "instances", instances.clone())
        .unwrap();
    dev.set_param(world, "lights", lights).unwrap();
    dev.commit(world).unwrap();
    for o in instances {
        dev.release(o).unwrap();
    }

    let cam = scene.default_camera(w as f64 / h as f64);
    let camera = dev.create(ObjectKind::Camera);
    dev.set_param(camera, "position", cam.position).unwrap();
    dev.set_param(camera, "direction", cam.view_dir).unwrap();
    dev.set_param(camera, "up", cam.up).unwrap();
    dev.set_param(camera, "fovY", cam.fov_y).unwrap();
    dev.commit(camera).unwrap();

    let renderer = dev.create(ObjectKind::Renderer);
    dev.set_param(renderer, "background", scene.background)
        .unwrap();
    dev.set_param(renderer, "ambient", scene.ambient).unwrap();
    dev.set_param(renderer, "maxDepth", 1).unwrap();
    dev.commit(renderer).unwrap();

    let frame = dev.create(ObjectKind::Frame);
    dev.set_param(frame, "world", world).unwrap();
    dev.set_param(frame, "camera", camera).unwrap();
    dev.set_param(frame, "renderer", renderer).unwrap();
    dev.set_param(frame, "width", w).unwrap();
    dev.set_param(frame, "height", h).unwrap();
    dev.commit(frame).unwrap();
    Handles {
        world,
        camera,
        frame,
    }
}

fn pixels(dev: &Device, frame: dprt_core::scene::Handle) -> Option<(Vec<u8>, u64)> {
    match dev.map_frame(frame).unwrap() {
        Mapped::Root(r) => Some((r.pixels.clone(), r.sequence)),
        Mapped::NotRoot => None,
    }
}

#[test]
fn collective_render_matches_engine_render() {
    let scene = generate_uneven_cloud(6, 700, 3);
    let (w, h) = (40, 32);
    let cam = scene.default_camera(w as f64 / h as f64);
    let direct = render_scene(
        &scene,
        1,
        Backend::Inproc,
        PartitionStrategy::RoundRobin,
        &TransportConfig::default(),
        &cam,
        w,
        h,
        &RenderOptions::default(),
    )
    .unwrap();
    let expected = direct[0].image.as_ref().unwrap().to_rgb8().data;
    for ranks in [1, 3] {
        let out = run(ranks, |dev| {
            let hs = build(dev, &scene, ranks, w, h);
            dev.render_frame_collective(hs.frame).unwrap();
            dev.wait_frame(hs.frame).unwrap();
            pixels(dev, hs.frame)
        });
        let (px, seq) = out[0].clone().unwrap();
        assert_eq!(px.len(), (w * h * 3) as usize);
        assert_eq!(px, expected, "R={ranks}");
        assert_eq!(seq, 1);
        assert!(out[1..].iter().all(Option::is_none));
    }
}

#[test]
fn staging_needs_commit_and_renders_are_deterministic() {
    let scene = generate_uneven_cloud(2, 300, 2);
    let out = run(2, |dev| {
        let hs = build(dev, &scene, 2, 24, 24);
        dev.render_frame_collective(hs.frame).unwrap();
        let first = pixels(dev, hs.frame);
        dev.set_param(hs.camera, "fovY", 20).unwrap();
        dev.render_frame_collective(hs.frame).unwrap();
        let staged_only = pixels(dev, hs.frame);
        dev.commit(hs.camera).unwrap();
        dev.render_frame_collective(hs.frame).unwrap();
        let committed = pixels(dev, hs.frame);
        (first, staged_only, committed)
    });
    let (first, staged, committed) = out[0].clone();
    let (first, staged, committed) = (first.unwrap(), staged.unwrap(), committed.unwrap());
    assert_eq!(first.0, staged.0);
    assert!(staged.1 > first.1);
    assert_ne!(committed.0, staged.0);
    assert!(committed.1 > staged.1);
}

#[test]
fn create_set_commit_send_nothing() {
    let scene = generate_uneven_cloud(3, 200, 2);
    run(3, |dev| {
        let traffic = dev.endpoint().traffic();
        let before = traffic.total();
        let hs = build(dev, &scene, 3, 16, 16);
        if dev.rank() == 1 {
            let surf = dev.create(ObjectKind::Surface);
            let t = Triangle::new(
                Vec3::ZERO,
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                99_999,
            );
            dev.set_param(surf, "triangles", vec![t]).unwrap();
            dev.commit(surf).unwrap();
            let group = dev.create(ObjectKind::Group);
            dev.set_param(group, "surfaces", vec![surf]).unwrap();
            dev.commit(group).unwrap();
            let inst = dev.create(ObjectKind::Instance);
            dev.set_param(inst, "group", group).unwrap();
            dev.commit(inst).unwrap();
            dev.set_param(hs.world, "instances", Value::Objects(vec![inst]))
                .unwrap();
            dev.commit(hs.world).unwrap();
        }
        assert_eq!(traffic.total(), before);
        // the changed world still renders collectively
        dev.render_frame_collective(hs.frame).unwrap();
    });
}

#[test]
fn parent_keeps_child_alive() {
    let eps = init_ranks(1, Backend::Inproc, &TransportConfig::default()).unwrap();
    let mut dev = Device::new(eps.into_iter().next().unwrap());
    let camera = dev.create(ObjectKind::Camera);
    assert_eq!(dev.refcount(camera).unwrap(), 1);
    let frame = dev.create(ObjectKind::Frame);
    dev.set_param(frame, "camera", camera).unwrap();
    dev.commit(frame).unwrap_err();
    assert_eq!(dev.refcount(camera).unwrap(), 2);
    assert_eq!(dev.release(camera).unwrap(), 1);
    assert!(dev.is_alive(camera));
    dev.release(frame).unwrap();
    assert!(!dev.is_alive(camera));
    assert_eq!(dev.live_objects(), 0);
    assert!(matches!(
        dev.set_param(camera, "fovY", 30.0),
        Err(ApiError::Ref(_))
    ));
}

#[test]
fn parameter_and_nesting_errors() {
    let eps = init_ranks(1, Backend::Inproc, &TransportConfig::default()).unwrap();
    let mut dev = Device::new(eps.into_iter().next().unwrap());
    let camera = dev.create(ObjectKind::Camera);
    let err = dev.set_param(camera, "fov", 45.0).unwrap_err();
    assert_eq!(
        err.to_string(),
        "unknown parameter \"fov\" for Camera (valid: aspect, direction, fovY, position, up)"
    );
    assert!(matches!(
        dev.set_param(camera, "up", 1.0),
        Err(ApiError::ParamType { .. })
    ));

    let frame = dev.create(ObjectKind::Frame);
    let err = dev.commit(frame).unwrap_err();
    assert!(err.to_string().contains("has no world"), "{err}");

    let inst = dev.create(ObjectKind::Instance);
    let inner = dev.create(ObjectKind::Instance);
    let err = dev.set_param(inst, "group", inner).unwrap_err();
    assert!(err.to_string().contains("must reference Group"), "{err}");
    let group = dev.create(ObjectKind::Group);
    assert!(dev.set_param(group, "surfaces", vec![inst]).is_err());

    assert!(matches!(dev.map_frame(frame), Err(ApiError::Usage(_))));
    assert!(dev.wait_frame(frame).is_err());
}

#[test]
fn uncommitted_references_are_rejected() {
    let eps = init_ranks(1, Backend::Inproc, &TransportConfig::default()).unwrap();
    let mut dev = Device::new(eps.into_iter().next().unwrap());
    let world = dev.create(ObjectKind::World);
    let camera = dev.create(ObjectKind::Camera);
    let renderer = dev.create(ObjectKind::Renderer);
    dev.commit(world).unwrap();
    dev.commit(renderer).unwrap();
    let frame = dev.create(ObjectKind::Frame);
    dev.set_param(frame, "world", world).unwrap();
    dev.set_param(frame, "camera", camera).unwrap();
    dev.set_param(frame, "renderer", renderer).unwrap();
    assert!(matches!(
        dev.render_frame_collective(frame),
        Err(ApiError::Validation(_))
    ));
    dev.commit(frame).unwrap();
    let err = dev.render_frame_collective(frame).unwrap_err();
    assert!(err.to_string().contains("uncommitted camera"), "{err}");
    dev.commit(camera).unwrap();
    dev.render_frame_collective(frame).unwrap();
}

#[test]
fn divergent_fov_is_a_contract_error_everywhere() {
    let scene = generate_uneven_cloud(4, 300, 2);
    let out = run(3, |dev| {
        let hs = build(dev, &scene, 3, 16, 16);
        if dev.rank() == 1 {
            dev.set_param(hs.camera, "fovY", 75.0).unwrap();
            dev.commit(hs.camera).unwrap();
        }
        let rays = dev.endpoint().traffic();
        let err = dev.render_frame_collective(hs.frame).unwrap_err();
        (
            err.is_contract_violation(),
            err.to_string(),
            rays.kind(MsgKind::RayBatch).messages,
        )
    });
    for (contract, msg, ray_msgs) in out {
        assert!(contract, "{msg}");
        assert!(msg.contains("[1]"), "{msg}");
        assert_eq!(ray_msgs, 0);
    }
}
