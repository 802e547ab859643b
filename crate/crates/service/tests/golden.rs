//! Byte-exact fixtures shared with client implementations.

use dprt_core::geom::Vec3;
use dprt_service::{
    decode_message, encode_message, CameraUpdate, ControlMessage, FrameMessage, Message,
    PixelFormat,
};

fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn check(name: &str, msg: Message) {
    let bytes = fixture(name);
    assert_eq!(encode_message(&msg), bytes, "{name}: encoder drifted");
    let (decoded, used) = decode_message(&bytes).unwrap();
    assert_eq!(used, bytes.len());
    assert_eq!(decoded, msg);
}

#[test]
fn camera_update_fixture() {
    check(
        "camera_update.bin",
        Message::Camera(CameraUpdate {
            position: Vec3::new(0.5, 0.25, 3.0),
            view_dir: Vec3::new(0.0, 0.0, -1.0),
            up: Vec3::new(0.0, 1.0, 0.0),
            fov_y: 45.0,
            width: 64,
            height: 48,
        }),
    );
}

#[test]
fn frame_fixture() {
    check(
        "frame_2x1.bin",
        Message::Frame(FrameMessage {
            width: 2,
            height: 1,
            format: PixelFormat::Rgb8,
            sequence: 1,
            render_millis: 12,
            pixels: vec![255, 0, 0, 0, 128, 255],
        }),
    );
}

#[test]
fn hello_fixture() {
    check(
        "control_hello.bin",
        Message::Control(ControlMessage::Hello {
            ranks: 4,
            diagonal: 1.5,
            center: Vec3::new(0.5, 0.5, 0.5),
        }),
    );
}
