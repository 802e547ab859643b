//! Remote render service, thin-client wire protocol and the `dprt` command line.

pub mod cli;
pub mod protocol;
pub mod serve;

pub use cli::run_cli;
pub use protocol::{
    decode_message, decode_stream, encode_message, CameraUpdate, ControlMessage, FrameMessage,
    Message, PixelFormat, ProtocolError, StreamDecoder,
};
pub use serve::{
    run_worker, serve_root, spawn_service, Client, ServeError, ServeOptions, ServeReport,
    ServiceHandle,
};
