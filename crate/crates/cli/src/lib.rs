//! Front end of the vertebral QCT pipeline: the `vqct` command and its
//! serve-mode HTTP API.

pub mod render;
pub mod server;
