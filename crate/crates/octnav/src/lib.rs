//! Host side of the navigation pipeline: volume and image files, the
//! closed-loop pipeline, test scenarios, and the HTTP API.

pub mod dto;
pub mod io;
pub mod pipeline;
pub mod scenarios;
pub mod server;
