//! CloudNet federation: resource description, graph codec, embedding solver,
//! provider and broker services, and the wire protocol between them.

pub mod clock;
pub mod codec;
pub mod config;
pub mod journal;
pub mod pip;
pub mod rdl;
pub mod scenario;
pub mod solver;
pub mod vnp;
pub mod wire;
