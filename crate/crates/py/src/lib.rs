//! Python bindings (placeholder while the core library is under construction).

pub use lego_core;
