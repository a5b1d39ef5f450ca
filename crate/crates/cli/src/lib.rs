//! Config layering and sweep tables behind the `minformer` binary.

pub mod settings;
pub mod sweep;
