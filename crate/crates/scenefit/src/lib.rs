//! File formats, batch pipeline and command line around `scenefit-core`.

pub mod io;
pub mod pipeline;
