//! Object-goal navigation on small procedurally generated grid worlds:
//! label taxonomy, scene generation, a ray-cast simulator, a geodesic
//! expert, a recurrent policy with behavior-cloning training, and metrics.

pub mod evaluator;
pub mod fnv;
pub mod oracle;
pub mod policy;
pub mod seed;
pub mod simcore;
pub mod taxonomy;
pub mod trainer;
pub mod trajectory;
pub mod worldgen;

pub use taxonomy::{Granularity, Taxonomy};
pub use worldgen::{Cell, Scene};
