pub mod geom;
pub mod simworld;
pub mod bevlift;
pub mod features;
pub mod contrast;
pub mod matcher;
pub mod posegraph;
pub mod pipeline;
