pub mod geometry;
pub mod transform;
pub mod registration;
pub mod cycle_qa;
pub mod association;
pub mod mot_metrics;
pub mod simulate;
pub mod io;
pub mod pipeline;
