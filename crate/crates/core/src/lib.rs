pub mod dal;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod runner;
pub mod synthdata;
pub mod transport;
