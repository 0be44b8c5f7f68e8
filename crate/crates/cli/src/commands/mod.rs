pub mod audit;
pub mod fit;
pub mod gen;
pub mod release;
pub mod serve;
pub mod sweep;
