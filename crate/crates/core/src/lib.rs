mod fastexp;
pub mod glmm;
pub mod linalg;
pub mod mcmc;
pub mod metrics;
pub mod model;
pub mod profiling;
pub mod quadrature;
pub mod real;
pub mod simulate;
pub mod streams;

pub use real::Real;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type PatientRecord64 = model::PatientRecord<f64>;
pub type PatientRecord32 = model::PatientRecord<f32>;
pub type Dataset64 = model::Dataset<f64>;
pub type Dataset32 = model::Dataset<f32>;
pub type ModelState64 = model::ModelState<f64>;
pub type ModelState32 = model::ModelState<f32>;
pub type Hazards64 = metrics::Hazards<f64>;
pub type Hazards32 = metrics::Hazards<f32>;
pub type RatioSamples64 = metrics::RatioSamples<f64>;
pub type RatioSamples32 = metrics::RatioSamples<f32>;
