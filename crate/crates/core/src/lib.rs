pub mod error;
pub mod expfam;
pub mod fit;
pub mod inference;
pub mod likelihood;
pub mod cli;
pub mod model;
pub mod sim;

pub use error::{Error, Result};
pub use expfam::Family;
pub use fit::{fit_mle, FitOptions, FitResult};
pub use likelihood::{gaussian_marginal_loglik, log_likelihood, QuadratureSpec};
pub use model::{CsvSchema, Dataset, Group, Observation, Parameters};
