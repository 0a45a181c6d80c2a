//! Quantile-filtered imitation learning for offline policy improvement.
//!
//! The numeric building blocks ([`numerics`], [`distributions`],
//! [`quantile`], [`oracle`]) are generic over the scalar type; learned objects
//! and the experiment harness use `f64`. The aliases below fix the scalar for
//! the common case.

pub mod dataset;
pub mod distributions;
pub mod envs;
pub mod numerics;
pub mod oampi;
pub mod operators;
pub mod oracle;
pub mod policy;
pub mod quantile;
pub mod scalar;

pub use scalar::{OrderedField, Scalar};

pub type Mlp = numerics::MlpParams<f64>;
pub type MlpGrads = numerics::MlpGrads<f64>;
pub type Adam = numerics::OptState<f64>;
pub type TruncNormal = distributions::TruncNormalHead<f64>;
pub type Categorical = distributions::CategoricalHead<f64>;
pub type Head = distributions::ActionHead<f64>;
pub type Discrete = oracle::DiscreteDist<f64>;
pub type ExactDiscrete = oracle::DiscreteDist<num_rational::BigRational>;

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Distribution(#[from] distributions::DistError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Env(#[from] envs::EnvError),
    #[error(transparent)]
    Quantile(#[from] quantile::QuantileError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Train(#[from] operators::TrainError),
    #[error(transparent)]
    Run(#[from] oampi::RunError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
