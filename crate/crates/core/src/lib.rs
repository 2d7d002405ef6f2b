pub mod dos;
pub mod empirical;
pub mod ensemble;
pub mod error;
pub mod kl;
pub mod law;
pub mod mle;
pub mod quadrature;

pub use error::{Error, Result};
pub use law::SigmaLaw;
