pub mod bench;
pub mod encoding;
pub mod error;
pub mod maxvol;
pub mod potential;
pub mod protes;
pub mod refine;
pub mod tt;
pub mod ttopt;
pub mod xyz;

pub use encoding::{Configuration, EncodingScheme, GridAxis, Variant};
pub use error::{Error, Result};
pub use potential::{LennardJones, LjParams, PotentialModel};
pub use tt::{Core, LogProb, TtTensor};
