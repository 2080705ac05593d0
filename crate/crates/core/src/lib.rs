//! Cryptographic core of two-factor encrypted storage.
//!
//! Two devices each hold an additive share of a master PRF key. Per-file keys
//! are evaluated jointly: the secondary contributes `k_D·H'(x)` with a proof of
//! correct evaluation and the primary finishes with its own share. Seeds come
//! from a commit-reveal coin toss so neither device can bias them.

pub mod coin_toss;
pub mod dleq;
pub mod error;
pub mod file_crypto;
pub mod group;
pub mod sharing;
pub mod tprf;

pub use error::{Error, Result};
pub use file_crypto::{Catalog, CatalogKey, FileTag};
pub use group::{PrimeGroup, Ristretto255, Toy101, Zmod};
pub use sharing::{Role, ShareSet};
pub use tprf::{DerivedKey, PrfInput};
