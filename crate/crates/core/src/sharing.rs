//! Two-out-of-two additive secret sharing over the scalar field.
//!
//! The master secret `Φ = k_C + k_D` is never assembled. Each device
//! additionally splits its own share into a sub-share for the peer device and
//! a sub-share for the cloud vault, so that either device can be rebuilt from
//! the other two parties. Shares are refreshed by adding a sharing of zero.

use core::fmt;

use rand_core::{CryptoRng, RngCore};
use zeroize::Zeroize;

use crate::error::Result;
use crate::group::{random_scalar, PrimeGroup};

/// Which device a share belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Primary,
    Secondary,
}

impl Role {
    pub fn peer(self) -> Role {
        match self {
            Role::Primary => Role::Secondary,
            Role::Secondary => Role::Primary,
        }
    }

    pub fn as_byte(self) -> u8 {
        match self {
            Role::Primary => 1,
            Role::Secondary => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Role> {
        match b {
            1 => Some(Role::Primary),
            2 => Some(Role::Secondary),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Primary => "primary",
            Role::Secondary => "secondary",
        })
    }
}

/// Splits `v` into `(v0, v1)` with `v0` uniform and `v0 + v1 = v`.
pub fn share<G: PrimeGroup, R: RngCore + CryptoRng + ?Sized>(
    v: G::Scalar,
    rng: &mut R,
) -> Result<(G::Scalar, G::Scalar)> {
    let v0 = random_scalar::<G, R>(rng)?;
    Ok(share_with::<G>(v, v0))
}

/// Completes a sharing of `v` whose first half is the caller-chosen `v0`.
pub fn share_with<G: PrimeGroup>(v: G::Scalar, v0: G::Scalar) -> (G::Scalar, G::Scalar) {
    (v0, v - v0)
}

pub fn reconstruct<G: PrimeGroup>(v0: G::Scalar, v1: G::Scalar) -> G::Scalar {
    v0 + v1
}

/// Splits a device's own share into `(sub_peer, sub_cloud)`.
pub fn split_own_share<G: PrimeGroup, R: RngCore + CryptoRng + ?Sized>(
    own: G::Scalar,
    rng: &mut R,
) -> Result<(G::Scalar, G::Scalar)> {
    share::<G, R>(own, rng)
}

/// Refresh step run by the initiating device: draws `z`, returns the updated
/// own share `own + z` and the delta `-z` for the peer.
pub fn refresh_pair<G: PrimeGroup, R: RngCore + CryptoRng + ?Sized>(
    own: G::Scalar,
    rng: &mut R,
) -> Result<(G::Scalar, G::Scalar)> {
    let z = random_scalar::<G, R>(rng)?;
    Ok(refresh_pair_with::<G>(own, z))
}

pub fn refresh_pair_with<G: PrimeGroup>(own: G::Scalar, z: G::Scalar) -> (G::Scalar, G::Scalar) {
    (own + z, -z)
}

/// Peer side of a refresh.
pub fn apply_delta<G: PrimeGroup>(own: G::Scalar, delta: G::Scalar) -> G::Scalar {
    own + delta
}

/// A device's key share and its two outgoing recovery sub-shares.
///
/// Invariant: `sub_share_peer + sub_share_cloud == own_share`.
#[derive(Clone)]
pub struct ShareSet<G: PrimeGroup> {
    pub role: Role,
    pub own_share: G::Scalar,
    /// `k_C^D` on the primary, `k_D^C` on the secondary.
    pub sub_share_peer: G::Scalar,
    /// `k_C^S` on the primary, `k_D^S` on the secondary.
    pub sub_share_cloud: G::Scalar,
}

impl<G: PrimeGroup> ShareSet<G> {
    /// Fresh random share plus its split, as done at enrollment.
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(role: Role, rng: &mut R) -> Result<Self> {
        let own = random_scalar::<G, R>(rng)?;
        Self::from_own(role, own, rng)
    }

    /// Splits an existing share; used after refresh, where no new share is drawn.
    pub fn from_own<R: RngCore + CryptoRng + ?Sized>(
        role: Role,
        own_share: G::Scalar,
        rng: &mut R,
    ) -> Result<Self> {
        let (sub_share_peer, sub_share_cloud) = split_own_share::<G, R>(own_share, rng)?;
        Ok(ShareSet {
            role,
            own_share,
            sub_share_peer,
            sub_share_cloud,
        })
    }

    pub fn is_consistent(&self) -> bool {
        reconstruct::<G>(self.sub_share_peer, self.sub_share_cloud) == self.own_share
    }

    /// The public key `own_share · G` the secondary hands to the primary.
    pub fn public_key(&self) -> G::Element {
        self.own_share * G::generator()
    }
}

impl<G: PrimeGroup> fmt::Debug for ShareSet<G> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShareSet")
            .field("role", &self.role)
            .finish_non_exhaustive()
    }
}

impl<G: PrimeGroup> Zeroize for ShareSet<G> {
    fn zeroize(&mut self) {
        self.own_share.zeroize();
        self.sub_share_peer.zeroize();
        self.sub_share_cloud.zeroize();
    }
}

impl<G: PrimeGroup> Drop for ShareSet<G> {
    fn drop(&mut self) {
        self.zeroize();
    }
}

/// What the primary knows about the master key: the secondary's public key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MasterKeyView<G: PrimeGroup> {
    pub pk: G::Element,
}

impl<G: PrimeGroup> MasterKeyView<G> {
    pub fn from_secondary_share(k_d: G::Scalar) -> Self {
        MasterKeyView {
            pk: k_d * G::generator(),
        }
    }

    /// Public key after the secondary applied `delta`.
    pub fn shifted(&self, delta: G::Scalar) -> Self {
        MasterKeyView {
            pk: self.pk + delta * G::generator(),
        }
    }
}
