//! Verifiable outsourcing of dominant-eigenpair computation.
//!
//! A client holds a dense matrix `A` and wants its dominant eigenvalue and
//! eigenvector, but the per-iteration matrix-vector products are too expensive
//! to run locally. This crate implements a protocol that delegates those
//! products to an untrusted worker without revealing `A` or the iteration
//! vectors:
//!
//! * `A` is encrypted entrywise under the client's Paillier key
//!   ([`paillier`]), after fixed-point encoding ([`encoding`]).
//! * Each power-iteration step sends a masked, optionally scaled query vector;
//!   the worker combines ciphertexts homomorphically to produce an encryption
//!   of the matrix-vector product ([`worker`]).
//! * The client decrypts, strips the mask exactly in the integer domain,
//!   normalizes, and checks convergence ([`client`]).
//! * A final plaintext residual check accepts or rejects the result, so a
//!   cheating worker is caught ([`client::ClientSession::verify`]).
//!
//! [`linalg`] provides the plaintext reference solver used for benchmarks and
//! verification, [`transport`] the framed message layer (in-process and TCP),
//! and [`bench`] the timing harness that compares local vs. outsourced runs.

pub mod bench;
pub mod client;
pub mod encoding;
pub mod hexint;
pub mod linalg;
pub mod paillier;
pub mod transport;
pub mod worker;
