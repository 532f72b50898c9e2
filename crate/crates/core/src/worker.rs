//! The worker: the untrusted party that performs encrypted matrix-vector
//! products.
//!
//! A worker holds only the client's *public* key and an entrywise-encrypted
//! matrix, so nothing on this side of the protocol can decrypt — the type
//! system enforces it, since [`WorkerState`] is built from a
//! [`PublicKey`] alone. For a query vector `z` the honest worker computes
//!
//! ```text
//! response[i] = ∏_j Enc(A[i,j])^(z_j)   (mod n²)
//! ```
//!
//! which by the additive homomorphism is an encryption of `Σ_j A[i,j]·z_j`,
//! the i-th component of `A·z`, without the worker learning anything about
//! the matrix or the query's unmasked content.
//!
//! [`AdversaryPolicy`] selects honest behavior or one of three cheating
//! strategies used to exercise the client's verification: small additive
//! tampering, arbitrary garbage, and lazy replay of an old answer.

use std::net::TcpListener;
use std::time::Duration;

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_traits::{FromPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::paillier::{Ciphertext, PublicKey};
use crate::transport::{
    Channel, ErrorCode, ProtocolMessage, TcpChannel, TransportError,
};

/// How long a serving loop waits for the next message before giving up on
/// the session.
pub const SESSION_IDLE_TIMEOUT: Duration = Duration::from_secs(120);

/// What the worker does with each matrix-vector request.
#[derive(Debug, Clone, PartialEq)]
pub enum AdversaryPolicy {
    /// Compute the product faithfully.
    Honest,
    /// With probability `rho` per round, add a fixed-point perturbation of
    /// magnitude in `[delta/2, delta]` (random sign) to a random nonempty
    /// subset of components. `frac_bits` must match the client codec for the
    /// perturbation to mean `delta` in real units.
    Tamper { rho: f64, delta: f64, frac_bits: u32 },
    /// Replace every component with an encryption of a uniformly random
    /// plaintext: well-formed ciphertexts of garbage.
    Arbitrary,
    /// Answer round 0 honestly, then replay that response forever (with the
    /// current round index, so staleness is not detectable by index alone).
    Lazy,
}

/// Per-session worker state.
pub struct WorkerState {
    pk: PublicKey,
    policy: AdversaryPolicy,
    rng: ChaCha20Rng,
    session_id: Option<String>,
    dim: usize,
    enc_matrix: Option<Vec<Vec<Ciphertext>>>,
    last_response: Option<Vec<BigUint>>,
    rounds_served: u64,
}

/// Summary returned when a serving loop ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionStats {
    /// Session id bound by the first message, if any arrived.
    pub session_id: Option<String>,
    /// Matrix-vector rounds answered.
    pub rounds: u64,
}

impl WorkerState {
    pub fn new(pk: PublicKey, policy: AdversaryPolicy) -> Self {
        Self::with_rng(pk, policy, ChaCha20Rng::from_entropy())
    }

    /// Deterministic worker, for reproducible adversarial runs.
    pub fn with_seed(pk: PublicKey, policy: AdversaryPolicy, seed: u64) -> Self {
        Self::with_rng(pk, policy, ChaCha20Rng::seed_from_u64(seed))
    }

    fn with_rng(pk: PublicKey, policy: AdversaryPolicy, rng: ChaCha20Rng) -> Self {
        WorkerState {
            pk,
            policy,
            rng,
            session_id: None,
            dim: 0,
            enc_matrix: None,
            last_response: None,
            rounds_served: 0,
        }
    }

    pub fn rounds_served(&self) -> u64 {
        self.rounds_served
    }

    pub fn session_id(&self) -> Option<&str> {
        self.session_id.as_deref()
    }

    /// Handles one message, producing the reply to send back. Protocol
    /// violations come back as [`ProtocolMessage::Error`] replies rather
    /// than Rust errors: the peer is remote.
    pub fn handle(&mut self, msg: &ProtocolMessage) -> ProtocolMessage {
        let sid = msg.session_id().to_string();
        if let Some(bound) = &self.session_id {
            if *bound != sid {
                return error_reply(sid, ErrorCode::WrongSession, "unknown session id");
            }
        } else {
            self.session_id = Some(sid.clone());
        }
        match msg {
            ProtocolMessage::StoreMatrix { dim, enc_matrix, .. } => {
                self.store_matrix(sid, *dim, enc_matrix)
            }
            ProtocolMessage::MatVecRequest { round_index, query, .. } => {
                self.encrypted_matvec(sid, *round_index, query)
            }
            _ => error_reply(
                sid,
                ErrorCode::BadMessage,
                &format!("workers do not accept {} messages", msg.kind_name()),
            ),
        }
    }

    fn store_matrix(
        &mut self,
        sid: String,
        dim: usize,
        grid: &[Vec<BigUint>],
    ) -> ProtocolMessage {
        if self.enc_matrix.is_some() {
            return error_reply(
                sid,
                ErrorCode::MatrixAlreadyStored,
                "a matrix is already stored for this session",
            );
        }
        if dim == 0 || grid.len() != dim || grid.iter().any(|row| row.len() != dim) {
            return error_reply(
                sid,
                ErrorCode::BadMessage,
                &format!("enc_matrix is not a {dim}×{dim} grid"),
            );
        }
        let mut rows = Vec::with_capacity(dim);
        for (i, row) in grid.iter().enumerate() {
            let mut cells = Vec::with_capacity(dim);
            for (j, value) in row.iter().enumerate() {
                match Ciphertext::from_value(&self.pk, value.clone()) {
                    Ok(ct) => cells.push(ct),
                    Err(e) => {
                        return error_reply(
                            sid,
                            ErrorCode::ValueOutOfRange,
                            &format!("enc_matrix[{i}][{j}]: {e}"),
                        )
                    }
                }
            }
            rows.push(cells);
        }
        self.dim = dim;
        self.enc_matrix = Some(rows);
        ProtocolMessage::Ack { session_id: sid }
    }

    fn encrypted_matvec(
        &mut self,
        sid: String,
        round_index: u64,
        query: &[BigUint],
    ) -> ProtocolMessage {
        let Some(enc_matrix) = &self.enc_matrix else {
            return error_reply(
                sid,
                ErrorCode::NoMatrixStored,
                "store a matrix before requesting products",
            );
        };
        if query.len() != self.dim {
            return error_reply(
                sid,
                ErrorCode::BadMessage,
                &format!("query has {} components, matrix is {}×{}", query.len(), self.dim, self.dim),
            );
        }
        if let Some(bad) = query.iter().position(|z| z >= self.pk.n()) {
            return error_reply(
                sid,
                ErrorCode::ValueOutOfRange,
                &format!("query[{bad}] is not a canonical residue mod n"),
            );
        }

        // Lazy replay skips the computation entirely: the point of that
        // policy is a worker that saves work, not one that recomputes.
        if matches!(self.policy, AdversaryPolicy::Lazy) {
            if let Some(prev) = &self.last_response {
                self.rounds_served += 1;
                return ProtocolMessage::MatVecResponse {
                    session_id: sid,
                    round_index,
                    enc_product: prev.clone(),
                };
            }
        }

        // Honest product: fold each row deterministically, ascending j.
        let product: Result<Vec<Ciphertext>, _> = enc_matrix
            .iter()
            .map(|row| {
                let mut acc = self.pk.scalar_mul(&row[0], &query[0])?;
                for (cell, z) in row.iter().zip(query).skip(1) {
                    let term = self.pk.scalar_mul(cell, z)?;
                    acc = self.pk.add_cipher(&acc, &term)?;
                }
                Ok::<_, crate::paillier::PaillierError>(acc)
            })
            .collect();
        let mut product = match product {
            Ok(p) => p,
            // Unreachable after the validations above, but a worker must
            // never panic on remote input.
            Err(e) => return error_reply(sid, ErrorCode::ValueOutOfRange, &e.to_string()),
        };

        match self.policy.clone() {
            AdversaryPolicy::Honest => {}
            AdversaryPolicy::Lazy => {
                self.last_response = Some(product.iter().map(|c| c.value().clone()).collect());
            }
            AdversaryPolicy::Arbitrary => {
                for cell in product.iter_mut() {
                    let garbage = self.rng.gen_biguint_below(self.pk.n());
                    *cell = self
                        .pk
                        .encrypt(&garbage, &mut self.rng)
                        .expect("plaintext sampled below n");
                }
            }
            AdversaryPolicy::Tamper { rho, delta, frac_bits } => {
                if self.rng.gen::<f64>() < rho {
                    let dim = product.len();
                    let mut marked: Vec<usize> =
                        (0..dim).filter(|_| self.rng.gen::<bool>()).collect();
                    if marked.is_empty() {
                        marked.push(self.rng.gen_range(0..dim));
                    }
                    for i in marked {
                        let magnitude = self.rng.gen_range(delta / 2.0..=delta);
                        let sign = if self.rng.gen::<bool>() { 1.0 } else { -1.0 };
                        // Perturb at scale level 2, where the products live.
                        let scaled = (sign * magnitude
                            * (2.0f64).powi(2 * frac_bits as i32))
                        .round();
                        let perturbation =
                            BigInt::from_f64(scaled).expect("finite f64 converts exactly");
                        if perturbation.is_zero() {
                            continue;
                        }
                        product[i] = self
                            .pk
                            .add_plain(&product[i], &perturbation)
                            .expect("fingerprints match by construction");
                    }
                }
            }
        }

        self.rounds_served += 1;
        ProtocolMessage::MatVecResponse {
            session_id: sid,
            round_index,
            enc_product: product.into_iter().map(|c| c.value().clone()).collect(),
        }
    }
}

fn error_reply(session_id: String, code: ErrorCode, message: &str) -> ProtocolMessage {
    ProtocolMessage::Error {
        session_id,
        code,
        message: message.to_string(),
    }
}

/// Serves one session over `channel` until the peer disconnects. Returns the
/// session summary; transport problems other than a clean close are errors.
pub fn run_session<C: Channel>(
    channel: &mut C,
    state: &mut WorkerState,
    idle_timeout: Duration,
) -> Result<SessionStats, TransportError> {
    loop {
        let msg = match channel.receive(idle_timeout) {
            Ok(m) => m,
            Err(TransportError::Closed) => break,
            Err(e) => return Err(e),
        };
        let reply = state.handle(&msg);
        channel.send(&reply)?;
    }
    Ok(SessionStats {
        session_id: state.session_id.clone(),
        rounds: state.rounds_served,
    })
}

/// Spawns a worker thread serving one in-process session and returns the
/// client end of its channel. The thread exits when the client end drops.
pub fn spawn_in_process(
    pk: PublicKey,
    policy: AdversaryPolicy,
    seed: u64,
) -> (
    crate::transport::InProcessChannel,
    std::thread::JoinHandle<Result<SessionStats, TransportError>>,
) {
    let (client_end, mut worker_end) = crate::transport::in_process_pair();
    let handle = std::thread::spawn(move || {
        let mut state = WorkerState::with_seed(pk, policy, seed);
        run_session(&mut worker_end, &mut state, SESSION_IDLE_TIMEOUT)
    });
    (client_end, handle)
}

/// Accepts TCP connections and serves each as an independent session on its
/// own thread. Stops accepting after `max_sessions` connections when given
/// (then drains the active ones); otherwise loops until the listener fails.
/// Logs one line per finished session on stderr when `log` is set.
pub fn serve_tcp(
    listener: TcpListener,
    pk: PublicKey,
    policy: AdversaryPolicy,
    max_sessions: Option<u64>,
    log: bool,
) -> std::io::Result<()> {
    let mut accepted = 0u64;
    let mut handles = Vec::new();
    for conn in listener.incoming() {
        let stream = conn?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "unknown peer".into());
        let pk = pk.clone();
        let policy = policy.clone();
        handles.push(std::thread::spawn(move || {
            let mut channel = TcpChannel::from_stream(stream);
            let mut state = WorkerState::new(pk, policy);
            match run_session(&mut channel, &mut state, SESSION_IDLE_TIMEOUT) {
                Ok(stats) => {
                    if log {
                        eprintln!(
                            "session {} ({peer}): {} rounds served",
                            stats.session_id.as_deref().unwrap_or("(no messages)"),
                            stats.rounds
                        );
                    }
                }
                Err(e) => {
                    if log {
                        eprintln!("session ({peer}) aborted: {e}");
                    }
                }
            }
        }));
        accepted += 1;
        if max_sessions.is_some_and(|max| accepted >= max) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}
