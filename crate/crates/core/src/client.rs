//! Client side of the outsourced power-iteration protocol.
//!
//! The client owns the Paillier keypair and the plaintext matrix. It encrypts
//! the fixed-point encoding of the matrix once, ships it to the worker, and
//! then drives rounds of encrypted matrix-vector products. Each round the
//! iterate is encoded, masked with a session-fixed random vector `r`, and
//! (optionally) multiplied by a fresh round scalar before being sent in the
//! clear; the worker folds it into the encrypted matrix homomorphically. The
//! client decrypts the reply, undoes the scalar, subtracts the precomputed
//! masking offset in exact integer arithmetic, and decodes the true product.
//! After convergence the candidate eigenpair is checked against the plaintext
//! matrix; only a passing residual yields an `Accepted` verdict.

use std::time::Duration;

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_traits::One;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::encoding::{CodecError, FixedPointCodec, ScaleLevel};
use crate::linalg::{inf_dist, inf_norm_signed, DenseMatrix, EigenResult, LinalgError};
use crate::paillier::{Ciphertext, Keypair, PaillierError};
use crate::transport::{Channel, ProtocolMessage, TranscriptDigest, TransportError};

/// How long `drive` waits for each worker reply before giving up.
pub const RECEIVE_TIMEOUT: Duration = Duration::from_secs(30);

/// Tunable parameters for a protocol session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolConfig {
    /// Convergence threshold on the infinity-norm step between iterates.
    pub eps: f64,
    /// Iteration cap. `None` selects `10 * dim + 1000`.
    pub omega: Option<u64>,
    /// Bit width of each additive mask component. The top bit is always set,
    /// so every component has exactly this bit length.
    pub mask_bits: u32,
    /// Multiply each outgoing query by a fresh random scalar (undone after
    /// decryption via its modular inverse).
    pub use_scaling: bool,
    /// Relative tolerance for the final residual check.
    pub verify_tol: f64,
    /// Modulus size used when the caller asks this config to mint a key.
    pub key_bits: u64,
    /// Fractional bits of the fixed-point encoding.
    pub frac_bits: u32,
    /// When set, refuse masks shorter than 128 bits.
    pub secure_profile: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            eps: 1e-9,
            omega: None,
            mask_bits: 128,
            use_scaling: true,
            verify_tol: 1e-6,
            key_bits: 2048,
            frac_bits: 40,
            secure_profile: true,
        }
    }
}

impl ProtocolConfig {
    /// Checks internal consistency; every constructor of a session calls this.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(ProtocolError::InvalidConfig(
                "eps must be positive and finite".into(),
            ));
        }
        if self.frac_bits == 0 {
            return Err(ProtocolError::InvalidConfig(
                "frac_bits must be at least 1".into(),
            ));
        }
        // Below one fixed-point quantum the step can never settle, so the
        // session would always run into the iteration cap.
        if self.frac_bits < 64 && self.eps < (2.0f64).powi(1 - self.frac_bits as i32) {
            return Err(ProtocolError::InvalidConfig(format!(
                "eps {:e} is below the fixed-point resolution 2^-{}",
                self.eps,
                self.frac_bits - 1
            )));
        }
        if self.omega == Some(0) {
            return Err(ProtocolError::InvalidConfig(
                "omega must be at least 1".into(),
            ));
        }
        if self.mask_bits == 0 {
            return Err(ProtocolError::InvalidConfig(
                "mask_bits must be at least 1".into(),
            ));
        }
        if self.secure_profile && self.mask_bits < 128 {
            return Err(ProtocolError::InvalidConfig(format!(
                "secure profile requires mask_bits >= 128, got {}",
                self.mask_bits
            )));
        }
        if !self.verify_tol.is_finite() || self.verify_tol <= 0.0 {
            return Err(ProtocolError::InvalidConfig(
                "verify_tol must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Iteration cap for a matrix of the given dimension.
    pub fn effective_omega(&self, dim: usize) -> u64 {
        self.omega.unwrap_or(10 * dim as u64 + 1000)
    }
}

/// Where a session currently stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Setup,
    Iterating,
    Converged,
    Accepted,
    Rejected,
    Aborted,
}

/// Why a session was torn down before producing a verified eigenpair.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    #[error("iteration cap exceeded")]
    IterationCapExceeded,
    #[error("malformed worker response: {0}")]
    MalformedResponse(String),
    #[error("transport failure: {0}")]
    Transport(TransportError),
    #[error("worker refused: {0}")]
    WorkerRefused(String),
}

/// Final judgement on a protocol run.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Converged and the candidate eigenpair passed the residual check.
    Accepted,
    /// Converged but the residual check failed: the worker lied.
    Rejected,
    /// The run never reached a verifiable candidate.
    Aborted(AbortReason),
}

/// Everything a completed `drive` call reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOutcome {
    /// Best eigenpair estimate (unverified when the verdict is not Accepted).
    pub result: EigenResult,
    pub verdict: Verdict,
    /// Matrix-vector rounds ingested.
    pub rounds: u64,
    /// SHA-256 over the canonical bytes of every message sent and received.
    pub transcript_digest: String,
}

/// What the client wants to do after ingesting one worker response.
#[derive(Debug, Clone)]
pub enum RoundOutcome {
    /// Send this request and await the next response.
    NextRequest(ProtocolMessage),
    /// The iteration settled; verify the candidate next.
    ConvergedWith(EigenResult),
    /// The session is dead; no further messages should be sent.
    Abort(AbortReason),
}

/// Errors from misusing the client API or from local math, as opposed to
/// anything the worker did (worker misbehaviour surfaces as [`RoundOutcome::Abort`]).
#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("initial vector has length {got}, matrix dimension is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error("plaintext range budget exceeded: {0}")]
    RangeBudget(String),
    #[error("{op} is not valid in phase {phase:?}")]
    WrongPhase { op: &'static str, phase: Phase },
}

/// Client state for one outsourced power-iteration session.
///
/// The mask vector `r` and the offset `c = encode(A) * r` are generated at
/// setup, live only inside this struct, and are intentionally not exposed by
/// any accessor.
pub struct ClientSession {
    cfg: ProtocolConfig,
    phase: Phase,
    keypair: Keypair,
    codec: FixedPointCodec,
    matrix: DenseMatrix,
    dim: usize,
    session_id: String,
    /// Additive mask, fixed for the whole session.
    mask: Vec<BigUint>,
    /// Exact integer offset `encode(A) * r`, subtracted from every reply.
    offset: Vec<BigInt>,
    /// Largest magnitude an honest *masked* reply component can have.
    masked_bound: BigUint,
    /// Largest magnitude an honest *unmasked* product component can have.
    unmasked_bound: BigUint,
    /// Current iterate, normalized to unit infinity norm.
    x: Vec<f64>,
    /// Round index carried by the outstanding request.
    round: u64,
    /// Responses successfully ingested so far.
    rounds_done: u64,
    omega: u64,
    /// Modular inverse of the outstanding round's scalar, when scaling is on.
    scale_inv: Option<BigUint>,
    last_eigenvalue: f64,
    last_unmasked: Option<Vec<f64>>,
    rng: ChaCha20Rng,
}

impl ClientSession {
    /// Builds a session: encodes and encrypts the matrix, draws the mask,
    /// precomputes the unmasking offset, and emits the two opening messages
    /// (matrix upload and the round-0 query for `x0` normalized to unit
    /// infinity norm).
    pub fn setup<R: RngCore + CryptoRng>(
        matrix: DenseMatrix,
        x0: &[f64],
        cfg: ProtocolConfig,
        keypair: Keypair,
        rng: &mut R,
    ) -> Result<(ClientSession, ProtocolMessage, ProtocolMessage), ProtocolError> {
        cfg.validate()?;
        let dim = matrix.dim();
        if x0.len() != dim {
            return Err(ProtocolError::DimensionMismatch {
                expected: dim,
                got: x0.len(),
            });
        }
        let (s0, _) = inf_norm_signed(x0)?;
        let x: Vec<f64> = x0.iter().map(|v| v / s0).collect();

        let n = keypair.public.n().clone();
        let codec = FixedPointCodec::new(&n, cfg.frac_bits)?;

        // Encode the matrix once, keeping the signed integers around for the
        // offset computation below.
        let mut matrix_int: Vec<Vec<BigInt>> = Vec::with_capacity(dim);
        for i in 0..dim {
            let mut row = Vec::with_capacity(dim);
            for j in 0..dim {
                row.push(codec.encode_int(matrix.get(i, j), ScaleLevel::One)?);
            }
            matrix_int.push(row);
        }
        let row_abs_max: BigUint = matrix_int
            .iter()
            .map(|row| row.iter().map(|v| v.magnitude().clone()).sum::<BigUint>())
            .max()
            .expect("dim >= 1");

        // Masked query components never exceed z_max in magnitude: the mask
        // contributes < 2^mask_bits and the encoded unit-norm iterate at most
        // 2^frac_bits (plus rounding).
        let z_max: BigUint =
            (BigUint::one() << cfg.mask_bits) + (BigUint::one() << (cfg.frac_bits + 1));
        let half = (&n - 1u32) >> 1;
        let masked_bound = &row_abs_max * &z_max;
        if masked_bound > half || z_max >= n {
            return Err(ProtocolError::RangeBudget(format!(
                "matrix row sums ({} bits) times mask range ({} bits) must stay below \
                 half the {}-bit modulus; use a larger key or fewer mask bits",
                row_abs_max.bits(),
                z_max.bits(),
                n.bits()
            )));
        }
        let unmasked_bound = &row_abs_max << cfg.frac_bits;

        let mut rng = ChaCha20Rng::from_rng(rng).expect("seeding from caller RNG cannot fail");

        // Every mask component gets its top bit forced so its bit length is
        // exactly mask_bits.
        let top = BigUint::one() << (cfg.mask_bits - 1);
        let mask: Vec<BigUint> = (0..dim)
            .map(|_| {
                if cfg.mask_bits == 1 {
                    BigUint::one()
                } else {
                    &top | rng.gen_biguint(cfg.mask_bits as u64 - 1)
                }
            })
            .collect();

        let offset: Vec<BigInt> = matrix_int
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&mask)
                    .map(|(a, r)| a * BigInt::from(r.clone()))
                    .sum()
            })
            .collect();

        let mut enc_matrix: Vec<Vec<BigUint>> = Vec::with_capacity(dim);
        for row in &matrix_int {
            let mut enc_row = Vec::with_capacity(dim);
            for v in row {
                let residue = codec.to_residue(v);
                enc_row.push(keypair.public.encrypt(&residue, &mut rng)?.into_value());
            }
            enc_matrix.push(enc_row);
        }

        let session_id = crate::transport::new_session_id(&mut rng);
        let omega = cfg.effective_omega(dim);
        let mut session = ClientSession {
            cfg,
            phase: Phase::Setup,
            keypair,
            codec,
            matrix,
            dim,
            session_id: session_id.clone(),
            mask,
            offset,
            masked_bound,
            unmasked_bound,
            x,
            round: 0,
            rounds_done: 0,
            omega,
            scale_inv: None,
            last_eigenvalue: 0.0,
            last_unmasked: None,
            rng,
        };
        let store = ProtocolMessage::StoreMatrix {
            session_id,
            dim,
            enc_matrix,
        };
        let request = session.build_request();
        session.phase = Phase::Iterating;
        Ok((session, store, request))
    }

    /// Masks (and optionally scales) the current iterate into a query for the
    /// outstanding round index.
    fn build_request(&mut self) -> ProtocolMessage {
        let n = self.keypair.public.n();
        let (scale, scale_inv) = if self.cfg.use_scaling {
            loop {
                let a = self.rng.gen_biguint_range(&BigUint::from(2u32), n);
                if let Some(inv) = a.modinv(n) {
                    break (a, Some(inv));
                }
            }
        } else {
            (BigUint::one(), None)
        };
        let query: Vec<BigUint> = self
            .x
            .iter()
            .zip(&self.mask)
            .map(|(xj, rj)| {
                let xj_int = self
                    .codec
                    .encode_int(*xj, ScaleLevel::One)
                    .expect("unit-norm iterate always encodes");
                let z = self.codec.to_residue(&(xj_int + BigInt::from(rj.clone())));
                if self.cfg.use_scaling {
                    (&scale * z) % n
                } else {
                    z
                }
            })
            .collect();
        self.scale_inv = scale_inv;
        ProtocolMessage::MatVecRequest {
            session_id: self.session_id.clone(),
            round_index: self.round,
            query,
        }
    }

    fn abort(&mut self, reason: AbortReason) -> RoundOutcome {
        self.phase = Phase::Aborted;
        RoundOutcome::Abort(reason)
    }

    /// Processes one worker reply: decrypt, undo the round scalar, strip the
    /// mask in exact integer arithmetic, decode, renormalize, and decide
    /// whether to continue, stop, or abort.
    pub fn ingest_round(&mut self, msg: &ProtocolMessage) -> Result<RoundOutcome, ProtocolError> {
        if self.phase != Phase::Iterating {
            return Err(ProtocolError::WrongPhase {
                op: "ingest_round",
                phase: self.phase,
            });
        }
        let (session_id, round_index, enc_product) = match msg {
            ProtocolMessage::MatVecResponse {
                session_id,
                round_index,
                enc_product,
            } => (session_id, *round_index, enc_product),
            ProtocolMessage::Error { code, message, .. } => {
                return Ok(self.abort(AbortReason::WorkerRefused(format!(
                    "{code:?}: {message}"
                ))));
            }
            other => {
                return Ok(self.abort(AbortReason::MalformedResponse(format!(
                    "expected a mat_vec_response, got {}",
                    other.kind_name()
                ))));
            }
        };
        if *session_id != self.session_id {
            return Ok(self.abort(AbortReason::MalformedResponse(
                "response carries a foreign session id".into(),
            )));
        }
        if round_index != self.round {
            return Ok(self.abort(AbortReason::MalformedResponse(format!(
                "round index mismatch: expected {}, got {round_index}",
                self.round
            ))));
        }
        if enc_product.len() != self.dim {
            return Ok(self.abort(AbortReason::MalformedResponse(format!(
                "expected {} product components, got {}",
                self.dim,
                enc_product.len()
            ))));
        }

        let n = self.keypair.public.n().clone();
        let mut product = Vec::with_capacity(self.dim);
        for (i, value) in enc_product.iter().enumerate() {
            let ct = match Ciphertext::from_value(&self.keypair.public, value.clone()) {
                Ok(ct) => ct,
                Err(err) => {
                    return Ok(self.abort(AbortReason::MalformedResponse(format!(
                        "component {i} is not a valid ciphertext: {err}"
                    ))));
                }
            };
            let mut m = self.keypair.decrypt(&ct)?;
            if let Some(inv) = &self.scale_inv {
                m = (m * inv) % &n;
            }
            let masked = self.codec.center(&m);
            if masked.magnitude() > &self.masked_bound {
                return Ok(self.abort(AbortReason::MalformedResponse(format!(
                    "component {i} exceeds the masked range of an honest reply"
                ))));
            }
            let unmasked = masked - &self.offset[i];
            if unmasked.magnitude() > &self.unmasked_bound {
                return Ok(self.abort(AbortReason::MalformedResponse(format!(
                    "component {i} decodes outside the product range"
                ))));
            }
            product.push(self.codec.decode_int(&unmasked, ScaleLevel::Two));
        }
        self.rounds_done += 1;
        self.last_unmasked = Some(product.clone());

        let (s, _) = match inf_norm_signed(&product) {
            Ok(v) => v,
            Err(LinalgError::ZeroVector) => {
                return Ok(self.abort(AbortReason::MalformedResponse(
                    "iterate collapsed to the zero vector".into(),
                )));
            }
            Err(err) => return Err(err.into()),
        };
        let x_next: Vec<f64> = product.iter().map(|v| v / s).collect();
        let step = inf_dist(&self.x, &x_next);
        self.x = x_next;
        self.last_eigenvalue = s;

        if step <= self.cfg.eps {
            self.phase = Phase::Converged;
            return Ok(RoundOutcome::ConvergedWith(EigenResult {
                eigenvalue: s,
                eigenvector: self.x.clone(),
                iterations: self.rounds_done as usize,
                converged: true,
            }));
        }
        if self.rounds_done >= self.omega {
            return Ok(self.abort(AbortReason::IterationCapExceeded));
        }
        self.round += 1;
        Ok(RoundOutcome::NextRequest(self.build_request()))
    }

    /// Residual check of a converged candidate against the plaintext matrix:
    /// accepts iff `‖A·x − λ·x‖∞ ≤ verify_tol · ‖A‖∞ · ‖x‖∞`.
    pub fn verify(&mut self, candidate: &EigenResult) -> Result<Verdict, ProtocolError> {
        if self.phase != Phase::Converged {
            return Err(ProtocolError::WrongPhase {
                op: "verify",
                phase: self.phase,
            });
        }
        let ax = self.matrix.matvec(&candidate.eigenvector)?;
        let scaled: Vec<f64> = candidate
            .eigenvector
            .iter()
            .map(|v| candidate.eigenvalue * v)
            .collect();
        let residual = inf_dist(&ax, &scaled);
        let x_norm = candidate
            .eigenvector
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let threshold = self.cfg.verify_tol * self.matrix.inf_norm() * x_norm;
        if residual <= threshold {
            self.phase = Phase::Accepted;
            Ok(Verdict::Accepted)
        } else {
            self.phase = Phase::Rejected;
            Ok(Verdict::Rejected)
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Round index of the outstanding request.
    pub fn round(&self) -> u64 {
        self.round
    }

    /// Responses ingested so far.
    pub fn rounds_completed(&self) -> u64 {
        self.rounds_done
    }

    /// Current iterate (unit infinity norm while iterating).
    pub fn iterate(&self) -> &[f64] {
        &self.x
    }

    /// The most recent decoded matrix-vector product, before normalization.
    /// Diagnostic only: this is the client's own computation result and
    /// reveals nothing about the mask.
    pub fn last_unmasked_product(&self) -> Option<&[f64]> {
        self.last_unmasked.as_deref()
    }

    /// Best estimate for reporting when a run ends without acceptance.
    pub fn current_estimate(&self) -> EigenResult {
        EigenResult {
            eigenvalue: self.last_eigenvalue,
            eigenvector: self.x.clone(),
            iterations: self.rounds_done as usize,
            converged: self.phase == Phase::Converged
                || self.phase == Phase::Accepted
                || self.phase == Phase::Rejected,
        }
    }

    /// Test-only constructor twin of [`ClientSession::setup`] that forces the
    /// mask to zero, so the round-0 query equals the encoded iterate exactly.
    /// Never use outside tests: a zero mask sends the iterate in the clear.
    #[doc(hidden)]
    pub fn setup_unmasked_for_tests<R: RngCore + CryptoRng>(
        matrix: DenseMatrix,
        x0: &[f64],
        cfg: ProtocolConfig,
        keypair: Keypair,
        rng: &mut R,
    ) -> Result<(ClientSession, ProtocolMessage, ProtocolMessage), ProtocolError> {
        let (mut session, store, _) = ClientSession::setup(matrix, x0, cfg, keypair, rng)?;
        for r in session.mask.iter_mut() {
            *r = BigUint::from(0u32);
        }
        for c in session.offset.iter_mut() {
            *c = BigInt::from(0);
        }
        let request = session.build_request();
        Ok((session, store, request))
    }
}

fn send_logged(
    channel: &mut dyn Channel,
    digest: &mut TranscriptDigest,
    msg: &ProtocolMessage,
) -> Result<(), TransportError> {
    channel.send(msg)?;
    digest.absorb(msg);
    Ok(())
}

fn recv_logged(
    channel: &mut dyn Channel,
    digest: &mut TranscriptDigest,
) -> Result<ProtocolMessage, TransportError> {
    let msg = channel.receive(RECEIVE_TIMEOUT)?;
    digest.absorb(&msg);
    Ok(msg)
}

/// Runs a complete session over the given channel: upload, iterate to
/// convergence or abort, verify, and report. Transport failures and worker
/// misbehaviour end in an `Aborted` verdict rather than an `Err`; errors are
/// reserved for local misuse (bad config, mismatched dimensions, key too
/// small for the encoding).
pub fn drive<R: RngCore + CryptoRng>(
    matrix: DenseMatrix,
    x0: &[f64],
    cfg: ProtocolConfig,
    keypair: Keypair,
    channel: &mut dyn Channel,
    rng: &mut R,
) -> Result<SolveOutcome, ProtocolError> {
    let mut digest = TranscriptDigest::new();
    let (mut session, store, first_request) = ClientSession::setup(matrix, x0, cfg, keypair, rng)?;

    let outcome = |session: &ClientSession, verdict: Verdict, digest: TranscriptDigest| {
        SolveOutcome {
            result: session.current_estimate(),
            verdict,
            rounds: session.rounds_completed(),
            transcript_digest: digest.finish(),
        }
    };

    macro_rules! try_transport {
        ($session:expr, $digest:expr, $expr:expr) => {
            match $expr {
                Ok(v) => v,
                Err(err) => {
                    $session.phase = Phase::Aborted;
                    let verdict = Verdict::Aborted(AbortReason::Transport(err));
                    return Ok(outcome(&$session, verdict, $digest));
                }
            }
        };
    }

    try_transport!(session, digest, send_logged(channel, &mut digest, &store));
    let ack = try_transport!(session, digest, recv_logged(channel, &mut digest));
    match &ack {
        ProtocolMessage::Ack { session_id } if *session_id == session.session_id => {}
        ProtocolMessage::Error { code, message, .. } => {
            session.phase = Phase::Aborted;
            let verdict =
                Verdict::Aborted(AbortReason::WorkerRefused(format!("{code:?}: {message}")));
            return Ok(outcome(&session, verdict, digest));
        }
        other => {
            session.phase = Phase::Aborted;
            let verdict = Verdict::Aborted(AbortReason::MalformedResponse(format!(
                "expected an ack to the matrix upload, got {}",
                other.kind_name()
            )));
            return Ok(outcome(&session, verdict, digest));
        }
    }

    try_transport!(
        session,
        digest,
        send_logged(channel, &mut digest, &first_request)
    );
    loop {
        let reply = try_transport!(session, digest, recv_logged(channel, &mut digest));
        match session.ingest_round(&reply)? {
            RoundOutcome::NextRequest(request) => {
                try_transport!(session, digest, send_logged(channel, &mut digest, &request));
            }
            RoundOutcome::ConvergedWith(result) => {
                let verdict = session.verify(&result)?;
                return Ok(SolveOutcome {
                    result,
                    verdict,
                    rounds: session.rounds_completed(),
                    transcript_digest: digest.finish(),
                });
            }
            RoundOutcome::Abort(reason) => {
                return Ok(outcome(&session, Verdict::Aborted(reason), digest));
            }
        }
    }
}
