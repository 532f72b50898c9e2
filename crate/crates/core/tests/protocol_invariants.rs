//! Session-level invariants that cut across modules: what a session sends,
//! what an eavesdropper could read off the wire, how the iteration cap binds
//! regardless of worker behaviour, and the determinism and accuracy promises
//! of the two solvers.

use std::time::Duration;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::Zero;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use eigencloud::client::{
    drive, AbortReason, ClientSession, ProtocolConfig, RoundOutcome, Verdict,
};
use eigencloud::linalg::{local_power_iteration, make_test_matrix};
use eigencloud::paillier::Keypair;
use eigencloud::transport::{serialize, Channel, ProtocolMessage, TransportError};
use eigencloud::worker::{spawn_in_process, AdversaryPolicy, WorkerState};

/// Pass-through channel that keeps a copy of every message the client sends.
struct RecordingChannel<'a> {
    inner: &'a mut dyn Channel,
    sent: Vec<ProtocolMessage>,
}

impl Channel for RecordingChannel<'_> {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<(), TransportError> {
        self.sent.push(msg.clone());
        self.inner.send(msg)
    }

    fn receive(&mut self, timeout: Duration) -> Result<ProtocolMessage, TransportError> {
        self.inner.receive(timeout)
    }
}

fn fast_cfg() -> ProtocolConfig {
    ProtocolConfig {
        eps: 1e-4,
        omega: None,
        mask_bits: 32,
        use_scaling: true,
        verify_tol: 1e-2,
        key_bits: 192,
        frac_bits: 32,
        secure_profile: false,
    }
}

#[test]
fn every_session_uploads_the_matrix_exactly_once() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x11f_0001);
    let keypair = Keypair::generate(192, &mut rng).unwrap();
    let planted = make_test_matrix(6, 3.0, &mut rng).unwrap();

    let (mut inner, handle) =
        spawn_in_process(keypair.public.clone(), AdversaryPolicy::Honest, 11);
    let mut chan = RecordingChannel {
        inner: &mut inner,
        sent: Vec::new(),
    };
    let outcome = drive(
        planted.matrix,
        &vec![1.0; 6],
        fast_cfg(),
        keypair,
        &mut chan,
        &mut rng,
    )
    .unwrap();
    assert_eq!(outcome.verdict, Verdict::Accepted);

    let sent = chan.sent;
    drop(inner);
    let _ = handle.join();

    assert!(
        matches!(sent.first(), Some(ProtocolMessage::StoreMatrix { .. })),
        "the first message of a session is the matrix upload"
    );
    let uploads = sent
        .iter()
        .filter(|m| matches!(m, ProtocolMessage::StoreMatrix { .. }))
        .count();
    assert_eq!(uploads, 1, "the encrypted matrix goes up exactly once");

    let sid = sent[0].session_id().to_string();
    let mut expected_round = 0u64;
    for msg in &sent[1..] {
        match msg {
            ProtocolMessage::MatVecRequest {
                session_id,
                round_index,
                ..
            } => {
                assert_eq!(*session_id, sid, "one session id for the whole run");
                assert_eq!(
                    *round_index, expected_round,
                    "round indices count up without gaps"
                );
                expected_round += 1;
            }
            other => panic!("client sent an unexpected message kind: {other:?}"),
        }
    }
    assert_eq!(expected_round, outcome.rounds, "one request per ingested round");
}

/// With scaling on, each outgoing query is a masked vector multiplied by a
/// fresh modulus-wide scalar. An eavesdropper hoping to link rounds could try
/// the gcd of a query's components: if scaling used a small scalar on values
/// that never wrap around the modulus, that gcd would hand over the scalar
/// itself. Modulus-wide scalars wrap every component, so across seeded runs
/// the visible gcd stays a small coincidence, never a planted factor.
#[test]
fn scaled_queries_carry_no_recoverable_common_factor() {
    let mut key_rng = ChaCha20Rng::seed_from_u64(0x11f_0002);
    let keypair = Keypair::generate(192, &mut key_rng).unwrap();
    // Any common factor at least this wide is treated as a recovered scalar
    // rather than a random coincidence (probability about 2^-80 per query).
    let coincidence_bound = BigUint::from(1u32) << 16;

    let runs = 40u64;
    let mut clean_runs = 0u32;
    for s in 0..runs {
        let mut rng = ChaCha20Rng::seed_from_u64(0x11f_1000 + s);
        let planted = make_test_matrix(6, 3.0, &mut rng).unwrap();

        let (mut inner, handle) =
            spawn_in_process(keypair.public.clone(), AdversaryPolicy::Honest, s);
        let mut chan = RecordingChannel {
            inner: &mut inner,
            sent: Vec::new(),
        };
        let outcome = drive(
            planted.matrix,
            &vec![1.0; 6],
            fast_cfg(),
            keypair.clone(),
            &mut chan,
            &mut rng,
        )
        .unwrap();
        assert_eq!(outcome.verdict, Verdict::Accepted, "run {s}");

        let sent = chan.sent;
        drop(inner);
        let _ = handle.join();

        let mut queries = 0usize;
        let mut clean = true;
        for msg in &sent {
            if let ProtocolMessage::MatVecRequest { query, .. } = msg {
                queries += 1;
                let g = query
                    .iter()
                    .fold(BigUint::zero(), |acc, component| acc.gcd(component));
                if g >= coincidence_bound {
                    clean = false;
                }
            }
        }
        assert!(queries >= 3, "run {s} should take several rounds");
        if clean {
            clean_runs += 1;
        }
    }
    assert!(
        clean_runs as f64 >= 0.95 * runs as f64,
        "only {clean_runs}/{runs} runs had no query with a scalar-sized common factor"
    );
}

#[test]
fn iteration_cap_binds_for_every_worker_policy() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x11f_0003);
    let keypair = Keypair::generate(192, &mut rng).unwrap();
    let cap = 8u64;
    let mut cfg = fast_cfg();
    cfg.omega = Some(cap);
    // A tolerance no honest run can reach in eight rounds at this spectral
    // gap (the error shrinks about 2x per round), so even the honest policy
    // exercises the cap.
    cfg.eps = 1e-9;

    let policies = [
        AdversaryPolicy::Honest,
        AdversaryPolicy::Tamper {
            rho: 1.0,
            delta: 0.05,
            frac_bits: cfg.frac_bits,
        },
        AdversaryPolicy::Arbitrary,
        AdversaryPolicy::Lazy,
    ];
    for (p, policy) in policies.iter().enumerate() {
        for s in 0..3u64 {
            let mut run_rng = ChaCha20Rng::seed_from_u64(0x11f_2000 + 10 * p as u64 + s);
            let planted = make_test_matrix(5, 2.0, &mut run_rng).unwrap();
            let (mut chan, handle) =
                spawn_in_process(keypair.public.clone(), policy.clone(), s);
            let outcome = drive(
                planted.matrix,
                &vec![1.0; 5],
                cfg.clone(),
                keypair.clone(),
                &mut chan,
                &mut run_rng,
            )
            .unwrap();
            drop(chan);
            let _ = handle.join();

            assert!(
                outcome.rounds <= cap,
                "{policy:?} run {s} took {} rounds past the cap {cap}",
                outcome.rounds
            );
            if matches!(policy, AdversaryPolicy::Honest) {
                assert_eq!(outcome.rounds, cap);
                assert!(
                    matches!(
                        outcome.verdict,
                        Verdict::Aborted(AbortReason::IterationCapExceeded)
                    ),
                    "honest run under an unreachable tolerance must hit the cap, \
                     got {:?}",
                    outcome.verdict
                );
            } else {
                assert_ne!(
                    outcome.verdict,
                    Verdict::Accepted,
                    "{policy:?} run {s} was accepted"
                );
            }
        }
    }
}

#[test]
fn honest_worker_replies_are_deterministic() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x11f_0004);
    let keypair = Keypair::generate(192, &mut rng).unwrap();
    let planted = make_test_matrix(6, 3.0, &mut rng).unwrap();
    let (mut session, store, first) = ClientSession::setup(
        planted.matrix,
        &vec![1.0; 6],
        fast_cfg(),
        keypair.clone(),
        &mut rng,
    )
    .unwrap();

    // Different worker seeds: honest replies may depend only on the stored
    // ciphertexts and the query, never on worker randomness.
    let mut a = WorkerState::with_seed(keypair.public.clone(), AdversaryPolicy::Honest, 1);
    let mut b = WorkerState::with_seed(keypair.public.clone(), AdversaryPolicy::Honest, 2);
    assert!(matches!(a.handle(&store), ProtocolMessage::Ack { .. }));
    assert!(matches!(b.handle(&store), ProtocolMessage::Ack { .. }));

    let reply_a = a.handle(&first);
    let reply_b = b.handle(&first);
    assert!(
        matches!(reply_a, ProtocolMessage::MatVecResponse { .. }),
        "got {reply_a:?}"
    );
    assert_eq!(serialize(&reply_a), serialize(&reply_b));

    // Same check one round later, after the iterate has moved.
    let second = match session.ingest_round(&reply_a).unwrap() {
        RoundOutcome::NextRequest(msg) => msg,
        other => panic!("expected another round, got {other:?}"),
    };
    let reply_a2 = a.handle(&second);
    let reply_b2 = b.handle(&second);
    assert!(matches!(reply_a2, ProtocolMessage::MatVecResponse { .. }));
    assert_eq!(serialize(&reply_a2), serialize(&reply_b2));
    assert_ne!(
        serialize(&reply_a),
        serialize(&reply_a2),
        "distinct queries should produce distinct replies"
    );
}

#[test]
fn local_solver_meets_the_residual_bound_at_convergence() {
    for s in 0..10u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(0x11f_3000 + s);
        let n = if s % 2 == 0 { 4 } else { 12 };
        let dominance = 2.5 + 0.1 * s as f64;
        let planted = make_test_matrix(n, dominance, &mut rng).unwrap();

        let eps = 1e-9;
        let result = local_power_iteration(&planted.matrix, &vec![1.0; n], eps, 2000).unwrap();
        assert!(result.converged, "seed {s} did not converge");

        let inf: f64 = result
            .eigenvector
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()));
        assert_eq!(inf, 1.0, "seed {s}: iterate is normalized to unit infinity norm");

        let ax = planted.matrix.matvec(&result.eigenvector).unwrap();
        let residual = ax
            .iter()
            .zip(&result.eigenvector)
            .map(|(a, x)| (a - result.eigenvalue * x).abs())
            .fold(0.0f64, f64::max);
        let bound = 10.0 * eps * planted.matrix.inf_norm();
        assert!(
            residual <= bound,
            "seed {s}: residual {residual:e} exceeds {bound:e}"
        );
    }
}
