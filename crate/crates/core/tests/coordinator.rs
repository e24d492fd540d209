use std::collections::HashMap;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ckptf_core::coordinator::{
    Attach, BackoffPolicy, Body, Bus, ConnectGate, ControlMessage, CoordClient, CoordConfig, KvStore, Overload,
    ReplyStatus, Role, TcpRoot, TcpSession,
};
use ckptf_core::fabric::{Clock, ClockMode};

const T: Duration = Duration::from_secs(5);

fn body() -> impl Strategy<Value = Body> {
    let name = "[a-z:0-9]{0,24}";
    prop_oneof![
        (any::<u32>(), any::<u32>()).prop_map(|(node, ranks)| Body::Register { role: Role::Rank, node, ranks }),
        (name, any::<bool>()).prop_map(|(name, ok)| Body::BarrierEnter { name, ok }),
        (name, any::<bool>()).prop_map(|(name, ok)| Body::BarrierRelease { name, ok }),
        (any::<u32>(), any::<bool>(), name, any::<u32>(), prop::collection::vec(any::<u8>(), 0..64)).prop_map(
            |(req, claim, key, generation, value)| Body::Publish { req, claim, key, generation, value }
        ),
        (any::<u32>(), name).prop_map(|(req, key)| Body::Query { req, key }),
        (any::<u32>(), any::<u32>()).prop_map(|(dest, ckpt_id)| Body::CkptRequest { dest, ckpt_id }),
        (any::<u32>(), any::<u8>()).prop_map(|(ckpt_id, phase)| Body::PhaseAck { ckpt_id, phase }),
        name.prop_map(|reason| Body::Shutdown { reason }),
    ]
}

fn message() -> impl Strategy<Value = ControlMessage> {
    let leaf = (any::<u32>(), body()).prop_map(|(s, b)| ControlMessage::new(s, b));
    leaf.prop_recursive(2, 16, 6, |inner| {
        (any::<u32>(), prop::collection::vec(inner, 0..6))
            .prop_map(|(s, frames)| ControlMessage::new(s, Body::Aggregate { frames }))
    })
}

#[derive(Debug, Clone)]
enum KvOp {
    Publish(u8, u8, u32),
    Claim(u8, u8, u32),
}

fn kv_op() -> impl Strategy<Value = KvOp> {
    prop_oneof![
        (0u8..6, any::<u8>(), 0u32..4).prop_map(|(k, v, g)| KvOp::Publish(k, v, g)),
        (0u8..6, any::<u8>(), 0u32..4).prop_map(|(k, v, g)| KvOp::Claim(k, v, g)),
    ]
}

/// Connects `nodes * per_node` registered clients to a bus.
fn bus_world(nodes: u32, per_node: u32, tree: bool) -> (Arc<Bus>, Vec<CoordClient>) {
    let n = nodes * per_node;
    let bus = Bus::new(n, CoordConfig::default(), Arc::new(Clock::new(ClockMode::Virtual)));
    if tree {
        for node in 0..nodes {
            bus.start_sub(node, per_node).unwrap();
        }
    }
    let clients = (0..n)
        .map(|r| {
            let attach = if tree { Attach::Node(r / per_node) } else { Attach::Root };
            let mut c = CoordClient::new(r, r / per_node, Box::new(bus.connect(attach).unwrap()));
            c.register(T).unwrap();
            c
        })
        .collect();
    (bus, clients)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frames_stream_back_in_order(msgs in prop::collection::vec(message(), 0..12)) {
        let mut wire = Vec::new();
        for m in &msgs {
            m.write_to(&mut wire).unwrap();
        }
        let mut r = wire.as_slice();
        for m in &msgs {
            prop_assert_eq!(&ControlMessage::read_from(&mut r).unwrap().unwrap(), m);
        }
        prop_assert!(ControlMessage::read_from(&mut r).unwrap().is_none());
    }

    #[test]
    fn every_proper_prefix_is_rejected(msg in message()) {
        let bytes = msg.encode();
        for cut in 0..bytes.len() {
            prop_assert!(ControlMessage::decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn kv_store_matches_a_history_model(ops in prop::collection::vec(kv_op(), 0..60)) {
        let mut kv = KvStore::new();
        let mut model: HashMap<String, Vec<(Vec<u8>, u32)>> = HashMap::new();
        let mut last_seq = 0;
        for op in ops {
            match op {
                KvOp::Publish(k, v, g) => {
                    let key = format!("k{k}");
                    let seq = kv.publish(&key, vec![v], g);
                    prop_assert!(seq > last_seq);
                    last_seq = seq;
                    model.entry(key).or_default().push((vec![v], g));
                }
                KvOp::Claim(k, v, g) => {
                    let key = format!("k{k}");
                    let (entry, created) = kv.claim(&key, vec![v], g);
                    let history = model.entry(key).or_default();
                    prop_assert_eq!(created, history.is_empty());
                    if created {
                        history.push((vec![v], g));
                        last_seq = entry.seq;
                    }
                    prop_assert_eq!(&(entry.value, entry.generation), history.last().unwrap());
                }
            }
        }
        for (key, history) in &model {
            let stored: Vec<_> = kv.history(key).iter().map(|e| (e.value.clone(), e.generation)).collect();
            prop_assert_eq!(&stored, history);
            let seqs: Vec<u64> = kv.history(key).iter().map(|e| e.seq).collect();
            prop_assert!(seqs.windows(2).all(|w| w[0] < w[1]));
            if let Some(latest) = kv.latest(key) {
                prop_assert_eq!(Some(latest.seq), seqs.last().copied());
            }
        }
    }

    #[test]
    fn staggered_start_bounds_concurrent_attempts(
        n in 1u32..300,
        bursts in 1u32..40,
        handshake in 1u64..20,
        jitter in 0u64..6,
        seed in any::<u64>(),
    ) {
        let policy = BackoffPolicy::staggered(bursts, handshake, jitter);
        let starts = policy.schedule(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let outcome = ConnectGate::new(usize::MAX, handshake, Overload::Kill).simulate(&starts, &policy);
        prop_assert!(outcome.peak <= bursts as usize, "peak {} > {}", outcome.peak, bursts);
        prop_assert_eq!(outcome.connected.len(), n as usize);
        let limited = ConnectGate::new(bursts as usize, handshake, Overload::Kill).simulate(&starts, &policy);
        prop_assert!(limited.succeeded());
    }

    #[test]
    fn storm_fails_exactly_when_it_exceeds_the_limit(n in 1u32..200, limit in 1usize..100) {
        let policy = BackoffPolicy::storm();
        let starts = policy.schedule(n, &mut ChaCha8Rng::seed_from_u64(0));
        let outcome = ConnectGate::new(limit, 5, Overload::Kill).simulate(&starts, &policy);
        prop_assert_eq!(outcome.succeeded(), n as usize <= limit);
        prop_assert_eq!(outcome.peak, (n as usize).min(limit + 1));
        prop_assert_eq!(outcome.killed.len(), (n as usize).saturating_sub(limit));
    }

    #[test]
    fn barriers_and_checkpoint_requests_reach_every_rank(nodes in 1u32..6, per_node in 1u32..6, tree in any::<bool>(), fail in any::<bool>()) {
        let (bus, mut clients) = bus_world(nodes, per_node, tree);
        let sessions = if tree { nodes } else { nodes * per_node };
        prop_assert_eq!(bus.root_session_count(), sessions as usize);
        let loser = clients.len() - 1;
        for (r, c) in clients.iter_mut().enumerate() {
            c.barrier_enter("b", !(fail && r == loser)).unwrap();
        }
        for c in clients.iter_mut() {
            prop_assert_eq!(c.poll_barrier("b").unwrap(), Some(!fail));
        }
        let id = bus.request_checkpoint().unwrap();
        for c in clients.iter_mut() {
            prop_assert_eq!(c.poll_ckpt_request().unwrap(), Some(id));
            prop_assert_eq!(c.poll_ckpt_request().unwrap(), None);
        }
        let log = bus.with_root(|r| r.barrier_log().to_vec());
        prop_assert_eq!(log.len(), 1);
    }
}

#[test]
fn tree_root_sees_one_session_per_node() {
    let (bus, _clients) = bus_world(8, 8, true);
    assert_eq!(bus.root_session_count(), 8);
    let (flat, _clients) = bus_world(8, 8, false);
    assert_eq!(flat.root_session_count(), 64);
}

#[test]
fn tree_aggregates_barrier_entries() {
    let (tree, mut a) = bus_world(2, 4, true);
    let (flat, mut b) = bus_world(2, 4, false);
    let before = (tree.with_root(|r| r.total_frames_in()), flat.with_root(|r| r.total_frames_in()));
    for c in a.iter_mut().chain(b.iter_mut()) {
        c.barrier_enter("x", true).unwrap();
    }
    let tree_frames = tree.with_root(|r| r.total_frames_in()) - before.0;
    let flat_frames = flat.with_root(|r| r.total_frames_in()) - before.1;
    assert_eq!(flat_frames, 8);
    assert_eq!(tree_frames, 2);
}

#[test]
fn first_claim_wins_over_sockets() {
    let clock = Arc::new(Clock::new(ClockMode::Wall));
    let root = TcpRoot::start("127.0.0.1:0", 6, CoordConfig::for_clock(ClockMode::Wall), clock).unwrap();
    let addr = root.addr();
    let handles: Vec<_> = (0..6u32)
        .map(|r| {
            thread::spawn(move || {
                let s = TcpSession::connect(addr, &BackoffPolicy::storm()).unwrap();
                let mut c = CoordClient::new(r, r, Box::new(s));
                c.register(T).unwrap();
                assert!(c.barrier("up", true, T).unwrap());
                let req = c.send_claim("ud:1:64", vec![r as u8], 0).unwrap();
                let reply = c.wait_reply(req, T).unwrap();
                assert!(c.barrier("claimed", true, T).unwrap());
                let latest = c.query("ud:1:64", T).unwrap();
                (r, reply.status, latest.value)
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let winners: Vec<_> = results.iter().filter(|(_, s, _)| *s == ReplyStatus::ClaimOk).collect();
    assert_eq!(winners.len(), 1);
    let winner = winners[0].0 as u8;
    assert!(results.iter().all(|(_, _, v)| *v == vec![winner]));
    let stats = root.stats().unwrap();
    assert_eq!(stats.peak_sessions, 6);
}
