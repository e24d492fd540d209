use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;

use ckptf_core::coordinator::{Attach, Bus, CoordClient, CoordConfig};
use ckptf_core::fabric::{Address, Fabric, FabricConfig, QpMode, QpNum, RealLid, ReassignMode, MAX_QPN};
use ckptf_core::virt::{
    add_header, pack_address, parse_header, unpack_address, ResolvePolicy, SendOutcome, ShadowHandleId, UdVirt,
    VirtError, VirtualEndpointId, MAX_RESOLVE_ATTEMPTS, UD_HEADER_LEN,
};

/// `n` ranks, one per node, each owning one virtual endpoint.
struct World {
    fabric: Arc<Fabric>,
    _bus: Arc<Bus>,
    clients: Vec<CoordClient>,
    virts: Vec<UdVirt>,
    vids: Vec<VirtualEndpointId>,
}

impl World {
    fn new(n: u32, policy: ResolvePolicy, seed: u64) -> Self {
        let config = FabricConfig { rng_seed: seed, ..FabricConfig::default() };
        let fabric = Arc::new(Fabric::new(config, n).unwrap());
        let bus = Bus::new(n, CoordConfig::default(), fabric.shared_clock());
        let mut clients = Vec::new();
        let mut virts = Vec::new();
        let mut vids = Vec::new();
        for rank in 0..n {
            let hca = fabric.create_hca(rank).unwrap();
            let mut client = CoordClient::new(rank, rank, Box::new(bus.connect(Attach::Root).unwrap()));
            client.register(Duration::from_secs(5)).unwrap();
            let mut virt = UdVirt::new(policy);
            vids.push(virt.create_endpoint(&fabric, &hca, &mut client).unwrap());
            clients.push(client);
            virts.push(virt);
        }
        Self { fabric, _bus: bus, clients, virts, vids }
    }

    fn send(&mut self, from: usize, handle: ShadowHandleId, payload: &[u8]) {
        let src = self.vids[from];
        self.virts[from].vsend_blocking(&self.fabric, &mut self.clients[from], handle, src, payload).unwrap();
    }

    fn restart(&mut self, mode: ReassignMode) {
        self.fabric.kill_all();
        self.fabric.reassign_identifiers_with(mode).unwrap();
        for rank in 0..self.clients.len() {
            let hca = self.fabric.hca(rank as u32).unwrap();
            self.virts[rank].refresh_after_restart(&self.fabric, &hca, &mut self.clients[rank]).unwrap();
        }
    }

    fn drain(&mut self) -> Vec<(usize, VirtualEndpointId, Vec<u8>)> {
        self.fabric.clock().advance_by(FabricConfig::default().latency_max);
        let mut out = Vec::new();
        for rank in 0..self.virts.len() {
            for m in self.virts[rank].vrecv(&self.fabric, self.vids[rank], usize::MAX).unwrap() {
                assert_eq!(m.dst, self.vids[rank]);
                out.push((rank, m.src, m.payload));
            }
        }
        out
    }
}

fn vid() -> impl Strategy<Value = VirtualEndpointId> {
    (any::<u16>(), 0..=MAX_QPN).prop_map(|(l, q)| VirtualEndpointId::new(l, q))
}

fn mode() -> impl Strategy<Value = ReassignMode> {
    prop_oneof![Just(ReassignMode::Random), Just(ReassignMode::Identity), Just(ReassignMode::Rotate)]
}

fn policy() -> impl Strategy<Value = ResolvePolicy> {
    prop_oneof![Just(ResolvePolicy::PerSend), Just(ResolvePolicy::GenerationCached)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn header_round_trips(src in vid(), dst in vid(), payload in prop::collection::vec(any::<u8>(), 0..256)) {
        let raw = add_header(src, dst, &payload);
        prop_assert_eq!(raw.len(), UD_HEADER_LEN + payload.len());
        prop_assert_eq!(parse_header(&raw), Some((src, dst, &payload[..])));
        prop_assert_eq!(parse_header(&raw[..UD_HEADER_LEN - 1]), None);
    }

    #[test]
    fn packed_addresses_round_trip(lid in any::<u16>(), qpn in 0..=MAX_QPN, generation in 0u32..(1 << 24)) {
        let a = Address { lid: RealLid(lid), qpn: QpNum::new(qpn).unwrap(), generation };
        prop_assert_eq!(unpack_address(&pack_address(a)), Some(a));
    }

    /// Random traffic across random restarts: every datagram reaches the
    /// endpoint it was addressed to, and handles and virtual ids survive.
    #[test]
    fn datagrams_follow_virtual_ids_across_restarts(
        n in 2u32..7,
        policy in policy(),
        seed in any::<u64>(),
        rounds in prop::collection::vec((mode(), prop::collection::vec((0usize..64, 0usize..64), 1..20)), 1..5),
    ) {
        let mut w = World::new(n, policy, seed);
        let n = n as usize;
        let vids_before = w.vids.clone();
        let handles: Vec<Vec<ShadowHandleId>> = (0..n)
            .map(|r| w.vids.clone().into_iter().map(|t| w.virts[r].vcreate_ah(t)).collect())
            .collect();
        let mut sent = 0u64;
        for (round, (mode, sends)) in rounds.iter().enumerate() {
            let mut expected = Vec::new();
            for (i, (from, to)) in sends.iter().enumerate() {
                let (from, to) = (from % n, to % n);
                let payload = format!("{round}:{i}:{from}->{to}").into_bytes();
                w.send(from, handles[from][to], &payload);
                expected.push((to, w.vids[from], payload));
                sent += 1;
            }
            let mut got = w.drain();
            got.sort();
            expected.sort();
            prop_assert_eq!(got, expected);
            w.restart(*mode);
            prop_assert_eq!(&w.vids, &vids_before);
        }
        let m = w.fabric.metrics();
        prop_assert_eq!(m.blackholed, 0);
        prop_assert_eq!(m.delivered, sent);
        let sends: u64 = w.virts.iter().map(|v| v.stats().sends).sum();
        let queries: u64 = w.virts.iter().map(|v| v.stats().queries).sum();
        let misdelivered: u64 = w.virts.iter().map(|v| v.stats().misdelivered).sum();
        prop_assert_eq!(misdelivered, 0);
        prop_assert_eq!(sends, sent);
        match policy {
            // Sends to a rank's own endpoint resolve locally.
            ResolvePolicy::PerSend => prop_assert!(queries <= sends),
            ResolvePolicy::GenerationCached => prop_assert!(queries <= (n * n * rounds.len()) as u64),
        }
    }
}

#[test]
fn per_send_queries_once_per_remote_send() {
    let mut w = World::new(3, ResolvePolicy::PerSend, 1);
    let h = w.virts[0].vcreate_ah(w.vids[1]);
    for _ in 0..10 {
        w.send(0, h, b"x");
    }
    assert_eq!(w.virts[0].stats().queries, 10);
    let mut c = World::new(3, ResolvePolicy::GenerationCached, 1);
    let h = c.virts[0].vcreate_ah(c.vids[1]);
    for _ in 0..10 {
        c.send(0, h, b"x");
    }
    assert_eq!(c.virts[0].stats().queries, 1);
}

#[test]
fn virtual_ids_are_unique_even_when_real_pairs_repeat() {
    let fabric = Arc::new(Fabric::new(FabricConfig::default(), 1).unwrap());
    let bus = Bus::new(1, CoordConfig::default(), fabric.shared_clock());
    let mut client = CoordClient::new(0, 0, Box::new(bus.connect(Attach::Root).unwrap()));
    client.register(Duration::from_secs(5)).unwrap();
    let mut virt = UdVirt::new(ResolvePolicy::GenerationCached);
    let mut seen = BTreeSet::new();
    for _ in 0..4 {
        let hca = fabric.hca(0).unwrap_or_else(|| fabric.create_hca(0).unwrap());
        let qp = fabric.create_qp(&hca, QpMode::Ud).unwrap();
        let vid = virt.register_local_qp(&mut client, qp).unwrap();
        assert!(seen.insert(vid), "{vid} handed out twice");
        fabric.kill_all();
        fabric.reassign_identifiers_with(ReassignMode::Identity).unwrap();
    }
    // Identity reassignment reuses (lid, 64) each time; the ids still differ.
    assert_eq!(seen.len(), 4);
    assert!(seen.iter().all(|v| v.vlid == seen.iter().next().unwrap().vlid));
}

#[test]
fn own_endpoint_resolves_without_a_query() {
    let mut w = World::new(2, ResolvePolicy::PerSend, 3);
    let own = w.vids[0];
    let addr = w.virts[0].resolve(&w.fabric, &mut w.clients[0], own).unwrap();
    assert_eq!(Some(addr), w.virts[0].local_qp(own).map(|q| q.address()));
    assert_eq!(w.virts[0].stats().queries, 0);
}

#[test]
fn stale_target_is_retried_then_resolved() {
    let mut w = World::new(2, ResolvePolicy::GenerationCached, 4);
    let h = w.virts[0].vcreate_ah(w.vids[1]);
    w.send(0, h, b"before");
    w.fabric.kill_all();
    w.fabric.reassign_identifiers_with(ReassignMode::Rotate).unwrap();
    let hca0 = w.fabric.hca(0).unwrap();
    w.virts[0].refresh_after_restart(&w.fabric, &hca0, &mut w.clients[0]).unwrap();
    assert!(w.virts[0].inspect_handle(h).unwrap().real_ah.is_none());
    // Rank 1 has not republished yet, so its published address is stale.
    let src = w.vids[0];
    let first = w.virts[0].vsend(&w.fabric, &mut w.clients[0], h, src, b"after").unwrap();
    let SendOutcome::Retry { at } = first else { panic!("sent to a stale address: {first:?}") };
    let hca1 = w.fabric.hca(1).unwrap();
    w.virts[1].refresh_after_restart(&w.fabric, &hca1, &mut w.clients[1]).unwrap();
    w.fabric.clock().advance_to(at);
    let second = w.virts[0].vsend(&w.fabric, &mut w.clients[0], h, src, b"after").unwrap();
    assert!(matches!(second, SendOutcome::Sent(_)));
    let got = w.drain();
    assert_eq!(got, vec![(1, w.vids[0], b"after".to_vec())]);
    assert_eq!(w.fabric.metrics().blackholed, 0);
}

#[test]
fn unresolvable_target_gives_up_after_bounded_retries() {
    let mut w = World::new(2, ResolvePolicy::PerSend, 5);
    let ghost = VirtualEndpointId::new(999, 999);
    let h = w.virts[0].vcreate_ah(ghost);
    let src = w.vids[0];
    let err = w.virts[0].vsend_blocking(&w.fabric, &mut w.clients[0], h, src, b"x").unwrap_err();
    assert!(matches!(err, VirtError::Exhausted { attempts, .. } if attempts == MAX_RESOLVE_ATTEMPTS));
    assert_eq!(w.fabric.metrics().sent, 0);
}

#[test]
fn foreign_and_malformed_datagrams_are_counted_and_dropped() {
    let mut virt = UdVirt::new(ResolvePolicy::PerSend);
    let me = VirtualEndpointId::new(1, 64);
    let other = VirtualEndpointId::new(2, 64);
    assert!(virt.accept(me, &add_header(other, other, b"x")).is_none());
    assert!(virt.accept(me, b"short").is_none());
    let m = virt.accept(me, &add_header(other, me, b"ok")).unwrap();
    assert_eq!((m.src, m.payload.as_slice()), (other, &b"ok"[..]));
    let s = virt.stats();
    assert_eq!((s.misdelivered, s.malformed, s.received), (1, 1, 1));
}

#[test]
fn snapshot_restores_handles_and_table() {
    let mut w = World::new(2, ResolvePolicy::GenerationCached, 6);
    let h = w.virts[0].vcreate_ah(w.vids[1]);
    w.send(0, h, b"x");
    let snap = w.virts[0].snapshot();
    let restored = UdVirt::restore(snap.clone(), ResolvePolicy::GenerationCached);
    assert_eq!(restored.snapshot(), snap);
    assert_eq!(restored.inspect_handle(h).map(|x| x.target), Some(w.vids[1]));
    assert!(restored.table().local_owned.contains(&w.vids[0]));
}
