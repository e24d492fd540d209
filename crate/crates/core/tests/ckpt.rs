use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use ckptf_core::ckpt::image::MAGIC;
use ckptf_core::ckpt::store::load_eager;
use ckptf_core::ckpt::{
    is_legal_sequence, Channel, CheckpointImage, DrainPolicy, DrainReport, DrainStep, Drainer, DrainedMessage,
    ImageError, ImageStore, LazyImage, Memory, Phase, PhaseTracker,
};
use ckptf_core::fabric::{Address, QpNum, RealLid, Tick, MAX_QPN};
use ckptf_core::virt::{ShadowAddressHandle, ShadowHandleId, TranslationTable, VirtSnapshot, VirtualEndpointId};

fn vid() -> impl Strategy<Value = VirtualEndpointId> {
    (any::<u16>(), 0..=MAX_QPN).prop_map(|(l, q)| VirtualEndpointId::new(l, q))
}

fn addr() -> impl Strategy<Value = Address> {
    (any::<u16>(), 0..=MAX_QPN, any::<u32>())
        .prop_map(|(l, q, generation)| Address { lid: RealLid(l), qpn: QpNum::new(q).unwrap(), generation })
}

fn snapshot() -> impl Strategy<Value = VirtSnapshot> {
    let handle = (any::<u32>(), vid(), prop::option::of(addr()))
        .prop_map(|(id, target, real_ah)| ShadowAddressHandle { id: ShadowHandleId(id), target, real_ah });
    (
        prop::collection::btree_map(vid(), addr(), 0..6),
        prop::collection::btree_set(vid(), 0..4),
        prop::collection::vec(handle, 0..5),
        any::<u32>(),
    )
        .prop_map(|(entries, local_owned, handles, next_handle)| {
            let mut table = TranslationTable::default();
            table.entries.extend(entries);
            table.local_owned.extend(local_owned);
            VirtSnapshot { table, handles, next_handle }
        })
}

fn drained() -> impl Strategy<Value = DrainedMessage> {
    let channel = prop_oneof![any::<u32>().prop_map(Channel::Rc), vid().prop_map(Channel::Ud)];
    (channel, prop::collection::vec(any::<u8>(), 0..200)).prop_map(|(channel, payload)| DrainedMessage { channel, payload })
}

fn regions() -> impl Strategy<Value = BTreeMap<String, Vec<u8>>> {
    prop::collection::btree_map("[a-z]{1,8}", prop::collection::vec(any::<u8>(), 0..1500), 0..6)
}

fn image() -> impl Strategy<Value = CheckpointImage> {
    (any::<u32>(), any::<u32>(), regions(), snapshot(), prop::collection::vec(drained(), 0..5)).prop_map(
        |(rank, generation, regions, virt, drained)| CheckpointImage { rank, generation, regions, virt, drained },
    )
}

/// Legal successors, listed independently of `Phase::can_follow`.
fn successors(p: Phase) -> &'static [Phase] {
    use Phase::*;
    match p {
        Running => &[Suspended],
        Suspended => &[Draining],
        Draining => &[Writing],
        Writing => &[Resuming],
        Resuming => &[Running],
        Restarting => &[Resuming],
    }
}

const PHASES: [Phase; 6] =
    [Phase::Running, Phase::Suspended, Phase::Draining, Phase::Writing, Phase::Resuming, Phase::Restarting];

/// Drains a queue of arrival times with a policy, advancing time only when asked.
fn drain(arrivals: &[Tick], policy: DrainPolicy) -> (DrainStep, usize) {
    let mut queue = arrivals.to_vec();
    let mut d = Drainer::new(0, policy);
    let mut now = 0;
    loop {
        let step = d.step(now, |limit| {
            let before = queue.len();
            queue.retain(|t| *t > limit);
            before - queue.len()
        });
        match step {
            DrainStep::Wait(t) => {
                assert!(t > now);
                now = t;
            }
            done => return (done, queue.len()),
        }
    }
}

fn write_committed(store: &ImageStore, image: &CheckpointImage) {
    let regions = image.regions.iter().map(|(k, v)| (k.as_str(), v.as_slice()));
    let pending =
        store.write_pending(image.rank, image.generation, regions, &image.virt, &image.drained).unwrap();
    store.commit(&pending).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn image_round_trips_byte_exact(img in image()) {
        let bytes = img.to_bytes();
        prop_assert_eq!(&bytes[..8], MAGIC.as_slice());
        let body = bytes.len() - 4;
        let crc = crc32(&bytes[..body]).to_le_bytes();
        prop_assert_eq!(&bytes[body..], crc.as_slice());
        let back = CheckpointImage::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_bit_flip_is_refused(img in image(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = img.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(CheckpointImage::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_is_refused(img in image(), cut in any::<prop::sample::Index>()) {
        let bytes = img.to_bytes();
        let keep = cut.index(bytes.len());
        prop_assert!(CheckpointImage::from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn lazy_and_eager_loads_agree(img in image(), picks in prop::collection::vec(any::<prop::sample::Index>(), 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::new(dir.path());
        write_committed(&store, &img);
        let path = store.path(img.generation, img.rank);
        let eager = load_eager(&path).unwrap();
        prop_assert_eq!(&eager, &img);

        let lazy = Arc::new(LazyImage::open(&path).unwrap());
        prop_assert_eq!(lazy.size, img.to_bytes().len() as u64);
        prop_assert_eq!(&lazy.virt, &img.virt);
        prop_assert_eq!(&lazy.drained, &img.drained);
        let total: u64 = img.regions.values().map(|v| v.len() as u64).sum();
        let mut mem = Memory::mapped(lazy);
        prop_assert_eq!(mem.stats().mapped_bytes, total);
        prop_assert_eq!(mem.stats().materialized_bytes, 0);

        let tags: Vec<&String> = img.regions.keys().collect();
        let mut touched = BTreeSet::new();
        if !tags.is_empty() {
            for p in &picks {
                let tag = tags[p.index(tags.len())];
                prop_assert_eq!(mem.get(tag).unwrap().unwrap(), img.regions[tag].as_slice());
                prop_assert!(mem.is_resident(tag));
                touched.insert(tag.clone());
            }
        }
        let read: u64 = touched.iter().map(|t| img.regions[t].len() as u64).sum();
        prop_assert_eq!(mem.stats().materialized_bytes, read);
        prop_assert_eq!(mem.stats().materializations, touched.len() as u64);

        let all: BTreeMap<String, Vec<u8>> =
            mem.snapshot().unwrap().into_iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect();
        prop_assert_eq!(&all, &img.regions);
        prop_assert_eq!(mem.stats().materialized_bytes, total);
        prop_assert!(img.regions.is_empty() || mem.fully_materialized_at().is_some());
    }

    #[test]
    fn tracker_accepts_exactly_the_legal_moves(start in 0usize..6, moves in prop::collection::vec(0usize..6, 0..20)) {
        let mut tracker = PhaseTracker::starting_at(PHASES[start]);
        for m in moves {
            let next = PHASES[m];
            let legal = successors(tracker.current()).contains(&next);
            prop_assert_eq!(tracker.enter(next).is_ok(), legal);
        }
        let starts_ok = matches!(PHASES[start], Phase::Running | Phase::Restarting);
        prop_assert_eq!(is_legal_sequence(tracker.history()), starts_ok);
    }

    #[test]
    fn legality_matches_the_transition_table(seq in prop::collection::vec(0usize..6, 0..12)) {
        let seq: Vec<Phase> = seq.into_iter().map(|i| PHASES[i]).collect();
        let expect = matches!(seq.first(), Some(Phase::Running | Phase::Restarting))
            && seq.windows(2).all(|w| successors(w[0]).contains(&w[1]));
        prop_assert_eq!(is_legal_sequence(&seq), expect);
    }

    #[test]
    fn dense_arrivals_take_latency_over_window_plus_one(window in 1u64..20, latency in 0u64..200, per_tick in 1usize..4) {
        let arrivals: Vec<Tick> = (0..=latency).flat_map(|t| std::iter::repeat(t).take(per_tick)).collect();
        let policy = DrainPolicy { window, max_windows: 1000 };
        let (step, left) = drain(&arrivals, policy);
        let windows = latency.div_ceil(window) as u32 + 1;
        prop_assert_eq!(step, DrainStep::Done(DrainReport { drained: arrivals.len(), windows }));
        prop_assert_eq!(left, 0);
    }

    #[test]
    fn drain_stops_at_the_first_empty_window(window in 1u64..10, arrivals in prop::collection::vec(0u64..100, 0..40)) {
        let policy = DrainPolicy { window, max_windows: 1000 };
        let (step, left) = drain(&arrivals, policy);
        let mut k = 1u64;
        while arrivals.iter().any(|t| *t > (k - 1) * window && *t <= k * window) {
            k += 1;
        }
        let taken = arrivals.iter().filter(|t| **t <= k * window).count();
        prop_assert_eq!(step, DrainStep::Done(DrainReport { drained: taken, windows: k as u32 }));
        prop_assert_eq!(left, arrivals.len() - taken);
    }

    #[test]
    fn busy_fabric_times_out_after_the_window_budget(window in 1u64..10, max_windows in 2u32..10) {
        let horizon = window * u64::from(max_windows) + 5;
        let arrivals: Vec<Tick> = (1..=horizon).collect();
        let (step, _) = drain(&arrivals, DrainPolicy { window, max_windows });
        match step {
            DrainStep::TimedOut(r) => prop_assert_eq!(r.windows, max_windows),
            other => prop_assert!(false, "expected a timeout, got {:?}", other),
        }
    }

    #[test]
    fn latest_complete_needs_every_rank(
        ranks in 1u32..5,
        files in prop::collection::btree_set((0u32..6, 0u32..5), 0..20),
        pending in prop::collection::btree_set((0u32..6, 0u32..5), 0..6),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::new(dir.path());
        let empty = VirtSnapshot::default();
        for (g, r) in &files {
            let p = store.write_pending(*r, *g, std::iter::empty(), &empty, &[]).unwrap();
            store.commit(&p).unwrap();
        }
        for (g, r) in &pending {
            if !files.contains(&(*g, *r)) {
                store.write_pending(*r, *g, std::iter::empty(), &empty, &[]).unwrap();
            }
        }
        let complete: Vec<u32> =
            (0u32..6).filter(|g| (0..ranks).all(|r| files.contains(&(*g, r)))).collect();
        prop_assert_eq!(store.complete_generations(ranks), complete.clone());
        prop_assert_eq!(store.latest_complete(ranks), complete.last().copied());
    }
}

#[test]
fn lazy_open_refuses_a_corrupt_file() {
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::new(dir.path());
    let mut regions = BTreeMap::new();
    regions.insert("app".to_string(), vec![7u8; 4096]);
    let img = CheckpointImage { rank: 3, generation: 2, regions, virt: VirtSnapshot::default(), drained: vec![] };
    write_committed(&store, &img);
    let path = store.path(2, 3);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[100] ^= 0x10;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(LazyImage::open(&path), Err(ImageError::CrcMismatch { .. })));
    assert!(matches!(load_eager(&path), Err(ImageError::CrcMismatch { .. })));
}

#[test]
fn wrong_magic_is_refused() {
    let img = CheckpointImage { rank: 0, generation: 0, regions: BTreeMap::new(), virt: VirtSnapshot::default(), drained: vec![] };
    let mut bytes = img.to_bytes();
    bytes[7] = b'2';
    let body = bytes.len() - 4;
    let crc = crc32(&bytes[..body]);
    bytes[body..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(CheckpointImage::from_bytes(&bytes), Err(ImageError::BadMagic)));
}

#[test]
fn uncommitted_image_is_not_visible() {
    let dir = tempfile::tempdir().unwrap();
    let store = ImageStore::new(dir.path());
    let p = store.write_pending(0, 1, std::iter::empty(), &VirtSnapshot::default(), &[]).unwrap();
    assert_eq!(store.latest_complete(1), None);
    assert!(!p.path.exists());
    store.discard(&p).unwrap();
    assert!(!p.temp.exists());
    store.discard(&p).unwrap();
}

#[test]
fn resident_memory_reports_nothing_mapped() {
    let mut regions = BTreeMap::new();
    regions.insert("a".to_string(), vec![1, 2, 3]);
    let mut mem = Memory::from_regions(regions);
    assert_eq!(mem.get("a").unwrap().unwrap(), &[1, 2, 3]);
    assert_eq!(mem.get("b").unwrap(), None);
    mem.get_mut("a").unwrap().unwrap().push(4);
    assert_eq!(mem.len_of("a"), Some(4));
    assert_eq!(mem.stats().mapped_bytes, 0);
    assert_eq!(mem.stats().materialized_bytes, 0);
}

/// Bitwise CRC-32 (IEEE, reflected), independent of the library used by the image code.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for b in bytes {
        crc ^= u32::from(*b);
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}
