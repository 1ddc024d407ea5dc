//! Engine behavior over exFAT volumes, driven end to end: driver-shaped
//! writes in, sealed log bytes and indicators out.

mod common;

use common::{exfat_cfg, exfat_image, plan_ops, Rig, K0};
use wormbox_core::engine::{
    DeferReason, EngineEvent, ExtractionBasis, IndicatorKind, Policy,
};
use wormbox_core::hostsim::{AllocPolicy, ExfatSim};
use wormbox_core::nbd::{WriteGate, EPERM};
use wormbox_core::seal::audit;

const MB4: usize = 4 << 20;

fn payload(n: usize, seed: u8) -> Vec<u8> {
    (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed) | 1).collect()
}

#[test]
fn clean_append_seals_after_quiescence() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let sim = ExfatSim::attach(&rig.img).unwrap();
    let data = payload(10_000, 3);
    let mut clock = rig.clock();
    sim.append(&rig.img, "w.log", &data, AllocPolicy::FirstFit, &mut clock).unwrap();
    rig.pump();
    rig.settle();

    assert_eq!(rig.sealed(), vec![(1, 0, 10_000)]);
    let basis = rig
        .events
        .iter()
        .find_map(|e| match e {
            EngineEvent::Sealed { basis, .. } => Some(*basis),
            _ => None,
        })
        .unwrap();
    assert_eq!(basis, ExtractionBasis::Quiescence);
    assert_eq!(rig.log_bytes(1), data);
    assert!(rig.indicators().is_empty());
    let report = audit(&rig.store_dir, K0);
    assert!(report.ok(), "audit failures: {:?}", report.failures);
}

#[test]
fn consecutive_appends_accumulate_in_order() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(7, "w.log")]));
    rig.settle();

    let sim = ExfatSim::attach(&rig.img).unwrap();
    let mut expected = Vec::new();
    for (i, n) in [100usize, 4096, 5000, 1].into_iter().enumerate() {
        let chunk = payload(n, i as u8);
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &chunk, AllocPolicy::FirstFit, &mut clock).unwrap();
        expected.extend_from_slice(&chunk);
        rig.pump();
        rig.settle();
    }

    assert_eq!(rig.log_bytes(7), expected);
    assert_eq!(rig.sealed().len(), 4);
    assert!(audit(&rig.store_dir, K0).ok());
}

#[test]
fn chainless_growth_seals_without_fat_traffic() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let mut sim = ExfatSim::attach(&rig.img).unwrap();
    sim.prefer_no_fat_chain = true;
    let mut expected = Vec::new();
    for (i, n) in [3000usize, 9000, 4096, 700].into_iter().enumerate() {
        let chunk = payload(n, i as u8);
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &chunk, AllocPolicy::FirstFit, &mut clock).unwrap();
        expected.extend_from_slice(&chunk);
        rig.pump();
        rig.settle();
    }

    let set =
        wormbox_core::exfat::lookup_root(&*rig.img, sim.boot(), "w.log").unwrap();
    assert!(set.stream.no_fat_chain());
    assert_eq!(rig.log_bytes(1), expected);
    assert_eq!(rig.sealed().len(), 4);
    assert!(rig.indicators().is_empty());
    assert!(audit(&rig.store_dir, K0).ok());
}

#[test]
fn burst_of_appends_seals_once_per_window() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let sim = ExfatSim::attach(&rig.img).unwrap();
    let mut expected = Vec::new();
    {
        let mut clock = rig.clock();
        for i in 0..5u8 {
            let chunk = payload(700, i);
            sim.append(&rig.img, "w.log", &chunk, AllocPolicy::FirstFit, &mut clock).unwrap();
            expected.extend_from_slice(&chunk);
        }
    }
    rig.pump();
    rig.settle();

    assert_eq!(rig.sealed(), vec![(1, 0, 3500)]);
    assert_eq!(rig.log_bytes(1), expected);
}

#[test]
fn two_watched_files_seal_to_their_own_logs() {
    let image = exfat_image(MB4, &["a.log", "b.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "a.log"), (2, "b.log")]));
    rig.settle();

    let sim = ExfatSim::attach(&rig.img).unwrap();
    let da = payload(3000, 1);
    let db = payload(9000, 2);
    {
        let mut clock = rig.clock();
        sim.append(&rig.img, "a.log", &da, AllocPolicy::FirstFit, &mut clock).unwrap();
        sim.append(&rig.img, "b.log", &db, AllocPolicy::FirstFit, &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();

    assert_eq!(rig.log_bytes(1), da);
    assert_eq!(rig.log_bytes(2), db);
    assert!(audit(&rig.store_dir, K0).ok());
}

#[test]
fn torn_append_defers_then_seals_when_complete() {
    let image = exfat_image(MB4, &["w.log"]);
    let data = payload(8192, 9);

    // Plan a full append on a shadow copy, then feed the dirent update
    // (the last op) before the data and FAT writes.
    let ops = plan_ops(&image, 1_000_000, |img, clock| {
        let sim = ExfatSim::attach(img).unwrap();
        sim.append(img, "w.log", &data, AllocPolicy::FirstFit, clock).unwrap();
    });
    assert!(ops.len() >= 3);

    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let (dirent_op, rest) = ops.split_last().unwrap();
    let mut clock = rig.clock();
    rig.img.apply_write(dirent_op.0, &dirent_op.1, clock()).unwrap();
    drop(clock);
    rig.pump();
    rig.settle();

    assert!(rig.sealed().is_empty(), "incomplete append must not seal");
    assert!(
        rig.events.iter().any(|e| matches!(
            e,
            EngineEvent::Deferred { reason: DeferReason::MappingIncomplete | DeferReason::NotCoherent, .. }
        )),
        "expected a defer, got {:?}",
        rig.events
    );
    assert!(rig.indicators().is_empty(), "defer must not raise an indicator");

    let mut clock = rig.clock();
    for (off, bytes) in rest {
        rig.img.apply_write(*off, bytes, clock()).unwrap();
    }
    drop(clock);
    rig.pump();
    rig.settle();

    assert_eq!(rig.sealed(), vec![(1, 0, 8192)]);
    assert_eq!(rig.log_bytes(1), data);
    assert!(rig.indicators().is_empty());
}

#[test]
fn truncate_raises_size_shrink_once_and_freezes() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let sim = ExfatSim::attach(&rig.img).unwrap();
    let data = payload(5000, 4);
    {
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &data, AllocPolicy::FirstFit, &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();
    assert_eq!(rig.sealed(), vec![(1, 0, 5000)]);
    let seal_log_before = rig.seal_log_bytes();

    {
        let mut clock = rig.clock();
        sim.truncate(&rig.img, "w.log", 100, &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();

    let shrinks = rig.indicators_of(IndicatorKind::SizeShrink);
    assert_eq!(shrinks.len(), 1, "exactly one size_shrink, got {:?}", rig.indicators());
    assert_eq!(shrinks[0].log_id, Some(1));
    assert!(rig.events.iter().any(|e| matches!(e, EngineEvent::Frozen { .. })));
    assert!(rig.engine.is_frozen());

    // A second, different shrink of the same file must not duplicate the
    // indicator.
    {
        let mut clock = rig.clock();
        sim.truncate(&rig.img, "w.log", 10, &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();
    assert_eq!(rig.indicators_of(IndicatorKind::SizeShrink).len(), 1);

    // The incident is sealed, then the freeze marker ends the chain; the
    // sealed log bytes survive bit for bit.
    let report = audit(&rig.store_dir, K0);
    assert!(report.ok(), "audit failures: {:?}", report.failures);
    assert!(report.frozen);
    let incidents = std::fs::read(rig.store_dir.join("incidents.log")).unwrap();
    let incident_text = String::from_utf8(incidents).unwrap();
    assert!(incident_text.contains("size_shrink"), "{incident_text}");
    assert_eq!(rig.log_bytes(1), data);
    let seal_log_after = rig.seal_log_bytes();
    assert_eq!(&seal_log_after[..seal_log_before.len()], &seal_log_before[..]);
}

#[test]
fn read_only_policy_closes_gate_and_honeypot_keeps_it_open() {
    for (policy, writable_after) in
        [(Policy::ReadOnlyRemount, false), (Policy::Honeypot, true)]
    {
        let image = exfat_image(MB4, &["w.log"]);
        let mut cfg = exfat_cfg(&[(1, "w.log")]);
        cfg.policy = policy;
        let mut rig = Rig::new(&image, cfg);
        rig.settle();
        let gate = rig.engine.gate();
        assert!(gate.admit(0, 512).is_ok());

        let sim = ExfatSim::attach(&rig.img).unwrap();
        {
            let mut clock = rig.clock();
            sim.append(&rig.img, "w.log", &payload(1000, 1), AllocPolicy::FirstFit, &mut clock)
                .unwrap();
        }
        rig.pump();
        rig.settle();
        {
            let mut clock = rig.clock();
            sim.truncate(&rig.img, "w.log", 0, &mut clock).unwrap();
        }
        rig.pump();
        rig.settle();

        assert!(rig.engine.is_frozen(), "{policy:?} must freeze");
        assert_eq!(gate.is_writable(), writable_after, "{policy:?} gate state");
        if !writable_after {
            assert_eq!(gate.admit(0, 512), Err(EPERM));
        }
    }
}

#[test]
fn post_freeze_appends_land_in_divergence_journal() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut cfg = exfat_cfg(&[(1, "w.log")]);
    cfg.policy = Policy::Honeypot;
    let mut rig = Rig::new(&image, cfg);
    rig.settle();

    let sim = ExfatSim::attach(&rig.img).unwrap();
    let first = payload(2000, 5);
    {
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &first, AllocPolicy::FirstFit, &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();
    {
        let mut clock = rig.clock();
        sim.truncate(&rig.img, "w.log", 7, &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();
    assert!(rig.engine.is_frozen());
    let seal_log_frozen = rig.seal_log_bytes();
    let log_frozen = rig.log_bytes(1);

    // The honeypot keeps accepting writes; growth is journaled, not sealed.
    {
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &payload(3000, 6), AllocPolicy::FirstFit, &mut clock)
            .unwrap();
    }
    rig.pump();
    rig.settle();

    assert!(rig.events.iter().any(|e| matches!(e, EngineEvent::Divergence { .. })));
    let divergence =
        std::fs::read_to_string(rig.store_dir.join("divergence.jsonl")).unwrap();
    assert!(!divergence.trim().is_empty());
    for line in divergence.lines() {
        assert!(line.starts_with('{') && line.ends_with('}'), "not json-lines: {line}");
    }
    assert_eq!(rig.seal_log_bytes(), seal_log_frozen, "seal chain grew after freeze");
    assert_eq!(rig.log_bytes(1), log_frozen, "sealed payload changed after freeze");
    assert!(audit(&rig.store_dir, K0).ok());
}

#[test]
fn overwrite_with_identical_bytes_is_benign() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let sim = ExfatSim::attach(&rig.img).unwrap();
    let data = payload(4096, 8);
    {
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &data, AllocPolicy::FirstFit, &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();
    assert_eq!(rig.sealed().len(), 1);

    {
        let mut clock = rig.clock();
        sim.overwrite(&rig.img, "w.log", 100, &data[100..600], &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();

    assert!(rig.indicators().is_empty(), "identical rewrite flagged: {:?}", rig.indicators());
    assert!(!rig.engine.is_frozen());
    assert_eq!(rig.log_bytes(1), data);
}

#[test]
fn overwrite_with_different_bytes_raises_non_append_write() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let sim = ExfatSim::attach(&rig.img).unwrap();
    let data = payload(4096, 8);
    {
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &data, AllocPolicy::FirstFit, &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();

    {
        let mut clock = rig.clock();
        sim.overwrite(&rig.img, "w.log", 200, b"history rewritten", &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();

    let hits = rig.indicators_of(IndicatorKind::NonAppendWrite);
    assert_eq!(hits.len(), 1, "{:?}", rig.indicators());
    assert_eq!(hits[0].log_id, Some(1));
    assert!(rig.engine.is_frozen());
    assert_eq!(rig.log_bytes(1), data, "sealed history must be unaffected");
    assert!(audit(&rig.store_dir, K0).ok());
}

#[test]
fn boot_region_immutable_field_change_raises_superblock_tamper() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let mut sector0 = rig.img.read_range(0, 512).unwrap();
    // Shrink the declared volume length.
    sector0[72] = sector0[72].wrapping_sub(1);
    let mut clock = rig.clock();
    rig.img.apply_write(0, &sector0, clock()).unwrap();
    drop(clock);
    rig.pump();

    let hits = rig.indicators_of(IndicatorKind::SuperblockTamper);
    assert_eq!(hits.len(), 1, "{:?}", rig.indicators());
    assert!(rig.engine.is_frozen());
}

#[test]
fn dirty_flag_and_percent_updates_are_benign() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let mut sim = ExfatSim::attach(&rig.img).unwrap();
    sim.toggle_dirty = true;
    sim.update_percent = true;
    let data = payload(2000, 2);
    {
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &data, AllocPolicy::FirstFit, &mut clock).unwrap();
    }
    rig.pump();
    rig.settle();

    assert!(rig.indicators().is_empty(), "{:?}", rig.indicators());
    assert_eq!(rig.sealed(), vec![(1, 0, 2000)]);
    assert_eq!(rig.log_bytes(1), data);
}

#[test]
fn zero_cluster_defers_then_commits_after_budget() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut cfg = exfat_cfg(&[(1, "w.log")]);
    cfg.max_zero_retries = 2;
    let mut rig = Rig::new(&image, cfg);
    rig.settle();

    // Middle cluster is entirely zero.
    let mut data = payload(3 * 4096, 1);
    data[4096..8192].fill(0);
    let sim = ExfatSim::attach(&rig.img).unwrap();
    {
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &data, AllocPolicy::FirstFit, &mut clock).unwrap();
    }
    rig.pump();

    let sealed = rig.settle_until(8, |e| matches!(e, EngineEvent::Sealed { .. }));
    assert!(sealed, "append never sealed: {:?}", rig.events);

    // Retries of the same reason extend the window without repeating the
    // event, so a single defer covers the whole retry loop.
    let zero_defers = rig
        .events
        .iter()
        .filter(|e| matches!(e, EngineEvent::Deferred { reason: DeferReason::ZeroBlock, .. }))
        .count();
    assert_eq!(zero_defers, 1, "{:?}", rig.events);
    assert!(rig
        .events
        .iter()
        .any(|e| matches!(e, EngineEvent::ZeroCommitted { log_id: 1, .. })));
    assert_eq!(rig.log_bytes(1), data, "zero run must be sealed as written");
    assert!(rig.indicators().is_empty());
    assert!(audit(&rig.store_dir, K0).ok());
}

#[test]
fn filling_the_volume_raises_exhaustion() {
    let image = exfat_image(MB4, &["w.log"]);
    let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
    rig.settle();

    let sim = ExfatSim::attach(&rig.img).unwrap();
    let free = wormbox_core::exfat::free_cluster_count(&*rig.img, sim.boot()).unwrap();
    let floor = (u64::from(sim.boot().cluster_count) / 100).max(1);
    let cluster = sim.boot().cluster_size() as usize;
    // Leave fewer than `floor` clusters free.
    let fill = (free - floor + 1) as usize * cluster;
    let chunk = payload(cluster * 64, 3);
    let mut written = 0usize;
    while written < fill {
        let take = chunk.len().min(fill - written);
        let mut clock = rig.clock();
        sim.append(&rig.img, "w.log", &chunk[..take], AllocPolicy::FirstFit, &mut clock)
            .unwrap();
        written += take;
        rig.pump();
    }
    rig.settle();
    rig.settle();

    let hits = rig.indicators_of(IndicatorKind::VolumeExhaustion);
    assert_eq!(hits.len(), 1, "{:?}", rig.indicators());
    assert!(rig.engine.is_frozen());
}

#[test]
fn restart_resumes_from_persisted_store() {
    let image = exfat_image(MB4, &["w.log"]);
    let data1 = payload(3000, 1);
    let data2 = payload(2000, 9);

    let (img_path, store_dir);
    {
        let mut rig = Rig::new(&image, exfat_cfg(&[(1, "w.log")]));
        rig.settle();
        let sim = ExfatSim::attach(&rig.img).unwrap();
        {
            let mut clock = rig.clock();
            sim.append(&rig.img, "w.log", &data1, AllocPolicy::FirstFit, &mut clock).unwrap();
        }
        rig.pump();
        rig.settle();
        assert_eq!(rig.log_bytes(1), data1);
        img_path = rig.dir.path().join("vol.img");
        store_dir = rig.dir.path().join("store");

        // Keep the tempdir alive by leaking it; the second half reopens the
        // same files.
        std::mem::forget(rig.dir);
    }

    let img = std::sync::Arc::new(
        wormbox_core::block::BlockImage::open(
            &img_path,
            &wormbox_core::block::ImageOptions::default(),
        )
        .unwrap(),
    );
    let rx = img.subscribe().unwrap();
    let store = wormbox_core::seal::SealStore::open(&store_dir).unwrap();
    assert_eq!(store.authenticated_len(1), 3000);
    let mut engine =
        wormbox_core::engine::Engine::new(std::sync::Arc::clone(&img), store, exfat_cfg(&[(1, "w.log")]))
            .unwrap();

    let sim = ExfatSim::attach(&img).unwrap();
    let mut t = 1_000_000u64;
    let mut clock = || {
        t += 50_000;
        t
    };
    sim.append(&img, "w.log", &data2, AllocPolicy::FirstFit, &mut clock).unwrap();
    while let Ok(op) = rx.try_recv() {
        engine.on_write(&op);
    }
    let mut now = 2_000_000u64;
    let end = now + engine.config().tau_ns() * 2;
    while now < end {
        now += engine.config().lambda_ns / 2;
        engine.tick(now);
    }
    let events = engine.take_events();
    assert!(
        events.iter().any(|e| matches!(
            e,
            EngineEvent::Sealed { log_id: 1, offset: 3000, length: 2000, .. }
        )),
        "{events:?}"
    );
    let whole = std::fs::read(store_dir.join("logs/1.log")).unwrap();
    assert_eq!(&whole[..3000], &data1[..]);
    assert_eq!(&whole[3000..], &data2[..]);
    assert!(audit(&store_dir, K0).ok());
}
