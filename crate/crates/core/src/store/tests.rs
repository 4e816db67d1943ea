use std::sync::atomic::{AtomicBool, Ordering};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::clock::SimClock;
use crate::tensor::{glorot_init, Tensor};

const S: &str = "sess";

fn spec() -> ModelSpec {
    ModelSpec::logistic_regression(4, 3)
}

fn setup(limit: usize) -> (ParamStore, StoreCredential, Arc<SimClock>) {
    let clock = Arc::new(SimClock::new(0.0));
    let (store, admin) = ParamStore::with_backend(
        StoreConfig { doc_size_limit: limit },
        Arc::new(MemoryBackend::new()),
        clock.clone(),
    );
    store.create_session(&admin, S, spec()).unwrap();
    (store, admin, clock)
}

fn result(client: &str, round: u64, seed: u64) -> ClientResult {
    ClientResult {
        session_id: S.into(),
        round,
        client_id: client.into(),
        params: glorot_init(&spec(), seed).unwrap(),
        cardinality: 10 + seed,
        test_metrics: None,
    }
}

fn vector_model(n: usize) -> (ModelSpec, ParameterSet) {
    // a single dense layer n -> 1 holds n + 1 scalars
    let m = ModelSpec::logistic_regression(n, 1);
    let p = ParameterSet::new(vec![
        (ModelSpec::kernel_name(0), Tensor::zeros(vec![n, 1])),
        (ModelSpec::bias_name(0), Tensor::zeros(vec![1])),
    ])
    .unwrap();
    (m, p)
}

#[test]
fn versions_start_at_zero_and_latest_wins() {
    let (store, admin, _) = setup(DEFAULT_DOC_SIZE_LIMIT);
    let agg = store.issue_store_credential(&admin, S, Grant::Aggregator, 60.0).unwrap();
    assert!(matches!(store.get_global_model(&agg, S), Err(StoreError::NoGlobalModel(_))));
    let a = glorot_init(&spec(), 1).unwrap();
    let b = glorot_init(&spec(), 2).unwrap();
    assert_eq!(store.put_global_model(&agg, S, &a).unwrap(), 0);
    assert_eq!(store.put_global_model(&agg, S, &b).unwrap(), 1);
    let got = store.get_global_model(&agg, S).unwrap();
    assert_eq!(got.version, 1);
    assert_eq!(encode_parameter_set(&got), encode_parameter_set(&b));
    assert_eq!(store.get_global_version(&agg, S, Some(0)).unwrap().entries(), a.entries());
}

#[test]
fn serialized_sizes_chunk_as_expected() {
    // 2.3 MB and 26.4 MB of f64 payload against the default limit
    for (scalars, chunks) in [(2_300_000 / 8, 1), (26_400_000 / 8, 2)] {
        let clock = Arc::new(SimClock::new(0.0));
        let (store, admin) =
            ParamStore::with_backend(StoreConfig::default(), Arc::new(MemoryBackend::new()), clock);
        let (m, mut p) = vector_model(scalars - 1);
        for (i, v) in p.iter_mut().next().unwrap().1.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.5;
        }
        store.create_session(&admin, S, m).unwrap();
        store.put_global_model(&admin, S, &p).unwrap();
        let blob = store.global_blob(S).unwrap().unwrap();
        assert_eq!(blob.chunk_ids.len(), chunks);
        let back = store.get_global_model(&admin, S).unwrap();
        assert_eq!(encode_parameter_set(&back), encode_parameter_set(&p));
    }
}

#[test]
fn client_cannot_write_global_or_read_results() {
    let (store, admin, _) = setup(DEFAULT_DOC_SIZE_LIMIT);
    let c = store.issue_store_credential(&admin, S, Grant::Client("a".into()), 60.0).unwrap();
    let p = glorot_init(&spec(), 0).unwrap();
    assert!(matches!(
        store.put_global_model(&c, S, &p),
        Err(StoreError::Authorization { .. })
    ));
    store.put_client_result(&c, &result("a", 0, 0)).unwrap();
    // not even its own result
    assert!(store.stream_round_results(&c, S, 0, 1, None).is_err());
    assert!(store.list_round_results(&c, S, 0).is_err());
}

#[test]
fn forged_scopes_are_ignored() {
    let (store, admin, _) = setup(DEFAULT_DOC_SIZE_LIMIT);
    let mut c = store.issue_store_credential(&admin, S, Grant::Client("a".into()), 60.0).unwrap();
    c.scopes.insert(Scope::Admin);
    c.scopes.insert(Scope::WriteGlobal { session: S.into() });
    let p = glorot_init(&spec(), 0).unwrap();
    assert!(store.put_global_model(&c, S, &p).is_err());
    let mut bad = c.clone();
    bad.secret = "00".into();
    assert!(matches!(
        store.put_client_result(&bad, &result("a", 0, 0)),
        Err(StoreError::Authentication(AuthFailure::BadSecret))
    ));
}

#[test]
fn other_session_is_unauthorized() {
    let (store, admin, _) = setup(DEFAULT_DOC_SIZE_LIMIT);
    store.create_session(&admin, "other", spec()).unwrap();
    store
        .put_global_model(&admin, "other", &glorot_init(&spec(), 0).unwrap())
        .unwrap();
    let c = store.issue_store_credential(&admin, S, Grant::Client("a".into()), 60.0).unwrap();
    assert!(matches!(
        store.get_global_model(&c, "other"),
        Err(StoreError::Authorization { .. })
    ));
}

#[test]
fn isolation_matrix_ten_principals() {
    let (store, admin, _) = setup(256);
    let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
    let creds: Vec<_> = ids
        .iter()
        .map(|id| store.issue_store_credential(&admin, S, Grant::Client(id.clone()), 60.0).unwrap())
        .collect();
    for (i, id) in ids.iter().enumerate() {
        store.put_client_result(&creds[i], &result(id, 0, i as u64)).unwrap();
    }
    let p = glorot_init(&spec(), 9).unwrap();
    for (i, ci) in creds.iter().enumerate() {
        assert!(store.put_global_model(ci, S, &p).unwrap_err().is_auth());
        assert!(store.stream_round_results(ci, S, 0, 1, None).unwrap_err().is_auth());
        for (j, id) in ids.iter().enumerate() {
            if i != j {
                let only = BTreeSet::from([id.clone()]);
                assert!(store.stream_round_results(ci, S, 0, 1, Some(&only)).is_err());
                assert!(store.put_client_result(ci, &result(id, 0, 0)).unwrap_err().is_auth());
            }
        }
    }
}

#[test]
fn idempotent_overwrite_and_stale_round() {
    let (store, admin, _) = setup(DEFAULT_DOC_SIZE_LIMIT);
    let c = store.issue_store_credential(&admin, S, Grant::Client("a".into()), 60.0).unwrap();
    store.put_client_result(&c, &result("a", 0, 1)).unwrap();
    store.put_client_result(&c, &result("a", 0, 1)).unwrap();
    assert_eq!(store.list_round_results(&admin, S, 0).unwrap(), vec!["a"]);
    store.begin_round(&admin, S, 1).unwrap();
    let before = store.state_digest().unwrap();
    assert!(matches!(
        store.put_client_result(&c, &result("a", 0, 1)),
        Err(StoreError::StaleRound { got: 0, current: 1 })
    ));
    assert_eq!(store.state_digest().unwrap(), before);
}

#[test]
fn rejects_bad_results() {
    let (store, admin, _) = setup(DEFAULT_DOC_SIZE_LIMIT);
    let c = store.issue_store_credential(&admin, S, Grant::Client("a".into()), 60.0).unwrap();
    let mut r = result("a", 0, 0);
    r.cardinality = 0;
    assert!(matches!(store.put_client_result(&c, &r), Err(StoreError::InvalidResult(_))));
    let mut r = result("a", 0, 0);
    r.params = glorot_init(&ModelSpec::logistic_regression(5, 3), 0).unwrap();
    assert!(matches!(store.put_client_result(&c, &r), Err(StoreError::InvalidResult(_))));
}

#[test]
fn revocation_and_expiry() {
    let (store, admin, clock) = setup(DEFAULT_DOC_SIZE_LIMIT);
    store.put_global_model(&admin, S, &glorot_init(&spec(), 0).unwrap()).unwrap();
    let c = store.issue_store_credential(&admin, S, Grant::Client("a".into()), 60.0).unwrap();
    store.get_global_model(&c, S).unwrap();
    store.revoke_credential(&admin, &c.principal).unwrap();
    assert!(matches!(
        store.get_global_model(&c, S),
        Err(StoreError::Authentication(AuthFailure::Revoked))
    ));
    let d = store.issue_store_credential(&admin, S, Grant::Client("a".into()), 60.0).unwrap();
    store.get_global_model(&d, S).unwrap();
    clock.advance(60.0);
    assert!(matches!(
        store.get_global_model(&d, S),
        Err(StoreError::Authentication(AuthFailure::Expired))
    ));
    assert!(store.issue_store_credential(&d, S, Grant::Aggregator, 1.0).is_err());
}

fn stream_sizes(n: usize, batch: usize) -> (Vec<usize>, BTreeSet<String>, usize) {
    let (store, admin, _) = setup(DEFAULT_DOC_SIZE_LIMIT);
    for i in 0..n {
        let id = format!("c{i:03}");
        let c = store.issue_store_credential(&admin, S, Grant::Client(id.clone()), 60.0).unwrap();
        store.put_client_result(&c, &result(&id, 0, i as u64)).unwrap();
    }
    let agg = store.issue_store_credential(&admin, S, Grant::Aggregator, 60.0).unwrap();
    let gauge = Gauge::default();
    let mut sizes = vec![];
    let mut seen = BTreeSet::new();
    for b in store.stream_round_results(&agg, S, 0, batch, None).unwrap().with_gauge(gauge.clone()) {
        let b = b.unwrap();
        sizes.push(b.results.len());
        for r in &b.results {
            assert!(seen.insert(r.client_id.clone()), "duplicate {}", r.client_id);
        }
    }
    let listing: BTreeSet<String> = store.list_round_results(&agg, S, 0).unwrap().into_iter().collect();
    assert_eq!(seen, listing);
    (sizes, seen, gauge.peak())
}

#[test]
fn stream_batches() {
    let (sizes, seen, peak) = stream_sizes(200, 20);
    assert_eq!(sizes, vec![20; 10]);
    assert_eq!(seen.len(), 200);
    assert!(peak <= 20);
    let (sizes, _, peak) = stream_sizes(7, 3);
    assert_eq!(sizes, vec![3, 3, 1]);
    assert!(peak <= 3);
}

#[test]
fn stream_filter_and_zero_batch() {
    let (store, admin, _) = setup(DEFAULT_DOC_SIZE_LIMIT);
    for id in ["a", "b", "c"] {
        let c = store.issue_store_credential(&admin, S, Grant::Client(id.into()), 60.0).unwrap();
        store.put_client_result(&c, &result(id, 0, 1)).unwrap();
    }
    let only = BTreeSet::from(["a".to_string(), "c".to_string()]);
    let got: Vec<String> = store
        .stream_round_results(&admin, S, 0, 5, Some(&only))
        .unwrap()
        .flat_map(|b| b.unwrap().results.into_iter().map(|r| r.client_id).collect::<Vec<_>>())
        .collect();
    assert_eq!(got, vec!["a", "c"]);
    assert!(store.stream_round_results(&admin, S, 0, 0, None).is_err());
}

#[test]
fn counter_is_atomic_under_contention() {
    let (store, admin, _) = setup(DEFAULT_DOC_SIZE_LIMIT);
    let c = store.issue_store_credential(&admin, S, Grant::Client("a".into()), 60.0).unwrap();
    let other = store.issue_store_credential(&admin, S, Grant::Client("b".into()), 60.0).unwrap();
    assert!(store.check_and_increment_counter(&other, "a", 5).is_err());
    let allowed = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..8)
            .map(|_| {
                sc.spawn(|| (0..10).filter(|_| store.check_and_increment_counter(&c, "a", 25).unwrap()).count())
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).sum::<usize>()
    });
    assert_eq!(allowed, 25);
    assert_eq!(store.invocation_count("a"), 25);
}

#[test]
fn no_torn_reads_under_concurrent_puts() {
    let (store, admin, _) = setup(64);
    let (m, _) = vector_model(200);
    store.create_session(&admin, "big", m).unwrap();
    let model = |v: f64| {
        let (_, mut p) = vector_model(200);
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
        p
    };
    store.put_global_model(&admin, "big", &model(0.0)).unwrap();
    let done = AtomicBool::new(false);
    std::thread::scope(|sc| {
        for w in 0..3 {
            let (store, admin) = (&store, &admin);
            sc.spawn(move || {
                for i in 0..40 {
                    store.put_global_model(admin, "big", &model((w * 100 + i) as f64)).unwrap();
                }
            });
        }
        for _ in 0..3 {
            sc.spawn(|| {
                while !done.load(Ordering::Relaxed) {
                    let p = store.get_global_model(&admin, "big").unwrap();
                    let first = p.entries()[0].1.data()[0];
                    assert!(p.iter().all(|(_, t)| t.data().iter().all(|&x| x == first)));
                }
            });
        }
        std::thread::sleep(std::time::Duration::from_millis(300));
        done.store(true, Ordering::Relaxed);
    });
    assert_eq!(store.global_version("big").unwrap(), Some(120));
}

#[test]
fn document_limit_enforced() {
    let (store, _, _) = setup(10);
    assert!(matches!(
        store.put_document("x", vec![0; 11]),
        Err(StoreError::DocumentTooLarge { size: 11, limit: 10, .. })
    ));
    store.put_document("x", vec![0; 10]).unwrap();
}

#[test]
fn directory_store_reopens() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(SimClock::new(0.0));
    let p = glorot_init(&spec(), 3).unwrap();
    {
        let (store, admin) = ParamStore::open_dir(StoreConfig { doc_size_limit: 50 }, dir.path(), clock.clone()).unwrap();
        store.create_session(&admin, S, spec()).unwrap();
        store.put_global_model(&admin, S, &glorot_init(&spec(), 1).unwrap()).unwrap();
        store.put_global_model(&admin, S, &p).unwrap();
        store.begin_round(&admin, S, 4).unwrap();
        let c = store.issue_store_credential(&admin, S, Grant::Client("a".into()), 60.0).unwrap();
        assert!(store.check_and_increment_counter(&c, "a", 9).unwrap());
    }
    assert!(dir.path().join("sessions/sess/global/1/manifest.json").exists());
    assert!(dir.path().join("sessions/sess/global/1/chunk_0.bin").exists());
    let (store, admin) = ParamStore::open_dir(StoreConfig::default(), dir.path(), clock).unwrap();
    let back = store.get_global_model(&admin, S).unwrap();
    assert_eq!(back.version, 1);
    assert_eq!(back.entries(), p.entries());
    assert_eq!(store.current_round(S).unwrap(), 4);
    assert_eq!(store.invocation_count("a"), 1);
}

#[test]
fn corruption_detected() {
    let backend = Arc::new(MemoryBackend::new());
    let (store, admin) =
        ParamStore::with_backend(StoreConfig::default(), backend.clone(), Arc::new(SimClock::new(0.0)));
    store.create_session(&admin, S, spec()).unwrap();
    store.put_global_model(&admin, S, &glorot_init(&spec(), 0).unwrap()).unwrap();
    let key = "sessions/sess/global/0/chunk_0.bin";
    let mut bytes = backend.get(key).unwrap().unwrap().as_ref().clone();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    backend.put(key, bytes).unwrap();
    assert!(matches!(store.get_global_model(&admin, S), Err(StoreError::Corruption(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunked_blob_round_trip(limit in 1usize..64, mult in 0.0f64..3.0, seed: u64) {
        let (store, _, _) = setup(limit);
        let len = ((limit as f64 * mult) as usize).max(1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let blob = store.write_blob("t", |k| format!("t/{k}"), &bytes).unwrap();
        prop_assert!(blob.chunk_ids.iter().all(|k| store.backend.get(k).unwrap().unwrap().len() <= limit));
        prop_assert_eq!(blob.chunk_ids.len(), len.div_ceil(limit));
        prop_assert_eq!(store.read_blob(&blob).unwrap(), bytes);
    }
}
