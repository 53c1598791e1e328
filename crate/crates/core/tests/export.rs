use std::collections::BTreeSet;
use std::fs;

use dfkit_core::cache::SampleSource;
use dfkit_core::engine::{Engine, EtlSource};
use dfkit_core::export::{dataset_refs, export, fetch_to_dir, shuffle_key, ExportManifest};
use dfkit_core::fixture::DatasetFixture;
use dfkit_core::storage::{Storage, StorageConfig};
use dfkit_core::table::Dataset;
use dfkit_core::Error;

fn dataset(dir: &std::path::Path, shards: usize, members: usize) -> Dataset {
    let sources: Vec<EtlSource> = DatasetFixture {
        shards,
        members_per_shard: members,
        ..Default::default()
    }
    .generate(dir)
    .unwrap()
    .iter()
    .map(|s| EtlSource::new(s.archive.to_string_lossy(), Some(s.sidecar.to_string_lossy().into_owned())))
    .collect();
    Engine::direct(Storage::default()).etl_build(&sources, false).unwrap()
}

#[test]
fn shards_partition_rows_for_every_world_size() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 2, 150);
    let all: BTreeSet<String> = ds.uids().into_iter().map(str::to_string).collect();
    let cols = vec!["size".to_string(), "caption".to_string()];
    for world in [1u32, 2, 4, 8] {
        let mut seen = BTreeSet::new();
        let mut total = 0;
        for rank in 0..world {
            let m = export(&ds, "set", &cols, 42, rank, world).unwrap();
            total += m.rows.len();
            for r in &m.rows {
                assert!(seen.insert(r.uid.clone()), "uid in two shards (world {world})");
            }
            let again = export(&ds, "set", &cols, 42, rank, world).unwrap();
            assert_eq!(m.to_jsonl(), again.to_jsonl());
        }
        assert_eq!(total, ds.row_count());
        assert_eq!(seen, all);
    }
}

#[test]
fn order_follows_the_seeded_key() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 1, 50);
    let m = export(&ds, "set", &[], 7, 0, 1).unwrap();
    let mut expected: Vec<(String, String)> = ds.uids().into_iter().map(|u| (shuffle_key(7, u), u.to_string())).collect();
    expected.sort();
    let got: Vec<&str> = m.rows.iter().map(|r| r.uid.as_str()).collect();
    assert_eq!(got, expected.iter().map(|(_, u)| u.as_str()).collect::<Vec<_>>());
    let other = export(&ds, "set", &[], 8, 0, 1).unwrap();
    assert_ne!(m.to_jsonl(), other.to_jsonl());

    assert!(matches!(export(&ds, "set", &[], 7, 2, 2), Err(Error::BadShard { .. })));
    assert!(matches!(export(&ds, "set", &[], 7, 0, 0), Err(Error::BadShard { .. })));
    assert!(matches!(export(&ds, "set", &["nope".into()], 7, 0, 1), Err(Error::UnknownColumn(_))));
}

#[test]
fn jsonl_round_trips_pointers() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 1, 20);
    let m = export(&ds, "set", &["size".into()], 1, 0, 1).unwrap();
    let text = m.to_jsonl();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["type"], "header");
    assert_eq!(header["row_count"], 20);
    assert_eq!(header["fingerprint"], ds.fingerprint.as_str());
    let refs = ExportManifest::refs_from_jsonl(&text).unwrap();
    assert_eq!(refs.len(), 20);
    for ((uid, r), row) in refs.iter().zip(&m.rows) {
        assert_eq!(uid, &row.uid);
        assert_eq!(r, &row.sample);
    }
    let tampered = text.replacen("\"offset\":", "\"offset\":1", 2);
    assert!(ExportManifest::refs_from_jsonl(&tampered).is_err());
}

/// 200 adjacent members spread over two archives.
#[test]
fn fetching_adjacent_members_coalesces_requests() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 2, 100);
    let refs = dataset_refs(&ds);

    let coalesced = SampleSource::Direct(Storage::default());
    let a = fetch_to_dir(&coalesced, &refs, &dir.path().join("a")).unwrap();
    let naive = SampleSource::Direct(Storage::new(StorageConfig {
        coalesce_gap: None,
        ..Default::default()
    }));
    let b = fetch_to_dir(&naive, &refs, &dir.path().join("b")).unwrap();

    assert!(a.requests.get_count <= 10, "{:?}", a.requests);
    assert_eq!(b.requests.get_count, 200);
    assert_eq!(a.rows, 200);
    assert_eq!(a.bytes, b.bytes);
    for (uid, _) in &refs {
        assert_eq!(fs::read(dir.path().join("a").join(uid)).unwrap(), fs::read(dir.path().join("b").join(uid)).unwrap());
    }
    assert_eq!(
        fs::read_to_string(dir.path().join("a/index.jsonl")).unwrap().lines().count(),
        200
    );
}
