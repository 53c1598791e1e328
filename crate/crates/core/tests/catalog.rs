use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use dfkit_core::catalog::{fingerprint, fingerprint_input, Catalog, VersionRef};
use dfkit_core::engine::{Engine, EtlSource, OperationDescriptor, StageKind};
use dfkit_core::expr::Params;
use dfkit_core::fixture::{write_tar, TarEntry};
use dfkit_core::storage::Storage;
use dfkit_core::table::{ColumnType, Dataset, Field, Schema, Value};
use dfkit_core::Error;
use sha2::{Digest, Sha256};

fn engine() -> Engine {
    Engine::direct(Storage::default())
}

fn source(dir: &Path, n: usize) -> Dataset {
    let entries: Vec<TarEntry> = (0..n)
        .map(|i| TarEntry::file(&format!("m{i}.jpg"), vec![i as u8; 10 + i]))
        .collect();
    let archive = dir.join("src.tar");
    fs::write(&archive, write_tar(&entries)).unwrap();
    let sidecar = dir.join("src.jsonl");
    let lines: String = (0..n).map(|i| format!("{{\"key\":\"m{i}\",\"size\":{i}}}\n")).collect();
    fs::write(&sidecar, lines).unwrap();
    engine()
        .etl_build(
            &[EtlSource::new(archive.to_string_lossy(), Some(sidecar.to_string_lossy().into_owned()))],
            false,
        )
        .unwrap()
}

fn filter(ds: &Dataset, src: &str) -> Dataset {
    engine().filter(ds, src, &Params::new()).unwrap()
}

/// sha256 of every file under `dir`, keyed by relative path.
fn digest_tree(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn init_refuses_non_empty_dirs() {
    let dir = tempfile::tempdir().unwrap();
    Catalog::init(dir.path()).unwrap();
    assert!(matches!(Catalog::init(dir.path()), Err(Error::NonEmptyDir(_))));
    let other = tempfile::tempdir().unwrap();
    assert!(matches!(Catalog::open(other.path()), Err(Error::NoCatalog(_))));
}

#[test]
fn save_assigns_versions_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cat = Catalog::init(dir.path().join("cat")).unwrap();
    let base = source(dir.path(), 6);
    let m1 = cat.save(&base, "laion5b").unwrap();
    assert_eq!(m1.version, 1);
    let again = cat.save(&base, "laion5b").unwrap();
    assert_eq!(again, m1);
    assert!(!cat.root().join("datasets/laion5b/v2").exists());

    let large = filter(&base, "size > 2");
    let m2 = cat.save(&large, "most-similar").unwrap();
    assert_eq!((m2.name.as_str(), m2.version), ("most-similar", 1));
    let larger = filter(&base, "size > 3");
    let m3 = cat.save(&larger, "most-similar").unwrap();
    assert_eq!(m3.version, 2);
    assert_ne!(m3.fingerprint, m2.fingerprint);

    assert_eq!(cat.resolve(&VersionRef::latest("most-similar")).unwrap().version, 2);
    assert_eq!(cat.resolve_str("most-similar@1").unwrap(), m2);
    assert_eq!(cat.resolve_str("most-similar.v1").unwrap(), m2);
    assert!(matches!(cat.resolve_str("nope"), Err(Error::DatasetNotFound(_) | Error::NotFound(_))));
    assert!(cat.resolve_str("most-similar@9").is_err());
    assert!(matches!(cat.save(&base, "bad name"), Err(Error::BadName(_))));

    let loaded = cat.load(&VersionRef::exact("most-similar", 1)).unwrap();
    assert_eq!(loaded.fingerprint, large.fingerprint);
    assert_eq!(loaded.columns(), large.columns());
}

#[test]
fn unchanged_columns_are_shared_with_the_parent_version() {
    let dir = tempfile::tempdir().unwrap();
    let cat = Catalog::init(dir.path().join("cat")).unwrap();
    let base = source(dir.path(), 4);
    let mb = cat.save(&base, "base").unwrap();
    let base = cat.load(&VersionRef::latest("base")).unwrap();
    let m = engine().mutate(&base, "double", "size * 2", &Params::new()).unwrap();
    let mm = cat.save(&m, "doubled").unwrap();
    for (col, path) in &mb.column_files {
        assert_eq!(&mm.column_files[col], path, "column {col} should be shared");
    }
    assert!(mm.column_files["double"].starts_with("datasets/doubled/v1/"));
}

#[test]
fn versions_are_immutable_across_later_operations() {
    let dir = tempfile::tempdir().unwrap();
    let cat = Catalog::init(dir.path().join("cat")).unwrap();
    let base = source(dir.path(), 5);
    cat.save(&base, "base").unwrap();
    let v1 = cat.root().join("datasets/base/v1");
    let before = digest_tree(&v1);
    cat.save(&filter(&base, "size > 1"), "f").unwrap();
    cat.save(&filter(&base, "size > 2"), "f").unwrap();
    cat.gc(&[VersionRef::latest("f")]).unwrap();
    assert_eq!(digest_tree(&v1), before);
}

#[test]
fn log_lists_versions_newest_first_with_parents() {
    let dir = tempfile::tempdir().unwrap();
    let cat = Catalog::init(dir.path().join("cat")).unwrap();
    let base = source(dir.path(), 6);
    cat.save(&base, "etl").unwrap();
    cat.save(&filter(&base, "size > 1"), "chain").unwrap();
    cat.save(&filter(&base, "size > 2"), "chain").unwrap();
    let log = cat.log("chain").unwrap();
    assert_eq!(log.iter().map(|e| e.version).collect::<Vec<_>>(), vec![2, 1]);
    for e in &log {
        assert_eq!(e.kind, StageKind::Filter);
        assert_eq!(e.parents.len(), 1);
        assert_eq!(e.parents[0].fingerprint, base.fingerprint);
        assert_eq!(e.parents[0].named, Some(("etl".to_string(), 1)));
    }

    let a = filter(&base, "size < 3");
    let b = filter(&base, "size >= 3");
    cat.save(&engine().union(&a, &b).unwrap(), "both").unwrap();
    let log = cat.log("both").unwrap();
    assert_eq!(log[0].parents.len(), 2);
    assert_eq!(log[0].parents[0].named, None, "unsaved parents have no name");

    let empty = Catalog::init(dir.path().join("empty")).unwrap();
    assert!(empty.log("chain").is_err());
}

/// Six named datasets:
///
/// ```text
///        src
///       /   \
///   small   large
///       \   /   \
///       both    big_x
///        |
///      both_x
/// ```
struct Diamond {
    dir: tempfile::TempDir,
    cat: Catalog,
    src: Dataset,
}

impl Diamond {
    fn new() -> Diamond {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::init(dir.path().join("cat")).unwrap();
        let src = source(dir.path(), 8);
        let d = Diamond { dir, cat, src };
        d.cat.save(&d.src, "src").unwrap();
        d.rebuild_small("size < 4");
        d.rebuild_large("size >= 4");
        d.rebuild_both();
        d.rebuild_big_x();
        d.rebuild_both_x();
        d
    }

    fn latest(&self, name: &str) -> Dataset {
        self.cat.load(&VersionRef::latest(name)).unwrap()
    }

    fn rebuild_small(&self, expr: &str) {
        self.cat.save(&filter(&self.latest("src"), expr), "small").unwrap();
    }

    fn rebuild_large(&self, expr: &str) {
        self.cat.save(&filter(&self.latest("src"), expr), "large").unwrap();
    }

    fn rebuild_both(&self) {
        let u = engine().union(&self.latest("small"), &self.latest("large")).unwrap();
        self.cat.save(&u, "both").unwrap();
    }

    fn rebuild_big_x(&self) {
        let m = engine().mutate(&self.latest("large"), "x", "size + 1", &Params::new()).unwrap();
        self.cat.save(&m, "big_x").unwrap();
    }

    fn rebuild_both_x(&self) {
        let m = engine().mutate(&self.latest("both"), "x", "size + 1", &Params::new()).unwrap();
        self.cat.save(&m, "both_x").unwrap();
    }

    /// Exhaustive walk over the named parent edges recorded in `log`.
    fn oracle_descendants(&self, changed: &str) -> BTreeSet<String> {
        let mut children: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (name, _) in self.cat.list().unwrap() {
            for p in &self.cat.log(&name).unwrap()[0].parents {
                if let Some((pname, _)) = &p.named {
                    children.entry(pname.clone()).or_default().insert(name.clone());
                }
            }
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([changed.to_string()]);
        while let Some(n) = queue.pop_front() {
            for c in children.get(&n).into_iter().flatten() {
                if seen.insert(c.clone()) {
                    queue.push_back(c.clone());
                }
            }
        }
        seen
    }
}

fn stale_names(cat: &Catalog, root: Option<&str>) -> Vec<String> {
    cat.find_stale(root).unwrap().into_iter().map(|r| r.name).collect()
}

#[test]
fn nothing_changed_means_nothing_stale() {
    let d = Diamond::new();
    assert!(d.cat.find_stale(None).unwrap().is_empty());
}

#[test]
fn changed_branch_invalidates_only_its_descendants() {
    for branch in ["small", "large"] {
        let d = Diamond::new();
        let oracle = d.oracle_descendants(branch);
        assert!(oracle.contains("both") && oracle.contains("both_x"));
        if branch == "small" {
            d.rebuild_small("size < 3");
        } else {
            d.rebuild_large("size >= 5");
        }
        let stale = stale_names(&d.cat, None);
        assert_eq!(stale.iter().cloned().collect::<BTreeSet<_>>(), oracle, "branch {branch}");
        assert_eq!(stale.len(), oracle.len());
        // Parents come before children.
        if let (Some(i), Some(j)) = (
            stale.iter().position(|n| n == "both"),
            stale.iter().position(|n| n == "both_x"),
        ) {
            assert!(i < j);
        }
    }
}

#[test]
fn new_source_version_invalidates_the_whole_chain_in_order() {
    let d = Diamond::new();
    let v2 = d.dir.path().join("v2");
    fs::create_dir(&v2).unwrap();
    let bigger = source(&v2, 9);
    d.cat.save(&bigger, "src").unwrap();
    let stale = stale_names(&d.cat, None);
    assert_eq!(stale, vec!["large", "small", "big_x", "both", "both_x"]);
    assert_eq!(stale_names(&d.cat, Some("large")), vec!["big_x", "both", "both_x"]);

    // Rebuilding in dependency order clears everything.
    d.rebuild_small("size < 4");
    d.rebuild_large("size >= 4");
    d.rebuild_both();
    d.rebuild_big_x();
    d.rebuild_both_x();
    assert!(d.cat.find_stale(None).unwrap().is_empty());
}

#[test]
fn gc_keeps_ancestors_and_shared_files() {
    let d = Diamond::new();
    assert_eq!(d.cat.gc(&all_latest(&d.cat)).unwrap(), 0);

    // An orphaned experiment that shares src's columns.
    let src = d.latest("src");
    let exp = engine().mutate(&src, "y", "size * 3", &Params::new()).unwrap();
    d.cat.save(&exp, "experiment").unwrap();
    let shared: Vec<String> = d.cat.resolve_str("src").unwrap().column_files.into_values().collect();

    let keep: Vec<VersionRef> = all_latest(&d.cat)
        .into_iter()
        .filter(|r| r.name != "experiment")
        .collect();
    let freed = d.cat.gc(&keep).unwrap();
    assert!(freed > 0);
    assert!(!d.cat.root().join("datasets/experiment").join("v1").exists());
    assert!(d.cat.resolve_str("experiment").is_err());
    for rel in shared {
        assert!(d.cat.root().join(rel).is_file());
    }

    // Keeping only a leaf retains its whole ancestry.
    d.cat.gc(&[VersionRef::latest("both_x")]).unwrap();
    let names: BTreeSet<String> = d.cat.list().unwrap().into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["both", "both_x", "large", "small", "src"].map(String::from).into_iter().collect()
    );
    assert!(d.latest("both_x").row_count() == 8);
}

fn all_latest(cat: &Catalog) -> Vec<VersionRef> {
    cat.list().unwrap().into_iter().map(|(n, _)| VersionRef::latest(n)).collect()
}

#[test]
fn lock_times_out_while_held() {
    let dir = tempfile::tempdir().unwrap();
    let cat = Catalog::init(dir.path().join("cat"))
        .unwrap()
        .with_lock_timeout(std::time::Duration::from_millis(100));
    let held = cat.lock().unwrap();
    let base = source(dir.path(), 2);
    assert!(matches!(cat.save(&base, "x"), Err(Error::CatalogLocked(_))));
    drop(held);
    cat.save(&base, "x").unwrap();
}

#[test]
fn fingerprint_matches_external_sha256() {
    let schema = Schema::with_attributes(vec![Field::new("size", ColumnType::Int64, true)]).unwrap();
    let mut op = OperationDescriptor::new(StageKind::Filter);
    op.expression_src = Some("(size > @t)".into());
    op.params.insert("t".into(), Value::Int(1000).canonical_text());
    let parents = vec!["0f".repeat(32)];
    let bytes = fingerprint_input(&parents, &op, &schema).unwrap();
    let fp = fingerprint(&parents, &op, &schema).unwrap();

    let python = std::process::Command::new("python3")
        .args(["-c", "import hashlib,sys;print(hashlib.sha256(sys.stdin.buffer.read()).hexdigest())"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn();
    let Ok(mut child) = python else {
        eprintln!("python3 unavailable; skipping external hash check");
        return;
    };
    use std::io::Write;
    child.stdin.take().unwrap().write_all(bytes.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), fp);

    let mut op2 = op.clone();
    op2.params.insert("t".into(), Value::Int(1001).canonical_text());
    assert_ne!(fingerprint(&parents, &op2, &schema).unwrap(), fp);
    assert_eq!(fingerprint(&parents, &op.clone(), &schema).unwrap(), fp);
}
