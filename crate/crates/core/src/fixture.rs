//! Deterministic tar/sidecar fixtures for tests, benchmarks and demos.
//!
//! The writer emits plain ustar with two trailing zero blocks and no extra
//! blocking-factor padding. It is not meant for production archives.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum EntryKind {
    File,
    Dir,
    GnuLong,
    Pax { header_name: String },
}

#[derive(Debug, Clone)]
pub struct TarEntry {
    pub name: String,
    pub data: Vec<u8>,
    kind: EntryKind,
}

impl TarEntry {
    pub fn file(name: &str, data: Vec<u8>) -> Self {
        TarEntry {
            name: name.to_string(),
            data,
            kind: EntryKind::File,
        }
    }

    pub fn dir(name: &str) -> Self {
        TarEntry {
            name: name.to_string(),
            data: Vec::new(),
            kind: EntryKind::Dir,
        }
    }

    /// Regular file whose name is carried by a preceding GNU `L` record.
    pub fn gnu_long(name: &str, data: Vec<u8>) -> Self {
        TarEntry {
            name: name.to_string(),
            data,
            kind: EntryKind::GnuLong,
        }
    }

    /// Regular file named `header_name` in its own header, renamed to `path`
    /// by a preceding pax `x` record.
    pub fn pax_path(path: &str, header_name: &str, data: Vec<u8>) -> Self {
        TarEntry {
            name: path.to_string(),
            data,
            kind: EntryKind::Pax {
                header_name: header_name.to_string(),
            },
        }
    }
}

/// Recomputes and stores the checksum of a 512-byte header.
pub fn fix_checksum(header: &mut [u8]) {
    header[148..156].fill(b' ');
    let sum: u64 = header[..512].iter().map(|&b| b as u64).sum();
    header[148..156].copy_from_slice(format!("{sum:06o}\0 ").as_bytes());
}

fn header(name: &str, size: u64, flag: u8) -> [u8; 512] {
    let mut h = [0u8; 512];
    let n = name.as_bytes();
    let n = &n[..n.len().min(100)];
    h[..n.len()].copy_from_slice(n);
    h[100..108].copy_from_slice(b"0000644\0");
    h[108..116].copy_from_slice(b"0000000\0");
    h[116..124].copy_from_slice(b"0000000\0");
    h[124..136].copy_from_slice(format!("{size:011o}\0").as_bytes());
    h[136..148].copy_from_slice(b"00000000000\0");
    h[156] = flag;
    h[257..263].copy_from_slice(b"ustar\0");
    h[263..265].copy_from_slice(b"00");
    fix_checksum(&mut h);
    h
}

fn push_data(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(data);
    let pad = (512 - data.len() % 512) % 512;
    out.extend(std::iter::repeat_n(0u8, pad));
}

pub fn write_tar(entries: &[TarEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in entries {
        match &e.kind {
            EntryKind::File => {
                out.extend_from_slice(&header(&e.name, e.data.len() as u64, b'0'));
                push_data(&mut out, &e.data);
            }
            EntryKind::Dir => out.extend_from_slice(&header(&e.name, 0, b'5')),
            EntryKind::GnuLong => {
                let mut long = e.name.as_bytes().to_vec();
                long.push(0);
                out.extend_from_slice(&header("././@LongLink", long.len() as u64, b'L'));
                push_data(&mut out, &long);
                out.extend_from_slice(&header(&e.name, e.data.len() as u64, b'0'));
                push_data(&mut out, &e.data);
            }
            EntryKind::Pax { header_name } => {
                let body = format!("path={}\n", e.name);
                // The length prefix counts itself.
                let mut len = body.len() + 2;
                while format!("{len} {body}").len() != len {
                    len += 1;
                }
                let record = format!("{len} {body}");
                out.extend_from_slice(&header("PaxHeader", record.len() as u64, b'x'));
                push_data(&mut out, record.as_bytes());
                out.extend_from_slice(&header(header_name, e.data.len() as u64, b'0'));
                push_data(&mut out, &e.data);
            }
        }
    }
    out.extend(std::iter::repeat_n(0u8, 1024));
    out
}

/// One generated shard: an archive plus its JSONL sidecar.
#[derive(Debug, Clone)]
pub struct ShardFiles {
    pub archive: PathBuf,
    pub sidecar: PathBuf,
    pub members: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetFixture {
    pub shards: usize,
    pub members_per_shard: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub seed: u64,
}

impl Default for DatasetFixture {
    fn default() -> Self {
        DatasetFixture {
            shards: 10,
            members_per_shard: 1000,
            min_size: 64,
            max_size: 4096,
            seed: 7,
        }
    }
}

impl DatasetFixture {
    pub fn generate(&self, dir: &Path) -> Result<Vec<ShardFiles>> {
        (0..self.shards)
            .map(|s| self.generate_shard(dir, s))
            .collect()
    }

    /// Writes `shard-<s>.tar` and `shard-<s>.jsonl`. Members are named
    /// `s<s>_<i>.jpg` with sidecar keys `s<s>_<i>`.
    pub fn generate_shard(&self, dir: &Path, shard: usize) -> Result<ShardFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((shard as u64 + 1) << 32));
        let mut entries = Vec::with_capacity(self.members_per_shard);
        let mut sidecar = Vec::new();
        for i in 0..self.members_per_shard {
            let key = format!("s{shard:03}_{i:05}");
            let size = rng.gen_range(self.min_size..=self.max_size);
            let data: Vec<u8> = (0..size).map(|_| rng.gen()).collect();
            entries.push(TarEntry::file(&format!("{key}.jpg"), data));
            // Occasional integral scores exercise int/float promotion.
            let nsfw = if rng.gen_ratio(1, 50) {
                json!(0)
            } else {
                json!((rng.gen_range(0.0..1.0f64) * 10_000.0).round() / 10_000.0)
            };
            let row = json!({
                "key": key,
                "size": size,
                "width": rng.gen_range(32..2048),
                "height": rng.gen_range(32..2048),
                "caption": format!("sample {i} of shard {shard}"),
                "nsfw_score": nsfw,
            });
            writeln!(sidecar, "{row}").expect("write to vec");
        }
        let archive = dir.join(format!("shard-{shard:03}.tar"));
        let sidecar_path = dir.join(format!("shard-{shard:03}.jsonl"));
        std::fs::write(&archive, write_tar(&entries))
            .map_err(|e| Error::io(archive.display().to_string(), e))?;
        std::fs::write(&sidecar_path, sidecar)
            .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
        Ok(ShardFiles {
            archive,
            sidecar: sidecar_path,
            members: self.members_per_shard,
        })
    }
}
