//! Dataset directory: `manifest.toml` (specs, seeds, splits, blob digests),
//! `images.f32` (little-endian f32 pixels in record order) and
//! `records.bin` (one 8-byte row per record: patient id u32 LE, label,
//! domain, sub-scanner or 255, padding).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainData, DomainPair, DomainSpec, SampleRecord, Split, SplitAssignment, PIXELS};
use crate::error::{Error, Result};
use crate::fsio::{f32s_to_le_bytes, le_bytes_to_f32s, read_verified, sha256_hex, write_atomic};
use crate::nn::DomainTag;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const IMAGES_FILE: &str = "images.f32";
pub const RECORDS_FILE: &str = "records.bin";
const FORMAT: &str = "bnanchor-dataset";
const VERSION: u32 = 1;
const ROW_BYTES: usize = 8;
const NO_SUBSCANNER: u8 = u8::MAX;

#[derive(Debug, Serialize, Deserialize)]
struct Blob {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DomainEntry {
    domain: DomainTag,
    n_patients: usize,
    n_records: usize,
    class_marginals: [f64; 4],
    train: Vec<u32>,
    val: Vec<u32>,
    test: Vec<u32>,
    specs: Vec<DomainSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    shift: f64,
    /// Decimal string: TOML integers cannot hold every u64.
    seed: String,
    image_side: usize,
    images: Blob,
    records: Blob,
    domains: Vec<DomainEntry>,
}

fn domain_byte(d: DomainTag) -> u8 {
    match d {
        DomainTag::O => 0,
        DomainTag::T => 1,
    }
}

fn entry(d: &DomainData) -> DomainEntry {
    DomainEntry {
        domain: d.domain,
        n_patients: d.n_patients,
        n_records: d.records.len(),
        class_marginals: super::class_marginals(&d.records),
        train: d.split.patients(Split::Train).collect(),
        val: d.split.patients(Split::Val).collect(),
        test: d.split.patients(Split::Test).collect(),
        specs: d.specs.clone(),
    }
}

/// Writes the pair into `dir`, creating `dir` itself (but not its parents).
/// Every file is written atomically; the manifest goes last.
pub fn save_pair(pair: &DomainPair, dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        std::fs::create_dir(dir)?;
    }
    let all = pair.o.records.iter().chain(&pair.t.records);
    let mut pixels = Vec::new();
    let mut table = Vec::new();
    for r in all {
        pixels.extend_from_slice(&r.image);
        table.extend_from_slice(&r.patient_id.to_le_bytes());
        table.push(r.label);
        table.push(domain_byte(r.domain));
        table.push(r.subscanner.unwrap_or(NO_SUBSCANNER));
        table.push(0);
    }
    let images = f32s_to_le_bytes(&pixels);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        shift: pair.shift,
        seed: pair.seed.to_string(),
        image_side: crate::nn::IMAGE_SIDE,
        images: Blob {
            file: IMAGES_FILE.into(),
            bytes: images.len() as u64,
            sha256: sha256_hex(&images),
        },
        records: Blob {
            file: RECORDS_FILE.into(),
            bytes: table.len() as u64,
            sha256: sha256_hex(&table),
        },
        domains: vec![entry(&pair.o), entry(&pair.t)],
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::State(format!("cannot encode dataset manifest: {e}")))?;
    write_atomic(&dir.join(IMAGES_FILE), &images)?;
    write_atomic(&dir.join(RECORDS_FILE), &table)?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Corrupt(msg.into()))
}

/// Reads a dataset written by [`save_pair`], verifying digests, sizes,
/// labels, pixel range and split consistency.
pub fn load_pair(dir: &Path) -> Result<DomainPair> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = toml::from_str(&text)
        .map_err(|e| Error::Corrupt(format!("dataset manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION {
        return corrupt(format!(
            "dataset manifest is {} v{}, expected {FORMAT} v{VERSION}",
            m.format, m.version
        ));
    }
    if m.image_side != crate::nn::IMAGE_SIDE {
        return corrupt(format!("image side {} unsupported", m.image_side));
    }
    let seed: u64 = m
        .seed
        .parse()
        .map_err(|_| Error::Corrupt(format!("bad seed `{}`", m.seed)))?;
    let pixels = le_bytes_to_f32s(&read_verified(
        &dir.join(&m.images.file),
        m.images.bytes,
        &m.images.sha256,
    )?)?;
    let table = read_verified(&dir.join(&m.records.file), m.records.bytes, &m.records.sha256)?;
    if table.len() % ROW_BYTES != 0 {
        return corrupt("record table length is not a multiple of the row size");
    }
    let n = table.len() / ROW_BYTES;
    if pixels.len() != n * PIXELS {
        return corrupt(format!("{} pixels for {n} records", pixels.len()));
    }
    if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return corrupt(format!("pixel value {v} outside [0,1]"));
    }

    let mut records = Vec::with_capacity(n);
    for (i, row) in table.chunks_exact(ROW_BYTES).enumerate() {
        let domain = match row[5] {
            0 => DomainTag::O,
            1 => DomainTag::T,
            b => return corrupt(format!("record {i}: domain byte {b}")),
        };
        if row[4] > 3 {
            return corrupt(format!("record {i}: label {}", row[4]));
        }
        records.push(SampleRecord {
            patient_id: u32::from_le_bytes([row[0], row[1], row[2], row[3]]),
            image: pixels[i * PIXELS..(i + 1) * PIXELS].to_vec(),
            label: row[4],
            domain,
            subscanner: (row[6] != NO_SUBSCANNER).then_some(row[6]),
        });
    }

    let [eo, et] = <[DomainEntry; 2]>::try_from(m.domains)
        .map_err(|d| Error::Corrupt(format!("expected 2 domains, found {}", d.len())))?;
    if eo.domain != DomainTag::O || et.domain != DomainTag::T {
        return corrupt("domains must be listed as O then T");
    }
    if eo.n_records + et.n_records != n {
        return corrupt(format!(
            "manifest counts {} + {} records, table has {n}",
            eo.n_records, et.n_records
        ));
    }
    let t_records = records.split_off(eo.n_records);
    let o = rebuild(eo, records)?;
    let t = rebuild(et, t_records)?;
    Ok(DomainPair {
        shift: m.shift,
        seed,
        o,
        t,
    })
}

fn rebuild(e: DomainEntry, records: Vec<SampleRecord>) -> Result<DomainData> {
    let mut split = SplitAssignment::default();
    for (ids, s) in [(&e.train, Split::Train), (&e.val, Split::Val), (&e.test, Split::Test)] {
        for &p in ids {
            if split.get(p).is_some() {
                return corrupt(format!("patient {p} listed in two splits"));
            }
            split.insert(p, s);
        }
    }
    let mut seen = BTreeSet::new();
    for r in &records {
        if r.domain != e.domain {
            return corrupt(format!("patient {} stored under the wrong domain", r.patient_id));
        }
        if split.get(r.patient_id).is_none() {
            return corrupt(format!("patient {} has no split", r.patient_id));
        }
        seen.insert(r.patient_id);
    }
    if seen.len() != e.n_patients || split.len() != e.n_patients {
        return corrupt(format!(
            "domain {}: {} patients in records, {} in splits, manifest says {}",
            e.domain,
            seen.len(),
            split.len(),
            e.n_patients
        ));
    }
    if e.specs.is_empty() {
        return corrupt(format!("domain {} has no scanner specs", e.domain));
    }
    Ok(DomainData {
        domain: e.domain,
        specs: e.specs,
        n_patients: e.n_patients,
        records,
        split,
    })
}
