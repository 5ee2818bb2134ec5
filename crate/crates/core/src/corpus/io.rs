//! JSONL persistence for dataset slices plus a checksummed manifest.
//!
//! Every dataset file starts with one header line describing the record
//! kind and count, followed by one JSON record per line. The manifest
//! lists each file with its sha256 so a run can verify it is reading the
//! corpus it thinks it is.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::datasets::{DatasetBundle, RecPair, RecSplit, RmtTriple, SftExample};
use crate::corpus::docs::{CVDoc, JDDoc, JobId, SeekerId};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FileHeader {
    pub schema_version: u32,
    pub kind: String,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CvRecord {
    pub seeker: u64,
    pub tokens: Vec<usize>,
    pub text: String,
    pub skills: Vec<String>,
    pub experience: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct JdRecord {
    pub job: u64,
    pub tokens: Vec<usize>,
    pub text: String,
    pub family: String,
    pub required_skills: Vec<String>,
    pub min_experience: u8,
    pub salary_band: String,
    pub responsibility: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SftRecord {
    pub cv: CvRecord,
    pub jd: JdRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RmtRecord {
    pub cv: CvRecord,
    pub jd_pos: JdRecord,
    pub jd_neg: JdRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RecRecord {
    pub cv: CvRecord,
    pub jd: JdRecord,
    pub label: u8,
    pub split: RecSplit,
    pub cold_start: bool,
}

impl From<&CVDoc> for CvRecord {
    fn from(doc: &CVDoc) -> Self {
        CvRecord {
            seeker: doc.seeker.0,
            tokens: doc.tokens.clone(),
            text: doc.text.clone(),
            skills: doc.skills.clone(),
            experience: doc.experience,
        }
    }
}

impl From<&CvRecord> for CVDoc {
    fn from(r: &CvRecord) -> Self {
        CVDoc {
            seeker: SeekerId(r.seeker),
            tokens: r.tokens.clone(),
            text: r.text.clone(),
            skills: r.skills.clone(),
            experience: r.experience,
        }
    }
}

impl From<&JDDoc> for JdRecord {
    fn from(doc: &JDDoc) -> Self {
        JdRecord {
            job: doc.job.0,
            tokens: doc.tokens.clone(),
            text: doc.text.clone(),
            family: doc.family.clone(),
            required_skills: doc.required_skills.clone(),
            min_experience: doc.min_experience,
            salary_band: doc.salary_band.clone(),
            responsibility: doc.responsibility.clone(),
        }
    }
}

impl From<&JdRecord> for JDDoc {
    fn from(r: &JdRecord) -> Self {
        JDDoc {
            job: JobId(r.job),
            tokens: r.tokens.clone(),
            text: r.text.clone(),
            family: r.family.clone(),
            required_skills: r.required_skills.clone(),
            min_experience: r.min_experience,
            salary_band: r.salary_band.clone(),
            responsibility: r.responsibility.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestFile {
    pub name: String,
    pub kind: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub files: Vec<ManifestFile>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes one dataset file: header line, then one record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, kind: &str, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = FileHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        kind: kind.to_string(),
        count: records.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file back, checking the header kind and record count.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::MissingPrerequisite {
        path: path.to_path_buf(),
        hint: format!("dataset file not readable ({e}); run the corpus stage first"),
    })?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Dataset(format!("{}: empty file", path.display())))??;
    let header: FileHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Dataset(format!("{}: bad header: {e}", path.display())))?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Dataset(format!(
            "{}: schema version {} unsupported (expected {DATASET_SCHEMA_VERSION})",
            path.display(),
            header.schema_version
        )));
    }
    if header.kind != kind {
        return Err(Error::Dataset(format!(
            "{}: holds {:?} records, expected {:?}",
            path.display(),
            header.kind,
            kind
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}: bad record: {e}", path.display())))?,
        );
    }
    if out.len() != header.count {
        return Err(Error::Dataset(format!(
            "{}: header promises {} records, file holds {}",
            path.display(),
            header.count,
            out.len()
        )));
    }
    Ok(out)
}

pub const SFT_FILE: &str = "sft.jsonl";
pub const RMT_FILE: &str = "rmt.jsonl";
pub const RL_FILE: &str = "rl_cvs.jsonl";
pub const REC_FILE: &str = "rec.jsonl";
pub const EVAL_FILE: &str = "eval_cvs.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the whole bundle under `dir` and returns the manifest that was
/// stored alongside it.
pub fn write_bundle(dir: &Path, bundle: &DatasetBundle, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let sft: Vec<SftRecord> = bundle
        .sft
        .iter()
        .map(|e| SftRecord {
            cv: (&e.cv).into(),
            jd: (&e.jd).into(),
        })
        .collect();
    let rmt: Vec<RmtRecord> = bundle
        .rmt
        .iter()
        .map(|t| RmtRecord {
            cv: (&t.cv).into(),
            jd_pos: (&t.jd_pos).into(),
            jd_neg: (&t.jd_neg).into(),
        })
        .collect();
    let rl: Vec<CvRecord> = bundle.rl_cvs.iter().map(CvRecord::from).collect();
    let rec: Vec<RecRecord> = bundle
        .rec
        .iter()
        .map(|p| RecRecord {
            cv: (&p.cv).into(),
            jd: (&p.jd).into(),
            label: p.label,
            split: p.split,
            cold_start: p.cold_start,
        })
        .collect();
    let eval: Vec<CvRecord> = bundle.eval_cvs.iter().map(CvRecord::from).collect();

    write_jsonl(&dir.join(SFT_FILE), "sft", &sft)?;
    write_jsonl(&dir.join(RMT_FILE), "rmt", &rmt)?;
    write_jsonl(&dir.join(RL_FILE), "cv", &rl)?;
    write_jsonl(&dir.join(REC_FILE), "rec", &rec)?;
    write_jsonl(&dir.join(EVAL_FILE), "cv", &eval)?;

    let entries = [
        (SFT_FILE, "sft", sft.len()),
        (RMT_FILE, "rmt", rmt.len()),
        (RL_FILE, "cv", rl.len()),
        (REC_FILE, "rec", rec.len()),
        (EVAL_FILE, "cv", eval.len()),
    ];
    let mut files = Vec::new();
    for (name, kind, count) in entries {
        let bytes = fs::read(dir.join(name))?;
        files.push(ManifestFile {
            name: name.to_string(),
            kind: kind.to_string(),
            count,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        seed,
        files,
    };
    let mut w = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(manifest)
}

/// Reads the manifest and re-hashes every file it lists.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::MissingPrerequisite {
        path: path.to_path_buf(),
        hint: format!("manifest not readable ({e}); run the corpus stage first"),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: bad manifest: {e}", path.display())))?;
    for f in &manifest.files {
        let bytes = fs::read(dir.join(&f.name)).map_err(|e| Error::MissingPrerequisite {
            path: dir.join(&f.name),
            hint: format!("file listed in manifest is missing ({e})"),
        })?;
        let got = sha256_hex(&bytes);
        if got != f.sha256 {
            return Err(Error::Dataset(format!(
                "{}: checksum mismatch (manifest {}, file {})",
                f.name, f.sha256, got
            )));
        }
    }
    Ok(manifest)
}

/// Reads the bundle back from `dir`, verifying checksums first.
pub fn read_bundle(dir: &Path) -> Result<DatasetBundle> {
    verify_manifest(dir)?;
    let sft: Vec<SftRecord> = read_jsonl(&dir.join(SFT_FILE), "sft")?;
    let rmt: Vec<RmtRecord> = read_jsonl(&dir.join(RMT_FILE), "rmt")?;
    let rl: Vec<CvRecord> = read_jsonl(&dir.join(RL_FILE), "cv")?;
    let rec: Vec<RecRecord> = read_jsonl(&dir.join(REC_FILE), "rec")?;
    let eval: Vec<CvRecord> = read_jsonl(&dir.join(EVAL_FILE), "cv")?;
    Ok(DatasetBundle {
        sft: sft
            .iter()
            .map(|r| SftExample {
                cv: (&r.cv).into(),
                jd: (&r.jd).into(),
            })
            .collect(),
        rmt: rmt
            .iter()
            .map(|r| RmtTriple {
                cv: (&r.cv).into(),
                jd_pos: (&r.jd_pos).into(),
                jd_neg: (&r.jd_neg).into(),
            })
            .collect(),
        rl_cvs: rl.iter().map(CVDoc::from).collect(),
        rec: rec
            .iter()
            .map(|r| RecPair {
                cv: (&r.cv).into(),
                jd: (&r.jd).into(),
                label: r.label,
                split: r.split,
                cold_start: r.cold_start,
            })
            .collect(),
        eval_cvs: eval.iter().map(CVDoc::from).collect(),
    })
}

/// Collects manifest metadata as sorted key/value pairs, handy for logs.
pub fn manifest_summary(manifest: &Manifest) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    out.insert("seed".into(), manifest.seed.to_string());
    for f in &manifest.files {
        out.insert(format!("count.{}", f.name), f.count.to_string());
    }
    out
}

/// Returns the conventional corpus directory under an output root.
pub fn corpus_dir(out_root: &Path) -> PathBuf {
    out_root.join("corpus")
}
