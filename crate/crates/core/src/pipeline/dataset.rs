use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::callgraph::ApiVocabulary;
use crate::error::{Error, Result};
use crate::features::{FeatureDictionary, FeatureVector, LabeledDataset, Row};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MFDATA\0\0";
const UNLABELED: u32 = u32::MAX;

/// An extracted corpus: the API vocabulary used for pair features, the
/// labeled rows and any rows without a family.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: ApiVocabulary,
    pub labeled: LabeledDataset,
    pub unlabeled: Vec<(String, FeatureVector)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    vocabulary: ApiVocabulary,
    dictionary: FeatureDictionary,
    families: Vec<String>,
    labeled_rows: usize,
    unlabeled_rows: usize,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(super) fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    body
}

/// Splits off and checks the trailing checksum.
pub(super) fn unseal<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < 32 {
        return Err(corrupt(path, "file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt(path, "checksum mismatch"));
    }
    Ok(body)
}

pub(super) fn read_header<'a>(body: &'a [u8], magic: &[u8; 8], expected: u32, path: &Path) -> Result<(u32, &'a [u8], &'a [u8])> {
    let mut c = Cursor::new(body);
    let mut m = [0u8; 8];
    c.read_exact(&mut m).map_err(|_| corrupt(path, "truncated magic"))?;
    if &m != magic {
        return Err(corrupt(path, "bad magic"));
    }
    let version = c.read_u32::<LE>().map_err(|_| corrupt(path, "truncated version"))?;
    if version != expected {
        return Err(Error::Version {
            found: version,
            expected,
        });
    }
    let len = c.read_u64::<LE>().map_err(|_| corrupt(path, "truncated header length"))? as usize;
    let start = c.position() as usize;
    if body.len() < start + len {
        return Err(corrupt(path, "truncated header"));
    }
    Ok((version, &body[start..start + len], &body[start + len..]))
}

pub(super) fn write_preamble(out: &mut Vec<u8>, magic: &[u8; 8], version: u32, header: &[u8]) {
    out.extend_from_slice(magic);
    out.write_u32::<LE>(version).expect("vec write");
    out.write_u64::<LE>(header.len() as u64).expect("vec write");
    out.extend_from_slice(header);
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: DATASET_VERSION,
            vocabulary: self.vocabulary.clone(),
            dictionary: self.labeled.dictionary.clone(),
            families: self.labeled.families.clone(),
            labeled_rows: self.labeled.rows.len(),
            unlabeled_rows: self.unlabeled.len(),
        };
        let mut out = Vec::new();
        write_preamble(&mut out, MAGIC, DATASET_VERSION, &serde_json::to_vec(&header)?);
        let rows = self
            .labeled
            .rows
            .iter()
            .map(|r| (&r.id, r.label as u32, &r.vector))
            .chain(self.unlabeled.iter().map(|(id, v)| (id, UNLABELED, v)));
        for (id, label, vector) in rows {
            out.write_u32::<LE>(id.len() as u32).expect("vec write");
            out.extend_from_slice(id.as_bytes());
            out.write_u32::<LE>(label).expect("vec write");
            out.write_u32::<LE>(vector.nnz() as u32).expect("vec write");
            for &c in vector.columns() {
                out.write_u32::<LE>(c).expect("vec write");
            }
        }
        Ok(seal(out))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let body = unseal(bytes, path)?;
        let (_, header, rest) = read_header(body, MAGIC, DATASET_VERSION, path)?;
        let header: Header = serde_json::from_slice(header)?;
        let dim = header.dictionary.len();
        let mut c = Cursor::new(rest);
        let trunc = |_| corrupt(path, "truncated row section");
        let mut rows = Vec::with_capacity(header.labeled_rows);
        let mut unlabeled = Vec::with_capacity(header.unlabeled_rows);
        for _ in 0..header.labeled_rows + header.unlabeled_rows {
            let n = c.read_u32::<LE>().map_err(trunc)? as usize;
            let mut id = vec![0u8; n];
            c.read_exact(&mut id).map_err(trunc)?;
            let id = String::from_utf8(id).map_err(|_| corrupt(path, "row id is not utf-8"))?;
            let label = c.read_u32::<LE>().map_err(trunc)?;
            let nnz = c.read_u32::<LE>().map_err(trunc)? as usize;
            let mut cols = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                cols.push(c.read_u32::<LE>().map_err(trunc)?);
            }
            let vector = FeatureVector::new(cols, dim).map_err(|e| corrupt(path, e.to_string()))?;
            if label == UNLABELED {
                unlabeled.push((id, vector));
            } else if (label as usize) < header.families.len() {
                rows.push(Row {
                    id,
                    vector,
                    label: label as usize,
                });
            } else {
                return Err(corrupt(path, format!("label index {label} out of range")));
            }
        }
        if (c.position() as usize) != rest.len() {
            return Err(corrupt(path, "trailing bytes after rows"));
        }
        Ok(Dataset {
            vocabulary: header.vocabulary,
            labeled: LabeledDataset {
                dictionary: header.dictionary,
                rows,
                families: header.families,
            },
            unlabeled,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
