//! ZIP archives of NPY entries (the NPZ convention) plus raw side entries
//! such as JSON manifests.
//!
//! Tensor entries are stored as `<name>.npy`; the `.npy` suffix is hidden
//! from callers. Entries are stored uncompressed with a fixed timestamp and
//! in sorted name order, so identical content yields identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::error::{Error, Result};
use crate::npy;
use crate::tensor::Tensor;

const NPY_SUFFIX: &str = ".npy";

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Raw(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), Entry::Tensor(t));
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.entries.insert(name.into(), Entry::Raw(bytes));
    }

    pub fn insert_json<T: serde::Serialize>(
        &mut self,
        name: impl Into<String>,
        value: &T,
    ) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(value)?;
        self.insert_raw(name, bytes);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(Entry::Raw(_)) => Err(Error::Archive(format!("entry {name} is not a tensor"))),
            None => Err(Error::Archive(format!("missing entry {name}"))),
        }
    }

    pub fn raw(&self, name: &str) -> Result<&[u8]> {
        match self.entries.get(name) {
            Some(Entry::Raw(b)) => Ok(b),
            Some(Entry::Tensor(_)) => Err(Error::Archive(format!("entry {name} is a tensor"))),
            None => Err(Error::Archive(format!("missing entry {name}"))),
        }
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_slice(self.raw(name)?)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Tensor entry names under `prefix` with the prefix removed, sorted.
    pub fn tensor_ids(&self, prefix: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| matches!(e, Entry::Tensor(_)))
            .filter_map(|(k, _)| k.strip_prefix(prefix).map(str::to_string))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
        let options = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(DateTime::default())
            .unix_permissions(0o644)
            .large_file(false);
        for (name, entry) in &self.entries {
            match entry {
                Entry::Tensor(t) => {
                    let bytes = npy::encode(t);
                    let opts = options.large_file(bytes.len() as u64 >= u32::MAX as u64);
                    zip.start_file(format!("{name}{NPY_SUFFIX}"), opts)?;
                    zip.write_all(&bytes)
                        .map_err(|e| Error::Archive(e.to_string()))?;
                }
                Entry::Raw(bytes) => {
                    zip.start_file(name.as_str(), options)?;
                    zip.write_all(bytes)
                        .map_err(|e| Error::Archive(e.to_string()))?;
                }
            }
        }
        Ok(zip.finish()?.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut zip = ZipArchive::new(Cursor::new(bytes))?;
        let mut entries = BTreeMap::new();
        for i in 0..zip.len() {
            let mut file = zip.by_index(i)?;
            if file.is_dir() {
                continue;
            }
            let name = file.name().to_string();
            let mut buf = Vec::with_capacity(file.size() as usize);
            file.read_to_end(&mut buf)
                .map_err(|e| Error::Archive(format!("{name}: {e}")))?;
            match name.strip_suffix(NPY_SUFFIX) {
                Some(stem) => {
                    entries.insert(stem.to_string(), Entry::Tensor(npy::decode(&buf)?));
                }
                None => {
                    entries.insert(name, Entry::Raw(buf));
                }
            }
        }
        Ok(Archive { entries })
    }

    /// Writes through a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
