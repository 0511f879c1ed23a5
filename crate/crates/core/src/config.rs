//! Flat `key=value` configuration files.
//!
//! Lines are `key=value`; blank lines and lines starting with `#` are
//! ignored. Consumers take the keys they know and then call [`KvFile::finish`],
//! which rejects anything left over, so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub struct KvFile {
    path: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot open config {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            if entries
                .insert(key.clone(), (value.trim().to_string(), lineno))
                .is_some()
            {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(KvFile {
            path: path.to_path_buf(),
            entries,
        })
    }

    /// Removes and parses a key if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((value, line)) => value.parse::<T>().map(Some).map_err(|_| Error::Parse {
                path: self.path.clone(),
                line,
                message: format!("bad value {value:?} for key {key:?}"),
            }),
        }
    }

    /// Removes a comma-separated list of values.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((value, line)) => value
                .split(',')
                .map(|t| t.trim().parse::<T>())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| Error::Parse {
                    path: self.path.clone(),
                    line,
                    message: format!("bad list {value:?} for key {key:?}"),
                }),
        }
    }

    /// Errors if any unrecognized key remains.
    pub fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.entries.into_iter().next() {
            return Err(Error::Parse {
                path: self.path,
                line,
                message: format!("unknown key {key:?}"),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(contents: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cfg");
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn parses_keys_and_skips_comments() {
        let (_d, path) = write("# comment\nlr = 0.5\n\nepochs=3\n");
        let mut kv = KvFile::load(&path).unwrap();
        assert_eq!(kv.take::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(kv.take::<usize>("epochs").unwrap(), Some(3));
        kv.finish().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected() {
        let (_d, path) = write("lr=0.5\nbogus=1\n");
        let mut kv = KvFile::load(&path).unwrap();
        let _ = kv.take::<f64>("lr").unwrap();
        let err = kv.finish().unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn bad_value_names_line() {
        let (_d, path) = write("lr=abc\n");
        let mut kv = KvFile::load(&path).unwrap();
        let err = kv.take::<f64>("lr").unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let (_d, path) = write("lr=1\nlr=2\n");
        assert!(KvFile::load(&path).is_err());
    }
}
