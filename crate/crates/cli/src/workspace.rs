//! Content-addressed artifact store.
//!
//! Every stage output lives in `<root>/<stage>/<key>/`, where `key` hashes
//! the stage's parameters together with the keys of its inputs. A directory
//! is complete once its `manifest.json` exists; the manifest lists the input
//! keys and the SHA-256 of every file, and is checked whenever an artifact
//! is read back.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub key: String,
    /// Input name → key of the artifact it was read from.
    pub inputs: BTreeMap<String, String>,
    pub params: serde_json::Value,
    /// File name → SHA-256 (hex).
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn input(&self, name: &str) -> Option<&str> {
        self.inputs.get(name).map(String::as_str)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Key of a stage run: hash of its name, parameters and input keys.
pub fn stage_key(stage: &str, params: &serde_json::Value, inputs: &BTreeMap<String, String>) -> String {
    let canon = serde_json::to_string(&(stage, params, inputs)).expect("serializable");
    sha256_hex(canon.as_bytes())[..16].to_string()
}

/// Holds the workspace lock for as long as it lives.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    lock: PathBuf,
}

impl Workspace {
    /// Creates `root` if needed and takes the writer lock.
    pub fn open(root: &Path) -> Result<Workspace> {
        fs::create_dir_all(root)?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Locked(root.display().to_string()));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Workspace {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(key)
    }

    pub fn exists(&self, stage: &str, key: &str) -> bool {
        self.dir(stage, key).join(MANIFEST).is_file()
    }

    /// Reads and verifies a finished artifact; `producer` is the subcommand
    /// named in the error when it is absent.
    pub fn open_artifact(&self, stage: &str, key: &str, producer: &'static str) -> Result<Artifact> {
        let dir = self.dir(stage, key);
        let text = match fs::read_to_string(dir.join(MANIFEST)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::missing(format!("{}/{}", stage, key), producer));
            }
            Err(e) => return Err(e.into()),
        };
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.key != key || manifest.stage != stage {
            return Err(CliError::HashMismatch(format!(
                "{} claims to be {}/{}",
                dir.display(),
                manifest.stage,
                manifest.key
            )));
        }
        Ok(Artifact { dir, manifest })
    }

    /// Starts writing a new artifact in a scratch directory.
    pub fn begin(
        &self,
        stage: &str,
        key: &str,
        inputs: BTreeMap<String, String>,
        params: serde_json::Value,
    ) -> Result<Pending> {
        let tmp = self.root.join(stage).join(format!(".tmp-{}", key));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Pending {
            tmp,
            dest: self.dir(stage, key),
            manifest: Manifest {
                stage: stage.to_string(),
                key: key.to_string(),
                inputs,
                params,
                files: BTreeMap::new(),
            },
        })
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// A finished, manifest-checked artifact directory.
#[derive(Debug)]
pub struct Artifact {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Artifact {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// File contents, verified against the manifest hash.
    pub fn read(&self, name: &str) -> Result<Vec<u8>> {
        let expect = self.manifest.files.get(name).ok_or_else(|| {
            CliError::HashMismatch(format!("{} is not listed in {}", name, self.dir.display()))
        })?;
        let bytes = fs::read(self.dir.join(name))?;
        let found = sha256_hex(&bytes);
        if &found != expect {
            return Err(CliError::HashMismatch(format!(
                "{} has hash {}, manifest says {}",
                self.dir.join(name).display(),
                found,
                expect
            )));
        }
        Ok(bytes)
    }

    pub fn read_string(&self, name: &str) -> Result<String> {
        String::from_utf8(self.read(name)?).map_err(|e| CliError::HashMismatch(e.to_string()))
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.read(name)?)?)
    }

    /// Checks that this artifact was built from `key` for input `name`.
    pub fn expect_input(&self, name: &str, key: &str) -> Result<()> {
        match self.manifest.input(name) {
            Some(k) if k == key => Ok(()),
            other => Err(CliError::HashMismatch(format!(
                "{} was built from {} {}, expected {}",
                self.dir.display(),
                name,
                other.unwrap_or("<none>"),
                key
            ))),
        }
    }

    /// Verifies every listed file.
    pub fn verify(&self) -> Result<()> {
        for name in self.manifest.files.keys() {
            self.read(name)?;
        }
        Ok(())
    }
}

/// An artifact being written; invisible until [`Pending::commit`].
#[derive(Debug)]
pub struct Pending {
    tmp: PathBuf,
    dest: PathBuf,
    manifest: Manifest,
}

impl Pending {
    pub fn dir(&self) -> &Path {
        &self.tmp
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.tmp.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = File::create(path)?;
        f.write_all(bytes)?;
        self.manifest.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Registers a file that something else already wrote into [`Pending::dir`].
    pub fn adopt(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.tmp.join(name))?;
        self.manifest.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn commit(mut self) -> Result<Artifact> {
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(self.tmp.join(MANIFEST), text)?;
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest)?;
        }
        fs::rename(&self.tmp, &self.dest)?;
        self.tmp = PathBuf::new();
        Ok(Artifact {
            dir: self.dest.clone(),
            manifest: self.manifest.clone(),
        })
    }
}

impl Drop for Pending {
    fn drop(&mut self) {
        if !self.tmp.as_os_str().is_empty() {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        assert!(matches!(Workspace::open(dir.path()), Err(CliError::Locked(_))));
        drop(ws);
        Workspace::open(dir.path()).unwrap();
    }

    #[test]
    fn artifacts_are_verified() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let key = stage_key("s", &serde_json::json!({"a": 1}), &BTreeMap::new());
        assert!(matches!(
            ws.open_artifact("s", &key, "make-s"),
            Err(CliError::MissingArtifact { stage: "make-s", .. })
        ));
        let mut p = ws.begin("s", &key, BTreeMap::new(), serde_json::Value::Null).unwrap();
        p.write("x.txt", b"hello").unwrap();
        p.commit().unwrap();
        assert!(ws.exists("s", &key));
        let a = ws.open_artifact("s", &key, "make-s").unwrap();
        assert_eq!(a.read("x.txt").unwrap(), b"hello");
        fs::write(a.path("x.txt"), b"tampered").unwrap();
        assert!(matches!(a.read("x.txt"), Err(CliError::HashMismatch(_))));
    }

    #[test]
    fn keys_depend_on_params_and_inputs() {
        let p = serde_json::json!({"lr": 0.1});
        let mut i = BTreeMap::new();
        let k0 = stage_key("s", &p, &i);
        i.insert("data".to_string(), "abc".to_string());
        assert_ne!(k0, stage_key("s", &p, &i));
        assert_ne!(k0, stage_key("t", &p, &BTreeMap::new()));
        assert_eq!(k0, stage_key("s", &serde_json::json!({"lr": 0.1}), &BTreeMap::new()));
    }
}
