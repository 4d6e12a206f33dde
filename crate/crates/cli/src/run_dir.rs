//! Run-directory layout: `out/<run>/{config, data, ckpt, tables, traces}`,
//! a resolved-config echo and a content-hash index.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use vla_core::config::RunConfig;

pub const SUBDIRS: [&str; 5] = ["config", "data", "ckpt", "tables", "traces"];
const HASH_INDEX: &str = "hashes.json";

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the layout and echoes the resolved config. A run directory
    /// is tied to one config: reusing it with a different one is refused.
    pub fn prepare(out: &Path, run: &str, cfg: &RunConfig) -> Result<Self> {
        if run.is_empty() || run.contains(['/', '\\']) || run == "." || run == ".." {
            bail!("invalid run name {run:?}");
        }
        let root = out.join(run);
        for d in SUBDIRS {
            fs::create_dir_all(root.join(d))
                .with_context(|| format!("creating {}", root.join(d).display()))?;
        }
        let dir = Self { root };
        let echo = dir.path("config/resolved.toml");
        let text = cfg.to_toml();
        if echo.exists() {
            let old = fs::read_to_string(&echo)?;
            if old != text {
                bail!(
                    "run directory {} was created with a different config (sha256 {}); \
                     use a new --run name",
                    dir.root.display(),
                    sha256_hex(old.as_bytes())
                );
            }
        } else {
            fs::write(&echo, &text)?;
            fs::write(dir.path("config/resolved.sha256"), format!("{}\n", cfg.hash()))?;
        }
        Ok(dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn create(&self, rel: &str) -> Result<BufWriter<fs::File>> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(BufWriter::new(f))
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    /// Recomputes the hash index over every file in the run directory.
    pub fn refresh_hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![self.root.clone()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d)? {
                let p = e?.path();
                if p.is_dir() {
                    stack.push(p);
                    continue;
                }
                let rel = p
                    .strip_prefix(&self.root)
                    .expect("inside root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel == HASH_INDEX {
                    continue;
                }
                out.insert(rel, file_sha256(&p)?);
            }
        }
        self.write(HASH_INDEX, serde_json::to_string_pretty(&out)? + "\n")?;
        Ok(out)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(p: &Path) -> Result<String> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(sha256_hex(&bytes))
}
