//! Text cache of tuned kernel configurations keyed by layer shape, nnz and
//! the hash of the search space.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{GrimError, Result};
use crate::executor::KernelConfig;

const HEADER: &str = "grim-tune-cache 1";

type Key = (usize, usize, usize, u64);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TuneCache {
    entries: BTreeMap<Key, (KernelConfig, f64)>,
}

impl TuneCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, rows: usize, cols: usize, nnz: usize, space_hash: u64) -> Option<(KernelConfig, f64)> {
        self.entries.get(&(rows, cols, nnz, space_hash)).copied()
    }

    pub fn insert(&mut self, rows: usize, cols: usize, nnz: usize, space_hash: u64, cfg: KernelConfig, latency_us: f64) {
        self.entries.insert((rows, cols, nnz, space_hash), (cfg, latency_us));
    }

    /// One line per entry:
    /// `entry rows cols nnz space_hash tile_rows tile_cols unroll threads lre latency_us`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for (&(r, c, nnz, h), (cfg, us)) in &self.entries {
            let _ = writeln!(
                s,
                "entry {r} {c} {nnz} {h:016x} {} {} {} {} {} {us}",
                cfg.tile_rows,
                cfg.tile_cols,
                cfg.unroll,
                cfg.threads,
                u8::from(cfg.lre_enabled)
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        if lines.next().map(|(_, l)| l.trim()) != Some(HEADER) {
            return Err(GrimError::Format(format!("tuning cache: missing `{HEADER}` header")));
        }
        let mut cache = Self::default();
        for (i, line) in lines {
            let bad = || GrimError::Format(format!("tuning cache line {}: `{line}`", i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 11 || f[0] != "entry" {
                return Err(bad());
            }
            let n = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let hash = u64::from_str_radix(f[4], 16).map_err(|_| bad())?;
            let cfg = KernelConfig {
                tile_rows: n(f[5])?,
                tile_cols: n(f[6])?,
                unroll: n(f[7])?,
                threads: n(f[8])?,
                lre_enabled: n(f[9])? != 0,
            };
            cfg.validate()?;
            let us: f64 = f[10].parse().map_err(|_| bad())?;
            cache.insert(n(f[1])?, n(f[2])?, n(f[3])?, hash, cfg, us);
        }
        Ok(cache)
    }

    /// Loads `path`, or an empty cache when the file does not exist.
    pub fn load(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => Self::from_text(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(GrimError::io_at(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| GrimError::io_at(path, e))?;
        Ok(())
    }
}
