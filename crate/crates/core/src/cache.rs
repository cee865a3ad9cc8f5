//! Fixed-capacity pool of pseudo-labeled batches with uniform draws and
//! probability-p replacement of the drawn entry.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::binio::{BinReader, BinWriter, FormatError};
use crate::ctc::TokenSeq;
use crate::data::UnlabeledUtterance;

const CACHE_MAGIC: &[u8; 8] = b"SLIPCACH";
const CACHE_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache is full at capacity {0}")]
    Full(usize),
    #[error("cache not ready: {size} of {capacity} entries filled")]
    NotReady { size: usize, capacity: usize },
    #[error("invalid cache entry: {0}")]
    InvalidEntry(String),
    #[error("cache capacity must be positive")]
    ZeroCapacity,
    #[error("snapshot references unknown utterance {0}")]
    UnknownUtterance(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// A batch and its pseudo-labels before the cache assigns an id.
#[derive(Debug, Clone)]
pub struct PendingEntry {
    pub batch: Vec<Arc<UnlabeledUtterance>>,
    pub pls: Vec<TokenSeq>,
    /// Update index of the model that produced the labels.
    pub model_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PLCacheEntry {
    pub batch: Vec<Arc<UnlabeledUtterance>>,
    pub pls: Vec<TokenSeq>,
    pub model_version: u64,
    pub entry_id: u64,
}

impl PLCacheEntry {
    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeStats {
    pub mean: f64,
    pub max: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PLCache {
    capacity: usize,
    entries: Vec<Arc<PLCacheEntry>>,
    next_id: u64,
    draws: u64,
    replacements: u64,
}

impl PLCache {
    pub fn new(capacity: usize) -> Result<Self, CacheError> {
        if capacity == 0 {
            return Err(CacheError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            next_id: 0,
            draws: 0,
            replacements: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn replacements(&self) -> u64 {
        self.replacements
    }

    pub fn entries(&self) -> &[Arc<PLCacheEntry>] {
        &self.entries
    }

    fn admit(&mut self, pending: PendingEntry) -> Result<Arc<PLCacheEntry>, CacheError> {
        if pending.batch.len() != pending.pls.len() {
            return Err(CacheError::InvalidEntry(format!(
                "{} utterances but {} pseudo-labels",
                pending.batch.len(),
                pending.pls.len()
            )));
        }
        let entry = Arc::new(PLCacheEntry {
            batch: pending.batch,
            pls: pending.pls,
            model_version: pending.model_version,
            entry_id: self.next_id,
        });
        self.next_id += 1;
        Ok(entry)
    }

    /// Fill-phase insertion.
    pub fn insert(&mut self, pending: PendingEntry) -> Result<u64, CacheError> {
        if self.is_full() {
            return Err(CacheError::Full(self.capacity));
        }
        let entry = self.admit(pending)?;
        let id = entry.entry_id;
        self.entries.push(entry);
        Ok(id)
    }

    /// Draws an entry uniformly; with probability `p` it is replaced in place
    /// by one built from `fresh`. The drawn entry is returned either way.
    ///
    /// Always consumes one index draw and one uniform from `rng`, so the
    /// stream position does not depend on `p`. `fresh` runs only on
    /// replacement.
    pub fn draw_and_maybe_replace<E, F>(&mut self, p: f64, fresh: F, rng: &mut impl Rng) -> Result<Arc<PLCacheEntry>, E>
    where
        E: From<CacheError>,
        F: FnOnce() -> Result<PendingEntry, E>,
    {
        if !self.is_full() {
            return Err(CacheError::NotReady {
                size: self.entries.len(),
                capacity: self.capacity,
            }
            .into());
        }
        let idx = rng.random_range(0..self.capacity);
        let replace = rng.random::<f64>() < p;
        let drawn = Arc::clone(&self.entries[idx]);
        if replace {
            let entry = self.admit(fresh()?)?;
            self.entries[idx] = entry;
            self.replacements += 1;
        }
        self.draws += 1;
        Ok(drawn)
    }

    /// Staleness `current_version - model_version` over entries, `None` when
    /// empty. Entries newer than `current_version` count as zero.
    pub fn age_stats(&self, current_version: u64) -> Option<AgeStats> {
        if self.entries.is_empty() {
            return None;
        }
        let ages: Vec<u64> = self
            .entries
            .iter()
            .map(|e| current_version.saturating_sub(e.model_version))
            .collect();
        Some(AgeStats {
            mean: ages.iter().sum::<u64>() as f64 / ages.len() as f64,
            max: ages.iter().copied().max().unwrap_or(0),
        })
    }

    /// Features are not stored: entries record utterance ids, which
    /// `read_from` resolves against the unlabeled corpus.
    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> std::io::Result<()> {
        w.magic(CACHE_MAGIC)?;
        w.u32(CACHE_FORMAT)?;
        w.usize(self.capacity)?;
        w.u64(self.next_id)?;
        w.u64(self.draws)?;
        w.u64(self.replacements)?;
        w.usize(self.entries.len())?;
        for e in &self.entries {
            w.u64(e.entry_id)?;
            w.u64(e.model_version)?;
            w.usize(e.batch.len())?;
            for (u, pl) in e.batch.iter().zip(&e.pls) {
                w.str(&u.id)?;
                w.usizes(pl.tokens())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(
        r: &mut BinReader<R>,
        resolve: impl Fn(&str) -> Option<Arc<UnlabeledUtterance>>,
    ) -> Result<Self, CacheError> {
        r.expect_magic(CACHE_MAGIC)?;
        let format = r.u32()?;
        if format != CACHE_FORMAT {
            return Err(FormatError::Version {
                what: "cache snapshot",
                expected: CACHE_FORMAT.to_string(),
                found: format.to_string(),
            }
            .into());
        }
        let capacity = r.usize()?;
        let mut cache = Self::new(capacity)?;
        cache.next_id = r.u64()?;
        cache.draws = r.u64()?;
        cache.replacements = r.u64()?;
        let n = r.usize()?;
        if n > capacity {
            return Err(FormatError::Corrupt(format!("{n} entries exceed capacity {capacity}")).into());
        }
        for _ in 0..n {
            let entry_id = r.u64()?;
            let model_version = r.u64()?;
            let len = r.usize()?;
            let mut batch = Vec::new();
            let mut pls = Vec::new();
            for _ in 0..len {
                let id = r.str()?;
                let utt = resolve(&id).ok_or(CacheError::UnknownUtterance(id))?;
                batch.push(utt);
                pls.push(TokenSeq::new(r.usizes()?));
            }
            if entry_id >= cache.next_id {
                return Err(FormatError::Corrupt(format!("entry id {entry_id} not below next id")).into());
            }
            cache.entries.push(Arc::new(PLCacheEntry {
                batch,
                pls,
                model_version,
                entry_id,
            }));
        }
        Ok(cache)
    }
}
