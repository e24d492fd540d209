//! A rank's checkpointed memory: named byte regions that are either
//! resident or still backed by a lazily opened image.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use super::image::ImageError;
use super::store::LazyImage;

#[derive(Debug)]
enum Region {
    Resident(Vec<u8>),
    Mapped { offset: u64, len: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryStats {
    /// Bytes that were backed by an image when it was mapped.
    pub mapped_bytes: u64,
    /// Of those, bytes read in so far.
    pub materialized_bytes: u64,
    pub materializations: u64,
}

#[derive(Debug, Default)]
pub struct Memory {
    regions: BTreeMap<String, Region>,
    backing: Option<Arc<LazyImage>>,
    stats: MemoryStats,
    fully_materialized_at: Option<Instant>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every region resident, copied from an eagerly loaded image.
    pub fn from_regions(regions: BTreeMap<String, Vec<u8>>) -> Self {
        Self {
            regions: regions.into_iter().map(|(k, v)| (k, Region::Resident(v))).collect(),
            ..Self::default()
        }
    }

    /// Every region backed by `image`; payloads are read on first access.
    pub fn mapped(image: Arc<LazyImage>) -> Self {
        let mut regions = BTreeMap::new();
        let mut mapped = 0;
        for r in &image.layout.regions {
            regions.insert(r.tag.clone(), Region::Mapped { offset: r.offset, len: r.len });
            mapped += r.len;
        }
        Self {
            regions,
            backing: Some(image),
            stats: MemoryStats { mapped_bytes: mapped, ..MemoryStats::default() },
            fully_materialized_at: None,
        }
    }

    pub fn stats(&self) -> MemoryStats {
        self.stats
    }

    pub fn fully_materialized_at(&self) -> Option<Instant> {
        self.fully_materialized_at
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.regions.contains_key(tag)
    }

    pub fn is_resident(&self, tag: &str) -> bool {
        matches!(self.regions.get(tag), Some(Region::Resident(_)))
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.regions.keys().map(|k| k.as_str())
    }

    pub fn len_of(&self, tag: &str) -> Option<u64> {
        self.regions.get(tag).map(|r| match r {
            Region::Resident(v) => v.len() as u64,
            Region::Mapped { len, .. } => *len,
        })
    }

    pub fn insert(&mut self, tag: &str, bytes: Vec<u8>) {
        self.regions.insert(tag.to_string(), Region::Resident(bytes));
    }

    pub fn remove(&mut self, tag: &str) -> Option<Vec<u8>> {
        match self.regions.remove(tag)? {
            Region::Resident(v) => Some(v),
            Region::Mapped { offset, len } => self.backing.as_ref()?.read(offset, len).ok(),
        }
    }

    fn materialize(&mut self, tag: &str) -> Result<(), ImageError> {
        let Some(Region::Mapped { offset, len }) = self.regions.get(tag) else { return Ok(()) };
        let (offset, len) = (*offset, *len);
        let backing = self.backing.as_ref().expect("mapped region has a backing image");
        let bytes = backing.read(offset, len)?;
        self.regions.insert(tag.to_string(), Region::Resident(bytes));
        self.stats.materialized_bytes += len;
        self.stats.materializations += 1;
        if self.regions.values().all(|r| matches!(r, Region::Resident(_))) {
            self.fully_materialized_at = Some(Instant::now());
            self.backing = None;
        }
        Ok(())
    }

    pub fn get(&mut self, tag: &str) -> Result<Option<&[u8]>, ImageError> {
        self.materialize(tag)?;
        Ok(match self.regions.get(tag) {
            Some(Region::Resident(v)) => Some(v.as_slice()),
            _ => None,
        })
    }

    pub fn get_mut(&mut self, tag: &str) -> Result<Option<&mut Vec<u8>>, ImageError> {
        self.materialize(tag)?;
        Ok(match self.regions.get_mut(tag) {
            Some(Region::Resident(v)) => Some(v),
            _ => None,
        })
    }

    /// Makes every region resident.
    pub fn materialize_all(&mut self) -> Result<(), ImageError> {
        let tags: Vec<String> = self.regions.keys().cloned().collect();
        for t in tags {
            self.materialize(&t)?;
        }
        Ok(())
    }

    /// All regions in tag order, materializing any still mapped.
    pub fn snapshot(&mut self) -> Result<Vec<(&str, &[u8])>, ImageError> {
        self.materialize_all()?;
        Ok(self
            .regions
            .iter()
            .map(|(k, r)| match r {
                Region::Resident(v) => (k.as_str(), v.as_slice()),
                Region::Mapped { .. } => unreachable!("materialized above"),
            })
            .collect())
    }
}
