//! Image files on disk: `<dir>/gen<generation>/rank<id>.img`.
//!
//! Images are written to a temporary file first and renamed into place only
//! once every rank has written successfully, so an aborted checkpoint never
//! replaces a complete earlier one.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use super::image::{parse_tail, read_layout, write_image, CheckpointImage, DrainedMessage, ImageError, Layout};
use crate::virt::VirtSnapshot;

/// Environment variable overriding the image directory.
pub const DIR_ENV: &str = "CKPTF_DIR";

const CRC_CHUNK: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageStore {
    dir: PathBuf,
}

/// A fully written image that has not been moved into place yet.
#[derive(Debug)]
pub struct PendingImage {
    pub temp: PathBuf,
    pub path: PathBuf,
    pub bytes: u64,
}

impl ImageStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `CKPTF_DIR` if set, else `default`.
    pub fn from_env_or(default: impl Into<PathBuf>) -> Self {
        match std::env::var_os(DIR_ENV) {
            Some(d) => Self::new(d),
            None => Self::new(default),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, generation: u32, rank: u32) -> PathBuf {
        self.dir.join(format!("gen{generation}")).join(format!("rank{rank}.img"))
    }

    pub fn write_pending<'a>(
        &self,
        rank: u32,
        generation: u32,
        regions: impl ExactSizeIterator<Item = (&'a str, &'a [u8])>,
        virt: &VirtSnapshot,
        drained: &[DrainedMessage],
    ) -> io::Result<PendingImage> {
        let path = self.path(generation, rank);
        fs::create_dir_all(path.parent().unwrap())?;
        let temp = path.with_extension("img.tmp");
        let file = File::create(&temp)?;
        let mut w = BufWriter::with_capacity(1 << 20, file);
        let bytes = write_image(&mut w, rank, generation, regions, virt, drained)?;
        let file = w.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(PendingImage { temp, path, bytes })
    }

    pub fn commit(&self, pending: &PendingImage) -> io::Result<()> {
        fs::rename(&pending.temp, &pending.path)
    }

    pub fn discard(&self, pending: &PendingImage) -> io::Result<()> {
        match fs::remove_file(&pending.temp) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    /// Generations that have a committed image for every rank in `0..ranks`.
    pub fn complete_generations(&self, ranks: u32) -> Vec<u32> {
        let Ok(entries) = fs::read_dir(&self.dir) else { return Vec::new() };
        let mut gens: Vec<u32> = entries
            .filter_map(|e| e.ok()?.file_name().to_str()?.strip_prefix("gen")?.parse().ok())
            .filter(|g| (0..ranks).all(|r| self.path(*g, r).is_file()))
            .collect();
        gens.sort_unstable();
        gens
    }

    pub fn latest_complete(&self, ranks: u32) -> Option<u32> {
        self.complete_generations(ranks).pop()
    }
}

pub fn load_eager(path: &Path) -> Result<CheckpointImage, ImageError> {
    CheckpointImage::from_bytes(&fs::read(path)?)
}

/// An image whose region payloads are read from the file on demand.
#[derive(Debug)]
pub struct LazyImage {
    file: File,
    pub layout: Layout,
    pub virt: VirtSnapshot,
    pub drained: Vec<DrainedMessage>,
    pub size: u64,
}

impl LazyImage {
    /// Streams the whole file once to check the CRC, then reads only the
    /// header, region table and tail.
    pub fn open(path: &Path) -> Result<Self, ImageError> {
        let file = File::open(path)?;
        let size = file.metadata()?.len();
        if size < 24 {
            return Err(ImageError::Truncated);
        }
        let body_len = size - 4;
        let mut hasher = crc32fast::Hasher::new();
        let mut reader = BufReader::with_capacity(CRC_CHUNK, &file);
        let mut buf = vec![0u8; CRC_CHUNK];
        let mut left = body_len;
        while left > 0 {
            let n = (left as usize).min(CRC_CHUNK);
            reader.read_exact(&mut buf[..n])?;
            hasher.update(&buf[..n]);
            left -= n as u64;
        }
        let mut trailer = [0u8; 4];
        reader.read_exact(&mut trailer)?;
        let stored = u32::from_le_bytes(trailer);
        let computed = hasher.finalize();
        if stored != computed {
            return Err(ImageError::CrcMismatch { stored, computed });
        }
        drop(reader);
        (&file).seek(SeekFrom::Start(0))?;
        let mut reader = BufReader::new(&file);
        let layout = read_layout(&mut reader, body_len)?;
        let mut tail = vec![0u8; (body_len - layout.tail_offset) as usize];
        file.read_exact_at(&mut tail, layout.tail_offset)?;
        let (virt, drained) = parse_tail(&tail)?;
        Ok(Self { file, layout, virt, drained, size })
    }

    pub fn read(&self, offset: u64, len: u64) -> io::Result<Vec<u8>> {
        let mut buf = vec![0u8; len as usize];
        self.file.read_exact_at(&mut buf, offset)?;
        Ok(buf)
    }
}
