//! Checkpoint image format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "PSCKPT01"
//! rank         u32
//! generation   u32
//! region count u32
//! regions      [tag len u32, tag, payload len u64, payload]*  sorted by tag
//! table        entry count u32, [vlid u16, vqpn u32, lid u16, qpn u32, generation u32]*
//!              owned count u32, [vlid u16, vqpn u32]*
//!              handle count u32, [id u32, vlid u16, vqpn u32, has u8, (lid u16, qpn u32, generation u32)?]*
//!              next handle u32
//! drained      count u32, [kind u8, key u64, len u32, payload]*
//! crc          u32 CRC-32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Seek, SeekFrom, Write};

use thiserror::Error;

use crate::fabric::{Address, QpNum, RealLid};
use crate::virt::{ShadowAddressHandle, ShadowHandleId, TranslationTable, VirtSnapshot, VirtualEndpointId};

pub const MAGIC: &[u8; 8] = b"PSCKPT01";
const HEADER_LEN: u64 = 8 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image is too short")]
    Truncated,
    #[error("bad magic")]
    BadMagic,
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("invalid {0}")]
    Invalid(&'static str),
    #[error("duplicate region tag `{0}`")]
    DuplicateTag(String),
    #[error("{0} unexpected bytes before the CRC")]
    Trailing(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Receive path a drained message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    /// Reliable connection to a peer rank.
    Rc(u32),
    /// An owned datagram endpoint.
    Ud(VirtualEndpointId),
}

impl Channel {
    fn kind_key(&self) -> (u8, u64) {
        match self {
            Channel::Rc(peer) => (0, u64::from(*peer)),
            Channel::Ud(v) => (1, (u64::from(v.vlid) << 32) | u64::from(v.vqpn)),
        }
    }

    fn from_kind_key(kind: u8, key: u64) -> Result<Self, ImageError> {
        match kind {
            0 => u32::try_from(key).map(Channel::Rc).map_err(|_| ImageError::Invalid("rc channel")),
            1 => {
                let vlid = u16::try_from(key >> 32).map_err(|_| ImageError::Invalid("ud channel"))?;
                Ok(Channel::Ud(VirtualEndpointId::new(vlid, key as u32)))
            }
            _ => Err(ImageError::Invalid("channel kind")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrainedMessage {
    pub channel: Channel,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointImage {
    pub rank: u32,
    pub generation: u32,
    pub regions: BTreeMap<String, Vec<u8>>,
    pub virt: VirtSnapshot,
    pub drained: Vec<DrainedMessage>,
}

/// Passes everything through while hashing it.
struct CrcWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
    written: u64,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn put_u16(w: &mut impl Write, v: u16) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_vid(w: &mut impl Write, v: VirtualEndpointId) -> io::Result<()> {
    put_u16(w, v.vlid)?;
    put_u32(w, v.vqpn)
}
fn put_addr(w: &mut impl Write, a: Address) -> io::Result<()> {
    put_u16(w, a.lid.0)?;
    put_u32(w, a.qpn.get())?;
    put_u32(w, a.generation)
}

/// Streams an image to `w`; returns the total byte count including the CRC.
/// `regions` must be sorted by tag with unique tags.
pub fn write_image<'a, W: Write>(
    w: W,
    rank: u32,
    generation: u32,
    regions: impl ExactSizeIterator<Item = (&'a str, &'a [u8])>,
    virt: &VirtSnapshot,
    drained: &[DrainedMessage],
) -> io::Result<u64> {
    let mut w = CrcWriter { inner: w, hasher: crc32fast::Hasher::new(), written: 0 };
    w.write_all(MAGIC)?;
    put_u32(&mut w, rank)?;
    put_u32(&mut w, generation)?;
    put_u32(&mut w, regions.len() as u32)?;
    for (tag, payload) in regions {
        put_u32(&mut w, tag.len() as u32)?;
        w.write_all(tag.as_bytes())?;
        put_u64(&mut w, payload.len() as u64)?;
        w.write_all(payload)?;
    }
    let t = &virt.table;
    put_u32(&mut w, t.entries.len() as u32)?;
    for (vid, addr) in &t.entries {
        put_vid(&mut w, *vid)?;
        put_addr(&mut w, *addr)?;
    }
    put_u32(&mut w, t.local_owned.len() as u32)?;
    for vid in &t.local_owned {
        put_vid(&mut w, *vid)?;
    }
    put_u32(&mut w, virt.handles.len() as u32)?;
    for h in &virt.handles {
        put_u32(&mut w, h.id.0)?;
        put_vid(&mut w, h.target)?;
        match h.real_ah {
            Some(a) => {
                w.write_all(&[1])?;
                put_addr(&mut w, a)?;
            }
            None => w.write_all(&[0])?,
        }
    }
    put_u32(&mut w, virt.next_handle)?;
    put_u32(&mut w, drained.len() as u32)?;
    for m in drained {
        let (kind, key) = m.channel.kind_key();
        w.write_all(&[kind])?;
        put_u64(&mut w, key)?;
        put_u32(&mut w, m.payload.len() as u32)?;
        w.write_all(&m.payload)?;
    }
    let crc = w.hasher.clone().finalize();
    let mut inner = w.inner;
    inner.write_all(&crc.to_le_bytes())?;
    inner.flush()?;
    Ok(w.written + 4)
}

impl CheckpointImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_image(
            &mut out,
            self.rank,
            self.generation,
            self.regions.iter().map(|(k, v)| (k.as_str(), v.as_slice())),
            &self.virt,
            &self.drained,
        )
        .expect("writing to memory cannot fail");
        out
    }

    /// Verifies the CRC, then parses. Nothing is read before the CRC passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let body = verify_crc(bytes)?;
        let mut cur = io::Cursor::new(body);
        let layout = read_layout(&mut cur, body.len() as u64)?;
        let mut regions = BTreeMap::new();
        for r in &layout.regions {
            let payload = body[r.offset as usize..(r.offset + r.len) as usize].to_vec();
            regions.insert(r.tag.clone(), payload);
        }
        let (virt, drained) = parse_tail(&body[layout.tail_offset as usize..])?;
        Ok(Self { rank: layout.rank, generation: layout.generation, regions, virt, drained })
    }
}

/// Returns the bytes covered by the CRC after checking it.
pub fn verify_crc(bytes: &[u8]) -> Result<&[u8], ImageError> {
    if (bytes.len() as u64) < HEADER_LEN + 4 {
        return Err(ImageError::Truncated);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ImageError::CrcMismatch { stored, computed });
    }
    Ok(body)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionEntry {
    pub tag: String,
    pub offset: u64,
    pub len: u64,
}

/// Position of every region payload within an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub rank: u32,
    pub generation: u32,
    pub regions: Vec<RegionEntry>,
    pub tail_offset: u64,
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], ImageError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ImageError::Truncated,
        _ => ImageError::Io(e),
    })?;
    Ok(b)
}

/// Reads the header and region table from the start of a CRC-verified body
/// of `body_len` bytes, seeking past payloads.
pub fn read_layout<R: Read + Seek>(r: &mut R, body_len: u64) -> Result<Layout, ImageError> {
    if &read_exact::<_, 8>(r)? != MAGIC {
        return Err(ImageError::BadMagic);
    }
    let rank = u32::from_le_bytes(read_exact(r)?);
    let generation = u32::from_le_bytes(read_exact(r)?);
    let count = u32::from_le_bytes(read_exact(r)?);
    let mut pos = HEADER_LEN;
    let mut regions: Vec<RegionEntry> = Vec::new();
    for _ in 0..count {
        let tag_len = u64::from(u32::from_le_bytes(read_exact(r)?));
        if pos + 4 + tag_len > body_len {
            return Err(ImageError::Truncated);
        }
        let mut tag = vec![0u8; tag_len as usize];
        r.read_exact(&mut tag)?;
        let tag = String::from_utf8(tag).map_err(|_| ImageError::Invalid("region tag"))?;
        let len = u64::from_le_bytes(read_exact(r)?);
        let offset = pos + 4 + tag_len + 8;
        if offset.checked_add(len).map_or(true, |end| end > body_len) {
            return Err(ImageError::Truncated);
        }
        if let Some(prev) = regions.last() {
            if prev.tag >= tag {
                return Err(if prev.tag == tag { ImageError::DuplicateTag(tag) } else { ImageError::Invalid("region order") });
            }
        }
        r.seek(SeekFrom::Start(offset + len))?;
        pos = offset + len;
        regions.push(RegionEntry { tag, offset, len });
    }
    Ok(Layout { rank, generation, regions, tail_offset: pos })
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.b.len()).ok_or(ImageError::Truncated)?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ImageError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ImageError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ImageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ImageError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vid(&mut self) -> Result<VirtualEndpointId, ImageError> {
        let vlid = self.u16()?;
        let vqpn = self.u32()?;
        if vqpn > crate::fabric::MAX_QPN {
            return Err(ImageError::Invalid("virtual qpn"));
        }
        Ok(VirtualEndpointId::new(vlid, vqpn))
    }
    fn addr(&mut self) -> Result<Address, ImageError> {
        let lid = RealLid(self.u16()?);
        let qpn = QpNum::new(self.u32()?).ok_or(ImageError::Invalid("qpn"))?;
        Ok(Address { lid, qpn, generation: self.u32()? })
    }
    /// Guards element counts against absurd allocations.
    fn count(&mut self, min_elem: usize) -> Result<usize, ImageError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem) > self.b.len() - self.pos {
            return Err(ImageError::Truncated);
        }
        Ok(n)
    }
}

/// Parses the translation-table snapshot and drained store that follow the
/// regions; `bytes` must end exactly where the CRC begins.
pub fn parse_tail(bytes: &[u8]) -> Result<(VirtSnapshot, Vec<DrainedMessage>), ImageError> {
    let mut c = Cursor { b: bytes, pos: 0 };
    let mut table = TranslationTable::default();
    for _ in 0..c.count(16)? {
        let vid = c.vid()?;
        let addr = c.addr()?;
        if table.entries.insert(vid, addr).is_some() {
            return Err(ImageError::Invalid("duplicate table entry"));
        }
    }
    for _ in 0..c.count(6)? {
        if !table.local_owned.insert(c.vid()?) {
            return Err(ImageError::Invalid("duplicate owned id"));
        }
    }
    let mut handles = Vec::new();
    for _ in 0..c.count(11)? {
        let id = ShadowHandleId(c.u32()?);
        let target = c.vid()?;
        let real_ah = match c.u8()? {
            0 => None,
            1 => Some(c.addr()?),
            _ => return Err(ImageError::Invalid("handle flag")),
        };
        handles.push(ShadowAddressHandle { id, target, real_ah });
    }
    let next_handle = c.u32()?;
    let mut drained = Vec::new();
    for _ in 0..c.count(13)? {
        let kind = c.u8()?;
        let key = c.u64()?;
        let channel = Channel::from_kind_key(kind, key)?;
        let len = c.u32()? as usize;
        drained.push(DrainedMessage { channel, payload: c.take(len)?.to_vec() });
    }
    if c.pos != bytes.len() {
        return Err(ImageError::Trailing((bytes.len() - c.pos) as u64));
    }
    Ok((VirtSnapshot { table, handles, next_handle }, drained))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointImage {
        let mut regions = BTreeMap::new();
        regions.insert("app".to_string(), vec![1, 2, 3]);
        regions.insert("heap".to_string(), vec![9; 100]);
        let v = VirtualEndpointId::new(1, 64);
        let a = Address { lid: RealLid(1), qpn: QpNum::new(64).unwrap(), generation: 0 };
        let mut table = TranslationTable::default();
        table.entries.insert(v, a);
        table.local_owned.insert(v);
        CheckpointImage {
            rank: 3,
            generation: 2,
            regions,
            virt: VirtSnapshot {
                table,
                handles: vec![ShadowAddressHandle { id: ShadowHandleId(1), target: v, real_ah: Some(a) }],
                next_handle: 2,
            },
            drained: vec![
                DrainedMessage { channel: Channel::Rc(2), payload: b"x".to_vec() },
                DrainedMessage { channel: Channel::Ud(v), payload: vec![] },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"PSCKPT01");
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        assert_eq!(&bytes[24..27], b"app");
        assert_eq!(&bytes[27..35], &3u64.to_le_bytes());
        let n = bytes.len();
        assert_eq!(&bytes[n - 4..], &crc32fast::hash(&bytes[..n - 4]).to_le_bytes());
    }

    #[test]
    fn round_trip() {
        let img = sample();
        let bytes = img.to_bytes();
        let back = CheckpointImage::from_bytes(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_refused() {
        let bytes = sample().to_bytes();
        for i in [0, 10, 30, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(CheckpointImage::from_bytes(&bad).is_err(), "flip at {i} accepted");
        }
        assert!(matches!(CheckpointImage::from_bytes(&bytes[..10]), Err(ImageError::Truncated)));
    }
}
