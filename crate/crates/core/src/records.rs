//! A minimal binary container for named `f32` tensors.
//!
//! Both model checkpoints and feature-extractor weight files use this
//! layout, differing only in their magic bytes:
//!
//! ```text
//! magic: 4 bytes
//! version: u32 little-endian
//! header: u32 byte length, then that many UTF-8 bytes (key=value lines)
//! records, until EOF:
//!   name: u32 byte length, then that many UTF-8 bytes
//!   rank: u32
//!   dims: rank x u32
//!   data: product(dims) x f32 little-endian
//! ```
//!
//! Reads are strict: wrong magic, unsupported version, truncation, or an
//! implausible dimension all fail with a format error and no partial
//! state escapes.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Upper bound on a single tensor's element count when reading; protects
/// against allocating garbage lengths from corrupt files.
const MAX_ELEMENTS: u64 = 1 << 31;

/// Everything a container holds.
#[derive(Clone, Debug)]
pub struct Container {
    pub version: u32,
    /// Free-form key=value text block.
    pub header: String,
    /// Tensors in file order.
    pub tensors: IndexMap<String, ArrayD<f32>>,
}

/// Serialise `tensors` (in iteration order) with the given magic, version,
/// and header text.
pub fn write_container<'a, W, I>(
    mut out: W,
    magic: [u8; 4],
    version: u32,
    header: &str,
    tensors: I,
) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a ArrayD<f32>)>,
{
    let io_err = |e: std::io::Error| Error::io("<container stream>", e);
    out.write_all(&magic).map_err(io_err)?;
    out.write_all(&version.to_le_bytes()).map_err(io_err)?;
    let header_bytes = header.as_bytes();
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    out.write_all(header_bytes).map_err(io_err)?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        out.write_all(name_bytes).map_err(io_err)?;
        let shape = tensor.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        // Standard layout guarantees iteration order matches memory order.
        for &v in tensor.as_standard_layout().iter() {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Convenience: write a container straight to a file path (buffered).
pub fn write_container_file<'a, I>(
    path: &Path,
    magic: [u8; 4],
    version: u32,
    header: &str,
    tensors: I,
) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a ArrayD<f32>)>,
{
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_container(
        std::io::BufWriter::new(file),
        magic,
        version,
        header,
        tensors,
    )
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<'p, R: Read> Reader<'p, R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| {
            Error::format(self.path, format!("truncated while reading {what}"))
        })
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let mut buf = vec![0u8; len];
        self.exact(&mut buf, what)?;
        String::from_utf8(buf)
            .map_err(|_| Error::format(self.path, format!("{what} is not valid UTF-8")))
    }

    /// Reads one record, or `None` at a clean end of file.
    fn record(&mut self) -> Result<Option<(String, ArrayD<f32>)>> {
        let mut len_buf = [0u8; 4];
        match self.inner.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(_) => {
                return Err(Error::format(self.path, "unreadable record length"));
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        self.exact(&mut name_buf, "a tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format(self.path, "tensor name is not valid UTF-8"))?;
        let rank = self.u32("a tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::format(
                self.path,
                format!("tensor {name:?} claims implausible rank {rank}"),
            ));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = self.u32("a tensor dimension")? as usize;
            elements = elements.saturating_mul(d as u64);
            dims.push(d);
        }
        if elements > MAX_ELEMENTS {
            return Err(Error::format(
                self.path,
                format!("tensor {name:?} claims implausible size {elements}"),
            ));
        }
        let mut data = vec![0f32; elements as usize];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            self.exact(&mut b, &format!("data of tensor {name:?}"))?;
            *v = f32::from_le_bytes(b);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| Error::format(self.path, format!("tensor {name:?} shape is invalid")))?;
        Ok(Some((name, arr)))
    }
}

/// Parse a container, verifying the magic bytes. `path` is used only for
/// error messages.
pub fn read_container<R: Read>(inner: R, path: &Path, magic: [u8; 4]) -> Result<Container> {
    let mut r = Reader { inner, path };
    let mut got_magic = [0u8; 4];
    r.exact(&mut got_magic, "the magic bytes")?;
    if got_magic != magic {
        return Err(Error::format(
            path,
            format!(
                "bad magic {:?} (expected {:?})",
                String::from_utf8_lossy(&got_magic),
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let version = r.u32("the format version")?;
    let header = r.string("the header text")?;
    let mut tensors = IndexMap::new();
    while let Some((name, arr)) = r.record()? {
        if tensors.insert(name.clone(), arr).is_some() {
            return Err(Error::format(
                path,
                format!("duplicate tensor name {name:?}"),
            ));
        }
    }
    Ok(Container {
        version,
        header,
        tensors,
    })
}

/// Convenience: read a container from a file path (buffered).
pub fn read_container_file(path: &Path, magic: [u8; 4]) -> Result<Container> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_container(std::io::BufReader::new(file), path, magic)
}
