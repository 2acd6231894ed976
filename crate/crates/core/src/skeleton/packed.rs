//! Binary container for preprocessed clips.
//!
//! All integers are little-endian `u32`, all samples little-endian `f32`:
//!
//! ```text
//! magic        5 bytes  "STTR1"
//! N C T V M    5 × u32
//! num_classes  u32
//! N label records:
//!     label, valid_frames, subject, camera, setup   5 × u32
//!     id_len                                        u32
//!     id                                            id_len bytes, UTF-8
//! N × C × T × V × M  f32, sample-major, each sample in [C, T, V, M] row-major order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, DatasetManifest, ManifestEntry, SampleSource, SkeletonClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"STTR1";

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "packed clips",
        msg: msg.into(),
    }
}

fn io_err(e: std::io::Error) -> Error {
    fmt_err(e.to_string())
}

pub fn write_packed<W: Write>(mut w: W, data: &Dataset) -> Result<()> {
    let [c, t, v, m] = if data.is_empty() { [0; 4] } else { data.dims()? };
    let n = data.len();
    let u32_of = |x: usize| -> Result<[u8; 4]> {
        u32::try_from(x)
            .map(u32::to_le_bytes)
            .map_err(|_| fmt_err(format!("{x} does not fit in u32")))
    };
    w.write_all(MAGIC).map_err(io_err)?;
    for d in [n, c, t, v, m, data.num_classes()] {
        w.write_all(&u32_of(d)?).map_err(io_err)?;
    }
    for (clip, e) in data.clips.iter().zip(&data.manifest.entries) {
        for x in [clip.label, clip.valid_frames, e.subject as usize, e.camera as usize, e.setup as usize] {
            w.write_all(&u32_of(x)?).map_err(io_err)?;
        }
        w.write_all(&u32_of(e.id.len())?).map_err(io_err)?;
        w.write_all(e.id.as_bytes()).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(c * t * v * m * 4);
    for clip in &data.clips {
        buf.clear();
        for &x in clip.data.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| fmt_err("truncated header"))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn read_packed<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| fmt_err("missing magic"))?;
    if &magic != MAGIC {
        return Err(fmt_err(format!("bad magic {magic:?}, expected \"STTR1\"")));
    }
    let n = read_u32(&mut r)?;
    let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?];
    let num_classes = read_u32(&mut r)?;
    let mut meta = Vec::with_capacity(n);
    for _ in 0..n {
        let label = read_u32(&mut r)?;
        let valid = read_u32(&mut r)?;
        let (subject, camera, setup) = (read_u32(&mut r)? as u32, read_u32(&mut r)? as u32, read_u32(&mut r)? as u32);
        let len = read_u32(&mut r)?;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(|_| fmt_err("truncated label table"))?;
        let id = String::from_utf8(id).map_err(|_| fmt_err("sample id is not UTF-8"))?;
        meta.push((label, valid, subject, camera, setup, id));
    }
    let per = dims.iter().product::<usize>();
    let mut bytes = vec![0u8; per * 4];
    let mut clips = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for (label, valid, subject, camera, setup, id) in meta {
        r.read_exact(&mut bytes).map_err(|_| fmt_err("truncated sample data"))?;
        let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        clips.push(SkeletonClip::new(Tensor::new(dims.to_vec(), values)?, label, valid)?);
        entries.push(ManifestEntry {
            source: SampleSource::Path(id.clone()),
            id,
            label,
            subject,
            camera,
            setup,
        });
    }
    let manifest = DatasetManifest { entries, num_classes };
    manifest.validate()?;
    Ok(Dataset { manifest, clips })
}

pub fn save_packed(path: &Path, data: &Dataset) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_packed(BufWriter::new(f), data)
}

pub fn load_packed(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_packed(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{synth_generate, SynthConfig};

    #[test]
    fn round_trip_preserves_f32_values() {
        let d = synth_generate(&SynthConfig {
            clips_per_class: 2,
            frames: 4,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_packed(&mut buf, &d).unwrap();
        assert_eq!(&buf[..5], b"STTR1");
        let back = read_packed(buf.as_slice()).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in d.clips.iter().zip(&back.clips) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.data.data().iter().zip(b.data.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(back.manifest.entries[3].id, d.manifest.entries[3].id);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(read_packed(&b"STTR2\0\0\0\0"[..]).is_err());
        let d = synth_generate(&SynthConfig {
            clips_per_class: 1,
            frames: 2,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_packed(&mut buf, &d).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_packed(buf.as_slice()), Err(Error::Format { .. })));
    }
}
