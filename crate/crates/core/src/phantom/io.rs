//! Volume files and line-delimited JSON manifests.
//!
//! Volume layout: `OCTV`, version as u16, then D, H, W as u32, then
//! D*H*W f32 values with W fastest. Everything is little-endian.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{DatasetManifest, Scan, ScanRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"OCTV";
pub const VOLUME_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4;

pub fn volume_to_bytes(v: &Tensor<f32>) -> Result<Vec<u8>> {
    let dims = match *v.dims() {
        [d, h, w] => [d, h, w],
        _ => return Err(Error::shape(format!("a volume must be (D, H, W), got {:?}", v.dims()))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for e in dims {
        let e = u32::try_from(e).map_err(|_| Error::shape(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(format!("volume header truncated at {} bytes", bytes.len())));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::format("not a volume file (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VOLUME_VERSION {
        return Err(Error::format(format!("unsupported volume version {version}")));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let at = 6 + 4 * k;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    }
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = count.and_then(|c| c.checked_mul(4)).and_then(|b| b.checked_add(HEADER_LEN));
    match expected {
        Some(e) if e == bytes.len() => {}
        Some(e) => {
            return Err(Error::format(format!("volume {dims:?} needs {e} bytes, file has {}", bytes.len())))
        }
        None => return Err(Error::format(format!("volume extents {dims:?} overflow"))),
    }
    if dims.contains(&0) {
        return Err(Error::format(format!("volume extents {dims:?} contain zero")));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(dims.to_vec(), data)
}

pub fn write_volume(path: impl AsRef<Path>, v: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, volume_to_bytes(v)?)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    volume_from_bytes(&fs::read(path)?)
}

/// One JSON object per line.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Blank lines are skipped. A malformed line is a format error naming it.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ScanRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(r);
    }
    let m = DatasetManifest { records };
    m.validate()?;
    Ok(m)
}

fn resolve(manifest_dir: &Path, record: &ScanRecord) -> PathBuf {
    let p = Path::new(&record.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

/// Write each volume at its record's path under `dir`, then
/// `dir/manifest.jsonl`. Returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, scans: &[Scan]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest { records: scans.iter().map(|s| s.record.clone()).collect() };
    manifest.validate()?;
    for s in scans {
        write_volume(resolve(dir, &s.record), &s.volume)?;
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &manifest)?;
    Ok(path)
}

/// Load every volume a manifest lists, resolving relative paths against the
/// manifest's directory. A missing volume is a data error.
pub fn load_scans(manifest_path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Vec<Scan>> {
    let dir = manifest_path.as_ref().parent().unwrap_or(Path::new("."));
    manifest
        .records
        .iter()
        .map(|r| {
            let path = resolve(dir, r);
            if !path.is_file() {
                return Err(Error::data(format!("scan {} volume {} not found", r.scan_id, path.display())));
            }
            Ok(Scan { record: r.clone(), volume: read_volume(&path)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomParams};
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let v = Tensor::from_vec(vec![2, 3, 4], (0..24).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap();
        let mut odd = v.clone();
        odd.data_mut()[5] = f32::from_bits(0x7fc0_1234);
        odd.data_mut()[6] = -0.0;
        let back = volume_from_bytes(&volume_to_bytes(&odd).unwrap()).unwrap();
        assert_eq!(back.dims(), odd.dims());
        assert!(back.data().iter().zip(odd.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let bytes = volume_to_bytes(&v).unwrap();
        assert_eq!(&bytes[..4], b"OCTV");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[18..22], &(-3.0f32).to_le_bytes());
    }

    #[test]
    fn bad_magic_and_every_truncation_rejected() {
        let v = Tensor::from_vec(vec![2, 2, 2], vec![1.0f32; 8]).unwrap();
        let mut bytes = volume_to_bytes(&v).unwrap();
        for n in 0..bytes.len() {
            assert!(matches!(volume_from_bytes(&bytes[..n]), Err(Error::Format(_))), "length {n}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(volume_from_bytes(&longer), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(volume_from_bytes(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn fuzzed_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = volume_from_bytes(&bytes);
            let mut framed = b"OCTV\x01\x00".to_vec();
            framed.extend_from_slice(&bytes);
            let _ = volume_from_bytes(&framed);
        }
    }

    #[test]
    fn dataset_round_trip_and_missing_volume() {
        let dir = tempfile::tempdir().unwrap();
        let scans = generate(&PhantomParams { seed: 9, ..Default::default() }, 3).unwrap();
        let path = write_dataset(dir.path(), &scans).unwrap();
        let manifest = read_manifest(&path).unwrap();
        assert_eq!(manifest.records.len(), 3);
        assert_eq!(load_scans(&path, &manifest).unwrap(), scans);
        fs::remove_file(dir.path().join(&scans[1].record.path)).unwrap();
        assert!(matches!(load_scans(&path, &manifest), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_rejects_duplicates_and_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let scans = generate(&PhantomParams::default(), 1).unwrap();
        let line = serde_json::to_string(&scans[0].record).unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Data(_))));
        let extra = line.replacen('{', "{\"bogus\":1,", 1);
        fs::write(&path, extra).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Format(_))));
    }
}
