//! Directory format: `manifest.csv` (`id,class,split,file`) plus one
//! waveform file per sample.
//!
//! Waveform file: `"LDWF1"`, u32 LE length, then length × f32 LE.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Sample, SampleSet, Split, NUM_CLASSES};

pub const WAVE_MAGIC: &str = "LDWF1";
pub const WAVE_EXTENSION: &str = "ldwf";
pub const MANIFEST: &str = "manifest.csv";

pub fn wave_to_bytes(w: &[f32]) -> Result<Vec<u8>> {
    let len =
        u32::try_from(w.len()).map_err(|_| Error::Validation(format!("waveform of {} samples too long", w.len())))?;
    let mut out = Vec::with_capacity(WAVE_MAGIC.len() + 4 + 4 * w.len());
    out.extend_from_slice(WAVE_MAGIC.as_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    for v in w {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn wave_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    let header = WAVE_MAGIC.len() + 4;
    if bytes.len() < WAVE_MAGIC.len() {
        return Err(Error::Truncated { path: path.to_path_buf(), detail: format!("{} bytes, no header", bytes.len()) });
    }
    if !bytes.starts_with(WAVE_MAGIC.as_bytes()) {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: WAVE_MAGIC });
    }
    if bytes.len() < header {
        return Err(Error::Truncated { path: path.to_path_buf(), detail: "missing length field".into() });
    }
    let len = u32::from_le_bytes(bytes[WAVE_MAGIC.len()..header].try_into().expect("4 bytes")) as usize;
    let body = &bytes[header..];
    if body.len() < 4 * len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header declares {len} samples, file holds {}", body.len() / 4),
        });
    }
    if body.len() > 4 * len {
        return Err(Error::CountMismatch(format!(
            "{}: header declares {len} samples but {} trailing bytes follow",
            path.display(),
            body.len() - 4 * len
        )));
    }
    Ok(body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
}

fn wave_name(id: usize) -> String {
    format!("wave_{id:05}.{WAVE_EXTENSION}")
}

/// Writes the manifest and waveform files into `dir`, creating it if needed.
pub fn save(set: &SampleSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(dir.join(MANIFEST))?;
    w.write_record(["id", "class", "split", "file"])?;
    for s in &set.samples {
        let file = wave_name(s.id);
        let split = s.split.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([s.id.to_string(), s.class.to_string(), split, file.clone()])?;
        fs::write(dir.join(&file), wave_to_bytes(&s.waveform)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a directory written by [`save`].
pub fn load(dir: &Path) -> Result<SampleSet> {
    let manifest = dir.join(MANIFEST);
    let mut r = csv::ReaderBuilder::new().from_path(&manifest)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "class", "split", "file"] {
        return Err(Error::Validation(format!("{}: header must be id,class,split,file", manifest.display())));
    }
    let mut samples = Vec::new();
    for (row, record) in r.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let bad = |what: &str| Error::Validation(format!("{}:{line}: {what}", manifest.display()));
        let id: usize = record[0].parse().map_err(|_| bad("id is not an integer"))?;
        let class: u8 = record[1].parse().map_err(|_| bad("class is not an integer"))?;
        if !(1..=NUM_CLASSES as u8).contains(&class) {
            return Err(bad(&format!("class {class} outside 1..={NUM_CLASSES}")));
        }
        let split = match &record[2] {
            "" => None,
            s => Some(s.parse::<Split>().map_err(|_| bad(&format!("unknown split `{s}`")))?),
        };
        let file = &record[3];
        if file.contains(['/', '\\']) {
            return Err(bad("file must be a bare name inside the dataset directory"));
        }
        let path = dir.join(file);
        if !path.exists() {
            return Err(Error::CountMismatch(format!("{}:{line}: waveform {file} is missing", manifest.display())));
        }
        let waveform = wave_from_bytes(&fs::read(&path)?, &path)?;
        samples.push(Sample { id, class, split, waveform });
    }
    let on_disk = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == WAVE_EXTENSION))
        .count();
    if on_disk != samples.len() {
        return Err(Error::CountMismatch(format!(
            "{}: manifest lists {} samples but the directory holds {on_disk} waveform files",
            dir.display(),
            samples.len()
        )));
    }
    if let Some(len) = samples.first().map(|s| s.waveform.len()) {
        if let Some(s) = samples.iter().find(|s| s.waveform.len() != len) {
            return Err(Error::Validation(format!("sample {} has length {}, expected {len}", s.id, s.waveform.len())));
        }
    }
    Ok(SampleSet { samples })
}
