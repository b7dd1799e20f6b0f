//! On-disk trial set format: `manifest.json` (shape, labels, blocks,
//! class names) plus `trials.f32` (raw little-endian IEEE-754 binary32,
//! row-major `[trials][channels][samples]`). The round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::TrialSet;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIALS_FILE: &str = "trials.f32";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    channels: usize,
    samples: usize,
    num_trials: usize,
    block_size: usize,
    sample_rate_hz: f64,
    class_names: Vec<String>,
    labels: Vec<usize>,
    block_ids: Vec<usize>,
}

/// Writes `manifest.json` and `trials.f32` into `dir` (created if needed).
pub fn write_trialset(ts: &TrialSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        num_classes: ts.num_classes(),
        channels: ts.channels(),
        samples: ts.samples(),
        num_trials: ts.num_trials(),
        block_size: ts.block_size(),
        sample_rate_hz: ts.sample_rate_hz(),
        class_names: ts.class_names().to_vec(),
        labels: ts.labels().to_vec(),
        block_ids: ts.block_ids().to_vec(),
    };
    let mut mf = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    mf.flush()?;

    let mut df = BufWriter::new(File::create(dir.join(TRIALS_FILE))?);
    let flat = ts.data().as_slice().expect("trial tensor is contiguous");
    for &v in flat {
        df.write_all(&v.to_le_bytes())?;
    }
    df.flush()?;
    Ok(())
}

/// Reads a trial set back, validating manifest consistency and the exact
/// expected byte length of the data file.
pub fn read_trialset(dir: &Path) -> Result<TrialSet> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::stage(manifest_path, "run `synth` first"));
    }
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(&manifest_path)?))
        .map_err(|e| Error::format(None, format!("malformed manifest: {e}")))?;

    if manifest.class_names.len() != manifest.num_classes {
        return Err(Error::format(
            None,
            format!(
                "manifest declares {} classes but names {}",
                manifest.num_classes,
                manifest.class_names.len()
            ),
        ));
    }
    if let Some(&bad) = manifest.labels.iter().find(|&&l| l >= manifest.num_classes) {
        return Err(Error::format(
            None,
            format!("manifest declares {} classes but label {bad} appears", manifest.num_classes),
        ));
    }
    if manifest.labels.len() != manifest.num_trials
        || manifest.block_ids.len() != manifest.num_trials
    {
        return Err(Error::format(
            None,
            format!(
                "manifest declares {} trials but carries {} labels and {} block ids",
                manifest.num_trials,
                manifest.labels.len(),
                manifest.block_ids.len()
            ),
        ));
    }

    let data_path = dir.join(TRIALS_FILE);
    if !data_path.exists() {
        return Err(Error::stage(data_path, "run `synth` first"));
    }
    let expected_floats = manifest.num_trials * manifest.channels * manifest.samples;
    let expected_bytes = expected_floats as u64 * 4;
    let actual_bytes = std::fs::metadata(&data_path)?.len();
    if actual_bytes != expected_bytes {
        return Err(Error::format(
            Some(actual_bytes.min(expected_bytes)),
            format!(
                "{} is {actual_bytes} bytes, expected {expected_bytes} \
                 ({} trials x {} channels x {} samples x 4)",
                data_path.display(),
                manifest.num_trials,
                manifest.channels,
                manifest.samples
            ),
        ));
    }

    let mut reader = BufReader::new(File::open(&data_path)?);
    let mut flat = vec![0.0f32; expected_floats];
    let mut buf = [0u8; 4];
    for v in flat.iter_mut() {
        reader.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    let data =
        Array3::from_shape_vec((manifest.num_trials, manifest.channels, manifest.samples), flat)
            .expect("length checked above");

    TrialSet::new(
        data,
        manifest.labels,
        manifest.block_ids,
        manifest.class_names,
        manifest.sample_rate_hz,
        manifest.block_size,
    )
    .map_err(|e| Error::format(None, format!("manifest inconsistent: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn small_set() -> TrialSet {
        generate_synthetic(&SynthConfig {
            seed: Some(21),
            num_classes: 3,
            channels: 2,
            samples: 16,
            blocks_per_class: 4,
            block_size: 4,
            snr: 0.5,
            sample_rate_hz: 64.0,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ts = small_set();
        write_trialset(&ts, dir.path()).unwrap();
        let back = read_trialset(dir.path()).unwrap();
        assert_eq!(ts.data().as_slice().unwrap(), back.data().as_slice().unwrap());
        assert_eq!(ts.labels(), back.labels());
        assert_eq!(ts.block_ids(), back.block_ids());
        assert_eq!(ts.class_names(), back.class_names());
        assert_eq!(ts.sample_rate_hz(), back.sample_rate_hz());
        assert_eq!(ts.block_size(), back.block_size());
    }

    #[test]
    fn truncated_data_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ts = small_set();
        write_trialset(&ts, dir.path()).unwrap();
        let path = dir.path().join(TRIALS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match read_trialset(dir.path()) {
            Err(Error::Format { offset: Some(off), .. }) => {
                assert_eq!(off, (bytes.len() - 10) as u64);
            }
            other => panic!("expected Format error with offset, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_declared_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_trialset(&small_set(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        // Shrink the declared class count below the largest label.
        let text = text.replace("\"num_classes\": 3", "\"num_classes\": 2");
        let text = text.replace(
            "\"class_names\": [\n    \"rest\",\n    \"cmd01\",\n    \"cmd02\"\n  ]",
            "\"class_names\": [\n    \"rest\",\n    \"cmd01\"\n  ]",
        );
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_trialset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_artifacts_are_stage_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_trialset(dir.path()), Err(Error::Stage { .. })));
    }
}
