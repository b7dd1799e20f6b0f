//! Ensemble aggregation: calibrated member probabilities are averaged
//! into one predictive distribution per trial, with entropy, mutual
//! information, and margin uncertainty attached.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, BackboneParams, TrialSource};
use crate::calibration::{apply_temperature, Temperature};
use crate::error::{Error, Result};
use crate::prob::{entropy, margin_uncertainty, mean_prob, mutual_information, ProbVector};

/// A trained backbone plus its fitted temperature.
#[derive(Debug, Clone)]
pub struct MemberModel {
    pub params: BackboneParams,
    pub temperature: Temperature,
}

/// Per-trial ensemble output: the mean distribution, the predicted
/// class (lowest index on exact ties), and the three uncertainty scores.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub mean_prob: ProbVector,
    pub predicted_class: usize,
    pub entropy: f64,
    pub mutual_info: f64,
    pub margin_u: f64,
    pub member_probs: Vec<ProbVector>,
}

/// Averages member distributions and scores the result.
///
/// Summation is member-order independent, so permuting the inputs gives
/// bit-identical mean probabilities and uncertainty scores.
pub fn aggregate(member_probs: Vec<ProbVector>) -> Result<EnsemblePrediction> {
    if member_probs.is_empty() {
        return Err(Error::InsufficientData("no member predictions to aggregate".into()));
    }
    let mean = mean_prob(&member_probs)?;
    let mutual_info = mutual_information(&member_probs)?;
    Ok(EnsemblePrediction {
        predicted_class: mean.argmax(),
        entropy: entropy(&mean),
        margin_u: margin_uncertainty(&mean),
        mean_prob: mean,
        mutual_info,
        member_probs,
    })
}

/// Runs every member on the listed trials and aggregates per trial.
///
/// Trials are evaluated in parallel; results come back in input order.
/// `keep_member_probs: false` drops the per-member distributions from the
/// records to save memory on large runs.
pub fn predict_set<D: TrialSource + ?Sized>(
    members: &[MemberModel],
    data: &D,
    trial_indices: &[usize],
    keep_member_probs: bool,
) -> Result<Vec<EnsemblePrediction>> {
    if members.is_empty() {
        return Err(Error::InsufficientData("no ensemble members".into()));
    }
    trial_indices
        .par_iter()
        .map(|&i| {
            let trial = data.trial(i).mapv(|v| v as f64);
            let probs: Result<Vec<ProbVector>> = members
                .iter()
                .map(|m| {
                    let logits = forward(&m.params, &trial.view())?;
                    apply_temperature(&logits, m.temperature)
                })
                .collect();
            let mut pred = aggregate(probs?)?;
            if !keep_member_probs {
                pred.member_probs.clear();
            }
            Ok(pred)
        })
        .collect()
}

// ---------------------------------------------------------------------
// Member serialization: hyper-parameters and temperature as JSON, the
// parameter tensors as a little-endian float32 blob with an (S, C, W, K)
// u32 header.
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MemberHeader {
    member_index: usize,
    spatial_filters: usize,
    channels: usize,
    windows: usize,
    num_classes: usize,
    eps_log: f64,
    /// Absent until the calibration stage has run.
    temperature: Option<f64>,
    params_file: String,
}

fn member_stem(index: usize) -> String {
    format!("m{index:03}")
}

pub fn member_json_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}.json", member_stem(index)))
}

pub fn member_blob_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}.f32", member_stem(index)))
}

/// Writes `m{idx}.json` + `m{idx}.f32` into `dir` (created if needed).
pub fn write_member(
    dir: &Path,
    index: usize,
    params: &BackboneParams,
    temperature: Option<Temperature>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let header = MemberHeader {
        member_index: index,
        spatial_filters: params.spatial_filters(),
        channels: params.channels(),
        windows: params.windows,
        num_classes: params.num_classes(),
        eps_log: params.eps_log,
        temperature: temperature.map(|t| t.value()),
        params_file: format!("{}.f32", member_stem(index)),
    };
    let mut jf = BufWriter::new(File::create(member_json_path(dir, index))?);
    serde_json::to_writer_pretty(&mut jf, &header)?;
    jf.write_all(b"\n")?;
    jf.flush()?;

    let mut bf = BufWriter::new(File::create(member_blob_path(dir, index))?);
    for dim in [
        params.spatial_filters(),
        params.channels(),
        params.windows,
        params.num_classes(),
    ] {
        bf.write_all(&(dim as u32).to_le_bytes())?;
    }
    let values = params
        .spatial
        .iter()
        .chain(params.dense.iter())
        .chain(params.bias.iter());
    for &v in values {
        bf.write_all(&(v as f32).to_le_bytes())?;
    }
    bf.flush()?;
    Ok(())
}

/// Reads one member back. `temperature` stays `None` until `calibrate`
/// has stored one.
pub fn read_member(dir: &Path, index: usize) -> Result<(BackboneParams, Option<Temperature>)> {
    let json_path = member_json_path(dir, index);
    if !json_path.exists() {
        return Err(Error::stage(json_path, "run `train` first"));
    }
    let header: MemberHeader = serde_json::from_reader(BufReader::new(File::open(&json_path)?))
        .map_err(|e| Error::format(None, format!("malformed member header: {e}")))?;

    let blob_path = dir.join(&header.params_file);
    if !blob_path.exists() {
        return Err(Error::stage(blob_path, "run `train` first"));
    }
    let mut reader = BufReader::new(File::open(&blob_path)?);
    let mut u32buf = [0u8; 4];
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        reader.read_exact(&mut u32buf)?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let [s, c, w, k] = dims;
    if s != header.spatial_filters
        || c != header.channels
        || w != header.windows
        || k != header.num_classes
    {
        return Err(Error::format(
            Some(16),
            format!(
                "blob header (S={s}, C={c}, W={w}, K={k}) disagrees with {}",
                json_path.display()
            ),
        ));
    }
    let expected = s * c + k * s * w + k;
    let mut values = Vec::with_capacity(expected);
    let mut f32buf = [0u8; 4];
    for i in 0..expected {
        reader.read_exact(&mut f32buf).map_err(|_| {
            Error::format(
                Some(16 + i as u64 * 4),
                format!("{} truncated: expected {expected} float32 values", blob_path.display()),
            )
        })?;
        values.push(f32::from_le_bytes(f32buf) as f64);
    }
    let spatial = Array2::from_shape_vec((s, c), values[..s * c].to_vec()).expect("sized above");
    let dense = Array2::from_shape_vec((k, s * w), values[s * c..s * c + k * s * w].to_vec())
        .expect("sized above");
    let bias = Array1::from_vec(values[s * c + k * s * w..].to_vec());
    let params = BackboneParams::new(spatial, dense, bias, w, header.eps_log)?;
    let temperature = header.temperature.map(Temperature::new).transpose()?;
    Ok((params, temperature))
}

/// One line per trial for `predictions.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub trial_index: usize,
    pub label: usize,
    pub predicted: usize,
    pub mean_prob: Vec<f64>,
    pub entropy: f64,
    pub mi: f64,
    pub margin_u: f64,
}

pub fn write_predictions_jsonl(
    path: &Path,
    indices: &[usize],
    labels: &[usize],
    preds: &[EnsemblePrediction],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ((&trial_index, &label), pred) in indices.iter().zip(labels).zip(preds) {
        let record = PredictionRecord {
            trial_index,
            label,
            predicted: pred.predicted_class,
            mean_prob: pred.mean_prob.values().to_vec(),
            entropy: pred.entropy,
            mi: pred.mutual_info,
            margin_u: pred.margin_u,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
