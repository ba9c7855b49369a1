//! Labeled feature rows and the feature-table CSV
//! (`sample_id,label,<feature names...>`).

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::features::{extract_features_with, FeatureError, FeatureOptions, FeatureVector};
use crate::trace::{Labels, Trace};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub sample_id: String,
    pub features: FeatureVector,
    /// `true` for a hallucinated token.
    pub label: bool,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("feature table: {0}")]
    Malformed(String),
    #[error("sample {sample}: {source}")]
    Feature {
        sample: String,
        #[source]
        source: FeatureError,
    },
}

/// Joins trace samples with labels by sample id.
///
/// Returns the labeled examples and the ids of samples without a label.
pub fn build_examples(
    trace: &Trace,
    labels: &Labels,
    opts: FeatureOptions,
) -> Result<(Vec<LabeledExample>, Vec<String>), DatasetError> {
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for sample in &trace.samples {
        let Some(label) = labels.get(&sample.sample_id) else {
            skipped.push(sample.sample_id.clone());
            continue;
        };
        let features = extract_features_with(sample, Some(&trace.head), opts).map_err(|source| {
            DatasetError::Feature {
                sample: sample.sample_id.clone(),
                source,
            }
        })?;
        examples.push(LabeledExample {
            sample_id: sample.sample_id.clone(),
            features,
            label,
        });
    }
    Ok((examples, skipped))
}

/// Row-major feature matrix and label vector.
pub fn design_matrix(examples: &[LabeledExample]) -> (Vec<Vec<f64>>, Vec<bool>) {
    examples
        .iter()
        .map(|e| (e.features.to_vec(), e.label))
        .unzip()
}

pub fn write_feature_csv<W: Write>(examples: &[LabeledExample], out: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = examples.first() else {
        w.flush().map_err(|e| DatasetError::Malformed(e.to_string()))?;
        return Ok(());
    };
    let mut header = vec!["sample_id".to_owned(), "label".to_owned()];
    header.extend(first.features.feature_names.iter().cloned());
    w.write_record(&header)?;
    for e in examples {
        if e.features.feature_names != first.features.feature_names {
            return Err(DatasetError::Malformed(format!(
                "sample {} has a different feature layout",
                e.sample_id
            )));
        }
        let mut row = vec![e.sample_id.clone(), if e.label { "1" } else { "0" }.to_owned()];
        // `{:?}` prints the shortest representation that round-trips.
        row.extend(e.features.to_vec().iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| DatasetError::Malformed(e.to_string()))?;
    Ok(())
}

pub fn parse_feature_csv<R: Read>(input: R) -> Result<Vec<LabeledExample>, DatasetError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 2 || &header[0] != "sample_id" || &header[1] != "label" {
        return Err(DatasetError::Malformed(
            "header must start with sample_id,label".into(),
        ));
    }
    let names: Vec<String> = header.iter().skip(2).map(str::to_owned).collect();
    // Validates the layout once against an all-zero row.
    FeatureVector::from_flat(&names, &vec![0.0; names.len()]).map_err(DatasetError::Malformed)?;
    let mut out = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let label = match &record[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(DatasetError::Malformed(format!(
                    "row {row}: label must be 0 or 1, got {other:?}"
                )))
            }
        };
        let values = record
            .iter()
            .skip(2)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| DatasetError::Malformed(format!("row {row}: bad value {v:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let features = FeatureVector::from_flat(&names, &values)
            .map_err(|e| DatasetError::Malformed(format!("row {row}: {e}")))?;
        out.push(LabeledExample {
            sample_id: record[0].to_owned(),
            features,
            label,
        });
    }
    Ok(out)
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>, DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_feature_csv(std::io::BufReader::new(file))
}

pub fn save_feature_csv(examples: &[LabeledExample], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_feature_csv(examples, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, label: bool, x: f64) -> LabeledExample {
        LabeledExample {
            sample_id: id.into(),
            features: FeatureVector::new(x, vec![x, 0.1], vec![0.2, 0.3], vec![0.4, 1.0 / 3.0], vec![1, 2], vec![]),
            label,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![example("a", true, 0.7), example("b", false, 1e-17)];
        let mut buf = Vec::new();
        write_feature_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,label,s_ot,entropy_1,entropy_2,img_attn_1"));
        let back = parse_feature_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(parse_feature_csv("id,label,s_ot\n".as_bytes()).is_err());
        assert!(parse_feature_csv("sample_id,label,s_ot,entropy_1,img_attn_1,txt_attn_1\na,2,0,0,0,0\n".as_bytes()).is_err());
        assert!(parse_feature_csv("sample_id,label,s_ot,entropy_1,img_attn_1,txt_attn_1\na,1,0,nan,0,0\n".as_bytes()).is_err());
        assert!(parse_feature_csv("sample_id,label,s_ot,entropy_1,img_attn_2,txt_attn_1\n".as_bytes()).is_err());
    }
}
