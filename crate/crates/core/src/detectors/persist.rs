//! Binary detector files.
//!
//! Layout (little-endian): `"ODET"`, version `u8`, kind `u8`, feature count
//! `u32`, name count `u32` followed by that many strings, means and standard
//! deviations as `f64`, threshold `f64`, then the model:
//!
//! * LR: weights `f64 x n`, bias `f64`.
//! * GB: initial score, learning rate, tree count `u32`; per tree a node
//!   count `u32` and nodes tagged `0` (leaf: value `f64`) or `1` (split:
//!   feature `u32`, threshold `f64`, left `u32`, right `u32`).
//! * MLP: hidden width `u32`, `w1`, `b1`, `w2`, `b2`.

use std::path::Path;

use super::{Detector, DetectorError, DetectorKind, GbModel, LogisticModel, MlpModel, Model, Node, Standardizer, Tree};
use crate::codec::{len_u32, ByteReader, ByteSink, CodecError};

pub const DETECTOR_MAGIC: [u8; 4] = *b"ODET";
pub const DETECTOR_VERSION: u8 = 1;

impl From<CodecError> for DetectorError {
    fn from(e: CodecError) -> Self {
        DetectorError::Corrupt(e.to_string())
    }
}

fn corrupt(msg: impl Into<String>) -> DetectorError {
    DetectorError::Corrupt(msg.into())
}

pub fn encode_detector(d: &Detector) -> Result<Vec<u8>, DetectorError> {
    let p = d.num_features();
    let mut out = Vec::new();
    out.extend_from_slice(&DETECTOR_MAGIC);
    out.put_u8(DETECTOR_VERSION);
    out.put_u8(d.kind().code());
    out.put_u32(len_u32(p, "feature count").map_err(corrupt)?);
    out.put_u32(len_u32(d.feature_names.len(), "name count").map_err(corrupt)?);
    for name in &d.feature_names {
        out.put_str(name);
    }
    out.put_f64s(&d.standardizer.means);
    out.put_f64s(&d.standardizer.stds);
    out.put_f64(d.threshold);
    match &d.model {
        Model::Logistic(m) => {
            out.put_f64s(&m.weights);
            out.put_f64(m.bias);
        }
        Model::Boosted(m) => {
            out.put_f64(m.init_score);
            out.put_f64(m.learning_rate);
            out.put_u32(len_u32(m.trees.len(), "tree count").map_err(corrupt)?);
            for tree in &m.trees {
                out.put_u32(len_u32(tree.nodes.len(), "node count").map_err(corrupt)?);
                for node in &tree.nodes {
                    match *node {
                        Node::Leaf { value } => {
                            out.put_u8(0);
                            out.put_f64(value);
                        }
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => {
                            out.put_u8(1);
                            out.put_u32(feature as u32);
                            out.put_f64(threshold);
                            out.put_u32(left as u32);
                            out.put_u32(right as u32);
                        }
                    }
                }
            }
        }
        Model::Mlp(m) => {
            out.put_u32(len_u32(m.hidden, "hidden width").map_err(corrupt)?);
            out.put_f64s(&m.w1);
            out.put_f64s(&m.b1);
            out.put_f64s(&m.w2);
            out.put_f64(m.b2);
        }
    }
    Ok(out)
}

fn finite(values: &[f64], what: &str) -> Result<(), DetectorError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(corrupt(format!("non-finite {what}")))
    }
}

fn decode_tree(r: &mut ByteReader<'_>, p: usize) -> Result<Tree, DetectorError> {
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(corrupt("empty tree"));
    }
    // Smallest node is a 9-byte leaf.
    r.ensure(n, 9)?;
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let node = match r.u8()? {
            0 => Node::Leaf { value: r.f64()? },
            1 => {
                let feature = r.u32()? as usize;
                let threshold = r.f64()?;
                let left = r.u32()? as usize;
                let right = r.u32()? as usize;
                if feature >= p {
                    return Err(corrupt(format!("split on feature {feature} of {p}")));
                }
                if left <= i || right <= i || left >= n || right >= n || left == right {
                    return Err(corrupt(format!("node {i} has invalid children {left}, {right}")));
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                }
            }
            tag => return Err(corrupt(format!("unknown node tag {tag}"))),
        };
        match node {
            Node::Leaf { value } => finite(&[value], "leaf value")?,
            Node::Split { threshold, .. } if threshold.is_nan() => {
                return Err(corrupt("NaN split threshold"))
            }
            _ => {}
        }
        nodes.push(node);
    }
    Ok(Tree { nodes })
}

/// Decodes a detector; `expected` rejects files holding another kind.
pub fn decode_detector(bytes: &[u8], expected: Option<DetectorKind>) -> Result<Detector, DetectorError> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != DETECTOR_MAGIC {
        return Err(DetectorError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != DETECTOR_VERSION {
        return Err(DetectorError::UnsupportedVersion(version));
    }
    let code = r.u8()?;
    let kind = DetectorKind::from_code(code).ok_or_else(|| corrupt(format!("unknown model kind {code}")))?;
    if let Some(expected) = expected {
        if expected != kind {
            return Err(DetectorError::KindMismatch { expected, found: kind });
        }
    }
    let p = r.u32()? as usize;
    if p == 0 {
        return Err(corrupt("zero features"));
    }
    let name_count = r.u32()? as usize;
    if name_count != 0 && name_count != p {
        return Err(corrupt(format!("{name_count} names for {p} features")));
    }
    r.ensure(name_count, 4)?;
    let feature_names = (0..name_count).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
    let means = r.f64_vec(p)?;
    let stds = r.f64_vec(p)?;
    finite(&means, "mean")?;
    if stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(corrupt("standard deviations must be positive"));
    }
    let threshold = r.f64()?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(corrupt(format!("threshold {threshold} outside (0,1)")));
    }
    let model = match kind {
        DetectorKind::Lr => {
            let weights = r.f64_vec(p)?;
            let bias = r.f64()?;
            finite(&weights, "weight")?;
            finite(&[bias], "bias")?;
            Model::Logistic(LogisticModel { weights, bias })
        }
        DetectorKind::Gb => {
            let init_score = r.f64()?;
            let learning_rate = r.f64()?;
            finite(&[init_score, learning_rate], "boosting header")?;
            let n_trees = r.u32()? as usize;
            // Smallest tree: count plus one leaf.
            r.ensure(n_trees, 13)?;
            let trees = (0..n_trees)
                .map(|_| decode_tree(&mut r, p))
                .collect::<Result<Vec<_>, _>>()?;
            Model::Boosted(GbModel {
                init_score,
                learning_rate,
                trees,
            })
        }
        DetectorKind::Mlp => {
            let hidden = r.u32()? as usize;
            if hidden == 0 {
                return Err(corrupt("zero hidden units"));
            }
            let w1_len = hidden.checked_mul(p).ok_or_else(|| corrupt("hidden layer too large"))?;
            let w1 = r.f64_vec(w1_len)?;
            let b1 = r.f64_vec(hidden)?;
            let w2 = r.f64_vec(hidden)?;
            let b2 = r.f64()?;
            for (v, what) in [(&w1, "w1"), (&b1, "b1"), (&w2, "w2")] {
                finite(v, what)?;
            }
            finite(&[b2], "b2")?;
            Model::Mlp(MlpModel { hidden, w1, b1, w2, b2 })
        }
    };
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Detector {
        feature_names,
        standardizer: Standardizer { means, stds },
        threshold,
        model,
    })
}

pub fn save_detector(d: &Detector, path: impl AsRef<Path>) -> Result<(), DetectorError> {
    let path = path.as_ref();
    let bytes = encode_detector(d)?;
    std::fs::write(path, bytes).map_err(|source| DetectorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_detector(path: impl AsRef<Path>, expected: Option<DetectorKind>) -> Result<Detector, DetectorError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DetectorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_detector(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::super::{train_matrix, TrainConfig};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data() -> (Vec<Vec<f64>>, Vec<bool>) {
        let x: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64 * 0.7).sin() * 4.0, (i as f64 * 0.21).cos(), i as f64 / 10.0])
            .collect();
        let y = (0..50).map(|i| (i * 11) % 7 < 3).collect();
        (x, y)
    }

    fn trained(kind: DetectorKind) -> Detector {
        let (x, y) = data();
        let cfg = TrainConfig {
            gb_estimators: 10,
            gb_max_depth: 3,
            mlp_hidden: 6,
            mlp_epochs: 30,
            ..TrainConfig::with_kind(kind)
        };
        let names = vec!["s_ot".into(), "a".into(), "b".into()];
        train_matrix(x, y, names, &cfg).unwrap()
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [DetectorKind::Lr, DetectorKind::Gb, DetectorKind::Mlp] {
            let d = trained(kind);
            let back = decode_detector(&encode_detector(&d).unwrap(), Some(kind)).unwrap();
            assert_eq!(back, d);
            for _ in 0..100 {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
                let (a, b) = (d.predict_proba(&v).unwrap(), back.predict_proba(&v).unwrap());
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encode_detector(&trained(DetectorKind::Gb)).unwrap();
        for cut in [5, 6, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_detector(&bytes[..cut], None),
                Err(DetectorError::Corrupt(_))
            ));
        }
    }

    #[test]
    fn kind_mismatch() {
        let bytes = encode_detector(&trained(DetectorKind::Gb)).unwrap();
        assert!(matches!(
            decode_detector(&bytes, Some(DetectorKind::Lr)),
            Err(DetectorError::KindMismatch {
                expected: DetectorKind::Lr,
                found: DetectorKind::Gb
            })
        ));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_detector(&trained(DetectorKind::Lr)).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_detector(&bytes, None), Err(DetectorError::UnsupportedVersion(9))));
        bytes[0] = b'X';
        assert!(matches!(decode_detector(&bytes, None), Err(DetectorError::BadMagic(_))));
    }

    #[test]
    fn rejects_cyclic_trees() {
        let mut d = trained(DetectorKind::Gb);
        let Model::Boosted(m) = &mut d.model else { unreachable!() };
        m.trees[0].nodes = vec![Node::Split {
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
        }];
        let bytes = encode_detector(&d).unwrap();
        assert!(matches!(decode_detector(&bytes, None), Err(DetectorError::Corrupt(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.odet");
        let d = trained(DetectorKind::Mlp);
        save_detector(&d, &path).unwrap();
        assert_eq!(load_detector(&path, None).unwrap(), d);
        assert!(matches!(
            load_detector(dir.path().join("missing"), None),
            Err(DetectorError::Io { .. })
        ));
    }
}
