//! Ground-truth label file: one `sample_id<TAB>0|1` record per line.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate sample id {id:?}")]
    Duplicate { line: usize, id: String },
}

/// Labels keyed by sample id; `true` marks a hallucinated token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Labels {
    order: Vec<String>,
    by_id: HashMap<String, bool>,
}

impl Labels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, hallucinated: bool) -> bool {
        let id = id.into();
        if self.by_id.contains_key(&id) {
            return false;
        }
        self.order.push(id.clone());
        self.by_id.insert(id, hallucinated);
        true
    }

    pub fn get(&self, id: &str) -> Option<bool> {
        self.by_id.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.order.iter().map(|id| (id.as_str(), self.by_id[id]))
    }
}

pub fn parse_labels(text: &str) -> Result<Labels, LabelError> {
    let mut labels = Labels::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let record = raw.strip_suffix('\r').unwrap_or(raw);
        if record.is_empty() {
            continue;
        }
        let (id, value) = record.split_once('\t').ok_or_else(|| LabelError::Parse {
            line,
            message: "expected sample_id<TAB>label".into(),
        })?;
        if id.is_empty() {
            return Err(LabelError::Parse {
                line,
                message: "empty sample id".into(),
            });
        }
        let hallucinated = match value {
            "0" => false,
            "1" => true,
            other => {
                return Err(LabelError::Parse {
                    line,
                    message: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        if !labels.insert(id, hallucinated) {
            return Err(LabelError::Duplicate {
                line,
                id: id.to_owned(),
            });
        }
    }
    Ok(labels)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Labels, LabelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_labels(&text)
}

pub fn write_labels(labels: &Labels, path: impl AsRef<Path>) -> Result<(), LabelError> {
    let path = path.as_ref();
    let mut text = String::new();
    for (id, y) in labels.iter() {
        text.push_str(id);
        text.push('\t');
        text.push(if y { '1' } else { '0' });
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records() {
        let l = parse_labels("a\t1\nb\t0\r\n\n").unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l.get("a"), Some(true));
        assert_eq!(l.get("b"), Some(false));
        assert_eq!(l.get("c"), None);
    }

    #[test]
    fn rejects_bad_records() {
        assert!(matches!(parse_labels("a 1"), Err(LabelError::Parse { line: 1, .. })));
        assert!(matches!(parse_labels("a\t2"), Err(LabelError::Parse { .. })));
        assert!(matches!(
            parse_labels("a\t1\na\t0"),
            Err(LabelError::Duplicate { line: 2, .. })
        ));
    }
}
