//! Flat key → array parameter files.
//!
//! ```text
//! # comoe-params v1
//! tensor layer0.expert1.lora_b 32 16
//! 0.0125 -0.5 ...          (one line per row; vectors and scalars use one line)
//! ```
//!
//! The header line names the key followed by its dimensions. Values use the
//! shortest decimal form that round-trips, so restore is exact.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::autograd::{Tensor, TensorError};

pub const PARAMS_HEADER: &str = "# comoe-params v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{key}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        key: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A named array read from or written to a parameter file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub key: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_tensor(key: impl Into<String>, t: &Tensor) -> Self {
        Self {
            key: key.into(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

pub fn write_params<W: Write>(mut out: W, arrays: &[NamedArray]) -> Result<(), CheckpointError> {
    writeln!(out, "{PARAMS_HEADER}")?;
    for a in arrays {
        if a.key.is_empty() || a.key.contains(char::is_whitespace) {
            return Err(CheckpointError::Parse {
                line: 0,
                message: format!("invalid key {:?}", a.key),
            });
        }
        write!(out, "tensor {}", a.key)?;
        for d in &a.shape {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
        let width = if a.shape.len() == 2 { a.shape[1].max(1) } else { a.data.len().max(1) };
        for row in a.data.chunks(width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_params<R: BufRead>(input: R) -> Result<Vec<NamedArray>, CheckpointError> {
    let mut lines = input.lines().enumerate();
    match lines.next() {
        Some((_, Ok(l))) if l.trim() == PARAMS_HEADER => {}
        Some((_, Err(e))) => return Err(e.into()),
        _ => {
            return Err(CheckpointError::Parse {
                line: 1,
                message: format!("expected `{PARAMS_HEADER}`"),
            })
        }
    }

    let mut arrays = Vec::new();
    let mut current: Option<(NamedArray, usize)> = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("tensor ") {
            if let Some((arr, expected)) = current.take() {
                finish(arr, expected, line_no, &mut arrays)?;
            }
            let mut parts = rest.split_whitespace();
            let key = parts.next().ok_or(CheckpointError::Parse {
                line: line_no,
                message: "missing key".into(),
            })?;
            let shape = parts
                .map(|p| p.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CheckpointError::Parse {
                    line: line_no,
                    message: format!("bad dimension: {e}"),
                })?;
            let expected = shape.iter().product();
            current = Some((
                NamedArray {
                    key: key.to_string(),
                    shape,
                    data: Vec::with_capacity(expected),
                },
                expected,
            ));
            continue;
        }
        let Some((arr, _)) = current.as_mut() else {
            return Err(CheckpointError::Parse {
                line: line_no,
                message: "values before any tensor header".into(),
            });
        };
        for tok in trimmed.split_whitespace() {
            let v = tok.parse::<f64>().map_err(|e| CheckpointError::Parse {
                line: line_no,
                message: format!("bad value {tok:?}: {e}"),
            })?;
            arr.data.push(v);
        }
    }
    if let Some((arr, expected)) = current.take() {
        finish(arr, expected, usize::MAX, &mut arrays)?;
    }
    Ok(arrays)
}

fn finish(
    arr: NamedArray,
    expected: usize,
    line: usize,
    out: &mut Vec<NamedArray>,
) -> Result<(), CheckpointError> {
    if arr.data.len() != expected {
        return Err(CheckpointError::Parse {
            line,
            message: format!(
                "`{}` declares {expected} values, found {}",
                arr.key,
                arr.data.len()
            ),
        });
    }
    out.push(arr);
    Ok(())
}

/// Looks up `key` and checks it has the expected shape.
pub fn take_array(
    arrays: &[NamedArray],
    key: &str,
    shape: &[usize],
) -> Result<Vec<f64>, CheckpointError> {
    let arr = arrays
        .iter()
        .find(|a| a.key == key)
        .ok_or_else(|| CheckpointError::Missing(key.to_string()))?;
    if arr.shape != shape {
        return Err(CheckpointError::ShapeMismatch {
            key: key.to_string(),
            expected: shape.to_vec(),
            got: arr.shape.clone(),
        });
    }
    Ok(arr.data.clone())
}
