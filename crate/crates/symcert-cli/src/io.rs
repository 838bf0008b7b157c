//! CSV and JSON file formats, atomic output and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use symcert::kernel::GramBundle;
use symcert::linalg::{Mat, Vector};

/// Version tag written into every JSON document this tool emits.
pub const SCHEMA_VERSION: u32 = 1;

/// Reads a headerless numeric CSV matrix. Lines starting with `#` are skipped.
pub fn read_matrix(path: &Path) -> Result<Mat> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_matrix(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_matrix(text: &str) -> Result<Mat> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        rows.push(rec.iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>()?);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        bail!("ragged matrix");
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Mat::from_row_slice(rows.len(), cols, &flat))
}

/// Reads a vector stored as a single row or a single column.
pub fn read_vector(path: &Path) -> Result<Vector> {
    let m = read_matrix(path)?;
    if m.nrows() == 1 || m.ncols() == 1 {
        Ok(Vector::from_iterator(m.len(), m.iter().copied()))
    } else {
        bail!("{} holds a {}x{} matrix, expected a vector", path.display(), m.nrows(), m.ncols())
    }
}

pub fn matrix_csv(m: &Mat) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct GramHeader<'a> {
    schema: u32,
    colors: &'a [usize],
    labels: Vec<f64>,
    test_template: usize,
    kx: Vec<f64>,
}

/// Gram matrix as CSV rows below a one-line JSON header comment.
pub fn gram_csv(b: &GramBundle) -> Result<String> {
    let header = GramHeader {
        schema: SCHEMA_VERSION,
        colors: &b.colors,
        labels: b.y.iter().copied().collect(),
        test_template: b.test_template,
        kx: b.kx.iter().copied().collect(),
    };
    Ok(format!("# {}\n{}", serde_json::to_string(&header)?, matrix_csv(&b.khat)))
}

/// Serializes flat rows with a header line; an empty slice yields `header`
/// alone.
pub fn rows_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Pretty JSON with a `schema` field and dense arrays in plain form.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    plain_arrays(&mut v);
    if let Value::Object(map) = &mut v {
        map.insert("schema".into(), SCHEMA_VERSION.into());
    }
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// `nalgebra` writes a dynamic matrix as `[column-major data, rows, cols]`
/// and a vector as `[data, rows, null]`. Rewrites both in place as nested
/// row arrays and flat arrays.
fn plain_arrays(v: &mut Value) {
    match v {
        Value::Array(items) => {
            if let Some(plain) = dense_triple(items) {
                *v = plain;
            } else {
                items.iter_mut().for_each(plain_arrays);
            }
        }
        Value::Object(map) => map.values_mut().for_each(plain_arrays),
        _ => {}
    }
}

fn dense_triple(items: &[Value]) -> Option<Value> {
    let [Value::Array(data), rows, cols] = items else {
        return None;
    };
    let rows = usize::try_from(rows.as_u64()?).ok()?;
    if !data.iter().all(Value::is_number) {
        return None;
    }
    match cols {
        Value::Null if data.len() == rows => Some(Value::Array(data.clone())),
        Value::Number(c) => {
            let cols = usize::try_from(c.as_u64()?).ok()?;
            if data.len() != rows * cols {
                return None;
            }
            let nested = (0..rows)
                .map(|i| Value::Array((0..cols).map(|j| data[i + j * rows].clone()).collect()))
                .collect();
            Some(Value::Array(nested))
        }
        _ => None,
    }
}

/// Inputs, seed and outputs of one invocation.
#[derive(Serialize)]
pub struct RunManifest {
    pub schema: u32,
    pub command: Vec<String>,
    pub inputs: Vec<(String, String)>,
    pub seed: u64,
    pub tool_version: &'static str,
    pub wall_clock_secs: f64,
    pub outputs: Vec<String>,
}

/// Writes `text` to `out` through a temporary file, or to stdout when
/// `out` is `None`. With a file, a manifest is written beside it.
pub fn emit(text: &str, out: Option<&Path>, seed: u64, inputs: &[PathBuf], started: Instant) -> Result<()> {
    let Some(out) = out else {
        std::io::stdout().write_all(text.as_bytes())?;
        return Ok(());
    };
    write_atomic(out, text.as_bytes())?;
    let manifest = RunManifest {
        schema: SCHEMA_VERSION,
        command: std::env::args().collect(),
        inputs: inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), digest(p)?)))
            .collect::<Result<_>>()?,
        seed,
        tool_version: env!("CARGO_PKG_VERSION"),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        outputs: vec![out.display().to_string()],
    };
    let mut path = out.as_os_str().to_owned();
    path.push(".manifest.json");
    write_atomic(Path::new(&path), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip() {
        let m = Mat::from_row_slice(2, 3, &[1.0, -0.5, 1e-17, 0.1, 2.0, 3.25]);
        assert_eq!(parse_matrix(&matrix_csv(&m)).unwrap(), m);
    }

    #[test]
    fn comments_and_spaces() {
        let m = parse_matrix("# header\n1, 2\n 3,4\n").unwrap();
        assert_eq!(m, Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(parse_matrix("1,2\n3\n").is_err());
    }

    #[test]
    fn dense_arrays_become_plain() {
        #[derive(Serialize)]
        struct Doc {
            m: Mat,
            v: Vector,
        }
        let doc = Doc {
            m: Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            v: Vector::from_vec(vec![7.0, 8.0]),
        };
        let v: Value = serde_json::from_str(&to_json(&doc).unwrap()).unwrap();
        assert_eq!(v["m"], serde_json::json!([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
        assert_eq!(v["v"], serde_json::json!([7.0, 8.0]));
        assert_eq!(v["schema"], 1);
    }

    #[test]
    fn empty_rows_give_header_only() {
        #[derive(Serialize)]
        struct Row {
            a: f64,
        }
        assert_eq!(rows_csv::<Row>(&[], &["a"]).unwrap(), "a\n");
        assert_eq!(rows_csv(&[Row { a: 1.5 }], &["a"]).unwrap(), "a\n1.5\n");
    }
}
