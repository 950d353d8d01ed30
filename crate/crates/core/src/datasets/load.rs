use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DenseDataset, SparseMask};
use crate::error::{Error, Result};

pub const READINGS_FILE: &str = "readings.csv";
pub const SENSORS_FILE: &str = "sensors.csv";
pub const META_FILE: &str = "meta.json";

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub k: usize,
    pub start_time: String,
    pub interval_minutes: u32,
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    DateTime::parse_from_rfc3339(raw)
        .map(|dt| dt.naive_local())
        .ok()
        .or_else(|| NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S").ok())
        .or_else(|| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S").ok())
        .or_else(|| NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M").ok())
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing file"),
        ))
    }
}

/// Reads a headerless numeric CSV. Rows and columns in errors are 1-based.
fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let mut row = Vec::with_capacity(record.len());
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                row: r + 1,
                column: c + 1,
                message: format!("non-numeric cell `{cell}`"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            file: path.to_path_buf(),
            row,
            column: 0,
            message: format!("{other:?}"),
        },
    }
}

fn to_matrix(rows: Vec<Vec<f64>>, cols: usize, path: &Path) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * cols);
    for (r, row) in rows.into_iter().enumerate() {
        if row.len() != cols {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                row: r + 1,
                column: row.len().min(cols) + 1,
                message: format!("expected {cols} columns, found {}", row.len()),
            });
        }
        flat.extend(row);
    }
    Ok(Array2::from_shape_vec((n, cols), flat).expect("checked row lengths"))
}

/// Loads a dataset directory holding `readings.csv`, `sensors.csv` and
/// `meta.json`, cross-checking the declared shape.
pub fn load_dense_dataset(dir: impl AsRef<Path>) -> Result<DenseDataset> {
    let dir = dir.as_ref();
    let readings_path = dir.join(READINGS_FILE);
    let sensors_path = dir.join(SENSORS_FILE);
    let meta_path = dir.join(META_FILE);
    for p in [&readings_path, &sensors_path, &meta_path] {
        require(p)?;
    }

    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        file: meta_path.clone(),
        row: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let start_time = parse_timestamp(&meta.start_time).ok_or_else(|| Error::Parse {
        file: meta_path.clone(),
        row: 0,
        column: 0,
        message: format!("start_time `{}` is not ISO-8601", meta.start_time),
    })?;

    let mut sensor_ids = Vec::new();
    let mut coords = Vec::new();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&sensors_path)
        .map_err(|e| csv_error(&sensors_path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(&sensors_path, e))?.clone();
    let expected = ["sensor_id", "latitude", "longitude"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            file: sensors_path.clone(),
            row: 1,
            column: 1,
            message: format!("header must be `sensor_id,latitude,longitude`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(&sensors_path, e))?;
        if record.len() != 3 {
            return Err(Error::Parse {
                file: sensors_path.clone(),
                row: r + 2,
                column: record.len() + 1,
                message: "expected 3 columns".into(),
            });
        }
        sensor_ids.push(record[0].to_owned());
        for c in 1..3 {
            let v: f64 = record[c].parse().map_err(|_| Error::Parse {
                file: sensors_path.clone(),
                row: r + 2,
                column: c + 1,
                message: format!("non-numeric cell `{}`", &record[c]),
            })?;
            coords.push(v);
        }
    }
    if sensor_ids.len() != meta.k {
        return Err(Error::Dataset(format!(
            "{} lists {} sensors, meta declares k = {}",
            sensors_path.display(),
            sensor_ids.len(),
            meta.k
        )));
    }

    let rows = read_numeric_csv(&readings_path)?;
    if rows.len() != meta.n {
        return Err(Error::Dataset(format!(
            "{} has {} rows, meta declares n = {}",
            readings_path.display(),
            rows.len(),
            meta.n
        )));
    }
    let readings = to_matrix(rows, meta.k, &readings_path)?;
    let coords = Array2::from_shape_vec((meta.k, 2), coords).expect("two coordinates per sensor");
    DenseDataset::new(readings, sensor_ids, coords, start_time, meta.interval_minutes)
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn format_matrix<T: std::fmt::Display>(rows: impl Iterator<Item = Vec<T>>) -> String {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(ToString::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Writes a dataset in the directory layout read by [`load_dense_dataset`].
pub fn save_dense_dataset(dataset: &DenseDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let readings = format_matrix(dataset.readings().rows().into_iter().map(|r| r.to_vec()));
    write_atomic(&dir.join(READINGS_FILE), readings.as_bytes())?;

    let mut sensors = String::from("sensor_id,latitude,longitude\n");
    for (id, c) in dataset.sensor_ids().iter().zip(dataset.sensor_coords().rows()) {
        sensors.push_str(&format!("{id},{},{}\n", c[0], c[1]));
    }
    write_atomic(&dir.join(SENSORS_FILE), sensors.as_bytes())?;

    let meta = DatasetMeta {
        n: dataset.n(),
        k: dataset.k(),
        start_time: dataset.start_time().format("%Y-%m-%dT%H:%M:%S").to_string(),
        interval_minutes: dataset.interval_minutes(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_atomic(&dir.join(META_FILE), json.as_bytes())
}

/// Writes `mask.csv` (0/1 entries, same shape as the readings).
pub fn write_mask_csv(mask: &SparseMask, path: impl AsRef<Path>) -> Result<()> {
    let text = format_matrix(mask.mask().rows().into_iter().map(|r| r.to_vec()));
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn read_mask_csv(path: impl AsRef<Path>, dropout: f64, seed: u64) -> Result<SparseMask> {
    let path = path.as_ref();
    let rows = read_numeric_csv(path)?;
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    let values = to_matrix(rows, cols, path)?;
    if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            row: r + 1,
            column: c + 1,
            message: format!("mask entry {v} is not 0 or 1"),
        });
    }
    Ok(SparseMask::from_parts(values.mapv(|v| v as u8), dropout, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dir(dir: &Path, readings: &str, sensors: &str, meta: &str) {
        fs::write(dir.join(READINGS_FILE), readings).unwrap();
        fs::write(dir.join(SENSORS_FILE), sensors).unwrap();
        fs::write(dir.join(META_FILE), meta).unwrap();
    }

    const SENSORS: &str = "sensor_id,latitude,longitude\na,34.0,-118.2\nb,34.1,-118.3\n";
    const META: &str = r#"{"n": 4, "k": 2, "start_time": "2012-03-04T00:00:00", "interval_minutes": 5}"#;

    #[test]
    fn loads_small_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), "1,2\n3,4\n5,6\n7,8\n", SENSORS, META);
        let ds = load_dense_dataset(dir.path()).unwrap();
        assert_eq!((ds.n(), ds.k()), (4, 2));
        assert_eq!(ds.readings()[[3, 1]], 8.0);
        assert_eq!(ds.sensor_ids(), &["a".to_string(), "b".to_string()]);
        assert_eq!(ds.interval_minutes(), 5);
    }

    #[test]
    fn row_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), "1,2\n3,4\n5,6\n", SENSORS, META);
        assert!(matches!(load_dense_dataset(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn sensor_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let one = "sensor_id,latitude,longitude\na,34.0,-118.2\n";
        write_dir(dir.path(), "1,2\n3,4\n5,6\n7,8\n", one, META);
        assert!(matches!(load_dense_dataset(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), "1,2\n3,x\n5,6\n7,8\n", SENSORS, META);
        match load_dense_dataset(dir.path()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(META_FILE), META).unwrap();
        assert!(matches!(load_dense_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn save_then_load_preserves_dataset() {
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), "1.5,2\n3,4.25\n5,6\n7,8\n", SENSORS, META);
        let ds = load_dense_dataset(dir.path()).unwrap();
        let out = dir.path().join("copy");
        save_dense_dataset(&ds, &out).unwrap();
        assert_eq!(load_dense_dataset(&out).unwrap(), ds);
    }
}
