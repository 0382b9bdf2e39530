//! Line-oriented dataset files.
//!
//! ```text
//! PTSC v1 D=<d> N=<n> TMIN=<a> TMAX=<b>
//! <id>,<label>,<t1>,<T>,<D*T values, channel-major>
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

use super::{Dataset, DatasetMeta, SeriesRecord};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn header_field(tok: Option<&str>, key: &str) -> std::result::Result<usize, String> {
    let tok = tok.ok_or_else(|| format!("header is missing {key}="))?;
    let v = tok
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| format!("expected {key}=<int>, found {tok:?}"))?;
    v.parse().map_err(|_| format!("{key} is not a non-negative integer: {v:?}"))
}

fn parse_header(line: &str) -> std::result::Result<DatasetMeta, String> {
    let mut it = line.split_whitespace();
    if it.next() != Some("PTSC") || it.next() != Some("v1") {
        return Err(format!("expected header `PTSC v1 D=.. N=.. TMIN=.. TMAX=..`, found {line:?}"));
    }
    let d = header_field(it.next(), "D")?;
    let n = header_field(it.next(), "N")?;
    let t_min = header_field(it.next(), "TMIN")?;
    let t_max = header_field(it.next(), "TMAX")?;
    if let Some(extra) = it.next() {
        return Err(format!("unexpected header token {extra:?}"));
    }
    if d == 0 || n == 0 {
        return Err("D and N must be positive".into());
    }
    if t_min == 0 || t_min > t_max {
        return Err(format!("need 1 <= TMIN <= TMAX, got TMIN={t_min} TMAX={t_max}"));
    }
    Ok(DatasetMeta::new(d, n, t_min, t_max))
}

fn parse_record(line: &str, meta: &DatasetMeta) -> std::result::Result<SeriesRecord, String> {
    let mut it = line.split(',');
    let id = it.next().unwrap_or_default().trim().to_string();
    let mut int = |what: &str| -> std::result::Result<usize, String> {
        let tok = it.next().ok_or_else(|| format!("missing {what}"))?.trim();
        tok.parse().map_err(|_| format!("{what} is not a non-negative integer: {tok:?}"))
    };
    let label = int("label")?;
    let t1 = int("t1")?;
    let t = int("T")?;
    let values = it
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>().map_err(|_| format!("bad value {v:?}"))
        })
        .collect::<std::result::Result<Vec<f64>, String>>()?;
    if t == 0 {
        return Err("T must be >= 1".into());
    }
    if values.len() != meta.channels * t {
        return Err(format!(
            "expected D*T = {} values, found {}",
            meta.channels * t,
            values.len()
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("values must be finite".into());
    }
    if t1 == 0 {
        return Err("t1 must be >= 1".into());
    }
    let r = SeriesRecord {
        id,
        label,
        t1,
        channels: meta.channels,
        values,
    };
    meta.check(&r)?;
    Ok(r)
}

/// Parses a dataset from any reader; `path` only labels diagnostics.
pub fn read_dataset(reader: impl BufRead, path: &Path) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let meta = loop {
        match lines.next() {
            None => return Err(parse_err(path, 1, "empty file")),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break parse_header(line.trim()).map_err(|m| parse_err(path, i + 1, m))?;
            }
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line, &meta).map_err(|m| parse_err(path, i + 1, m))?);
    }
    Ok(Dataset { meta, records })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?), path)
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let m = &ds.meta;
    writeln!(w, "PTSC v1 D={} N={} TMIN={} TMAX={}", m.channels, m.classes, m.t_min, m.t_max)?;
    for r in &ds.records {
        ensure!(
            !r.id.contains(',') && !r.id.contains('\n'),
            "record id {:?} contains a separator",
            r.id
        );
        m.check(r).map_err(|e| crate::error::invalid!("record {}: {e}", r.id))?;
        write!(w, "{},{},{},{}", r.id, r.label, r.t1, r.len())?;
        for v in &r.values {
            // shortest representation that parses back to the same bits
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads the tab-separated archive layout: one univariate series per line,
/// class label first, shorter series padded with trailing `NaN`. Every
/// series starts at timestamp 1. Labels are mapped to indices in sorted
/// order (numerically when all labels are numbers).
pub fn read_tsv(reader: impl BufRead, path: &Path) -> Result<Dataset> {
    let mut raw: Vec<(usize, String, Vec<f64>)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let sep = if line.contains('\t') { '\t' } else { ',' };
        let mut it = line.split(sep);
        let label = it.next().unwrap_or_default().trim().to_string();
        let mut values = it
            .map(|v| {
                let v = v.trim();
                if v.eq_ignore_ascii_case("nan") || v.is_empty() {
                    Ok(f64::NAN)
                } else {
                    v.parse::<f64>().map_err(|_| parse_err(path, i + 1, format!("bad value {v:?}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        while values.last().is_some_and(|v| v.is_nan()) {
            values.pop();
        }
        if values.is_empty() {
            return Err(parse_err(path, i + 1, "series has no values"));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(parse_err(path, i + 1, "missing values inside a series are not supported"));
        }
        raw.push((i + 1, label, values));
    }
    ensure!(!raw.is_empty(), "{} holds no series", path.display());
    let names: BTreeSet<String> = raw.iter().map(|(_, l, _)| l.clone()).collect();
    let mut names: Vec<String> = names.into_iter().collect();
    if names.iter().all(|n| n.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let t_min = raw.iter().map(|(_, _, v)| v.len()).min().unwrap_or(1);
    let t_max = raw.iter().map(|(_, _, v)| v.len()).max().unwrap_or(1);
    let mut meta = DatasetMeta::new(1, names.len(), t_min, t_max);
    let records = raw
        .into_iter()
        .enumerate()
        .map(|(k, (_, label, values))| SeriesRecord {
            id: format!("s{k}"),
            label: names.iter().position(|n| *n == label).expect("label collected above"),
            t1: 1,
            channels: 1,
            values,
        })
        .collect();
    meta.class_names = names;
    Ok(Dataset { meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let mut meta = DatasetMeta::new(2, 3, 2, 8);
        meta.class_names = vec!["a".into(), "b".into(), "c".into()];
        let records = vec![
            SeriesRecord::new("x0", 2, 1, 2, vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap(),
            SeriesRecord::new("x1", 0, 4, 2, (0..10).map(|i| (i as f64).sqrt()).collect()).unwrap(),
        ];
        Dataset { meta, records }
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = sample();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.meta.channels, 2);
        assert_eq!(back.meta.t_max, 8);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "PTSC v1 D=1 N=2 TMIN=1 TMAX=5\na,0,1,2,0.5,0.5\nb,0,4,3,1,2,3\n";
        match read_dataset(text.as_bytes(), Path::new("f.ptsc")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("overruns"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_label = "PTSC v1 D=1 N=2 TMIN=1 TMAX=5\na,2,1,1,0.5\n";
        assert!(matches!(
            read_dataset(bad_label.as_bytes(), Path::new("f")),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad_header = "PTSC v2 D=1 N=2 TMIN=1 TMAX=5\n";
        assert!(matches!(
            read_dataset(bad_header.as_bytes(), Path::new("f")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn tsv_variable_length() {
        let text = "2\t1.0\t2.0\t3.0\n10\t4.0\tNaN\tNaN\n2\t5.0\t6.0\tNaN\n";
        let ds = read_tsv(text.as_bytes(), Path::new("t.tsv")).unwrap();
        assert_eq!(ds.meta.class_names, vec!["2", "10"]);
        assert_eq!(ds.lengths(), vec![3, 1, 2]);
        assert_eq!(ds.labels(), vec![0, 1, 0]);
        assert_eq!((ds.meta.t_min, ds.meta.t_max), (1, 3));
        assert!(read_tsv("1\t1\tNaN\t2\n".as_bytes(), Path::new("t")).is_err());
    }
}
