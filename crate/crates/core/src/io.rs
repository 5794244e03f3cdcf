//! File formats: sample CSV, model JSON, JSON-lines candidate lists, score CSV.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MixtureModel;
use crate::sampling::SampleSet;

/// 17 significant digits, enough to round-trip any double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_samples_csv<W: Write>(samples: &SampleSet, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record((1..=samples.n()).map(|j| format!("x{j}")))?;
    for row in samples.iter_rows() {
        out.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a sample CSV. The header must be `x1,...,xn`.
pub fn read_samples_csv<R: Read>(r: R, seed: u64, desc: &str) -> Result<SampleSet> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let n = header.len();
    for (j, h) in header.iter().enumerate() {
        if h.trim() != format!("x{}", j + 1) {
            return Err(Error::invalid(format!(
                "column {} is named {h:?}, expected x{}",
                j + 1,
                j + 1
            )));
        }
    }
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: rec.len(),
            });
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("row {}: cannot parse {field:?}", i + 1)))?;
            data.push(v);
        }
    }
    SampleSet::new(data, n, seed, desc)
}

pub fn save_samples(samples: &SampleSet, path: &Path) -> Result<()> {
    write_samples_csv(samples, BufWriter::new(File::create(path)?))
}

pub fn load_samples(path: &Path) -> Result<SampleSet> {
    let f = File::open(path)?;
    read_samples_csv(BufReader::new(f), 0, &path.display().to_string())
}

pub fn save_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn load_model(path: &Path) -> Result<MixtureModel> {
    load_json(path)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut w: W) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One value per nonblank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_scores_csv<W: Write>(log_likelihoods: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["hypothesis", "log_likelihood"])?;
    for (i, v) in log_likelihoods.iter().enumerate() {
        out.write_record([i.to_string(), fmt_f64(*v)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Bounds, Component};
    use crate::sampling::draw_mixture;

    #[test]
    fn csv_round_trip_is_exact() {
        let b = Bounds::new(1.0, 0.5, 2.0).unwrap();
        let m = MixtureModel::new(
            b,
            vec![1.0],
            vec![Component::new(vec![0.3, -0.1], vec![0.7, 1.9]).unwrap()],
        )
        .unwrap();
        let s = draw_mixture(&m, 200, 3).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2\n"));
        let back = read_samples_csv(&buf[..], 0, "t").unwrap();
        assert_eq!(back.as_slice(), s.as_slice());
    }

    #[test]
    fn csv_rejects_bad_header_and_ragged_rows() {
        assert!(read_samples_csv(&b"a,b\n1,2\n"[..], 0, "t").is_err());
        assert!(read_samples_csv(&b"x1,x2\n1,2\n3\n"[..], 0, "t").is_err());
        assert!(read_samples_csv(&b"x1\nfoo\n"[..], 0, "t").is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let v = vec![vec![1.0, 2.0], vec![0.1]];
        let mut buf = Vec::new();
        write_jsonl(&v, &mut buf).unwrap();
        let back: Vec<Vec<f64>> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn scores_csv() {
        let mut buf = Vec::new();
        write_scores_csv(&[-1.5, 0.25], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s,
            "hypothesis,log_likelihood\n0,-1.5000000000000000e0\n1,2.5000000000000000e-1\n"
        );
    }
}
