//! Manifest + per-sample CSV ingestion and export.
//!
//! ```text
//! # comment
//! [domains]
//! eeg, Fp1, Fp2, Cz, 256, 1        # name, variates..., frequency_hz, multivariate{0|1}
//! [samples]
//! eeg, data/eeg/0000.csv, class:1  # name, csv path, optional label
//! [layouts]
//! eeg, layouts/eeg.csv             # optional planted variate coordinates
//! ```
//!
//! Relative paths resolve against the manifest's directory. A label is
//! `class:<id>`, a bare integer (class id), or `target:<x>;<y>;...`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{Corpus, DomainSpec, Label, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Domains,
    Samples,
    Layouts,
}

/// Loads every sample listed in the manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<TimeSeriesSample>> {
    Ok(load_corpus(path)?.samples)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut corpus = Corpus::default();
    let mut section = Section::None;
    let err = |line: usize, message: String| Error::Manifest { path: path.to_path_buf(), line, message };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[domains]" => {
                section = Section::Domains;
                continue;
            }
            "[samples]" => {
                section = Section::Samples;
                continue;
            }
            "[layouts]" => {
                section = Section::Layouts;
                continue;
            }
            _ => {}
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match section {
            Section::None => {
                return Err(err(line_no, "record outside of a [section]".into()));
            }
            Section::Domains => {
                if fields.len() < 4 {
                    return Err(err(
                        line_no,
                        "domain record needs name, variates, frequency, multivariate flag".into(),
                    ));
                }
                let n = fields.len();
                let freq: f64 =
                    fields[n - 2].parse().map_err(|_| err(line_no, format!("bad frequency `{}`", fields[n - 2])))?;
                let multivariate = match fields[n - 1] {
                    "1" => true,
                    "0" => false,
                    other => return Err(err(line_no, format!("multivariate flag must be 0 or 1, got `{other}`"))),
                };
                let variates = fields[1..n - 2].iter().map(|s| s.to_string()).collect();
                let spec = DomainSpec::new(fields[0], variates, multivariate, freq)
                    .map_err(|e| err(line_no, e.to_string()))?;
                if let Some(existing) = corpus.domain(&spec.name) {
                    if **existing != spec {
                        return Err(err(
                            line_no,
                            format!("domain `{}` redeclared with a different catalogue", spec.name),
                        ));
                    }
                } else {
                    corpus.domains.push(Arc::new(spec));
                }
            }
            Section::Samples => {
                if fields.len() < 2 || fields.len() > 3 {
                    return Err(err(line_no, "sample record is `domain, csv_path[, label]`".into()));
                }
                let domain = corpus
                    .domain(fields[0])
                    .cloned()
                    .ok_or_else(|| err(line_no, format!("unknown domain `{}`", fields[0])))?;
                let label = match fields.get(2) {
                    Some(s) if !s.is_empty() => Some(parse_label(s).map_err(|m| err(line_no, m))?),
                    _ => None,
                };
                let csv_path = base.join(fields[1]);
                let entry = format!("{}:{} ({})", path.display(), line_no, csv_path.display());
                let (header, values) = read_csv(&csv_path, &entry)?;
                if domain.multivariate {
                    if header.len() != domain.num_variates() {
                        return Err(Error::Data {
                            entry,
                            message: format!(
                                "{} columns but domain `{}` declares {} variates",
                                header.len(),
                                domain.name,
                                domain.num_variates()
                            ),
                        });
                    }
                    let subset = header
                        .iter()
                        .map(|h| {
                            domain.variate_index(h).ok_or_else(|| Error::Data {
                                entry: entry.clone(),
                                message: format!("column `{h}` is not a variate of `{}`", domain.name),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let s = TimeSeriesSample::with_subset(domain, values, subset, label)
                        .map_err(|e| Error::Data { entry, message: e.to_string() })?;
                    corpus.samples.push(s);
                } else {
                    let rows = values.rows();
                    let s = TimeSeriesSample { domain, values, variate_subset: vec![0; rows], label };
                    corpus.samples.extend(s.split_univariate());
                }
            }
            Section::Layouts => {
                if fields.len() != 2 {
                    return Err(err(line_no, "layout record is `domain, csv_path`".into()));
                }
                let domain = corpus
                    .domain(fields[0])
                    .cloned()
                    .ok_or_else(|| err(line_no, format!("unknown domain `{}`", fields[0])))?;
                let csv_path = base.join(fields[1]);
                let entry = format!("{}:{} ({})", path.display(), line_no, csv_path.display());
                let (_, coords) = read_csv(&csv_path, &entry)?;
                // stored as columns=axes on disk, rows=variates once transposed back
                let layout = coords.transpose();
                if layout.rows() != domain.num_variates() {
                    return Err(Error::Data {
                        entry,
                        message: format!(
                            "layout has {} rows but domain has {} variates",
                            layout.rows(),
                            domain.num_variates()
                        ),
                    });
                }
                corpus.layouts.insert(domain.name.clone(), layout);
            }
        }
    }
    Ok(corpus)
}

fn parse_label(s: &str) -> std::result::Result<Label, String> {
    if let Some(rest) = s.strip_prefix("class:") {
        return rest.trim().parse().map(Label::Class).map_err(|_| format!("bad class label `{s}`"));
    }
    if let Some(rest) = s.strip_prefix("target:") {
        let vals = rest
            .split(';')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format!("bad target label `{s}`"))?;
        if vals.is_empty() || vals.iter().any(|v| !v.is_finite()) {
            return Err(format!("bad target label `{s}`"));
        }
        return Ok(Label::Target(vals));
    }
    s.parse()
        .map(Label::Class)
        .map_err(|_| format!("label `{s}` is neither `class:<id>`, an integer, nor `target:<values>`"))
}

fn format_label(label: &Label) -> String {
    match label {
        Label::Class(c) => format!("class:{c}"),
        Label::Target(v) => {
            let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("target:{}", parts.join(";"))
        }
    }
}

/// Reads a CSV of rows=time, columns=variates. Returns header and a
/// `variates × time` matrix.
pub fn read_csv(path: &Path, entry: &str) -> Result<(Vec<String>, Matrix)> {
    let data_err = |message: String| Error::Data { entry: entry.to_string(), message };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> =
        reader.headers().map_err(|e| data_err(format!("unreadable header: {e}")))?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(data_err("missing header row".into()));
    }
    let cols = header.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); cols];
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(format!("row {}: {e}", r + 2)))?;
        if record.len() != cols {
            return Err(data_err(format!("row {} has {} fields, header has {cols}", r + 2, record.len())));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| data_err(format!("row {}: `{field}` is not a number", r + 2)))?;
            if !v.is_finite() {
                return Err(data_err(format!("row {}: non-finite value `{field}`", r + 2)));
            }
            columns[c].push(v);
        }
    }
    let t = columns[0].len();
    if t == 0 {
        return Err(data_err("no data rows".into()));
    }
    let values = Matrix::from_fn(cols, t, |r, c| columns[r][c]);
    Ok((header, values))
}

fn write_csv(path: &Path, header: &[String], values: &Matrix) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..values.cols() {
        for v in 0..values.rows() {
            if v > 0 {
                out.push(',');
            }
            write!(out, "{}", values.get(v, t)).expect("write to string");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.txt` plus one CSV per sample under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let mut manifest = String::from("[domains]\n");
    for d in &corpus.domains {
        writeln!(
            manifest,
            "{}, {}, {}, {}",
            d.name,
            d.variates.join(", "),
            d.nominal_frequency,
            u8::from(d.multivariate)
        )
        .expect("write to string");
    }
    manifest.push_str("[samples]\n");
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &corpus.samples {
        let n = counters.entry(s.domain.name.as_str()).or_insert(0);
        let rel = format!("data/{}/{:05}.csv", s.domain.name, n);
        *n += 1;
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let header: Vec<String> = s.variate_subset.iter().map(|&i| s.domain.variates[i].clone()).collect();
        write_csv(&path, &header, &s.values)?;
        match &s.label {
            Some(l) => writeln!(manifest, "{}, {}, {}", s.domain.name, rel, format_label(l)),
            None => writeln!(manifest, "{}, {}", s.domain.name, rel),
        }
        .expect("write to string");
    }
    if !corpus.layouts.is_empty() {
        let layout_dir = dir.join("layouts");
        fs::create_dir_all(&layout_dir).map_err(|e| Error::io(&layout_dir, e))?;
        manifest.push_str("[layouts]\n");
        for (name, layout) in &corpus.layouts {
            let rel = format!("layouts/{name}.csv");
            let header: Vec<String> = (0..layout.cols()).map(|k| format!("axis{k}")).collect();
            write_csv(&dir.join(&rel), &header, &layout.transpose())?;
            writeln!(manifest, "{name}, {rel}").expect("write to string");
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, rel: &str, text: &str) {
        let p = dir.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, text).unwrap();
    }

    fn eeg_csv(cols: usize, rows: usize) -> String {
        let header: Vec<String> = (0..cols).map(|i| format!("e{i}")).collect();
        let mut s = header.join(",") + "\n";
        for t in 0..rows {
            let row: Vec<String> = (0..cols).map(|c| format!("{}", (t * cols + c) as f64 * 0.5)).collect();
            s += &(row.join(",") + "\n");
        }
        s
    }

    fn eeg_domain_line(v: usize) -> String {
        let names: Vec<String> = (0..v).map(|i| format!("e{i}")).collect();
        format!("eeg, {}, 256, 1\n", names.join(", "))
    }

    #[test]
    fn two_entries_share_one_domain_spec() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", &eeg_csv(19, 5));
        write(dir.path(), "b.csv", &eeg_csv(19, 7));
        let m = format!("[domains]\n{}[samples]\neeg, a.csv, 1\neeg, b.csv\n", eeg_domain_line(19));
        write(dir.path(), "m.txt", &m);
        let samples = load_manifest(&dir.path().join("m.txt")).unwrap();
        assert_eq!(samples.len(), 2);
        assert!(Arc::ptr_eq(&samples[0].domain, &samples[1].domain));
        assert_eq!(samples[0].domain.num_variates(), 19);
        assert_eq!(samples[0].label, Some(Label::Class(1)));
        assert_eq!(samples[1].values.shape(), (19, 7));
        assert_eq!(samples[1].values.get(2, 1), (19 + 2) as f64 * 0.5);
    }

    #[test]
    fn column_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", &eeg_csv(18, 5));
        let m = format!("[domains]\n{}[samples]\neeg, a.csv\n", eeg_domain_line(19));
        write(dir.path(), "m.txt", &m);
        let e = load_manifest(&dir.path().join("m.txt")).unwrap_err();
        assert!(matches!(e, Error::Data { .. }), "{e}");
        assert!(e.to_string().contains("a.csv"));
    }

    #[test]
    fn empty_manifest_yields_no_samples() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "m.txt", "");
        assert!(load_manifest(&dir.path().join("m.txt")).unwrap().is_empty());
    }

    #[test]
    fn nan_and_missing_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", "x\n1.0\nNaN\n");
        write(dir.path(), "m.txt", "[domains]\nd, x, 1, 0\n[samples]\nd, a.csv\nd, nope.csv\n");
        let e = load_manifest(&dir.path().join("m.txt")).unwrap_err();
        assert!(e.to_string().contains("non-finite"), "{e}");
        write(dir.path(), "a.csv", "x\n1.0\n2.0\n");
        let e = load_manifest(&dir.path().join("m.txt")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
        assert!(matches!(load_manifest(&dir.path().join("absent.txt")), Err(Error::Io { .. })));
    }

    #[test]
    fn malformed_rows_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "m.txt", "[samples]\nunknown, a.csv\n");
        assert!(matches!(load_manifest(&dir.path().join("m.txt")), Err(Error::Manifest { line: 2, .. })));
        write(dir.path(), "m.txt", "[domains]\nd, x, fast, 1\n");
        assert!(matches!(load_manifest(&dir.path().join("m.txt")), Err(Error::Manifest { line: 2, .. })));
        write(dir.path(), "m.txt", "d, x, 1, 0\n");
        assert!(matches!(load_manifest(&dir.path().join("m.txt")), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn univariate_domain_splits_columns_into_samples() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "h.csv", "h0,h1,h2\n1,2,3\n4,5,6\n");
        write(dir.path(), "m.txt", "[domains]\nelec, load, 1, 0\n[samples]\nelec, h.csv, target:0.5;2\n");
        let samples = load_manifest(&dir.path().join("m.txt")).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[1].values.row(0), &[2.0, 5.0]);
        assert_eq!(samples[2].label, Some(Label::Target(vec![0.5, 2.0])));
    }

    #[test]
    fn write_then_load_reproduces_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let d = Arc::new(DomainSpec::new("w", vec!["a".into(), "b".into()], true, 10.0).unwrap());
        let values = Matrix::from_fn(2, 9, |r, c| ((r * 9 + c) as f64 * 0.731).sin() / 3.0);
        let s = TimeSeriesSample::with_subset(d.clone(), values, vec![1, 0], Some(Label::Target(vec![0.1]))).unwrap();
        let mut corpus = Corpus { domains: vec![d], samples: vec![s.clone()], ..Corpus::default() };
        corpus.layouts.insert("w".into(), Matrix::from_vec(2, 2, vec![0.0, 1.0, -0.5, 0.25]));
        let path = write_corpus(dir.path(), &corpus).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(back.samples[0].values, s.values);
        assert_eq!(back.samples[0].variate_subset, vec![1, 0]);
        assert_eq!(back.samples[0].label, s.label);
        assert_eq!(back.layouts["w"], corpus.layouts["w"]);
    }
}
