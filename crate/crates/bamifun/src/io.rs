//! File formats: long CSV data tables, draw-archive directories, and
//! flat key=value run configuration.
//!
//! # Long data CSV
//!
//! UTF-8 with a header. Single-level curves use `subject,time,value`;
//! multiway data adds a feature column: `subject,feature,time,value`.
//! Missing cells are simply absent. Subjects (and features) are
//! numbered by first appearance; the distinct times are sorted into a
//! shared grid and rescaled onto `[0, 1]`.
//!
//! # Archive directory
//!
//! One directory per run:
//!
//! * `manifest.txt` — `key=value` lines: `format=bamifun-archive-v1`,
//!   `kind`, `dims` (`x`-separated), sampler settings, `data_format`,
//!   the rescaled `grid` and original `raw-times` (comma-separated).
//! * `labels.csv` — `kind,index,label` rows mapping subject/feature
//!   indices back to their input labels.
//! * `mask.bin` / `mask.csv` — the observation mask (1 observed,
//!   0 missing) in the draw layout below.
//! * `draw_0001.*` … — one completed dataset per retained draw.
//!
//! Binary draws are flat little-endian: `u64` dimension count, the
//! `u64` dimensions, then the values as `f64`, row-major with time
//! fastest (subject outermost, then feature for tensors). CSV draws
//! carry the same numbers in text: a `dims,...` record followed by one
//! record per curve; values print via Rust's shortest-round-trip float
//! formatting, so both formats are lossless at the 64-bit level.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inference::{EntryInterval, MissingMask};
use crate::multilinear::{Mask3, Tensor3, TimeGrid};
use crate::single_gibbs::{ArchiveData, ArchiveMeta, DrawArchive, SmoothVarMode};

pub const ARCHIVE_FORMAT: &str = "bamifun-archive-v1";

/// On-disk encoding for draw datasets and the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Bin,
    Csv,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Bin => "bin",
            DataFormat::Csv => "csv",
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bin" => Ok(DataFormat::Bin),
            "csv" => Ok(DataFormat::Csv),
            other => Err(Error::InvalidConfig(format!(
                "unknown data format '{other}' (expected bin or csv)"
            ))),
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.extension())
    }
}

/// A single-level dataset read from a long CSV.
#[derive(Debug, Clone)]
pub struct CurveMatrix {
    /// Observed values; masked cells hold zero.
    pub values: DMatrix<f64>,
    /// `true` = observed.
    pub mask: DMatrix<bool>,
    /// Observation times rescaled onto `[0, 1]`.
    pub grid: TimeGrid,
    /// The original sorted distinct times, for writing outputs.
    pub raw_times: Vec<f64>,
    /// Subject labels by first appearance.
    pub subjects: Vec<String>,
}

/// A multiway dataset read from a long CSV.
#[derive(Debug, Clone)]
pub struct CurveTensor {
    pub values: Tensor3,
    pub mask: Mask3,
    pub grid: TimeGrid,
    pub raw_times: Vec<f64>,
    pub subjects: Vec<String>,
    pub features: Vec<String>,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path)?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn check_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let ok = got.len() == want.len()
        && got
            .iter()
            .zip(want)
            .all(|(g, w)| g.eq_ignore_ascii_case(w));
    if !ok {
        return Err(Error::InvalidInput(format!(
            "{}: expected header '{}', found '{}'",
            path.display(),
            want.join(","),
            got.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, what: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        Error::InvalidInput(format!(
            "{} line {line}: cannot parse {what} from '{raw}'",
            path.display()
        ))
    })
}

/// Ordered label registry: index by first appearance.
#[derive(Default)]
struct LabelIndex {
    order: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelIndex {
    fn get_or_insert(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        let i = self.order.len();
        self.order.push(label.to_string());
        self.index.insert(label.to_string(), i);
        i
    }
}

/// Build the sorted distinct-time axis and a lookup from each raw time
/// to its grid index.
fn time_axis(times: &[f64]) -> (Vec<f64>, HashMap<u64, usize>) {
    let mut sorted: Vec<f64> = times.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.dedup();
    let lookup = sorted
        .iter()
        .enumerate()
        .map(|(i, t)| (t.to_bits(), i))
        .collect();
    (sorted, lookup)
}

/// Read a `subject,time,value` long CSV.
pub fn read_single_csv(path: &Path) -> Result<CurveMatrix> {
    let mut reader = csv_reader(path)?;
    check_header(path, reader.headers()?, &["subject", "time", "value"])?;
    let mut subjects = LabelIndex::default();
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "{} line {line}: expected 3 fields, found {}",
                path.display(),
                record.len()
            )));
        }
        let subject = subjects.get_or_insert(&record[0]);
        let time: f64 = parse_field(path, line, "time", &record[1])?;
        let value: f64 = parse_field(path, line, "value", &record[2])?;
        if !time.is_finite() || !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "{} line {line}: non-finite time or value",
                path.display()
            )));
        }
        rows.push((subject, time, value));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let times: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (raw_times, lookup) = time_axis(&times);
    let grid = TimeGrid::from_raw_times(&raw_times)?;
    let (n, k) = (subjects.order.len(), raw_times.len());
    let mut values = DMatrix::zeros(n, k);
    let mut mask = DMatrix::from_element(n, k, false);
    for (subject, time, value) in rows {
        let col = lookup[&time.to_bits()];
        if mask[(subject, col)] {
            return Err(Error::InvalidInput(format!(
                "{}: duplicate cell (subject '{}', time {})",
                path.display(),
                subjects.order[subject],
                time
            )));
        }
        values[(subject, col)] = value;
        mask[(subject, col)] = true;
    }
    Ok(CurveMatrix {
        values,
        mask,
        grid,
        raw_times,
        subjects: subjects.order,
    })
}

/// Read a `subject,feature,time,value` long CSV.
pub fn read_multiway_csv(path: &Path) -> Result<CurveTensor> {
    let mut reader = csv_reader(path)?;
    check_header(
        path,
        reader.headers()?,
        &["subject", "feature", "time", "value"],
    )?;
    let mut subjects = LabelIndex::default();
    let mut features = LabelIndex::default();
    let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "{} line {line}: expected 4 fields, found {}",
                path.display(),
                record.len()
            )));
        }
        let subject = subjects.get_or_insert(&record[0]);
        let feature = features.get_or_insert(&record[1]);
        let time: f64 = parse_field(path, line, "time", &record[2])?;
        let value: f64 = parse_field(path, line, "value", &record[3])?;
        if !time.is_finite() || !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "{} line {line}: non-finite time or value",
                path.display()
            )));
        }
        rows.push((subject, feature, time, value));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let times: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let (raw_times, lookup) = time_axis(&times);
    let grid = TimeGrid::from_raw_times(&raw_times)?;
    let dims = (subjects.order.len(), features.order.len(), raw_times.len());
    let mut values = Tensor3::zeros(dims);
    let mut mask = Mask3::filled(dims, false);
    for (subject, feature, time, value) in rows {
        let kk = lookup[&time.to_bits()];
        if mask.get(subject, feature, kk) {
            return Err(Error::InvalidInput(format!(
                "{}: duplicate cell (subject '{}', feature '{}', time {})",
                path.display(),
                subjects.order[subject],
                features.order[feature],
                time
            )));
        }
        values.set(subject, feature, kk, value);
        mask.set(subject, feature, kk, true);
    }
    Ok(CurveTensor {
        values,
        mask,
        grid,
        raw_times,
        subjects: subjects.order,
        features: features.order,
    })
}

/// Read a `subject,value` outcome CSV and order it to match `subjects`.
/// Every subject must appear exactly once.
pub fn read_outcome_csv(path: &Path, subjects: &[String]) -> Result<DVector<f64>> {
    let mut reader = csv_reader(path)?;
    check_header(path, reader.headers()?, &["subject", "value"])?;
    let index: HashMap<&str, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut seen = vec![false; subjects.len()];
    let mut y = DVector::zeros(subjects.len());
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "{} line {line}: expected 2 fields, found {}",
                path.display(),
                record.len()
            )));
        }
        let &i = index.get(&record[0]).ok_or_else(|| {
            Error::InvalidInput(format!(
                "{} line {line}: unknown subject '{}'",
                path.display(),
                &record[0]
            ))
        })?;
        if seen[i] {
            return Err(Error::InvalidInput(format!(
                "{} line {line}: duplicate subject '{}'",
                path.display(),
                &record[0]
            )));
        }
        seen[i] = true;
        y[i] = parse_field::<f64>(path, line, "value", &record[1])?;
        if !y[i].is_finite() {
            return Err(Error::InvalidInput(format!(
                "{} line {line}: non-finite value",
                path.display()
            )));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidInput(format!(
            "{}: no outcome for subject '{}'",
            path.display(),
            subjects[i]
        )));
    }
    Ok(y)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

/// Write a single-level dataset as a long CSV. With a mask, only
/// observed cells are written; without one, the full matrix is.
pub fn write_single_long_csv(
    path: &Path,
    values: &DMatrix<f64>,
    mask: Option<&DMatrix<bool>>,
    subjects: &[String],
    raw_times: &[f64],
) -> Result<()> {
    if values.nrows() != subjects.len() || values.ncols() != raw_times.len() {
        return Err(Error::InvalidInput(format!(
            "matrix {:?} does not match {} subjects x {} times",
            values.shape(),
            subjects.len(),
            raw_times.len()
        )));
    }
    let mut w = csv_writer(path)?;
    w.write_record(["subject", "time", "value"])?;
    for i in 0..values.nrows() {
        for k in 0..values.ncols() {
            if mask.is_none_or(|m| m[(i, k)]) {
                w.write_record([
                    subjects[i].as_str(),
                    &raw_times[k].to_string(),
                    &values[(i, k)].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Tensor analog of [`write_single_long_csv`].
pub fn write_multiway_long_csv(
    path: &Path,
    values: &Tensor3,
    mask: Option<&Mask3>,
    subjects: &[String],
    features: &[String],
    raw_times: &[f64],
) -> Result<()> {
    let (n, j, k) = values.dims();
    if n != subjects.len() || j != features.len() || k != raw_times.len() {
        return Err(Error::InvalidInput(format!(
            "tensor {:?} does not match {} subjects x {} features x {} times",
            values.dims(),
            subjects.len(),
            features.len(),
            raw_times.len()
        )));
    }
    let mut w = csv_writer(path)?;
    w.write_record(["subject", "feature", "time", "value"])?;
    for i in 0..n {
        for f in 0..j {
            for t in 0..k {
                if mask.is_none_or(|m| m.get(i, f, t)) {
                    w.write_record([
                        subjects[i].as_str(),
                        features[f].as_str(),
                        &raw_times[t].to_string(),
                        &values.get(i, f, t).to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Write per-entry intervals with original labels and times.
pub fn write_intervals_csv(
    path: &Path,
    intervals: &[EntryInterval],
    subjects: &[String],
    features: Option<&[String]>,
    raw_times: &[f64],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    match features {
        Some(_) => w.write_record(["subject", "feature", "time", "mean", "lower", "upper"])?,
        None => w.write_record(["subject", "time", "mean", "lower", "upper"])?,
    }
    for e in intervals {
        let subject = subjects.get(e.subject).ok_or_else(|| {
            Error::InvalidInput(format!("interval subject {} has no label", e.subject))
        })?;
        let time = raw_times.get(e.time).ok_or_else(|| {
            Error::InvalidInput(format!("interval time index {} has no label", e.time))
        })?;
        match (features, e.feature) {
            (Some(labels), Some(f)) => {
                let feature = labels.get(f).ok_or_else(|| {
                    Error::InvalidInput(format!("interval feature {f} has no label"))
                })?;
                w.write_record([
                    subject.as_str(),
                    feature.as_str(),
                    &time.to_string(),
                    &e.mean.to_string(),
                    &e.lower.to_string(),
                    &e.upper.to_string(),
                ])?;
            }
            (None, None) => {
                w.write_record([
                    subject.as_str(),
                    &time.to_string(),
                    &e.mean.to_string(),
                    &e.lower.to_string(),
                    &e.upper.to_string(),
                ])?;
            }
            _ => {
                return Err(Error::InvalidInput(
                    "interval kind does not match the label set".into(),
                ))
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// The observation mask stored alongside an archive.
#[derive(Debug, Clone)]
pub enum ArchiveMask {
    Matrix(DMatrix<bool>),
    Tensor(Mask3),
}

impl ArchiveMask {
    pub fn missing_mask(&self) -> MissingMask<'_> {
        match self {
            ArchiveMask::Matrix(m) => MissingMask::Matrix(m),
            ArchiveMask::Tensor(t) => MissingMask::Tensor(t),
        }
    }
}

/// Everything an archive needs besides the draws themselves to stay
/// self-contained: the mask, the grid, and the input labels.
#[derive(Debug, Clone)]
pub struct ArchiveSidecar {
    pub mask: ArchiveMask,
    pub grid: TimeGrid,
    pub raw_times: Vec<f64>,
    pub subjects: Vec<String>,
    /// Empty for single-level archives.
    pub features: Vec<String>,
}

fn draw_file_name(index: usize, format: DataFormat) -> String {
    format!("draw_{:04}.{}", index, format.extension())
}

fn write_flat_bin(path: &Path, dims: &[usize], values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(dims.len() as u64).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_flat_bin(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut next_u64 = |what: &str| -> Result<u64> {
        let end = pos + 8;
        let chunk = bytes.get(pos..end).ok_or_else(|| {
            Error::ArchiveFormat(format!("{}: truncated reading {what}", path.display()))
        })?;
        pos = end;
        Ok(u64::from_le_bytes(chunk.try_into().unwrap()))
    };
    let ndims = next_u64("dimension count")? as usize;
    if ndims == 0 || ndims > 3 {
        return Err(Error::ArchiveFormat(format!(
            "{}: unsupported dimension count {ndims}",
            path.display()
        )));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(next_u64("dimensions")? as usize);
    }
    let count: usize = dims.iter().product();
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let end = pos + 8;
        let chunk = bytes.get(pos..end).ok_or_else(|| {
            Error::ArchiveFormat(format!("{}: truncated reading values", path.display()))
        })?;
        pos = end;
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    if pos != bytes.len() {
        return Err(Error::ArchiveFormat(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok((dims, values))
}

fn write_flat_csv(path: &Path, dims: &[usize], values: &[f64]) -> Result<()> {
    // the dims record is shorter than the value records
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_writer(fs::File::create(path)?);
    let mut header = vec!["dims".to_string()];
    header.extend(dims.iter().map(|d| d.to_string()));
    w.write_record(&header)?;
    let row_len = *dims.last().unwrap_or(&0);
    if row_len == 0 {
        return Err(Error::InvalidInput("empty trailing dimension".into()));
    }
    for row in values.chunks(row_len) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_flat_csv(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let file = fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut records = reader.records();
    let first = records
        .next()
        .ok_or_else(|| Error::ArchiveFormat(format!("{}: empty file", path.display())))??;
    if first.is_empty() || &first[0] != "dims" {
        return Err(Error::ArchiveFormat(format!(
            "{}: first record must start with 'dims'",
            path.display()
        )));
    }
    let mut dims = Vec::with_capacity(first.len() - 1);
    for field in first.iter().skip(1) {
        dims.push(parse_field::<usize>(path, 1, "dimension", field)?);
    }
    if dims.is_empty() || dims.len() > 3 {
        return Err(Error::ArchiveFormat(format!(
            "{}: unsupported dimension count {}",
            path.display(),
            dims.len()
        )));
    }
    let row_len = *dims.last().unwrap();
    let count: usize = dims.iter().product();
    let mut values = Vec::with_capacity(count);
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != row_len {
            return Err(Error::ArchiveFormat(format!(
                "{} line {line}: expected {row_len} fields, found {}",
                path.display(),
                record.len()
            )));
        }
        for field in record.iter() {
            values.push(parse_field::<f64>(path, line, "value", field)?);
        }
    }
    if values.len() != count {
        return Err(Error::ArchiveFormat(format!(
            "{}: expected {count} values, found {}",
            path.display(),
            values.len()
        )));
    }
    Ok((dims, values))
}

fn write_flat(path: &Path, dims: &[usize], values: &[f64], format: DataFormat) -> Result<()> {
    match format {
        DataFormat::Bin => write_flat_bin(path, dims, values),
        DataFormat::Csv => write_flat_csv(path, dims, values),
    }
}

fn read_flat(path: &Path, format: DataFormat) -> Result<(Vec<usize>, Vec<f64>)> {
    match format {
        DataFormat::Bin => read_flat_bin(path),
        DataFormat::Csv => read_flat_csv(path),
    }
}

/// Matrix values in the row-major draw layout.
fn matrix_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(i, c)]);
        }
    }
    out
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_floats(raw: &str, what: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|f| {
            f.trim().parse::<f64>().map_err(|_| {
                Error::ArchiveFormat(format!("cannot parse {what} entry '{}'", f.trim()))
            })
        })
        .collect()
}

/// Persist an archive directory: manifest, labels, mask, and one file
/// per retained draw.
pub fn save_archive(
    dir: &Path,
    archive: &DrawArchive,
    sidecar: &ArchiveSidecar,
    format: DataFormat,
) -> Result<()> {
    if archive.is_empty() {
        return Err(Error::InvalidInput(
            "refusing to save an archive with no draws".into(),
        ));
    }
    let (kind, dims) = match &archive.data {
        ArchiveData::Matrices(_) => ("single", archive.meta.dims.clone()),
        ArchiveData::Tensors(_) => ("multiway", archive.meta.dims.clone()),
    };
    if sidecar.grid.len() != *dims.last().unwrap_or(&0)
        || sidecar.raw_times.len() != sidecar.grid.len()
        || sidecar.subjects.len() != dims[0]
    {
        return Err(Error::InvalidInput(
            "archive sidecar does not match the draw dimensions".into(),
        ));
    }
    fs::create_dir_all(dir)?;

    let meta = &archive.meta;
    let manifest = format!(
        "format={ARCHIVE_FORMAT}\nkind={kind}\ndims={}\nrank={}\nbasis_dim={}\ndegree={}\n\
         burn_in={}\ndraws={}\nthinning={}\nseed={}\ndata_format={format}\ngrid={}\nraw-times={}\n",
        dims.iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x"),
        meta.rank,
        meta.basis_dim,
        meta.degree,
        meta.burn_in,
        archive.len(),
        meta.thinning,
        meta.seed,
        join_floats(sidecar.grid.points()),
        join_floats(&sidecar.raw_times),
    );
    fs::write(dir.join("manifest.txt"), manifest)?;

    let mut labels = csv_writer(&dir.join("labels.csv"))?;
    labels.write_record(["kind", "index", "label"])?;
    for (i, s) in sidecar.subjects.iter().enumerate() {
        labels.write_record(["subject", &i.to_string(), s])?;
    }
    for (i, f) in sidecar.features.iter().enumerate() {
        labels.write_record(["feature", &i.to_string(), f])?;
    }
    labels.flush()?;

    let mask_path = dir.join(format!("mask.{}", format.extension()));
    match (&sidecar.mask, &archive.data) {
        (ArchiveMask::Matrix(m), ArchiveData::Matrices(_)) => {
            if (m.nrows(), m.ncols()) != (dims[0], dims[1]) {
                return Err(Error::InvalidInput("mask does not match draw dims".into()));
            }
            let flat: Vec<f64> = (0..m.nrows())
                .flat_map(|i| (0..m.ncols()).map(move |c| if m[(i, c)] { 1.0 } else { 0.0 }))
                .collect();
            write_flat(&mask_path, &dims, &flat, format)?;
        }
        (ArchiveMask::Tensor(t), ArchiveData::Tensors(_)) => {
            let (n, j, k) = t.dims();
            if [n, j, k] != dims[..] {
                return Err(Error::InvalidInput("mask does not match draw dims".into()));
            }
            let flat: Vec<f64> = t.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            write_flat(&mask_path, &dims, &flat, format)?;
        }
        _ => {
            return Err(Error::InvalidInput(
                "mask kind does not match the archive kind".into(),
            ))
        }
    }

    match &archive.data {
        ArchiveData::Matrices(mats) => {
            for (i, m) in mats.iter().enumerate() {
                let path = dir.join(draw_file_name(i + 1, format));
                write_flat(&path, &dims, &matrix_row_major(m), format)?;
            }
        }
        ArchiveData::Tensors(tensors) => {
            for (i, t) in tensors.iter().enumerate() {
                let path = dir.join(draw_file_name(i + 1, format));
                write_flat(&path, &dims, t.data(), format)?;
            }
        }
    }
    Ok(())
}

fn manifest_value<'a>(map: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::ArchiveFormat(format!("manifest is missing '{key}'")))
}

fn manifest_parse<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = manifest_value(map, key)?;
    raw.parse()
        .map_err(|_| Error::ArchiveFormat(format!("manifest '{key}={raw}' is not valid")))
}

/// Load an archive directory saved by [`save_archive`].
///
/// The parameter trace is not persisted, so the returned archive has an
/// empty `params`; datasets, metadata, mask, grid, and labels all round
/// trip.
pub fn load_archive(dir: &Path) -> Result<(DrawArchive, ArchiveSidecar)> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)?;
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::ArchiveFormat(format!(
                "{} line {}: expected key=value",
                manifest_path.display(),
                ln + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let format_tag = manifest_value(&map, "format")?;
    if format_tag != ARCHIVE_FORMAT {
        return Err(Error::ArchiveFormat(format!(
            "unsupported archive format '{format_tag}' (expected {ARCHIVE_FORMAT})"
        )));
    }
    let kind = manifest_value(&map, "kind")?.to_string();
    let dims: Vec<usize> = manifest_value(&map, "dims")?
        .split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::ArchiveFormat(format!("bad dimension '{d}' in manifest")))
        })
        .collect::<Result<_>>()?;
    let expected_ndims = match kind.as_str() {
        "single" => 2,
        "multiway" => 3,
        other => {
            return Err(Error::ArchiveFormat(format!(
                "unknown archive kind '{other}'"
            )))
        }
    };
    if dims.len() != expected_ndims {
        return Err(Error::ArchiveFormat(format!(
            "kind '{kind}' expects {expected_ndims} dimensions, manifest has {}",
            dims.len()
        )));
    }
    let data_format: DataFormat = manifest_parse(&map, "data_format")?;
    let draws: usize = manifest_parse(&map, "draws")?;
    let grid_points = parse_floats(manifest_value(&map, "grid")?, "grid")?;
    let raw_times = parse_floats(manifest_value(&map, "raw-times")?, "raw-times")?;
    let grid = TimeGrid::new(grid_points)?;
    if grid.len() != *dims.last().unwrap() || raw_times.len() != grid.len() {
        return Err(Error::ArchiveFormat(
            "grid length does not match the trailing dimension".into(),
        ));
    }

    let labels_path = dir.join("labels.csv");
    let mut subjects = Vec::new();
    let mut features = Vec::new();
    let mut reader = csv_reader(&labels_path)?;
    check_header(&labels_path, reader.headers()?, &["kind", "index", "label"])?;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::ArchiveFormat(format!(
                "{} line {line}: expected 3 fields",
                labels_path.display()
            )));
        }
        let index: usize = parse_field(&labels_path, line, "index", &record[1])?;
        let target = match &record[0] {
            "subject" => &mut subjects,
            "feature" => &mut features,
            other => {
                return Err(Error::ArchiveFormat(format!(
                    "{} line {line}: unknown label kind '{other}'",
                    labels_path.display()
                )))
            }
        };
        if index != target.len() {
            return Err(Error::ArchiveFormat(format!(
                "{} line {line}: label indices must be contiguous",
                labels_path.display()
            )));
        }
        target.push(record[2].to_string());
    }
    if subjects.len() != dims[0] {
        return Err(Error::ArchiveFormat(format!(
            "{} subject labels for {} subjects",
            subjects.len(),
            dims[0]
        )));
    }
    if kind == "multiway" && features.len() != dims[1] {
        return Err(Error::ArchiveFormat(format!(
            "{} feature labels for {} features",
            features.len(),
            dims[1]
        )));
    }

    let mask_path = dir.join(format!("mask.{}", data_format.extension()));
    let (mask_dims, mask_flat) = read_flat(&mask_path, data_format)?;
    if mask_dims != dims {
        return Err(Error::ArchiveFormat(
            "mask dimensions do not match the manifest".into(),
        ));
    }
    let bools: Vec<bool> = mask_flat.iter().map(|&v| v != 0.0).collect();
    let mask = if kind == "single" {
        let mut m = DMatrix::from_element(dims[0], dims[1], false);
        for i in 0..dims[0] {
            for c in 0..dims[1] {
                m[(i, c)] = bools[i * dims[1] + c];
            }
        }
        ArchiveMask::Matrix(m)
    } else {
        ArchiveMask::Tensor(Mask3::from_data((dims[0], dims[1], dims[2]), bools)?)
    };

    let mut matrices = Vec::new();
    let mut tensors = Vec::new();
    for i in 1..=draws {
        let path = dir.join(draw_file_name(i, data_format));
        let (draw_dims, values) = read_flat(&path, data_format)?;
        if draw_dims != dims {
            return Err(Error::ArchiveFormat(format!(
                "{}: dimensions {:?} do not match the manifest {:?}",
                path.display(),
                draw_dims,
                dims
            )));
        }
        if kind == "single" {
            let mut m = DMatrix::zeros(dims[0], dims[1]);
            for r in 0..dims[0] {
                for c in 0..dims[1] {
                    m[(r, c)] = values[r * dims[1] + c];
                }
            }
            matrices.push(m);
        } else {
            tensors.push(Tensor3::from_data((dims[0], dims[1], dims[2]), values)?);
        }
    }
    let data = if kind == "single" {
        ArchiveData::Matrices(matrices)
    } else {
        ArchiveData::Tensors(tensors)
    };
    let meta = ArchiveMeta {
        dims: dims.clone(),
        rank: manifest_parse(&map, "rank")?,
        basis_dim: manifest_parse(&map, "basis_dim")?,
        degree: manifest_parse(&map, "degree")?,
        burn_in: manifest_parse(&map, "burn_in")?,
        draws,
        thinning: manifest_parse(&map, "thinning")?,
        seed: manifest_parse(&map, "seed")?,
    };
    let archive = DrawArchive {
        data,
        params: Vec::new(),
        meta,
    };
    let sidecar = ArchiveSidecar {
        mask,
        grid,
        raw_times,
        subjects,
        features,
    };
    Ok((archive, sidecar))
}

/// Sampler and analysis settings shared by the command-line tools.
///
/// Field names match the config-file keys and CLI flags (`basis-dim`,
/// `burn-in`, ...). `rank: None` means "choose by cross-validation".
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub rank: Option<usize>,
    pub basis_dim: usize,
    pub degree: usize,
    pub burn_in: usize,
    pub draws: usize,
    pub thinning: usize,
    pub seed: u64,
    pub level: f64,
    pub min_obs: usize,
    pub pre_center: bool,
    pub smooth_var: SmoothVarMode,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            rank: None,
            basis_dim: 15,
            degree: 3,
            burn_in: 500,
            draws: 100,
            thinning: 5,
            seed: 42,
            level: 0.95,
            min_obs: 2,
            // real data rarely has mean zero; simulations turn this off
            pre_center: true,
            smooth_var: SmoothVarMode::Sampled,
        }
    }
}

/// Parse a `sampled` / numeric smoothing-variance setting.
pub fn parse_smooth_var(raw: &str) -> Result<SmoothVarMode> {
    if raw.eq_ignore_ascii_case("sampled") {
        return Ok(SmoothVarMode::Sampled);
    }
    let v: f64 = raw.parse().map_err(|_| {
        Error::InvalidConfig(format!(
            "smooth-var must be 'sampled' or a positive number, got '{raw}'"
        ))
    })?;
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "fixed smoothing variance must be positive, got {v}"
        )));
    }
    Ok(SmoothVarMode::Fixed(v))
}

impl RunSettings {
    /// Apply `key=value` entries from a config file. Later entries win;
    /// unknown keys are rejected.
    pub fn apply_entries(&mut self, entries: &[(String, String)]) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::InvalidConfig(format!("config '{key}={value}' is not valid"))
            })
        }
        for (key, value) in entries {
            match key.as_str() {
                "rank" => self.rank = Some(parse(key, value)?),
                "basis-dim" => self.basis_dim = parse(key, value)?,
                "degree" => self.degree = parse(key, value)?,
                "burn-in" => self.burn_in = parse(key, value)?,
                "draws" => self.draws = parse(key, value)?,
                "thinning" => self.thinning = parse(key, value)?,
                "seed" => self.seed = parse(key, value)?,
                "level" => self.level = parse(key, value)?,
                "min-obs" => self.min_obs = parse(key, value)?,
                "pre-center" => self.pre_center = parse(key, value)?,
                "smooth-var" => self.smooth_var = parse_smooth_var(value)?,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown config key '{other}'"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Read a flat `key=value` config file; `#` starts a comment line.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!(
                "{} line {}: expected key=value, got '{line}'",
                path.display(),
                ln + 1
            ))
        })?;
        entries.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Unique scratch directory, removed on drop.
    struct Scratch(PathBuf);

    impl Scratch {
        fn new(tag: &str) -> Self {
            static COUNTER: AtomicUsize = AtomicUsize::new(0);
            let n = COUNTER.fetch_add(1, Ordering::Relaxed);
            let dir = std::env::temp_dir().join(format!(
                "bamifun-io-{}-{tag}-{n}",
                std::process::id()
            ));
            fs::create_dir_all(&dir).unwrap();
            Scratch(dir)
        }

        fn path(&self, name: &str) -> PathBuf {
            self.0.join(name)
        }
    }

    impl Drop for Scratch {
        fn drop(&mut self) {
            let _ = fs::remove_dir_all(&self.0);
        }
    }

    #[test]
    fn single_csv_round_trips_labels_grid_and_mask() {
        let scratch = Scratch::new("single");
        let path = scratch.path("data.csv");
        fs::write(
            &path,
            "subject,time,value\n\
             bob,4.0,2.5\n\
             alice,2.0,1.25\n\
             bob,2.0,-0.5\n\
             alice,6.0,0.125\n",
        )
        .unwrap();
        let table = read_single_csv(&path).unwrap();
        // first appearance: bob before alice
        assert_eq!(table.subjects, vec!["bob", "alice"]);
        assert_eq!(table.raw_times, vec![2.0, 4.0, 6.0]);
        assert_eq!(table.grid.points(), &[0.0, 0.5, 1.0]);
        assert_eq!(table.values[(0, 1)], 2.5);
        assert_eq!(table.values[(1, 0)], 1.25);
        assert_eq!(table.values[(1, 2)], 0.125);
        assert!(table.mask[(0, 0)] && table.mask[(0, 1)] && !table.mask[(0, 2)]);
        assert!(table.mask[(1, 0)] && !table.mask[(1, 1)] && table.mask[(1, 2)]);
        assert_eq!(table.values[(0, 2)], 0.0);

        // writing observed cells back reproduces the table
        let out = scratch.path("echo.csv");
        write_single_long_csv(
            &out,
            &table.values,
            Some(&table.mask),
            &table.subjects,
            &table.raw_times,
        )
        .unwrap();
        let again = read_single_csv(&out).unwrap();
        assert_eq!(again.values, table.values);
        assert_eq!(again.mask, table.mask);
        assert_eq!(again.subjects, table.subjects);
    }

    #[test]
    fn single_csv_rejects_malformed_input() {
        let scratch = Scratch::new("reject");
        let bad_header = scratch.path("h.csv");
        fs::write(&bad_header, "id,time,value\na,1,2\n").unwrap();
        assert!(read_single_csv(&bad_header).is_err());

        let dup = scratch.path("dup.csv");
        fs::write(&dup, "subject,time,value\na,1.0,2\nb,2.0,3\na,1.0,4\n").unwrap();
        let err = read_single_csv(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");

        let bad_value = scratch.path("v.csv");
        fs::write(&bad_value, "subject,time,value\na,1.0,oops\na,2.0,1\n").unwrap();
        assert!(read_single_csv(&bad_value).is_err());

        let empty = scratch.path("e.csv");
        fs::write(&empty, "subject,time,value\n").unwrap();
        assert!(read_single_csv(&empty).is_err());

        let one_time = scratch.path("t.csv");
        fs::write(&one_time, "subject,time,value\na,1.0,2\nb,1.0,3\n").unwrap();
        assert!(read_single_csv(&one_time).is_err());
    }

    #[test]
    fn multiway_csv_round_trips() {
        let scratch = Scratch::new("multiway");
        let path = scratch.path("data.csv");
        fs::write(
            &path,
            "subject,feature,time,value\n\
             s1,gut,0.0,1.0\n\
             s1,skin,0.0,2.0\n\
             s2,gut,1.0,3.0\n\
             s1,gut,1.0,4.0\n\
             s2,skin,0.0,5.0\n",
        )
        .unwrap();
        let table = read_multiway_csv(&path).unwrap();
        assert_eq!(table.subjects, vec!["s1", "s2"]);
        assert_eq!(table.features, vec!["gut", "skin"]);
        assert_eq!(table.values.dims(), (2, 2, 2));
        assert_eq!(table.values.get(0, 0, 1), 4.0);
        assert_eq!(table.values.get(1, 0, 1), 3.0);
        assert!(table.mask.get(0, 1, 0) && !table.mask.get(0, 1, 1));
        assert!(!table.mask.get(1, 0, 0));

        let out = scratch.path("echo.csv");
        write_multiway_long_csv(
            &out,
            &table.values,
            Some(&table.mask),
            &table.subjects,
            &table.features,
            &table.raw_times,
        )
        .unwrap();
        let again = read_multiway_csv(&out).unwrap();
        assert_eq!(again.values.data(), table.values.data());
        assert_eq!(again.mask.data(), table.mask.data());
        assert_eq!(again.features, table.features);
    }

    #[test]
    fn outcome_csv_matches_subjects_by_label() {
        let scratch = Scratch::new("outcome");
        let path = scratch.path("y.csv");
        fs::write(&path, "subject,value\nalice,1.5\nbob,-2.5\n").unwrap();
        let subjects = vec!["bob".to_string(), "alice".to_string()];
        let y = read_outcome_csv(&path, &subjects).unwrap();
        assert_eq!(y[0], -2.5);
        assert_eq!(y[1], 1.5);

        let missing = scratch.path("m.csv");
        fs::write(&missing, "subject,value\nbob,-2.5\n").unwrap();
        assert!(read_outcome_csv(&missing, &subjects).is_err());

        let unknown = scratch.path("u.csv");
        fs::write(&unknown, "subject,value\nbob,1\nalice,2\neve,3\n").unwrap();
        assert!(read_outcome_csv(&unknown, &subjects).is_err());

        let dup = scratch.path("d.csv");
        fs::write(&dup, "subject,value\nbob,1\nbob,2\nalice,3\n").unwrap();
        assert!(read_outcome_csv(&dup, &subjects).is_err());
    }

    fn awkward_floats() -> Vec<f64> {
        vec![
            0.1,
            -1.0 / 3.0,
            std::f64::consts::PI,
            1e-300,
            -1e300,
            5.0_f64.sqrt(),
            f64::MIN_POSITIVE,
            0.0,
            -0.0,
            2.5,
            1.0 + f64::EPSILON,
            123456789.123456789,
        ]
    }

    #[test]
    fn flat_files_round_trip_bitwise_in_both_formats() {
        let scratch = Scratch::new("flat");
        let values = awkward_floats();
        for format in [DataFormat::Bin, DataFormat::Csv] {
            let path = scratch.path(&format!("x.{}", format.extension()));
            write_flat(&path, &[3, 4], &values, format).unwrap();
            let (dims, back) = read_flat(&path, format).unwrap();
            assert_eq!(dims, vec![3, 4]);
            assert_eq!(back.len(), values.len());
            for (a, b) in back.iter().zip(&values) {
                assert_eq!(a.to_bits(), b.to_bits(), "{format}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn flat_files_reject_corruption() {
        let scratch = Scratch::new("corrupt");
        let path = scratch.path("x.bin");
        write_flat_bin(&path, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(read_flat_bin(&path).is_err());

        let csv_path = scratch.path("x.csv");
        fs::write(&csv_path, "dims,2,2\n1,2\n3\n").unwrap();
        assert!(read_flat_csv(&csv_path).is_err());
        fs::write(&csv_path, "1,2\n3,4\n").unwrap();
        assert!(read_flat_csv(&csv_path).is_err());
    }

    fn tiny_single_archive() -> (DrawArchive, ArchiveSidecar) {
        let values = awkward_floats();
        let a = DMatrix::from_fn(3, 4, |i, c| values[i * 4 + c]);
        let b = &a * 0.5;
        let mut mask = DMatrix::from_element(3, 4, true);
        mask[(0, 1)] = false;
        mask[(2, 3)] = false;
        let grid = TimeGrid::new(vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let archive = DrawArchive {
            data: ArchiveData::Matrices(vec![a, b]),
            params: Vec::new(),
            meta: ArchiveMeta {
                dims: vec![3, 4],
                rank: 2,
                basis_dim: 4,
                degree: 3,
                burn_in: 10,
                draws: 2,
                thinning: 1,
                seed: 77,
            },
        };
        let sidecar = ArchiveSidecar {
            mask: ArchiveMask::Matrix(mask),
            grid,
            raw_times: vec![1.0, 2.0, 3.0, 5.0],
            subjects: vec!["a".into(), "b, with comma".into(), "c".into()],
            features: Vec::new(),
        };
        (archive, sidecar)
    }

    #[test]
    fn archive_round_trips_both_formats_and_across_them() {
        let (archive, sidecar) = tiny_single_archive();
        let scratch = Scratch::new("archive");

        let mut reloaded = Vec::new();
        for format in [DataFormat::Bin, DataFormat::Csv] {
            let dir = scratch.path(&format!("arch-{format}"));
            save_archive(&dir, &archive, &sidecar, format).unwrap();
            let (back, side) = load_archive(&dir).unwrap();
            assert_eq!(back.meta, archive.meta);
            assert!(back.params.is_empty());
            assert_eq!(side.subjects, sidecar.subjects);
            assert_eq!(side.raw_times, sidecar.raw_times);
            assert_eq!(side.grid.points(), sidecar.grid.points());
            match (&side.mask, &sidecar.mask) {
                (ArchiveMask::Matrix(got), ArchiveMask::Matrix(want)) => assert_eq!(got, want),
                _ => panic!("mask kind changed"),
            }
            let got = back.matrices().unwrap();
            let want = archive.matrices().unwrap();
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(want) {
                for (x, y) in g.iter().zip(w.iter()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            reloaded.push(back);
        }
        // bin-loaded and csv-loaded archives are bitwise identical
        let a = reloaded[0].matrices().unwrap();
        let b = reloaded[1].matrices().unwrap();
        for (g, w) in a.iter().zip(b) {
            for (x, y) in g.iter().zip(w.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn tensor_archive_round_trips() {
        let values: Vec<f64> = (0..24).map(|i| (i as f64).sin() * 1e3).collect();
        let tensor = Tensor3::from_data((2, 3, 4), values).unwrap();
        let mut mask = Mask3::filled((2, 3, 4), true);
        mask.set(0, 0, 0, false);
        mask.set(1, 2, 3, false);
        let archive = DrawArchive {
            data: ArchiveData::Tensors(vec![tensor.clone(), tensor.clone()]),
            params: Vec::new(),
            meta: ArchiveMeta {
                dims: vec![2, 3, 4],
                rank: 2,
                basis_dim: 4,
                degree: 3,
                burn_in: 5,
                draws: 2,
                thinning: 1,
                seed: 3,
            },
        };
        let sidecar = ArchiveSidecar {
            mask: ArchiveMask::Tensor(mask),
            grid: TimeGrid::new(vec![0.0, 0.25, 0.75, 1.0]).unwrap(),
            raw_times: vec![0.0, 1.0, 3.0, 4.0],
            subjects: vec!["s1".into(), "s2".into()],
            features: vec!["f1".into(), "f2".into(), "f3".into()],
        };
        let scratch = Scratch::new("tensor");
        for format in [DataFormat::Bin, DataFormat::Csv] {
            let dir = scratch.path(&format!("arch-{format}"));
            save_archive(&dir, &archive, &sidecar, format).unwrap();
            let (back, side) = load_archive(&dir).unwrap();
            let got = back.tensors().unwrap();
            for (g, w) in got.iter().zip(archive.tensors().unwrap()) {
                for (x, y) in g.data().iter().zip(w.data()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            assert_eq!(side.features, sidecar.features);
            match &side.mask {
                ArchiveMask::Tensor(m) => assert_eq!(m.data(), match &sidecar.mask {
                    ArchiveMask::Tensor(w) => w.data(),
                    _ => unreachable!(),
                }),
                _ => panic!("mask kind changed"),
            }
        }
    }

    #[test]
    fn archive_loader_rejects_tampering() {
        let (archive, sidecar) = tiny_single_archive();
        let scratch = Scratch::new("tamper");
        let dir = scratch.path("arch");
        save_archive(&dir, &archive, &sidecar, DataFormat::Bin).unwrap();

        // wrong format tag
        let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
        fs::write(
            dir.join("manifest.txt"),
            manifest.replace(ARCHIVE_FORMAT, "bamifun-archive-v999"),
        )
        .unwrap();
        assert!(matches!(
            load_archive(&dir),
            Err(Error::ArchiveFormat(_))
        ));
        fs::write(dir.join("manifest.txt"), &manifest).unwrap();
        load_archive(&dir).unwrap();

        // missing draw file
        fs::remove_file(dir.join("draw_0002.bin")).unwrap();
        assert!(load_archive(&dir).is_err());
    }

    #[test]
    fn intervals_csv_uses_original_labels() {
        let scratch = Scratch::new("intervals");
        let path = scratch.path("iv.csv");
        let intervals = vec![EntryInterval {
            subject: 1,
            feature: None,
            time: 0,
            mean: 0.5,
            lower: -1.0,
            upper: 2.0,
        }];
        let subjects = vec!["x".to_string(), "y".to_string()];
        write_intervals_csv(&path, &intervals, &subjects, None, &[3.5, 7.0]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("subject,time,mean,lower,upper"));
        assert!(text.contains("y,3.5,0.5,-1,2"));

        // tensor interval against matrix labels is an error
        let bad = vec![EntryInterval {
            feature: Some(0),
            ..intervals[0].clone()
        }];
        assert!(write_intervals_csv(&path, &bad, &subjects, None, &[3.5, 7.0]).is_err());
    }

    #[test]
    fn config_files_parse_and_apply() {
        let scratch = Scratch::new("config");
        let path = scratch.path("run.conf");
        fs::write(
            &path,
            "# sampler settings\n\
             rank = 5\n\
             basis-dim=12\n\
             burn-in=200\n\
             draws=50\n\
             thinning=2\n\
             seed=9\n\
             level=0.9\n\
             min-obs=3\n\
             pre-center=false\n\
             smooth-var=0.5\n\
             \n\
             degree=2\n",
        )
        .unwrap();
        let entries = read_config_file(&path).unwrap();
        let mut settings = RunSettings::default();
        settings.apply_entries(&entries).unwrap();
        assert_eq!(settings.rank, Some(5));
        assert_eq!(settings.basis_dim, 12);
        assert_eq!(settings.degree, 2);
        assert_eq!(settings.burn_in, 200);
        assert_eq!(settings.draws, 50);
        assert_eq!(settings.thinning, 2);
        assert_eq!(settings.seed, 9);
        assert_eq!(settings.level, 0.9);
        assert_eq!(settings.min_obs, 3);
        assert!(!settings.pre_center);
        assert!(matches!(settings.smooth_var, SmoothVarMode::Fixed(v) if v == 0.5));

        let mut s2 = RunSettings::default();
        assert!(s2
            .apply_entries(&[("rankk".into(), "3".into())])
            .is_err());
        assert!(s2
            .apply_entries(&[("rank".into(), "three".into())])
            .is_err());

        let bad = scratch.path("bad.conf");
        fs::write(&bad, "rank\n").unwrap();
        assert!(read_config_file(&bad).is_err());

        assert!(matches!(
            parse_smooth_var("sampled").unwrap(),
            SmoothVarMode::Sampled
        ));
        assert!(parse_smooth_var("-1").is_err());
        assert!(parse_smooth_var("maybe").is_err());
    }

    #[test]
    fn data_format_round_trips_names() {
        for f in [DataFormat::Bin, DataFormat::Csv] {
            let parsed: DataFormat = f.extension().parse().unwrap();
            assert_eq!(parsed, f);
        }
        assert!("json".parse::<DataFormat>().is_err());
    }
}
